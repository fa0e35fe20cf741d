"""Forward + backward implementations of every layer the network uses."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch
from .tensor import Tensor, as_tensor, make


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.accumulate_grad(g)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return make(out, (a, b), backward)


def scale(a, s: float, shift: float = 0.0) -> Tensor:
    a = as_tensor(a)
    out = a.data * s + shift

    def backward(g):
        _acc(a, g * s)

    return make(out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        _acc(a, g * mask)

    return make(a.data * mask, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        _acc(a, g * out * (1.0 - out))

    return make(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _acc(a, g / a.data)

    return make(np.log(a.data), (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient in the clamped regions."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        _acc(a, g * mask)

    return make(np.clip(a.data, lo, hi), (a,), backward)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _acc(a, g.reshape(a.data.shape))

    return make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)

    def backward(g):
        _acc(a, g.transpose(inv))

    return make(a.data.transpose(axes), (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, s, e in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(s, e)
            _acc(t, g[tuple(sl)])

    return make(out, tuple(tensors), backward)


def mean(a, axis: int) -> Tensor:
    a = as_tensor(a)
    n = a.data.shape[axis]

    def backward(g):
        _acc(a, np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    return make(a.data.mean(axis=axis), (a,), backward)


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    n = a.data.shape[axis]

    def backward(g):
        _acc(a, np.repeat(np.expand_dims(g, axis), n, axis=axis))

    return make(a.data.sum(axis=axis), (a,), backward)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def backward(g):
        _acc(a, np.full(a.data.shape, float(g) / n, dtype=a.data.dtype))

    return make(a.data.mean(), (a,), backward)


def amax(a, axis: int) -> Tensor:
    """Max over an axis; subgradient routes to the first argmax (ties)."""
    a = as_tensor(a)
    idx = a.data.argmax(axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(
            ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis
        )
        _acc(a, ga)

    return make(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul {a.data.shape} @ {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _acc(a, _unbroadcast(ga, a.data.shape))
        _acc(b, _unbroadcast(gb, b.data.shape))

    return make(out, (a, b), backward)


def linear(x, w, b) -> Tensor:
    """``x @ w + b`` for 2D ``x`` (rows are samples)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatch(f"linear {x.data.shape} @ {w.data.shape}")
    out = x.data @ w.data + b.data

    def backward(g):
        _acc(x, g @ w.data.T)
        _acc(w, x.data.T @ g)
        _acc(b, g.sum(axis=0))

    return make(out, (x, w, b), backward)


def softmax(a) -> Tensor:
    """Softmax over the last axis, numerically stabilized."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _acc(a, out * (g - dot))

    return make(out, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with per-feature affine parameters."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _acc(x, inv * (dxhat - m1 - xhat * m2))
        red = tuple(range(g.ndim - 1))
        _acc(gamma, (g * xhat).sum(axis=red))
        _acc(beta, g.sum(axis=red))

    return make(out, (x, gamma, beta), backward)


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    """Group normalization over (B, C, H, W); affine is per channel."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    bsz, c, h, w = x.data.shape
    if c % groups:
        raise ShapeMismatch(f"{c} channels not divisible into {groups} groups")
    xg = x.data.reshape(bsz, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(bsz, c, h, w)
    gb = gamma.data.reshape(1, c, 1, 1)
    out = gb * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dxhat = (g * gb).reshape(bsz, groups, -1)
        xhat_g = xhat.reshape(bsz, groups, -1)
        m1 = dxhat.mean(axis=2, keepdims=True)
        m2 = (dxhat * xhat_g).mean(axis=2, keepdims=True)
        dx = inv * (dxhat - m1 - xhat_g * m2)
        _acc(x, dx.reshape(bsz, c, h, w))
        _acc(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _acc(beta, g.sum(axis=(0, 2, 3)))

    return make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    bsz, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(bsz, c, ho, wo, kh, kw),
        strides=(s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]),
        writeable=False,
    )
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x, w, b, stride: int = 1) -> Tensor:
    """2D convolution with 'same'-style padding (pad = kernel // 2).

    ``x``: (B, C_in, H, W); ``w``: (C_out, C_in, kh, kw); ``b``: (C_out,).
    Stride 1 or 2. The im2col buffer is recomputed in backward to keep
    activation memory bounded.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if stride not in (1, 2):
        raise ValueError("conv2d supports stride 1 or 2")
    cout, cin, kh, kw = w.data.shape
    if x.data.ndim != 4 or x.data.shape[1] != cin:
        raise ShapeMismatch(f"conv2d input {x.data.shape} vs weight {w.data.shape}")
    pad = kh // 2
    bsz = x.data.shape[0]
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    w_flat = w.data.reshape(cout, -1)
    out = cols @ w_flat.T + b.data
    out = out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    saved = {"cols": cols if w.requires_grad else None}
    del cols

    def backward(g):
        g_flat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if w.requires_grad:
            cols_b = saved.pop("cols", None)
            if cols_b is None:
                cols_b, _, _ = _im2col(x.data, kh, kw, stride, pad)
            _acc(w, (g_flat.T @ cols_b).reshape(w.data.shape))
            del cols_b
        _acc(b, g_flat.sum(axis=0))
        if x.requires_grad:
            dcols = (g_flat @ w_flat).reshape(bsz, ho, wo, cin, kh, kw)
            h, wd = x.data.shape[2], x.data.shape[3]
            dxp = np.zeros((bsz, cin, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            _acc(x, dxp[:, :, pad : pad + h, pad : pad + wd])

    return make(out, (x, w, b), backward)


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        bsz, c, h2, w2 = g.shape
        _acc(x, g.reshape(bsz, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return make(out, (x,), backward)


def bilinear_sample(fmap, coords: np.ndarray) -> Tensor:
    """Sample a (C, H, W) feature map at continuous (u, v) feature coords.

    Returns (N, C). Queries outside [0, W-1] x [0, H-1] blend with zeros and
    vanish entirely once no corner is in bounds, so invisible points
    contribute neutral features. Gradients flow into the feature values;
    coordinates are fixed sample positions and get no gradient.
    """
    fmap = as_tensor(fmap)
    c, h, w = fmap.data.shape
    uv = np.asarray(coords, dtype=fmap.data.dtype).reshape(-1, 2)
    u, v = uv[:, 0], uv[:, 1]
    # NaN-safe: invalid coordinates become out-of-bounds sentinels.
    u = np.where(np.isfinite(u), u, -10.0 * w)
    v = np.where(np.isfinite(v), v, -10.0 * h)
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = u - u0
    fv = v - v0

    corners = []
    for du, dv, wt in (
        (0.0, 0.0, (1 - fu) * (1 - fv)),
        (1.0, 0.0, fu * (1 - fv)),
        (0.0, 1.0, (1 - fu) * fv),
        (1.0, 1.0, fu * fv),
    ):
        cu = u0 + du
        cv = v0 + dv
        valid = (cu >= 0) & (cu <= w - 1) & (cv >= 0) & (cv <= h - 1)
        idx = (np.clip(cv, 0, h - 1) * w + np.clip(cu, 0, w - 1)).astype(np.intp)
        corners.append((idx, (wt * valid).astype(fmap.data.dtype)))

    flat = np.ascontiguousarray(fmap.data.transpose(1, 2, 0).reshape(h * w, c))
    out = np.zeros((len(uv), c), dtype=fmap.data.dtype)
    for idx, wt in corners:
        out += flat[idx] * wt[:, None]

    def backward(g):
        # Scatter-add via per-channel bincount: much faster than np.add.at.
        idx_all = np.concatenate([idx for idx, _ in corners])
        gw = np.concatenate([g * wt[:, None] for _, wt in corners], axis=0)
        gflat = np.empty((h * w, c), dtype=g.dtype)
        for ch in range(c):
            gflat[:, ch] = np.bincount(idx_all, weights=gw[:, ch], minlength=h * w)
        _acc(fmap, gflat.reshape(h, w, c).transpose(2, 0, 1))

    return make(out, (fmap,), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def binary_cross_entropy(probs, labels, eps: float = 1e-7) -> Tensor:
    """Mean BCE over all elements; probabilities clamped to [eps, 1-eps]."""
    probs = as_tensor(probs)
    labels = as_tensor(labels, dtype=probs.data.dtype)
    p = clip(probs, eps, 1.0 - eps)
    pos = mul(labels, log(p))
    neg = mul(
        Tensor(1.0 - labels.data), log(sub(Tensor(np.ones_like(p.data)), p))
    )
    return scale(mean_all(add(pos, neg)), -1.0)
