"""Multi-view feature fusion.

The learned strategy embeds each view's pixel-aligned feature, runs a stack
of multi-head self-attention encoder blocks over the view axis (no
positional encoding, so the module is equivariant to view order) and mean-
pools the result. Pooling baselines (average, max) and a fixed-width
concatenation baseline are available for ablations. A second, grid-level
fusion maps the per-grid-point fused features to one context feature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tensor, ops
from .errors import ShapeMismatch

STRATEGIES = ("attention", "average", "max", "concat-fixed")


@dataclass(frozen=True)
class FusionConfig:
    n_blocks: int = 2
    n_heads: int = 4
    d_model: int = 48
    strategy: str = "attention"

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by the head count")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.strategy!r}")


def _xavier(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class _Linear:
    def __init__(self, store, name, fan_in, fan_out, rng):
        self.w = store.parameter(f"{name}.w", _xavier(rng, fan_in, fan_out))
        self.b = store.parameter(f"{name}.b", np.zeros(fan_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.w, self.b)


class AttentionBlock:
    """Transformer-style encoder block over the view axis.

    Query/key/value embeddings, per-head projections, scaled dot-product
    attention, head concatenation and output projection, wrapped post-norm
    with a position-wise feed-forward (hidden = 2 x d_model) and two
    residual + layer-norm pairs.
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, d_model: int,
                 n_heads: int, rng):
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_k = d_model // n_heads
        self.mq = _Linear(store, f"{name}.mq", d_in, d_model, rng)
        self.mk = _Linear(store, f"{name}.mk", d_in, d_model, rng)
        self.mv = _Linear(store, f"{name}.mv", d_in, d_model, rng)
        # Per-head projections packed columnwise: column block i is head i.
        self.wq = store.parameter(f"{name}.wq", _xavier(rng, d_model, d_model))
        self.wk = store.parameter(f"{name}.wk", _xavier(rng, d_model, d_model))
        self.wv = store.parameter(f"{name}.wv", _xavier(rng, d_model, d_model))
        self.wo = _Linear(store, f"{name}.wo", d_model, d_model, rng)
        self.ff1 = _Linear(store, f"{name}.ff1", d_model, 2 * d_model, rng)
        self.ff2 = _Linear(store, f"{name}.ff2", 2 * d_model, d_model, rng)
        self.ln1_g = store.parameter(f"{name}.ln1.gamma", np.ones(d_model))
        self.ln1_b = store.parameter(f"{name}.ln1.beta", np.zeros(d_model))
        self.ln2_g = store.parameter(f"{name}.ln2.gamma", np.ones(d_model))
        self.ln2_b = store.parameter(f"{name}.ln2.beta", np.zeros(d_model))

    def _heads(self, x2d: Tensor, emb: _Linear, w: Tensor, n: int, v: int) -> Tensor:
        # Embedding followed by the packed per-head projection is a
        # composition of linear maps; composing the two small matrices
        # first leaves a single big GEMM over the tokens.
        w_comp = ops.matmul(emb.w, w)  # (d_in, d_model)
        b_comp = ops.matmul(ops.reshape(emb.b, (1, -1)), w)  # (1, d_model)
        proj = ops.add(ops.matmul(x2d, w_comp), b_comp)
        t = ops.reshape(proj, (n, v, self.n_heads, self.d_k))
        return ops.transpose(t, (0, 2, 1, 3))  # (N, h, V, d_k)

    def forward_reference(self, x: Tensor, record: list | None = None) -> Tensor:
        """Per-op composition of the block; the fused path is checked
        against this in tests."""
        n, v, d_in = x.data.shape
        x2d = ops.reshape(x, (n * v, d_in))
        qh = self._heads(x2d, self.mq, self.wq, n, v)
        kh = self._heads(x2d, self.mk, self.wk, n, v)
        vh = self._heads(x2d, self.mv, self.wv, n, v)
        scores = ops.scale(
            ops.matmul(qh, ops.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(self.d_k)
        )
        attn = ops.softmax(scores)  # (N, h, V, V), rows sum to 1
        if record is not None:
            record.append(attn.data.copy())
        ctx = ops.matmul(attn, vh)  # (N, h, V, d_k)
        ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (n * v, self.d_model))
        attn_out = self.wo(ctx)

        x_res = x2d if d_in == self.d_model else None
        if x_res is None:
            raise ShapeMismatch("attention block input width must equal d_model")
        h1 = ops.layer_norm(ops.add(x_res, attn_out), self.ln1_g, self.ln1_b)
        ff = self.ff2(ops.relu(self.ff1(h1)))
        h2 = ops.layer_norm(ops.add(h1, ff), self.ln2_g, self.ln2_b)
        return ops.reshape(h2, (n, v, self.d_model))

    def forward(self, x: Tensor, record: list | None = None) -> Tensor:
        """Fused block: one tape node with a hand-derived backward.

        Mathematically identical to :meth:`forward_reference`; fusing keeps
        the token tensors out of DRAM round trips, which dominates the cost
        of the per-op path.
        """
        if x.data.shape[-1] != self.d_model:
            raise ShapeMismatch("attention block input width must equal d_model")
        return _fused_block(self, x, record)


_LN_EPS = 1e-5


def _layer_norm_fwd(r, gamma, beta):
    mu = r.mean(axis=-1, keepdims=True)
    xhat = r - mu
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / r.shape[-1]
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat *= inv
    out = xhat * gamma
    out += beta
    return out, xhat, inv


def _layer_norm_bwd(g, xhat, inv, gamma):
    dxhat = g * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dr = inv * (dxhat - m1 - xhat * m2)
    return dr, (g * xhat).sum(axis=0), g.sum(axis=0)


def _fused_block(blk: AttentionBlock, x: Tensor, record: list | None) -> Tensor:
    from .autodiff.tensor import grad_enabled, make

    n, v, d = x.data.shape
    h, dk = blk.n_heads, blk.d_k
    nv = n * v
    dt = x.data.dtype
    x2 = np.ascontiguousarray(x.data.reshape(nv, d))

    emb = {"q": blk.mq, "k": blk.mk, "v": blk.mv}
    heads_w = {"q": blk.wq, "k": blk.wk, "v": blk.wv}
    wc, bc, proj = {}, {}, {}
    for key in ("q", "k", "v"):
        wc[key] = emb[key].w.data @ heads_w[key].data
        bc[key] = emb[key].b.data @ heads_w[key].data
        p = x2 @ wc[key] + bc[key]
        proj[key] = np.ascontiguousarray(
            p.reshape(n, v, h, dk).transpose(0, 2, 1, 3)
        )
    scale = 1.0 / np.sqrt(dk)
    s = np.matmul(proj["q"], proj["k"].swapaxes(-1, -2))
    s *= scale
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    attn = s  # (N, h, V, V)
    if record is not None:
        record.append(attn.copy())
    ctx = np.ascontiguousarray(
        np.matmul(attn, proj["v"]).transpose(0, 2, 1, 3)
    ).reshape(nv, d)
    r1 = ctx @ blk.wo.w.data + blk.wo.b.data
    r1 += x2
    y1, xhat1, inv1 = _layer_norm_fwd(r1, blk.ln1_g.data, blk.ln1_b.data)
    hid = y1 @ blk.ff1.w.data + blk.ff1.b.data
    np.maximum(hid, 0.0, out=hid)
    r2 = hid @ blk.ff2.w.data + blk.ff2.b.data
    r2 += y1
    y2, xhat2, inv2 = _layer_norm_fwd(r2, blk.ln2_g.data, blk.ln2_b.data)
    out = y2.reshape(n, v, d)

    params = (
        x,
        emb["q"].w, emb["q"].b, heads_w["q"],
        emb["k"].w, emb["k"].b, heads_w["k"],
        emb["v"].w, emb["v"].b, heads_w["v"],
        blk.wo.w, blk.wo.b,
        blk.ff1.w, blk.ff1.b, blk.ff2.w, blk.ff2.b,
        blk.ln1_g, blk.ln1_b, blk.ln2_g, blk.ln2_b,
    )
    if not (grad_enabled() and any(p.requires_grad for p in params)):
        return Tensor(out)

    def backward(g):
        from .autodiff.ops import _acc

        g2 = g.reshape(nv, d)
        dr2, dg2, db2 = _layer_norm_bwd(g2, xhat2, inv2, blk.ln2_g.data)
        _acc(blk.ln2_g, dg2)
        _acc(blk.ln2_b, db2)
        # FFN + residual
        dy1 = dr2.copy()
        _acc(blk.ff2.w, hid.T @ dr2)
        _acc(blk.ff2.b, dr2.sum(axis=0))
        dhid = dr2 @ blk.ff2.w.data.T
        dhid *= hid > 0
        _acc(blk.ff1.w, y1.T @ dhid)
        _acc(blk.ff1.b, dhid.sum(axis=0))
        dy1 += dhid @ blk.ff1.w.data.T
        dr1, dg1, db1 = _layer_norm_bwd(dy1, xhat1, inv1, blk.ln1_g.data)
        _acc(blk.ln1_g, dg1)
        _acc(blk.ln1_b, db1)
        # output projection + residual
        dx2 = dr1.copy()
        _acc(blk.wo.w, ctx.T @ dr1)
        _acc(blk.wo.b, dr1.sum(axis=0))
        dctx = (dr1 @ blk.wo.w.data.T).reshape(n, v, h, dk).transpose(0, 2, 1, 3)
        # attention
        dattn = np.matmul(dctx, proj["v"].swapaxes(-1, -2))
        dvh = np.matmul(attn.swapaxes(-1, -2), dctx)
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        ds *= scale
        dqh = np.matmul(ds, proj["k"])
        dkh = np.matmul(ds.swapaxes(-1, -2), proj["q"])
        for key, dph in (("q", dqh), ("k", dkh), ("v", dvh)):
            dp2 = np.ascontiguousarray(dph.transpose(0, 2, 1, 3)).reshape(nv, d)
            dx2 += dp2 @ wc[key].T
            dwc = x2.T @ dp2
            dbc = dp2.sum(axis=0)
            _acc(emb[key].w, dwc @ heads_w[key].data.T)
            _acc(emb[key].b, dbc @ heads_w[key].data.T)
            _acc(heads_w[key], emb[key].w.data.T @ dwc
                 + np.outer(emb[key].b.data, dbc))
        _acc(x, dx2.reshape(n, v, d))

    return make(out, params, backward)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the key axis, for 2D inputs."""
    if q.data.shape[-1] != k.data.shape[-1] or k.data.shape != v.data.shape:
        raise ShapeMismatch("attention inputs must share (n, d_k) shapes")
    d_k = q.data.shape[-1]
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (1, 0))), 1.0 / np.sqrt(d_k))
    return ops.matmul(ops.softmax(scores), v)


class ViewFusion:
    """Per-point fusion of the per-view feature sequence into one vector."""

    def __init__(self, config: FusionConfig, in_dim: int, store: ParamStore,
                 rng, prefix: str = "fusion", concat_views: int = 4):
        config.validate()
        self.config = config
        self.embed = _Linear(store, f"{prefix}.embed", in_dim, config.d_model, rng)
        self.blocks = []
        if config.strategy == "attention":
            self.blocks = [
                AttentionBlock(
                    store, f"{prefix}.block{i}", config.d_model, config.d_model,
                    config.n_heads, rng,
                )
                for i in range(config.n_blocks)
            ]
        self.concat_proj = None
        if config.strategy == "concat-fixed":
            self.concat_views = concat_views
            self.concat_proj = _Linear(
                store, f"{prefix}.concat", concat_views * config.d_model,
                config.d_model, rng,
            )

    def forward(self, feats: Tensor, record: list | None = None) -> Tensor:
        """(N, V, in_dim) per-view features -> (N, d_model) fused vectors."""
        n, v, d_in = feats.data.shape
        x = ops.reshape(self.embed(ops.reshape(feats, (n * v, d_in))),
                        (n, v, self.config.d_model))
        strategy = self.config.strategy
        if strategy == "attention":
            for i, block in enumerate(self.blocks):
                x = block.forward(x, record=record if i == 0 else None)
            return ops.mean(x, axis=1)
        if strategy == "average":
            return ops.mean(x, axis=1)
        if strategy == "max":
            return ops.amax(x, axis=1)
        if strategy == "concat-fixed":
            if v != self.concat_views:
                raise ShapeMismatch(
                    f"concat-fixed fusion built for {self.concat_views} views, got {v}"
                )
            return self.concat_proj(ops.reshape(x, (n, v * self.config.d_model)))
        raise ValueError(strategy)


class ContextFusion:
    """Linear map from the ordered grid of fused features to one context vector."""

    def __init__(self, n_grid: int, d_model: int, out_width: int,
                 store: ParamStore, rng, prefix: str = "context"):
        self.n_grid = n_grid
        self.d_model = d_model
        self.proj = _Linear(store, f"{prefix}.proj", n_grid * d_model, out_width, rng)

    def forward(self, fused: Tensor) -> Tensor:
        """(N, G, d_model) grid features (center row first) -> (N, out_width)."""
        n, g, d = fused.data.shape
        if g != self.n_grid or d != self.d_model:
            raise ShapeMismatch(
                f"context fusion expects (N, {self.n_grid}, {self.d_model}), got {fused.data.shape}"
            )
        return ops.relu(self.proj(ops.reshape(fused, (n, g * d))))
