"""Multi-scale convolutional image encoder with stacked U-shaped modules.

Each stack is a depth-d residual encoder-decoder (downsampling by stride-2
residual blocks, nearest-neighbor upsampling, skip additions); stacks are
chained with residual feature injection and every stack emits a full
feature map, so training can supervise all of them while inference uses
the last. The stride from input image to feature grid is 4.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tensor, ops
from .cameras import Camera
from .errors import ShapeMismatch


@dataclass(frozen=True)
class EncoderConfig:
    n_stacks: int = 2
    depth: int = 2
    channels: int = 64
    input_resolution: int = 128

    @property
    def output_resolution(self) -> int:
        return self.input_resolution // 4

    def validate(self) -> None:
        if self.channels <= 0:
            raise ValueError("encoder channels must be positive")
        if self.input_resolution % (4 * 2 ** (self.depth - 1)):
            raise ValueError("input resolution incompatible with encoder depth")


def _n_groups(channels: int) -> int:
    return min(32, channels)


class _Conv:
    def __init__(self, store: ParamStore, name: str, cin: int, cout: int,
                 k: int, rng, stride: int = 1):
        std = np.sqrt(2.0 / (cin * k * k))
        self.w = store.parameter(f"{name}.w", rng.normal(0.0, std, size=(cout, cin, k, k)))
        self.b = store.parameter(f"{name}.b", np.zeros(cout))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b, stride=self.stride)


class _GroupNorm:
    def __init__(self, store: ParamStore, name: str, channels: int):
        self.gamma = store.parameter(f"{name}.gamma", np.ones(channels))
        self.beta = store.parameter(f"{name}.beta", np.zeros(channels))
        self.groups = _n_groups(channels)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.gamma, self.beta, self.groups)


class _ResBlock:
    """Pre-activation residual block: GN-ReLU-conv3 twice plus skip."""

    def __init__(self, store, name, cin, cout, rng, stride: int = 1):
        self.gn1 = _GroupNorm(store, f"{name}.gn1", cin)
        self.conv1 = _Conv(store, f"{name}.conv1", cin, cout, 3, rng, stride=stride)
        self.gn2 = _GroupNorm(store, f"{name}.gn2", cout)
        self.conv2 = _Conv(store, f"{name}.conv2", cout, cout, 3, rng)
        self.skip = None
        if cin != cout or stride != 1:
            self.skip = _Conv(store, f"{name}.skip", cin, cout, 1, rng, stride=stride)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv1(ops.relu(self.gn1(x)))
        h = self.conv2(ops.relu(self.gn2(h)))
        return ops.add(h, self.skip(x) if self.skip else x)


class _Hourglass:
    def __init__(self, store, name, depth, channels, rng):
        self.up = _ResBlock(store, f"{name}.up", channels, channels, rng)
        self.down = _ResBlock(store, f"{name}.down", channels, channels, rng, stride=2)
        if depth > 1:
            self.inner = _Hourglass(store, f"{name}.inner", depth - 1, channels, rng)
        else:
            self.inner = _ResBlock(store, f"{name}.inner", channels, channels, rng)
        self.low = _ResBlock(store, f"{name}.low", channels, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        lo = self.low(self.inner(self.down(x)))
        return ops.add(ops.upsample_nearest2x(lo), self.up(x))


class Encoder:
    """Image encoder producing one pixel-aligned feature map per stack."""

    def __init__(self, config: EncoderConfig, store: ParamStore, rng,
                 prefix: str = "encoder"):
        config.validate()
        self.config = config
        ch = config.channels
        self.stem1 = _Conv(store, f"{prefix}.stem1", 4, ch // 2, 3, rng, stride=2)
        self.stem1_gn = _GroupNorm(store, f"{prefix}.stem1_gn", ch // 2)
        self.stem2 = _Conv(store, f"{prefix}.stem2", ch // 2, ch, 3, rng, stride=2)
        self.stem2_gn = _GroupNorm(store, f"{prefix}.stem2_gn", ch)
        self.stacks = []
        for s in range(config.n_stacks):
            name = f"{prefix}.stack{s}"
            stack = {
                "hg": _Hourglass(store, f"{name}.hg", config.depth, ch, rng),
                "post": _ResBlock(store, f"{name}.post", ch, ch, rng),
                "ll": _Conv(store, f"{name}.ll", ch, ch, 1, rng),
                "ll_gn": _GroupNorm(store, f"{name}.ll_gn", ch),
                "out": _Conv(store, f"{name}.out", ch, ch, 1, rng),
            }
            if s < config.n_stacks - 1:
                stack["inject_ll"] = _Conv(store, f"{name}.inject_ll", ch, ch, 1, rng)
                stack["inject_out"] = _Conv(store, f"{name}.inject_out", ch, ch, 1, rng)
            self.stacks.append(stack)

    def forward(self, images: Tensor) -> list[Tensor]:
        """(B, 4, H, W) images+mask -> per-stack feature maps (B, C, H/4, W/4)."""
        if images.data.ndim != 4 or images.data.shape[1] != 4:
            raise ShapeMismatch(f"encoder expects (B, 4, H, W), got {images.data.shape}")
        if images.data.shape[2] != self.config.input_resolution:
            raise ShapeMismatch(
                f"encoder configured for {self.config.input_resolution}, "
                f"got {images.data.shape[2]}"
            )
        x = ops.relu(self.stem1_gn(self.stem1(images)))
        x = ops.relu(self.stem2_gn(self.stem2(x)))
        outputs = []
        for stack in self.stacks:
            h = stack["post"](stack["hg"](x))
            ll = ops.relu(stack["ll_gn"](stack["ll"](h)))
            out = stack["out"](ll)
            outputs.append(out)
            if "inject_ll" in stack:
                x = ops.add(x, ops.add(stack["inject_ll"](ll), stack["inject_out"](out)))
        return outputs


@dataclass
class FeatureMap:
    """One view's encoded features plus the camera that produced the image.

    ``tensor`` is (C, H_f, W_f); ``scale`` maps image pixels to feature-grid
    coordinates (H_f / H_image).
    """

    tensor: Tensor
    camera: Camera
    scale: float

    @property
    def n_channels(self) -> int:
        return self.tensor.data.shape[0]


def slice_view(batch: Tensor, index: int) -> Tensor:
    """Select one view's (C, H, W) map from a batched (B, C, H, W) tensor."""
    from .autodiff.tensor import make

    data = batch.data[index]

    def backward(g):
        if batch.requires_grad:
            full = np.zeros_like(batch.data)
            full[index] = g
            batch.accumulate_grad(full)

    return make(data, (batch,), backward)


def feature_maps_for_views(
    stack_output: Tensor, cameras: list[Camera], input_resolution: int
) -> list[FeatureMap]:
    scale = stack_output.data.shape[-1] / input_resolution
    return [
        FeatureMap(tensor=slice_view(stack_output, i), camera=cam, scale=scale)
        for i, cam in enumerate(cameras)
    ]


def query_feature(fmap: FeatureMap, uv_pixels: np.ndarray) -> Tensor:
    """Bilinear feature lookup at continuous image-pixel coordinates.

    Coordinates are scaled into the feature grid; out-of-bounds queries
    return zeros.
    """
    uv = np.asarray(uv_pixels, dtype=np.float64).reshape(-1, 2) * fmap.scale
    return ops.bilinear_sample(fmap.tensor, uv)


def encode_views(
    encoder: Encoder, images: np.ndarray, cameras: list[Camera]
) -> list[list[FeatureMap]]:
    """Encode stacked view images (V, 4, H, W); returns per-stack FeatureMaps."""
    outs = encoder.forward(Tensor(images))
    return [
        feature_maps_for_views(out, cameras, encoder.config.input_resolution)
        for out in outs
    ]
