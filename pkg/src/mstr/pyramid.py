"""Multi-scale feature pyramids: coordinate conventions, bilinear sampling,
a toy strided-convolution backbone, and sinusoidal positional encodings.

Coordinates come in two flavors.  Normalized coordinates live in [0,1]^2
over the image.  Level-pixel coordinates place pixel (i, j) of an H x W
map at center (j + 0.5, i + 0.5) in units of one pixel, so a normalized
point maps to level pixels via (x * W - 0.5, y * H - 0.5) and back via
((px + 0.5) / W, (py + 0.5) / H).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, clip, relu
from .errors import ConfigurationError
from .nn import Linear, Module, Parameter


@dataclass(frozen=True)
class NormalizedPoint:
    """An image-normalized (x, y) position, clamped into [0,1] on construction."""

    x: float
    y: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(min(max(self.x, 0.0), 1.0)))
        object.__setattr__(self, "y", float(min(max(self.y, 0.0), 1.0)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class FeatureLevel:
    """One pyramid level holding a (C, H, W) feature tensor."""

    level_index: int
    height: int
    width: int
    features: Tensor

    def __post_init__(self):
        c, h, w = self.features.shape
        if (h, w) != (self.height, self.width):
            raise ConfigurationError(
                f"level {self.level_index}: features {h}x{w} vs declared "
                f"{self.height}x{self.width}")

    @property
    def channels(self) -> int:
        return self.features.shape[0]

    def flat_features(self) -> Tensor:
        """Features reshaped to (H*W, C), row-major over pixels."""
        c = self.channels
        return self.features.reshape(c, self.height * self.width).transpose()


@dataclass
class MultiScalePyramid:
    """Strictly coarsening feature levels plus their positional signals."""

    levels: list[FeatureLevel]
    positional_encodings: list[np.ndarray]
    level_embedding: Parameter

    def __post_init__(self):
        for a, b in zip(self.levels, self.levels[1:]):
            if b.height > a.height or b.width > a.width:
                raise ConfigurationError("pyramid levels must not gain resolution")
        if self.level_embedding.shape != (len(self.levels), self.levels[0].channels):
            raise ConfigurationError("level embedding must be (L, C)")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def encoder_inputs(self) -> list[Tensor]:
        """Per level, (H*W, C) of features + positional encoding + level row.

        The two additive signals commute, so their order is irrelevant.
        """
        out = []
        for l, level in enumerate(self.levels):
            c = level.channels
            pos = self.positional_encodings[l].reshape(c, -1).T
            out.append(level.flat_features() + Tensor(pos) + self.level_embedding[l])
        return out


def rescale_to_level(p: NormalizedPoint, level: FeatureLevel) -> tuple[float, float]:
    """Normalized point to continuous level-pixel coordinates."""
    return (p.x * level.width - 0.5, p.y * level.height - 0.5)


def level_to_normalized(px: float, py: float, level: FeatureLevel) -> NormalizedPoint:
    """Inverse of rescale_to_level (before any [0,1] clamping)."""
    return NormalizedPoint((px + 0.5) / level.width, (py + 0.5) / level.height)


def rescale_points(points: Tensor, width: int, height: int) -> tuple[Tensor, Tensor]:
    """Vectorized rescale of an (..., 2) tensor of normalized (x, y) points."""
    return points[..., 0] * width - 0.5, points[..., 1] * height - 0.5


def bilinear_gather(flat: Tensor, height: int, width: int,
                    xs: Tensor, ys: Tensor) -> Tensor:
    """Sample (P, C) feature vectors at P continuous pixel coordinates.

    ``flat`` is an (H*W, C) feature map; samples blend the four
    surrounding pixel centers, with out-of-map pixels contributing zero.
    Differentiable in both the features and the coordinates.
    """
    x0 = np.floor(xs.data).astype(np.int64)
    y0 = np.floor(ys.data).astype(np.int64)
    tx = xs - Tensor(x0.astype(np.float64))
    ty = ys - Tensor(y0.astype(np.float64))
    one = Tensor(np.ones_like(x0, dtype=np.float64))
    out = None
    for dy, wy in ((0, one - ty), (1, ty)):
        for dx, wx in ((0, one - tx), (1, tx)):
            cx, cy = x0 + dx, y0 + dy
            valid = ((cx >= 0) & (cx < width) & (cy >= 0) & (cy < height))
            idx = np.clip(cy, 0, height - 1) * width + np.clip(cx, 0, width - 1)
            corner = flat[idx] * valid[:, None].astype(np.float64)
            term = corner * (wx * wy).reshape(-1, 1)
            out = term if out is None else out + term
    return out


def bilinear_gather_multihead(values: Tensor, height: int, width: int,
                              xs: Tensor, ys: Tensor) -> Tensor:
    """Per-head bilinear sampling as a single graph node.

    ``values`` is (H*W, M, Cv); ``xs`` and ``ys`` are (Q, M, K) pixel
    coordinates where head m samples only its own value slice.  Returns
    (Q, M, K, Cv).  Same blending and zero-padding rule as
    bilinear_gather, with a hand-written backward so the sampling loop
    does not fan out into per-corner tape nodes.
    """
    m = values.shape[1]
    x0 = np.floor(xs.data).astype(np.int64)
    y0 = np.floor(ys.data).astype(np.int64)
    tx = xs.data - x0
    ty = ys.data - y0
    head = np.arange(m).reshape(1, m, 1)
    corners = []
    out = np.zeros(xs.data.shape + (values.shape[2],))
    for dy, wy, gy in ((0, 1.0 - ty, -1.0), (1, ty, 1.0)):
        for dx, wx, gx in ((0, 1.0 - tx, -1.0), (1, tx, 1.0)):
            cx, cy = x0 + dx, y0 + dy
            valid = ((cx >= 0) & (cx < width) & (cy >= 0) & (cy < height))
            valid = valid.astype(np.float64)
            idx = np.clip(cy, 0, height - 1) * width + np.clip(cx, 0, width - 1)
            corner = values.data[idx, head]
            out += corner * (wx * wy * valid)[..., None]
            corners.append((idx, corner, wx * wy * valid,
                            gx * wy * valid, wx * gy * valid))

    def backward(g):
        if values.requires_grad:
            gv = np.zeros_like(values.data)
            for idx, _, w, _, _ in corners:
                np.add.at(gv, (idx, head), g * w[..., None])
            values._accumulate(gv)
        if xs.requires_grad or ys.requires_grad:
            gxs = np.zeros_like(xs.data)
            gys = np.zeros_like(ys.data)
            for _, corner, _, dwx, dwy in corners:
                inner = (g * corner).sum(axis=-1)
                gxs += inner * dwx
                gys += inner * dwy
            xs._accumulate(gxs)
            ys._accumulate(gys)

    return Tensor._op(out, (values, xs, ys), backward)


def bilinear_sample(level: FeatureLevel, q: tuple[float, float]) -> Tensor:
    """Single-point convenience wrapper around bilinear_gather."""
    xs = Tensor(np.array([q[0]]))
    ys = Tensor(np.array([q[1]]))
    return bilinear_gather(level.flat_features(), level.height, level.width,
                           xs, ys).reshape(-1)


def sinusoidal_encoding(height: int, width: int, channels: int,
                        temperature: float = 10000.0) -> np.ndarray:
    """(C, H, W) sine/cosine position code over per-level normalized coords.

    The first C/2 channels encode y, the rest x, each as interleaved
    sin/cos pairs over geometrically spaced frequencies.
    """
    if channels % 4 != 0:
        raise ConfigurationError("positional encoding needs channels divisible by 4")
    num = channels // 2
    scale = 2.0 * np.pi
    y_embed = (np.arange(height) + 0.5) / height * scale
    x_embed = (np.arange(width) + 0.5) / width * scale
    dim_t = temperature ** (2.0 * (np.arange(num) // 2) / num)
    pos_y = y_embed[:, None, None] / dim_t            # (H, 1, num)
    pos_x = x_embed[None, :, None] / dim_t            # (1, W, num)
    pos_y = np.broadcast_to(pos_y, (height, width, num)).copy()
    pos_x = np.broadcast_to(pos_x, (height, width, num)).copy()
    for p in (pos_y, pos_x):
        p[..., 0::2] = np.sin(p[..., 0::2])
        p[..., 1::2] = np.cos(p[..., 1::2])
    return np.concatenate([pos_y, pos_x], axis=-1).transpose(2, 0, 1)


@dataclass(frozen=True)
class BackboneConfig:
    """Shape of the toy pyramid: L levels at strides 4, 8, 16, ..."""

    in_channels: int = 1
    channels: int = 32
    num_levels: int = 3
    base_stride: int = 4

    @property
    def strides(self) -> list[int]:
        return [self.base_stride * 2**i for i in range(self.num_levels)]


class PatchConv(Module):
    """Non-overlapping k x k convolution (kernel size equals stride)."""

    def __init__(self, in_channels: int, out_channels: int, patch: int,
                 rng: np.random.Generator):
        self.patch = patch
        self.out_channels = out_channels
        self.proj = Linear(in_channels * patch * patch, out_channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        k = self.patch
        if h % k or w % k:
            raise ConfigurationError(f"{h}x{w} input not divisible by patch {k}")
        hw = (h // k) * (w // k)
        patches = (x.reshape(c, h // k, k, w // k, k)
                   .transpose(1, 3, 0, 2, 4)
                   .reshape(hw, c * k * k))
        return self.proj(patches).transpose().reshape(self.out_channels, h // k, w // k)


class Backbone(Module):
    """Strided patchify stack producing L levels of C-channel features.

    Each stage's raw output is a pyramid level; the next stage consumes
    its rectified version, so level features themselves stay signed.
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        self.convs = [PatchConv(config.in_channels, config.channels,
                                config.base_stride, rng)]
        for _ in range(config.num_levels - 1):
            self.convs.append(PatchConv(config.channels, config.channels, 2, rng))
        self.level_embedding = Parameter(rng.normal(size=(config.num_levels,
                                                          config.channels)))

    def forward(self, image: Tensor) -> MultiScalePyramid:
        cfg = self.config
        _, h, w = image.shape
        top = cfg.strides[-1]
        if h % top or w % top:
            raise ConfigurationError(
                f"image {h}x{w} not divisible by largest stride {top}")
        levels, encodings = [], []
        x = image
        for l, conv in enumerate(self.convs):
            y = conv(x)
            _, lh, lw = y.shape
            levels.append(FeatureLevel(l + 1, lh, lw, y))
            encodings.append(sinusoidal_encoding(lh, lw, cfg.channels))
            x = relu(y)
        return MultiScalePyramid(levels, encodings, self.level_embedding)


def build_pyramid(image: Tensor, backbone: Backbone) -> MultiScalePyramid:
    return backbone(image)


def write_pgm(path: str, values: np.ndarray) -> None:
    """8-bit binary portable graymap, min-max normalized."""
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo if hi > lo else 1.0
    img = np.round((values - lo) / span * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def dump_pyramid(pyramid: MultiScalePyramid, out_dir: str,
                 channel_stride: int = 8) -> list[str]:
    """Write level-{l}-chan-{c}.pgm debug images, one per channel group."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for level in pyramid.levels:
        for c in range(0, level.channels, channel_stride):
            path = os.path.join(out_dir, f"level-{level.level_index}-chan-{c}.pgm")
            write_pgm(path, level.features.data[c])
            written.append(path)
    return written
