"""The four attention mechanisms behind the detector.

Single-scale multi-head attention computes dense softmax weights over
every key.  Multi-scale deformable attention instead samples K learned
locations per head per pyramid level around a reference point and mixes
them with predicted weights, so its cost is independent of resolution.
The dual-entity variant runs two untied deformable attentions anchored
at the human and object reference points; the entity-conditioned
context variant anchors a third at their midpoint.

All query-side operations are batched over a leading Q axis, so a
"query" tensor is (Q, C); the per-query view of the contracts is the
Q = 1 case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError
from .nn import Linear, Module
from .pyramid import bilinear_gather_multihead


@dataclass(frozen=True)
class AttentionConfig:
    """Head/point/level geometry shared by all attention mechanisms."""

    num_heads: int
    num_points: int
    num_levels: int
    model_dim: int

    def __post_init__(self):
        if min(self.num_heads, self.num_points, self.num_levels) < 1:
            raise ConfigurationError("heads, points, and levels must be >= 1")
        if self.model_dim % self.num_heads:
            raise ConfigurationError(
                f"model dim {self.model_dim} not divisible by {self.num_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class SamplingGrid:
    """Where deformable attention looks and how much it counts each look.

    reference is (Q, 2) in normalized image coordinates, offsets are
    (Q, M, L, K, 2) in level-pixel units, weights are (Q, M, L, K) and
    sum to one over (L, K) for every query and head.
    """

    reference: Tensor
    offsets: Tensor
    weights: Tensor


def compute_sampling_locations(grid: SamplingGrid,
                               shapes: list[tuple[int, int]]) -> list[tuple[Tensor, Tensor]]:
    """Per level, the (Q, M, K) x and y sampling coordinates in that
    level's pixel units: the rescaled reference plus the level's offsets."""
    q = grid.reference.shape[0]
    out = []
    for l, (h, w) in enumerate(shapes):
        px = grid.reference[:, 0] * w - 0.5
        py = grid.reference[:, 1] * h - 0.5
        xs = px.reshape(q, 1, 1) + grid.offsets[:, :, l, :, 0]
        ys = py.reshape(q, 1, 1) + grid.offsets[:, :, l, :, 1]
        out.append((xs, ys))
    return out


def key_count(cfg: AttentionConfig, shapes: list[tuple[int, int]]) -> tuple[int, int]:
    """(dense keys a full attention would touch, keys deformable samples)."""
    dense = sum(h * w for h, w in shapes)
    return dense, cfg.num_levels * cfg.num_heads * cfg.num_points


def _radial_offset_bias(cfg: AttentionConfig) -> np.ndarray:
    """Distinct initial directions per head, radius growing with k."""
    thetas = np.arange(cfg.num_heads) * (2.0 * np.pi / cfg.num_heads)
    directions = np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)
    directions /= np.abs(directions).max(axis=-1, keepdims=True)
    grid = np.tile(directions[:, None, None, :],
                   (1, cfg.num_levels, cfg.num_points, 1))
    for k in range(cfg.num_points):
        grid[:, :, k, :] *= k + 1
    return grid.reshape(-1)


class MSDeformAttention(Module):
    """Multi-scale deformable attention for a batch of queries.

    Offsets and weights both come from linear projections of the query;
    weights are normalized by softmax over the joint (level, point) axis
    per head.  Offset projection starts at zero weights with a radial
    bias so heads begin by looking in distinct directions.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        m, l, k, c = cfg.num_heads, cfg.num_levels, cfg.num_points, cfg.model_dim
        self.value_proj = Linear(c, c, rng)
        self.output_proj = Linear(c, c, rng)
        self.offset_proj = Linear(c, m * l * k * 2, rng)
        self.offset_proj.weight.data[:] = 0.0
        self.offset_proj.bias.data = _radial_offset_bias(cfg)
        self.weight_proj = Linear(c, m * l * k, rng)
        self.weight_proj.weight.data[:] = 0.0
        self.weight_proj.bias.data[:] = 0.0

    def make_grid(self, z: Tensor, reference: Tensor) -> SamplingGrid:
        cfg = self.cfg
        q = z.shape[0]
        m, l, k = cfg.num_heads, cfg.num_levels, cfg.num_points
        offsets = self.offset_proj(z).reshape(q, m, l, k, 2)
        logits = self.weight_proj(z).reshape(q, m, l * k)
        weights = ad.softmax(logits, axis=-1).reshape(q, m, l, k)
        return SamplingGrid(reference, offsets, weights)

    def attend(self, grid: SamplingGrid, values: list[Tensor],
               shapes: list[tuple[int, int]]) -> Tensor:
        cfg = self.cfg
        q = grid.reference.shape[0]
        m, k, cv = cfg.num_heads, cfg.num_points, cfg.head_dim
        locations = compute_sampling_locations(grid, shapes)
        out = None
        for l, ((xs, ys), flat, (h, w)) in enumerate(zip(locations, values, shapes)):
            v = self.value_proj(flat).reshape(h * w, m, cv)
            sampled = bilinear_gather_multihead(v, h, w, xs, ys)
            mixed = (sampled * grid.weights[:, :, l, :].reshape(q, m, k, 1)).sum(axis=2)
            out = mixed if out is None else out + mixed
        return self.output_proj(out.reshape(q, m * cv))

    def forward(self, z: Tensor, reference: Tensor, values: list[Tensor],
                shapes: list[tuple[int, int]]) -> Tensor:
        return self.attend(self.make_grid(z, reference), values, shapes)


class SingleScaleAttention(Module):
    """Dense multi-head attention of a query set over an explicit key set.

    Per head, weights are softmax over keys of the scaled query/key dot
    product; per-head value mixtures are concatenated and projected out.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.model_dim
        self.query_proj = Linear(c, c, rng)
        self.key_proj = Linear(c, c, rng)
        self.value_proj = Linear(c, c, rng)
        self.output_proj = Linear(c, c, rng)

    def forward(self, z: Tensor, keys: Tensor) -> Tensor:
        if keys.shape[0] == 0:
            raise ValueError("attention needs at least one key")
        cfg = self.cfg
        q_n, k_n = z.shape[0], keys.shape[0]
        m, cv = cfg.num_heads, cfg.head_dim
        q = self.query_proj(z).reshape(q_n, m, cv).transpose(1, 0, 2)
        k = self.key_proj(keys).reshape(k_n, m, cv).transpose(1, 2, 0)
        v = self.value_proj(keys).reshape(k_n, m, cv).transpose(1, 0, 2)
        weights = ad.softmax((q @ k) * (cv**-0.5), axis=-1)
        mixed = (weights @ v).transpose(1, 0, 2).reshape(q_n, m * cv)
        return self.output_proj(mixed)


def ss_attention(z: Tensor, keys: Tensor, attn: SingleScaleAttention) -> Tensor:
    return attn(z, keys)


class DualEntityAttention(Module):
    """Human and object features from two untied deformable attentions.

    The query is projected into per-entity queries; each drives its own
    sampling grid (own offsets and weights) anchored at that entity's
    reference point.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        c = cfg.model_dim
        self.proj_h = Linear(c, c, rng)
        self.proj_o = Linear(c, c, rng)
        self.attn_h = MSDeformAttention(cfg, rng)
        self.attn_o = MSDeformAttention(cfg, rng)

    def forward(self, z: Tensor, ref_h: Tensor, ref_o: Tensor,
                values: list[Tensor], shapes: list[tuple[int, int]]) -> tuple[Tensor, Tensor]:
        f_h = self.attn_h(self.proj_h(z), ref_h, values, shapes)
        f_o = self.attn_o(self.proj_o(z), ref_o, values, shapes)
        return f_h, f_o


class EntityConditionedContextAttention(Module):
    """Context features sampled around the human/object midpoint.

    Offsets and weights come from the query feature itself; only the
    anchor is entity-conditioned.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.attn_c = MSDeformAttention(cfg, rng)

    @staticmethod
    def midpoint(ref_h: Tensor, ref_o: Tensor) -> Tensor:
        return (ref_h + ref_o) * 0.5

    def forward(self, z: Tensor, ref_h: Tensor, ref_o: Tensor,
                values: list[Tensor], shapes: list[tuple[int, int]]) -> Tensor:
        return self.attn_c(z, self.midpoint(ref_h, ref_o), values, shapes)


def grid_records(grid: SamplingGrid, shapes: list[tuple[int, int]]) -> list[dict]:
    """Introspection records, one per query: reference, every sampling
    location in normalized image coordinates, and the mixture weights."""
    locations = compute_sampling_locations(grid, shapes)
    q = grid.reference.shape[0]
    records = []
    for i in range(q):
        per_level = []
        for (xs, ys), (h, w) in zip(locations, shapes):
            per_level.append({
                "x": ((xs.data[i] + 0.5) / w).tolist(),
                "y": ((ys.data[i] + 0.5) / h).tolist(),
            })
        records.append({
            "reference": grid.reference.data[i].tolist(),
            "locations": per_level,
            "weights": grid.weights.data[i].tolist(),
        })
    return records
