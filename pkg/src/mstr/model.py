"""The full detector: deformable encoder over the pyramid, a query
decoder that tracks human/object/context semantics, and the box, class,
and action heads.

Decoder variants share one block layout (self-attention, cross-attention
with residual, feed-forward, post-norms) and differ only in how the
per-semantic streams are merged and anchored, so ablation comparisons
measure the mechanism and not the plumbing.  Reference points are
predicted once from the initial query embeddings and stay fixed across
layers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .attention import (AttentionConfig, DualEntityAttention,
                        EntityConditionedContextAttention, MSDeformAttention,
                        SingleScaleAttention)
from .autodiff import Tensor
from .errors import ConfigurationError
from .nn import FFN, LayerNorm, Linear, Module, Parameter
from .pyramid import Backbone, BackboneConfig


class DecoderVariant(enum.Enum):
    MSTR_MERGE_OUTPUT = "mstr_merge_output"
    MERGE_INPUT = "merge_input"
    DOUBLE_STREAM = "double_stream"
    NAIVE_DEFORMABLE = "naive_deformable"
    STANDARD_CONTEXT = "standard_context"


_MERGE_FAMILY = (DecoderVariant.MSTR_MERGE_OUTPUT, DecoderVariant.MERGE_INPUT,
                 DecoderVariant.STANDARD_CONTEXT)


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    num_levels: int = 3
    num_encoder_layers: int = 1
    num_decoder_layers: int = 2
    num_queries: int = 8
    num_heads: int = 2
    num_points: int = 2
    num_object_classes: int = 3
    num_actions: int = 3
    ffn_hidden: int = 64
    head_hidden: int = 64
    in_channels: int = 1
    base_stride: int = 4
    variant: DecoderVariant = DecoderVariant.MSTR_MERGE_OUTPUT
    use_deformable: bool = True
    use_dual_entity: bool = True
    use_context: bool = True

    def validate(self) -> None:
        if self.use_dual_entity and not self.use_deformable:
            raise ConfigurationError("dual-entity attention requires deformable "
                                     "attention (DE requires DA)")
        if self.use_context and not self.use_dual_entity:
            raise ConfigurationError("entity-conditioned context requires "
                                     "dual-entity attention (EC requires DE)")
        naive = self.variant is DecoderVariant.NAIVE_DEFORMABLE
        if self.use_dual_entity == naive:
            raise ConfigurationError(
                "dual-entity toggle must match the variant: NAIVE_DEFORMABLE "
                "is the single-reference decoder")
        if self.variant is DecoderVariant.DOUBLE_STREAM and self.use_context:
            raise ConfigurationError("DOUBLE_STREAM has no merged stream to "
                                     "carry a context semantic (disable EC)")
        if self.variant is DecoderVariant.STANDARD_CONTEXT and not self.use_context:
            raise ConfigurationError("STANDARD_CONTEXT only changes the context "
                                     "anchor; it needs EC enabled")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.num_heads, self.num_points, self.num_levels,
                               self.channels)

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.in_channels, self.channels, self.num_levels,
                              self.base_stride)


def paper_scale(config: ModelConfig) -> ModelConfig:
    """The full-size head/point/query counts, for configuration only."""
    return replace(config, num_heads=8, num_points=4, num_queries=100)


@dataclass
class PredictionSet:
    """Per-query outputs plus the reference points that anchored them."""

    boxes_h: Tensor
    boxes_o: Tensor
    cls: Tensor
    act: Tensor
    ref_h: Tensor
    ref_o: Tensor
    ref_c: Tensor | None


def token_references(shapes: list[tuple[int, int]]) -> np.ndarray:
    """Normalized center coordinates of every pyramid token, level-major."""
    refs = []
    for h, w in shapes:
        xs = (np.arange(w) + 0.5) / w
        ys = (np.arange(h) + 0.5) / h
        gx, gy = np.meshgrid(xs, ys)
        refs.append(np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1))
    return np.concatenate(refs, axis=0)


def split_levels(tokens: Tensor, shapes: list[tuple[int, int]]) -> list[Tensor]:
    out = []
    offset = 0
    for h, w in shapes:
        out.append(tokens[offset:offset + h * w])
        offset += h * w
    return out


class EncoderLayer(Module):
    """Self-attention over all pyramid tokens plus a feed-forward block,
    both with residuals and post-normalization."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        cfg = config.attention
        if config.use_deformable:
            self.attn = MSDeformAttention(cfg, rng)
        else:
            self.attn = SingleScaleAttention(cfg, rng)
        self.deformable = config.use_deformable
        self.norm_attn = LayerNorm(config.channels)
        self.norm_ffn = LayerNorm(config.channels)
        self.ffn = FFN(config.channels, config.ffn_hidden, config.channels, 2, rng)

    def forward(self, tokens: Tensor, references: Tensor,
                shapes: list[tuple[int, int]]) -> Tensor:
        if self.deformable:
            a = self.attn(tokens, references, split_levels(tokens, shapes), shapes)
        else:
            a = self.attn(tokens, tokens)
        x = self.norm_attn(tokens + a)
        return self.norm_ffn(x + self.ffn(x))


class DecoderLayer(Module):
    """One decoder block in any variant.

    Merge-family layers run (shared-weight) self-attention per semantic,
    merge, then cross-attend each semantic from the merged query.
    DOUBLE_STREAM keeps fully separate human/object stacks, and
    NAIVE_DEFORMABLE is the single-stream baseline.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        c = config.channels
        cfg = config.attention
        variant = config.variant
        if variant in _MERGE_FAMILY:
            self.self_attn = SingleScaleAttention(cfg, rng)
            self.cross = DualEntityAttention(cfg, rng)
            self.norm_merge = LayerNorm(c)
            self.norm_h = LayerNorm(c)
            self.norm_o = LayerNorm(c)
            self.ffn = FFN(c, config.ffn_hidden, c, 2, rng)
            self.norm_ffn_h = LayerNorm(c)
            self.norm_ffn_o = LayerNorm(c)
            if config.use_context:
                self.context = EntityConditionedContextAttention(cfg, rng)
                self.norm_c = LayerNorm(c)
                self.norm_ffn_c = LayerNorm(c)
        elif variant is DecoderVariant.DOUBLE_STREAM:
            self.self_attn_h = SingleScaleAttention(cfg, rng)
            self.self_attn_o = SingleScaleAttention(cfg, rng)
            self.cross = DualEntityAttention(cfg, rng)
            self.norm_sa_h = LayerNorm(c)
            self.norm_sa_o = LayerNorm(c)
            self.norm_h = LayerNorm(c)
            self.norm_o = LayerNorm(c)
            self.ffn_h = FFN(c, config.ffn_hidden, c, 2, rng)
            self.ffn_o = FFN(c, config.ffn_hidden, c, 2, rng)
            self.norm_ffn_h = LayerNorm(c)
            self.norm_ffn_o = LayerNorm(c)
        else:
            self.self_attn = SingleScaleAttention(cfg, rng)
            if config.use_deformable:
                self.cross_attn = MSDeformAttention(cfg, rng)
            else:
                self.cross_attn = SingleScaleAttention(cfg, rng)
            self.norm_sa = LayerNorm(c)
            self.norm_x = LayerNorm(c)
            self.ffn = FFN(c, config.ffn_hidden, c, 2, rng)
            self.norm_ffn = LayerNorm(c)

    def forward(self, semantics: dict[str, Tensor], refs: dict[str, Tensor],
                values: list[Tensor], shapes: list[tuple[int, int]],
                collect: dict | None = None) -> dict[str, Tensor]:
        variant = self.config.variant
        if variant is DecoderVariant.NAIVE_DEFORMABLE:
            return self._forward_single(semantics, refs, values, shapes, collect)
        if variant is DecoderVariant.DOUBLE_STREAM:
            return self._forward_double(semantics, refs, values, shapes, collect)
        return self._forward_merge(semantics, refs, values, shapes, collect)

    def _forward_merge(self, semantics, refs, values, shapes, collect):
        merged_in = None
        if self.config.variant is DecoderVariant.MERGE_INPUT:
            for f in semantics.values():
                merged_in = f if merged_in is None else merged_in + f
            z = merged_in + self.self_attn(merged_in, merged_in)
        else:
            z = None
            for f in semantics.values():
                s = f + self.self_attn(f, f)
                z = s if z is None else z + s
        z = self.norm_merge(z)
        z_h = self.cross.proj_h(z)
        z_o = self.cross.proj_o(z)
        f_h = self.norm_h(z + self.cross.attn_h(z_h, refs["h"], values, shapes))
        f_o = self.norm_o(z + self.cross.attn_o(z_o, refs["o"], values, shapes))
        out = {
            "h": self.norm_ffn_h(f_h + self.ffn(f_h)),
            "o": self.norm_ffn_o(f_o + self.ffn(f_o)),
        }
        if self.config.use_context:
            f_c = self.norm_c(z + self.context.attn_c(z, refs["c"], values, shapes))
            out["c"] = self.norm_ffn_c(f_c + self.ffn(f_c))
        if collect is not None:
            collect["h"] = self.cross.attn_h.make_grid(z_h, refs["h"])
            collect["o"] = self.cross.attn_o.make_grid(z_o, refs["o"])
            if self.config.use_context:
                collect["c"] = self.context.attn_c.make_grid(z, refs["c"])
        return out

    def _forward_double(self, semantics, refs, values, shapes, collect):
        out = {}
        paths = (("h", self.self_attn_h, self.cross.proj_h, self.cross.attn_h,
                  self.norm_sa_h, self.norm_h, self.ffn_h, self.norm_ffn_h),
                 ("o", self.self_attn_o, self.cross.proj_o, self.cross.attn_o,
                  self.norm_sa_o, self.norm_o, self.ffn_o, self.norm_ffn_o))
        for name, sa, proj, attn, norm_sa, norm_x, ffn, norm_ffn in paths:
            f = semantics[name]
            z = norm_sa(f + sa(f, f))
            zp = proj(z)
            fx = norm_x(z + attn(zp, refs[name], values, shapes))
            out[name] = norm_ffn(fx + ffn(fx))
            if collect is not None:
                collect[name] = attn.make_grid(zp, refs[name])
        return out

    def _forward_single(self, semantics, refs, values, shapes, collect):
        f = semantics["q"]
        z = self.norm_sa(f + self.self_attn(f, f))
        if self.config.use_deformable:
            a = self.cross_attn(z, refs["q"], values, shapes)
            if collect is not None:
                collect["q"] = self.cross_attn.make_grid(z, refs["q"])
        else:
            a = self.cross_attn(z, ad.concatenate(values, axis=0))
        fx = self.norm_x(z + a)
        return {"q": self.norm_ffn(fx + self.ffn(fx))}


class PredictionHeads(Module):
    """Box, class, and action heads over the final semantic features.

    Box centers are offsets in inverse-sigmoid space from the reference
    points, so zero head output reproduces the references exactly;
    widths and heights pass through a sigmoid to stay in (0, 1).
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = config.channels
        self.hbox = FFN(c, config.head_hidden, 4, 3, rng)
        self.obox = FFN(c, config.head_hidden, 4, 3, rng)
        self.cls = FFN(c, config.head_hidden, config.num_object_classes, 1, rng)
        self.act = FFN(c, config.head_hidden, config.num_actions, 1, rng)
        # start every box at its reference with a small prior size, so the
        # first matching steps are not dominated by huge box mismatches
        for head in (self.hbox, self.obox):
            last = head.layers[-1]
            last.weight.data[:] = 0.0
            last.bias.data[:] = (0.0, 0.0, -2.0, -2.0)

    @staticmethod
    def _box(raw: Tensor, reference: Tensor) -> Tensor:
        center = ad.sigmoid(raw[:, :2] + ad.inverse_sigmoid(reference))
        return ad.concatenate([center, ad.sigmoid(raw[:, 2:])], axis=1)

    def forward(self, f_h: Tensor, f_o: Tensor, f_c: Tensor,
                ref_h: Tensor, ref_o: Tensor,
                ref_c: Tensor | None = None) -> PredictionSet:
        return PredictionSet(
            boxes_h=self._box(self.hbox(f_h), ref_h),
            boxes_o=self._box(self.obox(f_o), ref_o),
            cls=ad.sigmoid(self.cls(f_o)),
            act=ad.sigmoid(self.act(f_c)),
            ref_h=ref_h, ref_o=ref_o, ref_c=ref_c)


class MSTRModel(Module):
    """Backbone, encoder, variant decoder, and heads in one module."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.backbone = Backbone(config.backbone, rng)
        self.encoder_layers = [EncoderLayer(config, rng)
                               for _ in range(config.num_encoder_layers)]
        self.query_embed = Parameter(rng.normal(size=(config.num_queries,
                                                      config.channels)))
        c = config.channels
        if config.variant is DecoderVariant.NAIVE_DEFORMABLE:
            self.ref_head = Linear(c, 2, rng)
        else:
            self.query_proj_h = Linear(c, c, rng)
            self.query_proj_o = Linear(c, c, rng)
            self.ref_head_h = Linear(c, 2, rng)
            self.ref_head_o = Linear(c, 2, rng)
            if config.variant is DecoderVariant.STANDARD_CONTEXT:
                self.ref_head_c = Linear(c, 2, rng)
        self.decoder_layers = [DecoderLayer(config, rng)
                               for _ in range(config.num_decoder_layers)]
        self.heads = PredictionHeads(config, rng)

    def encode(self, tokens: list[Tensor],
               shapes: list[tuple[int, int]]) -> list[Tensor]:
        x = ad.concatenate(tokens, axis=0) if len(tokens) > 1 else tokens[0]
        references = Tensor(token_references(shapes))
        for layer in self.encoder_layers:
            x = layer(x, references, shapes)
        return split_levels(x, shapes)

    def _init_queries(self) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        z_q = self.query_embed
        if self.config.variant is DecoderVariant.NAIVE_DEFORMABLE:
            r = ad.sigmoid(self.ref_head(z_q))
            return {"q": z_q}, {"q": r}
        z_h = self.query_proj_h(z_q)
        z_o = self.query_proj_o(z_q)
        refs = {"h": ad.sigmoid(self.ref_head_h(z_h)),
                "o": ad.sigmoid(self.ref_head_o(z_o))}
        semantics = {"h": z_h, "o": z_o}
        if self.config.use_context:
            semantics["c"] = z_q
            if self.config.variant is DecoderVariant.STANDARD_CONTEXT:
                refs["c"] = ad.sigmoid(self.ref_head_c(z_q))
            else:
                refs["c"] = EntityConditionedContextAttention.midpoint(
                    refs["h"], refs["o"])
        return semantics, refs

    def _predict(self, semantics: dict[str, Tensor],
                 refs: dict[str, Tensor]) -> PredictionSet:
        if self.config.variant is DecoderVariant.NAIVE_DEFORMABLE:
            f = semantics["q"]
            return self.heads(f, f, f, refs["q"], refs["q"], refs["q"])
        if "c" in semantics:
            f_c, ref_c = semantics["c"], refs["c"]
        else:
            f_c, ref_c = (semantics["h"] + semantics["o"]) * 0.5, None
        return self.heads(semantics["h"], semantics["o"], f_c,
                          refs["h"], refs["o"], ref_c)

    def forward(self, image: Tensor | np.ndarray,
                collect: dict | None = None) -> list[PredictionSet]:
        """Predictions from every decoder layer; the last entry is the
        model output and the rest supervise auxiliary losses."""
        if not isinstance(image, Tensor):
            image = Tensor(np.asarray(image, dtype=np.float64))
        pyramid = self.backbone(image)
        shapes = [(lev.height, lev.width) for lev in pyramid.levels]
        values = self.encode(pyramid.encoder_inputs(), shapes)
        semantics, refs = self._init_queries()
        outputs = []
        for i, layer in enumerate(self.decoder_layers):
            grids = collect if (collect is not None
                                and i == len(self.decoder_layers) - 1) else None
            semantics = layer(semantics, refs, values, shapes, collect=grids)
            outputs.append(self._predict(semantics, refs))
        if collect is not None:
            collect["refs"] = {k: v.data.copy() for k, v in refs.items()}
        return outputs
