"""Finite-difference verification of every differentiable operation.

Each named case builds a scalar function of one input tensor with fixed
random probes, then compares the analytic gradient against central
differences.  The full-model case perturbs every parameter tensor of a
tiny detector (a few entries each, deterministically chosen) through
the complete match-and-loss pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, MSDeformAttention, SingleScaleAttention
from .autodiff import Tensor
from .matching import HOITriplet, match_and_compute
from .model import ModelConfig, MSTRModel
from .nn import FFN, LayerNorm
from .pyramid import bilinear_gather, bilinear_gather_multihead

DEFAULT_THRESHOLD = 1e-4


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    passed: bool


def check_scalar_function(name: str, f: Callable[[Tensor], Tensor],
                          x: np.ndarray,
                          threshold: float = DEFAULT_THRESHOLD,
                          h: float = 1e-5) -> GradCheckReport:
    """Compare backward() against central differences for scalar f(x)."""
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    f(xt).backward()
    fd = ad.finite_diff_grad(f, Tensor(np.array(x, dtype=np.float64)), h=h)
    err = ad.relative_error(xt.grad, fd)
    return GradCheckReport(name=name, max_rel_error=err, passed=err <= threshold)


def _probe(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, np.ndarray]]:
    """(name, scalar function, input) for every differentiable op.

    Inputs avoid the kink points of relu/abs/min/max/clip so the
    central difference is valid at the probe location.
    """
    a = rng.normal(size=(3, 4)) * 0.8
    b = rng.normal(size=(3, 4)) * 0.8 + 3.0
    p3 = _probe(rng, (3, 4))
    p35 = _probe(rng, (3, 5))
    p43 = _probe(rng, (4, 3))
    p22 = _probe(rng, (2, 2))
    p4 = _probe(rng, (4,))
    pv3 = _probe(rng, (3,))
    p64 = _probe(rng, (6, 4))
    p234 = _probe(rng, (2, 3, 4))
    p233 = _probe(rng, (2, 3, 3))
    w = _probe(rng, (5, 4))
    bias5 = _probe(rng, (5,))
    mat = _probe(rng, (4, 5))
    batched = _probe(rng, (2, 5, 3))
    pos = np.abs(rng.normal(size=(3, 4))) + 0.5
    frac = rng.uniform(0.05, 0.95, size=(3, 4))
    away_from_kinks = rng.uniform(0.2, 1.5, size=(3, 4)) * np.where(
        rng.uniform(size=(3, 4)) < 0.5, -1.0, 1.0)

    feats = rng.normal(size=(12, 3))
    coords_x = rng.uniform(0.2, 2.6, size=6)
    coords_y = rng.uniform(0.2, 2.6, size=6)
    p63 = _probe(rng, (6, 3))
    mh_values = rng.normal(size=(12, 2, 3))
    mh_x = rng.uniform(0.2, 2.6, size=(2, 2, 2))
    mh_y = rng.uniform(0.2, 2.6, size=(2, 2, 2))
    p2223 = _probe(rng, (2, 2, 2, 3))

    cases = [
        ("add", lambda x: ((x + Tensor(b)) * p3).sum(), a),
        ("sub", lambda x: ((x - Tensor(b)) * p3).sum(), a),
        ("neg", lambda x: ((-x) * p3).sum(), a),
        ("mul", lambda x: ((x * Tensor(b)) * p3).sum(), a),
        ("div", lambda x: ((x / Tensor(b)) * p3).sum(), a),
        ("pow", lambda x: ((x ** 3.0) * p3).sum(), a),
        ("matmul", lambda x: ((x @ mat) * p35).sum(), a),
        ("matmul_batched", lambda x: ((x @ batched) * p233).sum(),
         rng.normal(size=(2, 3, 5))),
        ("reshape", lambda x: (x.reshape(4, 3) * p43).sum(), a),
        ("transpose", lambda x: (x.transpose(1, 0) * p43).sum(), a),
        ("getitem_slice", lambda x: (x[1:, :2] * p22).sum(), a),
        ("getitem_fancy",
         lambda x: (x[np.array([0, 2, 0])] * p3).sum(), a),
        ("sum_axis", lambda x: (x.sum(axis=0) * p4).sum(), a),
        ("mean", lambda x: (x.mean(axis=1) * pv3).sum(), a),
        ("exp", lambda x: (ad.exp(x) * p3).sum(), a),
        ("log", lambda x: (ad.log(x) * p3).sum(), pos),
        ("sqrt", lambda x: (ad.sqrt(x) * p3).sum(), pos),
        ("relu", lambda x: (ad.relu(x) * p3).sum(), away_from_kinks),
        ("absolute", lambda x: (ad.absolute(x) * p3).sum(), away_from_kinks),
        ("maximum", lambda x: (ad.maximum(x, Tensor(b * 0.1)) * p3).sum(),
         away_from_kinks),
        ("minimum", lambda x: (ad.minimum(x, Tensor(b * 0.1)) * p3).sum(),
         away_from_kinks),
        ("clip", lambda x: (ad.clip(x, -1.0, 1.0) * p3).sum(), away_from_kinks),
        ("sigmoid", lambda x: (ad.sigmoid(x) * p3).sum(), a),
        ("inverse_sigmoid", lambda x: (ad.inverse_sigmoid(x) * p3).sum(), frac),
        ("softmax", lambda x: (ad.softmax(x, axis=-1) * p3).sum(), a),
        ("concatenate",
         lambda x: (ad.concatenate([x, Tensor(b)], axis=0) * p64).sum(), a),
        ("stack",
         lambda x: (ad.stack([x, x * 2.0], axis=0) * p234).sum(), a),
        ("linear", lambda x: (ad.linear(x, w, bias5) * p35).sum(), a),
        ("bilinear_gather_features",
         lambda x: (bilinear_gather(x, 4, 3, Tensor(coords_x), Tensor(coords_y))
                    * p63).sum(), feats),
        ("bilinear_gather_coords",
         lambda x: (bilinear_gather(Tensor(feats), 4, 3, x[0], x[1])
                    * p63).sum(),
         np.stack([coords_x, coords_y])),
        ("bilinear_gather_multihead_values",
         lambda x: (bilinear_gather_multihead(x, 4, 3, Tensor(mh_x), Tensor(mh_y))
                    * p2223).sum(), mh_values),
        ("bilinear_gather_multihead_coords",
         lambda x: (bilinear_gather_multihead(Tensor(mh_values), 4, 3, x[0], x[1])
                    * p2223).sum(),
         np.stack([mh_x, mh_y])),
    ]
    cases.append(("layer_norm", _layer_norm_case(rng), rng.normal(size=(3, 6))))
    cases.append(("ffn", _ffn_case(rng), rng.normal(size=(3, 6))))
    cases.append(("single_scale_attention", _ss_attention_case(rng),
                  rng.normal(size=(3, 8))))
    cases.append(("ms_deform_attention", _deform_attention_case(rng),
                  rng.normal(size=(2, 8))))
    return cases


def _const(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _layer_norm_case(rng):
    norm = LayerNorm(6)
    norm.weight.data = rng.normal(size=6)
    norm.bias.data = rng.normal(size=6)
    probe = _const(rng, (3, 6))
    return lambda x: (norm(x) * probe).sum()


def _ffn_case(rng):
    ffn = FFN(6, 8, 4, 2, rng)
    probe = _const(rng, (3, 4))
    return lambda x: (ffn(x) * probe).sum()


def _ss_attention_case(rng):
    attn = SingleScaleAttention(AttentionConfig(2, 1, 1, 8), rng)
    keys = Tensor(rng.normal(size=(5, 8)))
    probe = _const(rng, (3, 8))
    return lambda x: (attn(x, keys) * probe).sum()


def _deform_attention_case(rng):
    cfg = AttentionConfig(2, 2, 2, 8)
    attn = MSDeformAttention(cfg, rng)
    # nonzero offset/weight projections so coordinate gradients are live
    attn.offset_proj.weight.data = rng.normal(size=attn.offset_proj.weight.shape) * 0.3
    attn.weight_proj.weight.data = rng.normal(size=attn.weight_proj.weight.shape) * 0.3
    values = [Tensor(rng.normal(size=(16, 8))), Tensor(rng.normal(size=(4, 8)))]
    shapes = [(4, 4), (2, 2)]
    reference = Tensor(rng.uniform(0.3, 0.7, size=(2, 2)))
    probe = _const(rng, (2, 8))
    return lambda x: (attn(x, reference, values, shapes) * probe).sum()


def run_op_checks(seed: int = 0,
                  threshold: float = DEFAULT_THRESHOLD) -> list[GradCheckReport]:
    rng = np.random.default_rng(seed)
    return [check_scalar_function(name, f, x, threshold)
            for name, f, x in op_cases(rng)]


TINY_MODEL = ModelConfig(channels=8, num_levels=2, num_encoder_layers=1,
                         num_decoder_layers=1, num_queries=2, num_heads=2,
                         num_points=1, ffn_hidden=16, head_hidden=16)


def _tiny_scene(rng: np.random.Generator, size: int = 32):
    image = rng.normal(size=(1, size, size)) * 0.5
    gt = HOITriplet(box_h=np.array([0.35, 0.4, 0.2, 0.3]),
                    box_o=np.array([0.6, 0.55, 0.15, 0.2]),
                    object_class=1, actions=np.array([1.0, 0.0, 1.0]))
    return image, [gt]


def check_full_model(seed: int = 0, threshold: float = DEFAULT_THRESHOLD,
                     entries_per_param: int = 4,
                     h: float = 1e-6) -> GradCheckReport:
    """End-to-end derivative check through backbone, encoder, decoder,
    heads, matching, and loss on one tiny scene.

    Every parameter tensor is probed at a deterministic sample of
    entries; the matched permutation is treated as part of the function,
    so probes stay small enough not to flip the assignment.

    Sampling projections are jittered away from initialization: encoder
    references land on integer pixel coordinates, and the integer radial
    bias would park every sample exactly on a bilinear cell boundary,
    where a central difference straddles two linear pieces.
    """
    rng = np.random.default_rng(seed)
    model = MSTRModel(TINY_MODEL, rng)
    for name, p in model.named_parameters():
        if name.endswith("offset_proj.bias"):
            p.data = p.data + rng.uniform(0.1, 0.35, size=p.data.shape)
        elif name.endswith(("offset_proj.weight", "weight_proj.weight")):
            p.data = rng.normal(size=p.data.shape) * 0.2
    image, gts = _tiny_scene(rng)

    def loss_value() -> Tensor:
        outputs = model(Tensor(image))
        total = None
        for pred in outputs:
            _, losses = match_and_compute(pred, gts)
            total = losses["total"] if total is None else total + losses["total"]
        return total

    loss_value().backward()
    worst = 0.0
    for name, p in model.named_parameters():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        base = p.data.copy()
        flat_size = base.size
        picks = np.linspace(0, flat_size - 1,
                            min(entries_per_param, flat_size)).astype(int)
        for i in picks:
            fd = 0.0
            for s, sign in ((h, 1.0), (-h, -1.0)):
                p.data = base.copy()
                p.data.reshape(-1)[i] += s
                fd += sign * loss_value().item()
            fd /= 2.0 * h
            p.data = base.copy()
            ref = analytic.reshape(-1)[i]
            err = abs(ref - fd) / max(abs(ref), abs(fd), 1.0)
            worst = max(worst, err)
    return GradCheckReport(name="full_model", max_rel_error=worst,
                           passed=worst <= threshold)


def run_all(seed: int = 0, threshold: float = DEFAULT_THRESHOLD,
            include_model: bool = True) -> list[GradCheckReport]:
    reports = run_op_checks(seed, threshold)
    if include_model:
        reports.append(check_full_model(seed, threshold))
    return reports
