"""Hungarian set matching and the L_loc + L_cls + L_act training loss.

Boxes are (cx, cy, w, h) in normalized image coordinates throughout.
Cost matrices are plain float arrays and are never differentiated; the
losses are tensor-valued and treat the assignment as a constant.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError

AREA_EPS = 1e-7
LOG_EPS = 1e-12


@dataclass
class HOITriplet:
    """One ground-truth interaction: human box, object box, object class,
    and a multi-hot action vector."""

    box_h: np.ndarray
    box_o: np.ndarray
    object_class: int
    actions: np.ndarray

    def __post_init__(self):
        self.box_h = np.asarray(self.box_h, dtype=np.float64)
        self.box_o = np.asarray(self.box_o, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)

    def validate(self) -> None:
        for box in (self.box_h, self.box_o):
            if box.shape != (4,) or box.min() < 0.0 or box.max() > 1.0:
                raise ValueError(f"box outside [0,1]: {box}")
        if not np.isin(self.actions, (0.0, 1.0)).all():
            raise ValueError("ground-truth actions must be 0/1")


@dataclass(frozen=True)
class LossWeights:
    """Term weights for both the matching cost and the loss."""

    l1: float = 5.0
    giou: float = 2.0
    cls: float = 1.0
    act: float = 1.0
    background_cls: float = 0.1


@dataclass
class Assignment:
    """A minimum-cost bijection: column chosen for each row, and its cost."""

    permutation: np.ndarray
    total_cost: float


def _corners(boxes: np.ndarray) -> tuple[np.ndarray, ...]:
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def giou(a: np.ndarray, b: np.ndarray) -> float:
    """Generalized IoU of two boxes: IoU minus the hull area not covered
    by the union, as a fraction of the hull.  Lives in (-1, 1]."""
    return float(giou_matrix(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, G) pairwise generalized IoU between two box sets."""
    ax1, ay1, ax2, ay2 = (c[:, None] for c in _corners(a))
    bx1, by1, bx2, by2 = _corners(b)
    iw = np.maximum(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0)
    ih = np.maximum(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = ((np.maximum(ax2, bx2) - np.minimum(ax1, bx1))
            * (np.maximum(ay2, by2) - np.minimum(ay1, by1)))
    return inter / (union + AREA_EPS) - (hull - union) / (hull + AREA_EPS)


def giou_pairs(pred: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise generalized IoU of an (N, 4) prediction tensor against an
    (N, 4) constant target, differentiable in the predictions."""
    t = Tensor(np.asarray(target, dtype=np.float64))
    px1 = pred[:, 0] - pred[:, 2] * 0.5
    py1 = pred[:, 1] - pred[:, 3] * 0.5
    px2 = pred[:, 0] + pred[:, 2] * 0.5
    py2 = pred[:, 1] + pred[:, 3] * 0.5
    tx1, ty1, tx2, ty2 = (t[:, 0] - t[:, 2] * 0.5, t[:, 1] - t[:, 3] * 0.5,
                          t[:, 0] + t[:, 2] * 0.5, t[:, 1] + t[:, 3] * 0.5)
    iw = ad.relu(ad.minimum(px2, tx2) - ad.maximum(px1, tx1))
    ih = ad.relu(ad.minimum(py2, ty2) - ad.maximum(py1, ty1))
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (tx2 - tx1) * (ty2 - ty1) - inter
    hull = ((ad.maximum(px2, tx2) - ad.minimum(px1, tx1))
            * (ad.maximum(py2, ty2) - ad.minimum(py1, ty1)))
    return inter / (union + AREA_EPS) - (hull - union) / (hull + AREA_EPS)


def _bce(target: np.ndarray, prob: np.ndarray) -> np.ndarray:
    p = np.clip(prob, LOG_EPS, 1.0 - LOG_EPS)
    return -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))


def bce_tensor(target: np.ndarray, prob: Tensor) -> Tensor:
    """Elementwise binary cross-entropy of probabilities against a 0/1
    constant target, with the log arguments floored for stability."""
    t = np.asarray(target, dtype=np.float64)
    safe = ad.clip(prob, LOG_EPS, 1.0 - LOG_EPS)
    return -(Tensor(t) * ad.log(safe) + Tensor(1.0 - t) * ad.log(1.0 - safe))


def match_cost(gt: HOITriplet, pred_box_h: np.ndarray, pred_box_o: np.ndarray,
               pred_cls: np.ndarray, pred_act: np.ndarray,
               weights: LossWeights = LossWeights()) -> float:
    """Pairwise cost mirroring the loss terms: weighted box L1 and gIoU
    for both entities, the miss probability of the true object class,
    and the mean action BCE."""
    l1 = (np.abs(gt.box_h - pred_box_h).sum() + np.abs(gt.box_o - pred_box_o).sum())
    g = 2.0 - giou(gt.box_h, pred_box_h) - giou(gt.box_o, pred_box_o)
    cls_term = 1.0 - pred_cls[gt.object_class]
    act_term = _bce(gt.actions, pred_act).mean()
    return float(weights.l1 * l1 + weights.giou * g + weights.cls * cls_term
                 + weights.act * act_term)


def build_cost_matrix(pred, gts: list[HOITriplet],
                      weights: LossWeights = LossWeights()) -> np.ndarray:
    """K x K cost matrix: rows are queries, the first G columns real
    ground truth, the rest no-interaction padding at constant zero cost
    (a shared constant cannot change which real matches win)."""
    k = pred.boxes_h.shape[0]
    cost = np.zeros((k, k))
    if not gts:
        return cost
    gt_h = np.stack([g.box_h for g in gts])
    gt_o = np.stack([g.box_o for g in gts])
    ph, po = pred.boxes_h.data, pred.boxes_o.data
    l1 = (np.abs(ph[:, None, :] - gt_h[None]).sum(-1)
          + np.abs(po[:, None, :] - gt_o[None]).sum(-1))
    g = 2.0 - giou_matrix(ph, gt_h) - giou_matrix(po, gt_o)
    cls_term = 1.0 - pred.cls.data[:, [gt.object_class for gt in gts]]
    acts = np.stack([gt.actions for gt in gts])
    act_term = _bce(acts[None], pred.act.data[:, None, :]).mean(-1)
    cost[:, :len(gts)] = (weights.l1 * l1 + weights.giou * g
                          + weights.cls * cls_term + weights.act * act_term)
    if not np.isfinite(cost).all():
        raise NumericError("non-finite matching cost; the model emitted "
                           "NaN or inf predictions")
    return cost


def hungarian_match(cost: np.ndarray) -> Assignment:
    """Minimum-cost assignment in O(K^3), ties broken toward the
    lexicographically smallest permutation.

    The potentials method produces one optimal assignment plus dual
    variables; edges with zero reduced cost are exactly those usable by
    some optimal assignment, so the tie-break re-matches greedily inside
    that subgraph, row by row, keeping feasibility via augmenting paths.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix must be finite")
    n = c.shape[0]
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    col_row = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        col_row[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            reduced = c[i0 - 1, :] - u[i0] - v[1:]
            open_cols = ~used[1:]
            better = open_cols & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            open_idx = np.nonzero(open_cols)[0]
            j1 = open_idx[np.argmin(minv[1:][open_idx])] + 1
            delta = minv[j1]
            u[col_row[used]] += delta
            v[used] -= delta
            minv[1:][open_cols] -= delta
            j0 = j1
            if col_row[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1
    perm = np.zeros(n, dtype=np.int64)
    perm[col_row[1:] - 1] = np.arange(n)
    tol = 1e-9 * (1.0 + np.abs(c).max())
    admissible = np.abs(c - (u[1:, None] + v[None, 1:])) <= tol
    refined = _lex_smallest_matching(admissible, perm)
    base_cost = float(c[np.arange(n), perm].sum())
    refined_cost = float(c[np.arange(n), refined].sum())
    if refined_cost <= base_cost + 1e-12 * (1.0 + abs(base_cost)):
        return Assignment(refined, refined_cost)
    return Assignment(perm, base_cost)


def _lex_smallest_matching(admissible: np.ndarray, initial: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching within an admissible
    edge set, starting from a known perfect matching."""
    n = len(initial)
    col_of = initial.copy()
    row_of = np.empty(n, dtype=np.int64)
    row_of[initial] = np.arange(n)
    locked_cols = np.zeros(n, dtype=bool)

    def augment(row: int, visited: np.ndarray) -> bool:
        for j in np.nonzero(admissible[row] & ~locked_cols & ~visited)[0]:
            visited[j] = True
            owner = row_of[j]
            if owner < 0 or augment(owner, visited):
                col_of[row] = j
                row_of[j] = row
                return True
        return False

    for i in range(n):
        current = col_of[i]
        for j in np.nonzero(admissible[i] & ~locked_cols)[0]:
            if j == current:
                break
            displaced = row_of[j]
            col_of[i], row_of[j] = j, i
            row_of[current] = -1
            # the forced column stays off-limits while rehoming the loser
            visited = np.zeros(n, dtype=bool)
            visited[j] = True
            if augment(displaced, visited):
                break
            col_of[i], row_of[j] = current, displaced
            row_of[current] = i
        locked_cols[col_of[i]] = True
    return col_of


def brute_force_match(cost: np.ndarray) -> Assignment:
    """Exhaustive minimum over all permutations; the test oracle for
    small K.  Returns the lexicographically smallest minimizer."""
    n = cost.shape[0]
    best: tuple[float, tuple[int, ...]] | None = None
    for perm in itertools.permutations(range(n)):
        total = float(cost[np.arange(n), perm].sum())
        if best is None or total < best[0] - 1e-12 or (
                abs(total - best[0]) <= 1e-12 and perm < best[1]):
            best = (total, perm)
    return Assignment(np.array(best[1], dtype=np.int64), best[0])


def compute_losses(pred, gts: list[HOITriplet], assignment: Assignment,
                   weights: LossWeights = LossWeights()) -> dict[str, Tensor]:
    """Loss components under a fixed assignment.

    Matched rows pay box L1, gIoU, class BCE, and action BCE; rows
    assigned to padding pay only a down-weighted class BCE toward the
    all-background target.
    """
    perm = assignment.permutation
    k = pred.boxes_h.shape[0]
    if sorted(perm.tolist()) != list(range(k)):
        raise ValueError("assignment is not a permutation of the queries")
    num_classes = pred.cls.shape[1]
    matched_rows = np.nonzero(perm < len(gts))[0]
    zero = Tensor(0.0)
    loc = zero
    act = zero
    cls_targets = np.zeros((k, num_classes))
    cls_weights = np.full(k, weights.background_cls)
    if len(matched_rows):
        order = matched_rows[np.argsort(perm[matched_rows])]
        gt_sorted = [gts[perm[i]] for i in order]
        gt_h = np.stack([g.box_h for g in gt_sorted])
        gt_o = np.stack([g.box_o for g in gt_sorted])
        ph = pred.boxes_h[order]
        po = pred.boxes_o[order]
        l1 = (ad.absolute(ph - Tensor(gt_h)).sum()
              + ad.absolute(po - Tensor(gt_o)).sum())
        g = ((1.0 - giou_pairs(ph, gt_h)).sum()
             + (1.0 - giou_pairs(po, gt_o)).sum())
        loc = weights.l1 * l1 + weights.giou * g
        acts = np.stack([g_.actions for g_ in gt_sorted])
        act = weights.act * bce_tensor(acts, pred.act[order]).mean(axis=-1).sum()
        for i in order:
            cls_targets[i, gts[perm[i]].object_class] = 1.0
        cls_weights[order] = 1.0
    cls = (bce_tensor(cls_targets, pred.cls).mean(axis=-1)
           * Tensor(cls_weights)).sum() * weights.cls
    total = loc + cls + act
    return {"loc": loc, "cls": cls, "act": act, "total": total}


def match_and_compute(pred, gts: list[HOITriplet],
                      weights: LossWeights = LossWeights()) -> tuple[Assignment, dict[str, Tensor]]:
    assignment = hungarian_match(build_cost_matrix(pred, gts, weights))
    return assignment, compute_losses(pred, gts, assignment, weights)
