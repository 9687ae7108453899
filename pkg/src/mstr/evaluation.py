"""Detection scoring: triplet matching, average precision over
(action, object-class) pairs, and AP reports restricted to scene bins.

A detection is correct for a ground truth when both boxes reach IoU 0.5,
the object class matches, and the scored action is among the ground
truth's actions.  Matching is greedy highest-score-first with each
ground truth claimed at most once; AP integrates the precision-recall
curve with all-points interpolation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .matching import HOITriplet

IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class DetectionRecord:
    """One scored triplet.  The action vector is one-hot at the scored
    action, so a detection enters exactly one (action, class) pool."""

    scene_id: int
    triplet: HOITriplet
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0,1]: {self.score}")

    @property
    def action(self) -> int:
        return int(np.argmax(self.triplet.actions))


@dataclass(frozen=True)
class GroundTruthRecord:
    scene_id: int
    triplet: HOITriplet
    bins: Mapping[str, str] = field(default_factory=dict)


@dataclass
class APResult:
    per_class: dict[tuple[int, int], float]
    mean_ap: float
    per_bin: dict[str, dict[str, float]]


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Plain intersection-over-union of two (cx, cy, w, h) boxes.

    Areas come from the same corner coordinates as the intersection so
    that identical boxes give exactly 1.0.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ax1, ax2 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay1, ay2 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx1, bx2 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by1, by2 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
    ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return float(inter / union) if union > 0.0 else 0.0


def triplet_match(det: DetectionRecord, gt: GroundTruthRecord) -> bool:
    """Both boxes at IoU >= 0.5, same class, scored action in gt actions."""
    if det.scene_id != gt.scene_id:
        return False
    if det.triplet.object_class != gt.triplet.object_class:
        return False
    if not gt.triplet.actions[det.action]:
        return False
    return (iou(det.triplet.box_h, gt.triplet.box_h) >= IOU_THRESHOLD
            and iou(det.triplet.box_o, gt.triplet.box_o) >= IOU_THRESHOLD)


def _ranked(dets: list[DetectionRecord]) -> list[int]:
    """Detection indices sorted by score descending, ties by index."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def greedy_match(dets: list[DetectionRecord],
                 gts: list[GroundTruthRecord]) -> list[int | None]:
    """Matched gt index per detection, highest score first.

    Among eligible unmatched ground truths a detection takes the one
    with the largest min(human IoU, object IoU), ties broken by lowest
    gt index.
    """
    matched: list[int | None] = [None] * len(dets)
    taken = [False] * len(gts)
    for i in _ranked(dets):
        best, best_quality = None, -1.0
        for j, gt in enumerate(gts):
            if taken[j] or not triplet_match(dets[i], gt):
                continue
            quality = min(iou(dets[i].triplet.box_h, gt.triplet.box_h),
                          iou(dets[i].triplet.box_o, gt.triplet.box_o))
            if quality > best_quality:
                best, best_quality = j, quality
        if best is not None:
            matched[i] = best
            taken[best] = True
    return matched


def _ap_from_flags(flags: np.ndarray, num_gt: int) -> float:
    """All-points interpolated AP from rank-ordered TP flags."""
    if num_gt == 0 or flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # interpolated precision is the running max from the right
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev = 0.0
    ap = 0.0
    for r, p in zip(recall, interp):
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return float(ap)


def average_precision(dets: list[DetectionRecord],
                      gts: list[GroundTruthRecord]) -> float:
    """AP of one detection pool against one ground-truth pool."""
    if not gts:
        return 0.0
    matched = greedy_match(dets, gts)
    order = _ranked(dets)
    flags = np.array([1.0 if matched[i] is not None else 0.0 for i in order])
    return _ap_from_flags(flags, len(gts))


def exhaustive_average_precision(dets: list[DetectionRecord],
                                 gts: list[GroundTruthRecord]) -> float:
    """Brute-force oracle: enumerate every injective assignment of
    detections to eligible ground truths and keep the one whose TP flags
    are lexicographically largest in rank order.  The winning flags are
    scored by the same curve integration as the greedy path, so any
    disagreement is a matching bug, not float noise.  Exponential in the
    number of detections; use only on tiny cases.
    """
    if not gts:
        return 0.0
    order = _ranked(dets)
    eligible = [[j for j, gt in enumerate(gts) if triplet_match(dets[i], gt)]
                for i in order]
    best_flags: tuple[int, ...] | None = None

    def assign(pos: int, used: set[int], flags: tuple[int, ...]):
        nonlocal best_flags
        if pos == len(order):
            if best_flags is None or flags > best_flags:
                best_flags = flags
            return
        for j in eligible[pos]:
            if j not in used:
                assign(pos + 1, used | {j}, flags + (1,))
        assign(pos + 1, used, flags + (0,))

    assign(0, set(), ())
    assert best_flags is not None
    return _ap_from_flags(np.array(best_flags, dtype=np.float64), len(gts))


def _group_key(action: int, object_class: int) -> tuple[int, int]:
    return (action, object_class)


def _gt_groups(gts: list[GroundTruthRecord]) -> dict[tuple[int, int], list[GroundTruthRecord]]:
    groups: dict[tuple[int, int], list[GroundTruthRecord]] = {}
    for gt in gts:
        for action, flag in enumerate(gt.triplet.actions):
            if flag:
                key = _group_key(action, gt.triplet.object_class)
                groups.setdefault(key, []).append(gt)
    return groups


def evaluate(dets: list[DetectionRecord],
             gts: list[GroundTruthRecord]) -> APResult:
    """Per-(action, class) AP and their mean; classes without ground
    truth are excluded.  For every bin axis on the ground-truth records,
    each bin's AP is the mean over classes of the bin-restricted AP:
    matching runs against all ground truths, and detections matched out
    of bin are ignored while unmatched ones stay false positives."""
    gt_groups = _gt_groups(gts)
    det_groups: dict[tuple[int, int], list[DetectionRecord]] = {}
    for det in dets:
        key = _group_key(det.action, det.triplet.object_class)
        det_groups.setdefault(key, []).append(det)

    per_class = {}
    bin_aps: dict[str, dict[str, list[float]]] = {}
    for key in sorted(gt_groups):
        group_gts = gt_groups[key]
        group_dets = det_groups.get(key, [])
        matched = greedy_match(group_dets, group_gts)
        order = _ranked(group_dets)
        flags = np.array([1.0 if matched[i] is not None else 0.0
                          for i in order])
        per_class[key] = _ap_from_flags(flags, len(group_gts))
        for axis in sorted({axis for gt in group_gts for axis in gt.bins}):
            labels = sorted({gt.bins[axis] for gt in group_gts
                             if axis in gt.bins})
            for label in labels:
                in_bin = [gt.bins.get(axis) == label for gt in group_gts]
                kept = []
                for i in order:
                    if matched[i] is None:
                        kept.append(0.0)
                    elif in_bin[matched[i]]:
                        kept.append(1.0)
                ap = _ap_from_flags(np.array(kept), sum(in_bin))
                bin_aps.setdefault(axis, {}).setdefault(label, []).append(ap)

    per_bin = {axis: {label: float(np.mean(values))
                      for label, values in sorted(buckets.items())}
               for axis, buckets in bin_aps.items()}
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return APResult(per_class=per_class, mean_ap=mean_ap, per_bin=per_bin)


def detections_from_predictions(scene_id: int, boxes_h: np.ndarray,
                                boxes_o: np.ndarray, cls: np.ndarray,
                                act: np.ndarray) -> list[DetectionRecord]:
    """One detection per query: the predicted class is the argmax class
    probability, the score is the best action-class product."""
    out = []
    for q in range(boxes_h.shape[0]):
        c = int(np.argmax(cls[q]))
        products = act[q] * cls[q, c]
        a = int(np.argmax(products))
        actions = np.zeros_like(act[q])
        actions[a] = 1.0
        triplet = HOITriplet(box_h=boxes_h[q].copy(), box_o=boxes_o[q].copy(),
                             object_class=c, actions=actions)
        out.append(DetectionRecord(scene_id=scene_id, triplet=triplet,
                                   score=float(products[a])))
    return out


# -- report files -----------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def write_class_ap_csv(path, result: APResult) -> None:
    """CSV of (action, object class, AP) rows plus a final mAP row."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["action", "object_class", "ap"])
        for (action, object_class), ap in sorted(result.per_class.items()):
            writer.writerow([action, object_class, _fmt(ap)])
        writer.writerow(["mAP", "", _fmt(result.mean_ap)])


def write_binned_ap_csv(path, result: APResult) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["axis", "bin", "ap"])
        for axis in sorted(result.per_bin):
            for label, ap in sorted(result.per_bin[axis].items()):
                writer.writerow([axis, label, _fmt(ap)])


def write_detections(path, dets: Iterable[DetectionRecord]) -> None:
    """One JSON record per line: scene, class, action, boxes, score."""
    with open(path, "w") as f:
        for det in dets:
            record = {
                "scene_id": det.scene_id,
                "object_class": det.triplet.object_class,
                "action": det.action,
                "box_h": [round(v, 12) for v in det.triplet.box_h.tolist()],
                "box_o": [round(v, 12) for v in det.triplet.box_o.tolist()],
                "score": round(det.score, 12),
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")
