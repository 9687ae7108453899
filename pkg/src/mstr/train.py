"""Toy-scale training: overfit a small scene set with AdamW, log loss
components and train-set mAP, and checkpoint the result.

Batches walk the scene list round-robin so a run is a pure function of
(model seed, scene set, hyperparameters).  Auxiliary decoder layers are
matched and scored independently and their losses summed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import NumericError
from .evaluation import (DetectionRecord, GroundTruthRecord,
                         detections_from_predictions, evaluate)
from .matching import LossWeights, match_and_compute
from .model import MSTRModel
from .nn import save_checkpoint
from .optim import AdamW, clip_grad_norm
from .scenes import Scene


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-3
    lr_min: float = 2e-4
    decay_steps: int = 600
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    eval_every: int = 100
    checkpoint_every: int = 500
    target_map: float | None = 0.95
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def lr_at(self, step: int) -> float:
        """Cosine decay from ``lr`` to ``lr_min`` over ``decay_steps``,
        then flat; large early steps, settling precision late."""
        t = min(step, self.decay_steps) / max(self.decay_steps, 1)
        return self.lr_min + (self.lr - self.lr_min) * 0.5 * (1.0 + np.cos(np.pi * t))


@dataclass
class TrainResult:
    steps_run: int
    final_loss: float
    final_map: float
    reached_target: bool
    convergence: list[tuple[int, float, float]]


def scene_ground_truths(scenes: list[Scene],
                        bins: dict[str, np.ndarray] | None = None,
                        bin_labels: dict[str, list[str]] | None = None
                        ) -> list[GroundTruthRecord]:
    records = []
    index = 0
    for scene in scenes:
        for gt in scene.gts:
            named = {}
            if bins is not None:
                for axis, values in bins.items():
                    labels = (bin_labels or {}).get(axis)
                    value = int(values[index])
                    named[axis] = labels[value] if labels else str(value)
            records.append(GroundTruthRecord(scene_id=scene.scene_id,
                                             triplet=gt, bins=named))
            index += 1
    return records


def evaluate_model(model: MSTRModel, scenes: list[Scene],
                   gts: list[GroundTruthRecord] | None = None
                   ) -> tuple[float, list[DetectionRecord]]:
    """Train-set mAP of the model's final-layer predictions."""
    if gts is None:
        gts = scene_ground_truths(scenes)
    dets: list[DetectionRecord] = []
    for scene in scenes:
        final = model(Tensor(scene.image))[-1]
        dets.extend(detections_from_predictions(
            scene.scene_id, final.boxes_h.data, final.boxes_o.data,
            final.cls.data, final.act.data))
    return evaluate(dets, gts).mean_ap, dets


def _scene_loss(model: MSTRModel, scene: Scene,
                weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Sum of the per-layer set-prediction losses for one scene."""
    outputs = model(Tensor(scene.image))
    total = None
    parts = {"loc": 0.0, "cls": 0.0, "act": 0.0}
    for pred in outputs:
        _, losses = match_and_compute(pred, scene.gts, weights)
        total = losses["total"] if total is None else total + losses["total"]
        for key in parts:
            parts[key] += losses[key].item()
    return total, parts


def _nan_dump(path: Path, step: int, scene_ids: list[int],
              parts: dict[str, float], norms: list[float]) -> None:
    payload = {"step": step, "batch_scene_ids": scene_ids,
               "loss_components": parts, "recent_grad_norms": norms}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))


def train(model: MSTRModel, scenes: list[Scene], config: TrainConfig,
          out_dir: str | Path) -> TrainResult:
    """Run the loop; writes loss.csv, convergence.csv, and checkpoints
    under ``out_dir``.  Raises NumericError on a non-finite loss after
    dumping the offending batch to nan-dump.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = list(model.named_parameters())
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    gts = scene_ground_truths(scenes)
    convergence: list[tuple[int, float, float]] = []
    recent_norms: list[float] = []
    last_loss = float("nan")
    reached = False
    steps_run = 0

    loss_file = open(out / "loss.csv", "w", newline="")
    loss_writer = csv.writer(loss_file)
    loss_writer.writerow(["step", "total", "loc", "cls", "act"])
    try:
        for step in range(1, config.steps + 1):
            batch = [scenes[((step - 1) * config.batch_size + i) % len(scenes)]
                     for i in range(config.batch_size)]
            opt.zero_grad()
            batch_total = 0.0
            batch_parts = {"loc": 0.0, "cls": 0.0, "act": 0.0}
            try:
                for scene in batch:
                    loss, parts = _scene_loss(model, scene, config.loss_weights)
                    scaled = loss * (1.0 / config.batch_size)
                    scaled.backward()
                    batch_total += scaled.item()
                    for key in batch_parts:
                        batch_parts[key] += parts[key] / config.batch_size
            except NumericError as exc:
                _nan_dump(out / "nan-dump.json", step,
                          [s.scene_id for s in batch], batch_parts,
                          recent_norms[-10:])
                raise NumericError(f"non-finite loss at step {step}; "
                                   f"diagnostics in {out / 'nan-dump.json'}") from exc
            if not np.isfinite(batch_total):
                _nan_dump(out / "nan-dump.json", step,
                          [s.scene_id for s in batch], batch_parts,
                          recent_norms[-10:])
                raise NumericError(f"non-finite loss at step {step}; "
                                   f"diagnostics in {out / 'nan-dump.json'}")
            norm = clip_grad_norm(params, config.grad_clip)
            recent_norms.append(norm)
            opt.lr = config.lr_at(step)
            opt.step()
            last_loss = batch_total
            steps_run = step
            loss_writer.writerow([step, f"{batch_total:.12g}",
                                  f"{batch_parts['loc']:.12g}",
                                  f"{batch_parts['cls']:.12g}",
                                  f"{batch_parts['act']:.12g}"])
            if step % config.eval_every == 0 or step == config.steps:
                mean_ap, _ = evaluate_model(model, scenes, gts)
                convergence.append((step, batch_total, mean_ap))
                if config.target_map is not None and mean_ap >= config.target_map:
                    reached = True
                    break
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint-{step:05d}.ckpt",
                                model.state_dict())
    finally:
        loss_file.close()

    final_map, _ = evaluate_model(model, scenes, gts)
    save_checkpoint(out / "checkpoint-final.ckpt", model.state_dict())
    with open(out / "convergence.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "train_map"])
        for step, loss_value, mean_ap in convergence:
            writer.writerow([step, f"{loss_value:.12g}", f"{mean_ap:.12g}"])
    return TrainResult(steps_run=steps_run, final_loss=last_loss,
                       final_map=final_map,
                       reached_target=reached, convergence=convergence)
