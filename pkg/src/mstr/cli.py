"""Command-line harness: generate scenes, train, evaluate, gradient
check, and visualize attention.

Exit codes: 0 on success, 1 on validation failure (bad arguments,
inconsistent configuration, missing files), 2 on numeric failure
(non-finite loss, failed gradient checks).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, NumericError
from .evaluation import write_binned_ap_csv, write_class_ap_csv, write_detections
from .gradcheck import run_all
from .matching import HOITriplet
from .model import DecoderVariant, ModelConfig, MSTRModel
from .nn import load_checkpoint
from .scenes import (BinConfig, DISTANCE_THRESHOLDS, Scene, assign_bins,
                     preset_config, generate_dataset, read_manifest,
                     scene_from_record, write_manifest)
from .train import TrainConfig, evaluate_model, scene_ground_truths, train
from .visualize import visualize_scene

BIN_LABELS = {
    "area_ratio": ["h<o", "balanced", "h>o"],
    "size": ["small", "medium", "large"],
    "distance": ["adjacent", "mid", "distant"],
}


@dataclass(frozen=True)
class RunConfig:
    """Everything one command needs: data preset, model geometry and
    ablation toggles, and optimizer settings."""

    preset: str = "mixed"
    count: int = 32
    image_size: int = 64
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigurationError("count must be >= 1")
        self.model.validate()


def _model_from_section(section: dict) -> ModelConfig:
    toggles = section.pop("toggles", {})
    variant = section.pop("variant", None)
    kwargs = dict(section)
    if "MS" in toggles:
        kwargs["num_levels"] = 3 if toggles["MS"] else 1
    if "DA" in toggles:
        kwargs["use_deformable"] = toggles["DA"]
    if "DE" in toggles:
        kwargs["use_dual_entity"] = toggles["DE"]
    if "EC" in toggles:
        kwargs["use_context"] = toggles["EC"]
    if variant is None:
        dual = kwargs.get("use_dual_entity", True)
        variant = ("mstr_merge_output" if dual else "naive_deformable")
    try:
        kwargs["variant"] = DecoderVariant(variant)
    except ValueError as exc:
        names = ", ".join(v.value for v in DecoderVariant)
        raise ConfigurationError(f"unknown variant {variant!r}; "
                                 f"one of: {names}") from exc
    try:
        return ModelConfig(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad model config: {exc}") from exc


def load_run_config(path: str | None) -> RunConfig:
    """Build a RunConfig from a JSON file with optional data / model /
    train sections; omitted fields keep their defaults."""
    if path is None:
        config = RunConfig()
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file is not valid JSON: {exc}") from exc
        data = raw.get("data", {})
        try:
            train_config = TrainConfig(**raw.get("train", {}))
        except TypeError as exc:
            raise ConfigurationError(f"bad train config: {exc}") from exc
        config = RunConfig(
            preset=data.get("preset", "mixed"),
            count=data.get("count", 32),
            image_size=data.get("image_size", 64),
            model=_model_from_section(dict(raw.get("model", {}))),
            train=train_config)
    config.validate()
    return config


def _load_scenes(manifest: Path) -> list[Scene]:
    if not manifest.exists():
        raise ConfigurationError(f"manifest not found: {manifest} "
                                 "(run the generate command first)")
    return [scene_from_record(r) for r in read_manifest(manifest)]


def _bin_config() -> BinConfig:
    # fixed distance thresholds keep preset routing stable; size stays
    # equal-count over the data
    return BinConfig(distance=DISTANCE_THRESHOLDS)


def _binned_gts(scenes: list[Scene]):
    gts: list[HOITriplet] = [gt for scene in scenes for gt in scene.gts]
    bins = assign_bins(gts, _bin_config())
    return scene_ground_truths(scenes, bins, BIN_LABELS)


def cmd_generate(args) -> int:
    config = load_run_config(args.config)
    preset = preset_config(config.preset, config.image_size)
    scenes = generate_dataset(args.seed, config.count, preset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.jsonl", scenes, config.preset)
    bins = assign_bins([s.gts[0] for s in scenes], _bin_config())
    for axis, values in sorted(bins.items()):
        counts = [int((values == b).sum()) for b in range(3)]
        labels = BIN_LABELS[axis]
        summary = ", ".join(f"{label}={count}"
                            for label, count in zip(labels, counts))
        print(f"{axis}: {summary}")
    if args.export_images:
        from .visualize import write_ppm
        for scene in scenes:
            gray = np.clip(scene.image[0] * 255.0, 0.0, 255.0).astype(np.uint8)
            write_ppm(out / f"scene-{scene.scene_id}.ppm",
                      np.stack([gray] * 3, axis=-1))
    print(f"wrote {len(scenes)} scenes to {out / 'manifest.jsonl'}")
    return 0


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    out = Path(args.out)
    scenes = _load_scenes(out / "manifest.jsonl")
    model = MSTRModel(config.model, np.random.default_rng(args.seed))
    result = train(model, scenes, config.train, out)
    print(f"steps={result.steps_run} final_loss={result.final_loss:.6g} "
          f"train_mAP={result.final_map:.4f}")
    return 0


def cmd_eval(args) -> int:
    config = load_run_config(args.config)
    out = Path(args.out)
    scenes = _load_scenes(out / "manifest.jsonl")
    model = MSTRModel(config.model, np.random.default_rng(args.seed))
    if args.checkpoint:
        state, _ = load_checkpoint(args.checkpoint)
        try:
            model.load_state_dict(state)
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(
                f"checkpoint does not fit the configured model: {exc}") from exc
    gts = _binned_gts(scenes)
    from .evaluation import evaluate
    mean_ap, dets = evaluate_model(model, scenes, gts)
    result = evaluate(dets, gts)
    write_detections(out / "detections.jsonl", dets)
    write_class_ap_csv(out / "ap.csv", result)
    write_binned_ap_csv(out / "binned_ap.csv", result)
    print(f"mAP={result.mean_ap:.4f} over {len(result.per_class)} classes")
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_all(seed=args.seed)
    failed = 0
    for report in reports:
        status = "ok  " if report.passed else "FAIL"
        print(f"{status} {report.name:40s} max_rel_err={report.max_rel_error:.3e}")
        failed += not report.passed
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    if failed:
        raise NumericError(f"{failed} gradient checks failed")
    return 0


def cmd_visualize(args) -> int:
    config = load_run_config(args.config)
    out = Path(args.out)
    scenes = _load_scenes(out / "manifest.jsonl")
    by_id = {scene.scene_id: scene for scene in scenes}
    if args.scene not in by_id:
        raise ConfigurationError(f"scene {args.scene} not in manifest "
                                 f"(ids {min(by_id)}..{max(by_id)})")
    model = MSTRModel(config.model, np.random.default_rng(args.seed))
    if args.checkpoint:
        state, _ = load_checkpoint(args.checkpoint)
        model.load_state_dict(state)
    paths = visualize_scene(model, by_id[args.scene], out)
    for path in paths:
        print(path)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mstr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("generate", help="write a scene manifest")
    common(p)
    p.add_argument("--export-images", action="store_true",
                   help="also write one pixmap per scene")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a generated manifest")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("visualize", help="attention overlay pixmaps")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--scene", type=int, required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
