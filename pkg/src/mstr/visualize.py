"""Attention overlays: where the top-scoring query samples each pyramid
level, drawn over the scene.

One color image per level shows the human, object, and context sampling
points in distinct colors, the two entity reference points, and the
midpoint anchoring the context path.  Files are portable pixmaps named
scene-{id}-level-{l}.ppm.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .attention import SamplingGrid, compute_sampling_locations
from .autodiff import Tensor
from .evaluation import detections_from_predictions
from .model import MSTRModel
from .scenes import Scene

SAMPLE_COLORS = {"h": (255, 80, 80), "o": (90, 140, 255), "c": (90, 230, 90),
                 "q": (255, 80, 80)}
REFERENCE_COLORS = {"h": (255, 0, 0), "o": (0, 64, 255), "c": (0, 200, 0),
                    "q": (255, 0, 0)}


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Binary P6 pixmap from an (H, W, 3) uint8 array."""
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def marker_pixel(point: np.ndarray, size: int) -> tuple[int, int]:
    """Normalized (x, y) to the drawing pixel under the center convention,
    clamped onto the canvas."""
    px = int(round(point[0] * size - 0.5))
    py = int(round(point[1] * size - 0.5))
    return min(max(px, 0), size - 1), min(max(py, 0), size - 1)


def _stamp(canvas: np.ndarray, px: int, py: int, color, radius: int) -> None:
    size = canvas.shape[0]
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            x, y = px + dx, py + dy
            if 0 <= x < size and 0 <= y < size:
                canvas[y, x] = color


def top_query(final) -> int:
    """Index of the highest-scoring query, ties to the lowest index."""
    dets = detections_from_predictions(0, final.boxes_h.data,
                                       final.boxes_o.data, final.cls.data,
                                       final.act.data)
    scores = np.array([d.score for d in dets])
    return int(np.argmax(scores))


def level_sample_points(grid: SamplingGrid, shapes: list[tuple[int, int]],
                        query: int) -> list[np.ndarray]:
    """Per level, the query's sampling locations over all heads and
    points in normalized image coordinates, shape (M*K, 2)."""
    out = []
    for (xs, ys), (h, w) in zip(compute_sampling_locations(grid, shapes),
                                shapes):
        nx = (xs.data[query].reshape(-1) + 0.5) / w
        ny = (ys.data[query].reshape(-1) + 0.5) / h
        out.append(np.stack([nx, ny], axis=-1))
    return out


def visualize_scene(model: MSTRModel, scene: Scene,
                    out_dir: str | Path) -> list[Path]:
    """Render one overlay per pyramid level; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    collect: dict = {}
    final = model(Tensor(scene.image), collect=collect)[-1]
    query = top_query(final)
    size = scene.spec.image_size
    shapes = [(size // s, size // s) for s in model.config.backbone.strides]

    base = np.clip(scene.image[0] * 255.0, 0.0, 255.0).astype(np.uint8)
    refs = collect["refs"]
    paths = []
    for level in range(len(shapes)):
        canvas = np.stack([base] * 3, axis=-1).copy()
        for key, grid in collect.items():
            if key == "refs":
                continue
            points = level_sample_points(grid, shapes, query)[level]
            for point in points:
                px, py = marker_pixel(point, size)
                _stamp(canvas, px, py, SAMPLE_COLORS[key], radius=1)
        for key, ref in refs.items():
            px, py = marker_pixel(ref[query], size)
            _stamp(canvas, px, py, REFERENCE_COLORS[key], radius=2)
        target = out / f"scene-{scene.scene_id}-level-{level}.ppm"
        write_ppm(target, canvas)
        paths.append(target)
    return paths
