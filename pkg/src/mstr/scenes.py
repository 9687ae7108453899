"""Synthetic interaction scenes with controllable geometry.

Each scene holds one human (filled ellipse at full intensity) and one
object (filled rectangle whose intensity encodes its class).  The
action label is a deterministic function of the human/object area
ratio, so classifying the interaction requires comparing entity scales
rather than reading local texture.  Presets constrain the area ratio
and the normalized interaction distance; generation is a pure function
of (seed, config).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, GenerationError
from .matching import HOITriplet

AREA_RATIO_THRESHOLDS = (0.48, 4.33)

RATIO_BANDS = {
    "h<o": (0.08, 0.44),
    "balanced": (0.60, 3.80),
    "h>o": (4.60, 18.0),
}
DISTANCE_BANDS = {
    "adjacent": (1.0, 40.0),
    "mid": (40.0, 400.0),
    "distant": (400.0, 4000.0),
}
# bands on the geometric mean of the two box areas; the sampler clamps
# them to what the drawn area ratio leaves feasible
SCALE_BANDS = {
    "small": (0.004, 0.0113),
    "medium": (0.0113, 0.0319),
    "large": (0.0319, 0.09),
}
_RATIO_CYCLE = ("h<o", "balanced", "h>o")
_DISTANCE_CYCLE = ("adjacent", "mid", "distant")
_SCALE_CYCLE = ("small", "medium", "large")

# band edges double as fixed distance-bin thresholds for reporting
DISTANCE_THRESHOLDS = (DISTANCE_BANDS["mid"][0], DISTANCE_BANDS["distant"][0])

MIN_AREA = 0.002
MAX_AREA = 0.09
MIN_SIDE_PIXELS = 2


@dataclass(frozen=True)
class DifficultyConfig:
    """Sampling constraints for one preset.

    Bands given as None rotate deterministically through the three
    named bands using the scene seed, so any run of consecutive seeds
    covers all bands evenly.
    """

    preset: str
    image_size: int = 64
    num_object_classes: int = 3
    num_actions: int = 3
    ratio_band: tuple[float, float] | None = None
    distance_band: tuple[float, float] | None = None
    rotate_ratio: bool = False
    rotate_distance: bool = False
    rotate_scale: bool = False


def preset_config(name: str, image_size: int = 64) -> DifficultyConfig:
    if name in RATIO_BANDS:
        return DifficultyConfig(name, image_size, ratio_band=RATIO_BANDS[name],
                                rotate_distance=True)
    if name in DISTANCE_BANDS:
        return DifficultyConfig(name, image_size, distance_band=DISTANCE_BANDS[name],
                                rotate_ratio=True)
    if name == "mixed":
        return DifficultyConfig(name, image_size, rotate_ratio=True,
                                rotate_distance=True)
    if name == "multi-scale-stress":
        return DifficultyConfig(name, image_size, rotate_ratio=True,
                                rotate_distance=True, rotate_scale=True)
    raise ConfigurationError(f"unknown preset {name!r}; options: "
                             f"{sorted(RATIO_BANDS | DISTANCE_BANDS)} + "
                             f"['mixed', 'multi-scale-stress']")


@dataclass
class SceneSpec:
    """Everything needed to re-render one scene."""

    seed: int
    image_size: int
    box_h: np.ndarray
    box_o: np.ndarray
    object_class: int
    actions: np.ndarray
    style: str = "ellipse-human/rect-object"


@dataclass
class Scene:
    spec: SceneSpec
    image: np.ndarray
    gts: list[HOITriplet]

    @property
    def scene_id(self) -> int:
        return self.spec.seed


def box_area(box: np.ndarray) -> float:
    return float(box[2] * box[3])


def d_interaction(box_h: np.ndarray, box_o: np.ndarray) -> float:
    """Center distance divided by the product of the two box areas."""
    a_h, a_o = box_area(box_h), box_area(box_o)
    if a_h <= 0.0 or a_o <= 0.0:
        raise ValueError("d_interaction needs boxes with positive area")
    d_center = math.hypot(box_h[0] - box_o[0], box_h[1] - box_o[1])
    return d_center / (a_h * a_o)


def action_from_ratio(ratio: float, num_actions: int) -> int:
    """Bucket the area ratio at the fixed thresholds; extra action slots
    beyond the three bands stay unused."""
    del num_actions
    lo, hi = AREA_RATIO_THRESHOLDS
    if ratio < lo:
        return 0
    if ratio < hi:
        return 1
    return 2


def _bands_for_seed(seed: int, config: DifficultyConfig
                    ) -> tuple[tuple[float, float] | None,
                               tuple[float, float] | None,
                               tuple[float, float] | None]:
    ratio_band = config.ratio_band
    if config.rotate_ratio:
        ratio_band = RATIO_BANDS[_RATIO_CYCLE[(seed // 3) % 3]]
    distance_band = config.distance_band
    if config.rotate_distance:
        distance_band = DISTANCE_BANDS[_DISTANCE_CYCLE[seed % 3]]
    scale_band = None
    if config.rotate_scale:
        scale_band = SCALE_BANDS[_SCALE_CYCLE[(seed // 9) % 3]]
    return ratio_band, distance_band, scale_band


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def generate_scene(seed: int, config: DifficultyConfig,
                   max_tries: int = 500) -> Scene:
    rng = np.random.default_rng(seed)
    s = config.image_size
    min_side = MIN_SIDE_PIXELS / s
    ratio_band, distance_band, scale_band = _bands_for_seed(seed, config)
    if ratio_band is None:
        ratio_band = (RATIO_BANDS["h<o"][0], RATIO_BANDS["h>o"][1])
    for _ in range(max_tries):
        ratio = _log_uniform(rng, *ratio_band)
        d_target = _log_uniform(rng, *distance_band) if distance_band else None
        if scale_band is not None:
            root = math.sqrt(ratio)
            f_lo = max(MIN_AREA * root, MIN_AREA / root) * 1.05
            f_hi = min(MAX_AREA / root, MAX_AREA * root) * 0.95
            lo, hi = max(scale_band[0], f_lo), min(scale_band[1], f_hi)
            if lo >= hi:
                lo, hi = f_lo, f_hi
            product = _log_uniform(rng, lo, hi) ** 2
        else:
            product = _log_uniform(rng, MIN_AREA**2 * 4.0, MAX_AREA**2)
        area_h = math.sqrt(product * ratio)
        area_o = math.sqrt(product / ratio)
        if not (MIN_AREA <= area_h <= MAX_AREA and MIN_AREA <= area_o <= MAX_AREA):
            continue
        sizes = []
        ok = True
        for area in (area_h, area_o):
            aspect = rng.uniform(0.7, 1.4)
            w, h = math.sqrt(area * aspect), math.sqrt(area / aspect)
            if min(w, h) < min_side or max(w, h) > 0.45:
                ok = False
                break
            sizes.append((w, h))
        if not ok:
            continue
        (wh, hh), (wo, ho) = sizes
        d_center = (d_target * product if d_target is not None
                    else rng.uniform(0.05, 0.6))
        d_max = math.hypot(1.0 - (wh + wo) / 2, 1.0 - (hh + ho) / 2)
        if not 0.0 <= d_center <= 0.92 * d_max:
            continue
        placed = _place_pair(rng, d_center, (wh, hh), (wo, ho))
        if placed is None:
            continue
        box_h, box_o = placed
        action = action_from_ratio(area_h / area_o, config.num_actions)
        actions = np.zeros(config.num_actions)
        actions[action] = 1.0
        object_class = int(rng.integers(config.num_object_classes))
        spec = SceneSpec(seed, s, box_h, box_o, object_class, actions)
        gt = HOITriplet(box_h, box_o, object_class, actions)
        gt.validate()
        return Scene(spec, render_scene(spec), [gt])
    raise GenerationError(
        f"no valid scene for seed {seed} under preset {config.preset!r} "
        f"after {max_tries} tries")


def _place_pair(rng: np.random.Generator, d_center: float,
                size_h: tuple[float, float], size_o: tuple[float, float],
                tries: int = 50) -> tuple[np.ndarray, np.ndarray] | None:
    wh, hh = size_h
    wo, ho = size_o
    for _ in range(tries):
        theta = rng.uniform(0.0, 2.0 * np.pi)
        dx, dy = d_center * math.cos(theta), d_center * math.sin(theta)
        cx_h = rng.uniform(wh / 2, 1.0 - wh / 2)
        cy_h = rng.uniform(hh / 2, 1.0 - hh / 2)
        cx_o, cy_o = cx_h + dx, cy_h + dy
        if (wo / 2 <= cx_o <= 1.0 - wo / 2) and (ho / 2 <= cy_o <= 1.0 - ho / 2):
            return (np.array([cx_h, cy_h, wh, hh]), np.array([cx_o, cy_o, wo, ho]))
    return None


def object_intensity(object_class: int, num_classes: int) -> float:
    return 0.3 + 0.4 * object_class / max(num_classes - 1, 1)


def render_scene(spec: SceneSpec) -> np.ndarray:
    """(1, S, S) grayscale image: object rectangle first, human ellipse
    on top."""
    s = spec.image_size
    img = np.zeros((1, s, s))
    centers = (np.arange(s) + 0.5) / s
    xx, yy = np.meshgrid(centers, centers)
    cx, cy, w, h = spec.box_o
    rect = ((np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2))
    img[0][rect] = object_intensity(spec.object_class, 3)
    cx, cy, w, h = spec.box_h
    ellipse = (((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2) <= 1.0
    img[0][ellipse] = 1.0
    return img


def generate_dataset(base_seed: int, count: int,
                     config: DifficultyConfig) -> list[Scene]:
    return [generate_scene(base_seed + i, config) for i in range(count)]


# -- binning ---------------------------------------------------------------


@dataclass(frozen=True)
class BinConfig:
    """Thresholds splitting triplets into three bins per axis; None means
    derive equal-count tertiles from the data."""

    area_ratio: tuple[float, float] = AREA_RATIO_THRESHOLDS
    size: tuple[float, float] | None = None
    distance: tuple[float, float] | None = None

    def __post_init__(self):
        for pair in (self.area_ratio, self.size, self.distance):
            if pair is not None and not pair[0] < pair[1]:
                raise ConfigurationError("bin thresholds must be strictly increasing")


def equal_count_thresholds(values: np.ndarray, bins: int = 3) -> tuple[float, ...]:
    """Cut points so bin populations differ by at most one."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    n = len(ordered)
    cuts = [ordered[math.ceil(k * n / bins)] for k in range(1, bins)]
    return tuple(float(c) for c in cuts)


def bucket(value: float, thresholds: tuple[float, float]) -> int:
    """Half-open intervals: a value exactly at a threshold goes up."""
    lo, hi = thresholds
    if value < lo:
        return 0
    if value < hi:
        return 1
    return 2


def assign_bins(gts: list[HOITriplet],
                config: BinConfig = BinConfig()) -> dict[str, np.ndarray]:
    """Per-triplet bin labels along the area-ratio, size, and distance
    axes.  Size is the object box area; distance is d_interaction."""
    ratios = np.array([box_area(g.box_h) / box_area(g.box_o) for g in gts])
    sizes = np.array([box_area(g.box_o) for g in gts])
    distances = np.array([d_interaction(g.box_h, g.box_o) for g in gts])
    size_t = config.size or equal_count_thresholds(sizes)
    dist_t = config.distance or equal_count_thresholds(distances)
    return {
        "area_ratio": np.array([bucket(r, config.area_ratio) for r in ratios]),
        "size": np.array([bucket(v, size_t) for v in sizes]),
        "distance": np.array([bucket(d, dist_t) for d in distances]),
    }


# -- manifest --------------------------------------------------------------


def scene_record(scene: Scene, preset: str) -> dict:
    spec = scene.spec
    return {
        "seed": spec.seed,
        "preset": preset,
        "image_size": spec.image_size,
        "box_h": [round(v, 12) for v in spec.box_h.tolist()],
        "box_o": [round(v, 12) for v in spec.box_o.tolist()],
        "object_class": spec.object_class,
        "action": int(np.argmax(spec.actions)),
        "area_ratio": round(box_area(spec.box_h) / box_area(spec.box_o), 12),
        "d_interaction": round(d_interaction(spec.box_h, spec.box_o), 12),
    }


def write_manifest(path: str, scenes: list[Scene], preset: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for scene in scenes:
            f.write(json.dumps(scene_record(scene, preset), sort_keys=True) + "\n")


def read_manifest(path: str) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def scene_from_record(record: dict, num_actions: int = 3) -> Scene:
    """Rebuild and re-render a scene from its manifest record."""
    actions = np.zeros(num_actions)
    actions[record["action"]] = 1.0
    spec = SceneSpec(seed=record["seed"], image_size=record["image_size"],
                     box_h=np.array(record["box_h"], dtype=np.float64),
                     box_o=np.array(record["box_o"], dtype=np.float64),
                     object_class=record["object_class"], actions=actions)
    gt = HOITriplet(box_h=spec.box_h.copy(), box_o=spec.box_o.copy(),
                    object_class=spec.object_class, actions=actions.copy())
    return Scene(spec=spec, image=render_scene(spec), gts=[gt])
