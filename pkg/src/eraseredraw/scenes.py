"""Procedural toy road scenes with free-space labels and instance masks.

A scene is a sky gradient over a flat ground plane, a road trapezoid running
to the bottom edge (the free-space label) and two to five background objects
(cars, trees, buildings) placed so they never touch the road or each other.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation

from . import imaging
from .rng import make_rng

CLASSES = ("car", "tree", "building")

DEFAULT_PALETTES = {
    "car": ((0.85, 0.12, 0.12), (0.70, 0.10, 0.15), (0.90, 0.25, 0.20)),
    "tree": ((0.13, 0.55, 0.15), (0.20, 0.65, 0.20), (0.10, 0.45, 0.12)),
    "building": ((0.45, 0.48, 0.58), (0.52, 0.55, 0.65), (0.40, 0.44, 0.52)),
}
# secondary parts drawn as part of an instance
ACCENTS = {"car": (0.08, 0.08, 0.08), "tree": (0.40, 0.25, 0.10)}
BACKGROUND_COLORS = {
    "sky_top": (0.35, 0.55, 0.90),
    "sky_bottom": (0.70, 0.82, 0.95),
    "ground": (0.70, 0.62, 0.35),
    "road": (0.33, 0.33, 0.35),
    "marking": (0.92, 0.92, 0.85),
}


class InfeasibleSceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    min_objects: int = 2
    max_objects: int = 5
    palettes: dict = field(default_factory=lambda: dict(DEFAULT_PALETTES))
    horizon: tuple[int, int] = (18, 24)
    road_gap: tuple[int, int] = (6, 11)
    road_top_halfwidth: tuple[float, float] = (2.0, 5.0)
    road_bottom_halfwidth: tuple[float, float] = (22.0, 32.0)
    building_size: tuple[int, int, int, int] = (8, 14, 10, 22)  # w range, h range
    tree_radius: tuple[int, int] = (3, 5)
    car_size: tuple[int, int, int, int] = (10, 14, 4, 6)
    color_jitter: float = 0.04
    noise_std: float = 0.015
    seed: int = 0

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise InfeasibleSceneError("scenes need at least 32x32 pixels")
        if not 1 <= self.min_objects <= self.max_objects:
            raise InfeasibleSceneError("object count range must satisfy 1 <= min <= max")
        if set(self.palettes) != set(CLASSES):
            raise ValueError(f"palettes must cover exactly {CLASSES}")
        cents = self.centroids()
        for i in range(len(CLASSES)):
            for j in range(i + 1, len(CLASSES)):
                if np.linalg.norm(cents[i] - cents[j]) < 0.25:
                    raise ValueError(f"palettes {CLASSES[i]} and {CLASSES[j]} are closer than 0.25")
        if self.horizon[1] + self.road_gap[1] >= self.height - 8:
            raise InfeasibleSceneError("road does not fit below the horizon")
        max_h = max(self.building_size[3], 2 * self.tree_radius[1] + 5, self.car_size[3] + 2)
        if max_h >= self.horizon[0] + self.road_gap[0]:
            raise InfeasibleSceneError("objects taller than the background band")

    def centroids(self) -> np.ndarray:
        """Mean palette colour per class, in ``CLASSES`` order."""
        return np.array([np.mean(self.palettes[c], axis=0) for c in CLASSES])


@dataclass
class Instance:
    mask: np.ndarray
    cls: str


@dataclass
class SceneSample:
    image: np.ndarray
    free_space: np.ndarray
    instances: list[Instance]
    seed: int = 0
    index: int = 0


def class_index(cls: str) -> int:
    return CLASSES.index(cls)


def nearest_class(rgb, spec: SceneSpec) -> str:
    d = np.linalg.norm(spec.centroids() - np.asarray(rgb)[None, :], axis=1)
    return CLASSES[int(np.argmin(d))]


# ---------------------------------------------------------------- rasterisation

def _road(spec: SceneSpec, rng) -> tuple[np.ndarray, int, int, float, float]:
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(50):
        horizon = int(rng.integers(spec.horizon[0], spec.horizon[1] + 1))
        top = horizon + int(rng.integers(spec.road_gap[0], spec.road_gap[1] + 1))
        top_cx = w / 2 + rng.uniform(-4, 4)
        bot_cx = w / 2 + rng.uniform(-6, 6)
        top_hw = rng.uniform(*spec.road_top_halfwidth)
        bot_hw = rng.uniform(*spec.road_bottom_halfwidth)
        t = (ys - top) / max(h - 1 - top, 1)
        cx = top_cx + t * (bot_cx - top_cx)
        hw = top_hw + t * (bot_hw - top_hw)
        road = ((ys >= top) & (np.abs(xs + 0.5 - cx) <= hw)).astype(np.uint8)
        frac = road.mean()
        if 0.15 <= frac <= 0.5:
            return road, horizon, top, top_cx, bot_cx
    raise InfeasibleSceneError("could not draw a road with free-space fraction in [0.15, 0.5]")


def _disc(h, w, cy, cx, r) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return (((ys + 0.5 - cy) ** 2 + (xs + 0.5 - cx) ** 2) <= r * r).astype(np.uint8)


def _object(cls: str, spec: SceneSpec, rng, horizon: int):
    """Returns (mask, accent_mask) for one object, or None if it leaves the frame."""
    h, w = spec.height, spec.width
    base = int(rng.integers(horizon + 1, h))
    mask = np.zeros((h, w), np.uint8)
    accent = np.zeros((h, w), np.uint8)
    if cls == "building":
        bw = int(rng.integers(spec.building_size[0], spec.building_size[1] + 1))
        bh = int(rng.integers(spec.building_size[2], spec.building_size[3] + 1))
        x0 = int(rng.integers(0, w - bw + 1))
        y0 = base - bh + 1
        if y0 < 0:
            return None
        mask[y0:base + 1, x0:x0 + bw] = 1
    elif cls == "tree":
        r = int(rng.integers(spec.tree_radius[0], spec.tree_radius[1] + 1))
        stem = int(rng.integers(3, 6))
        cx = int(rng.integers(r, w - r + 1))
        cy = base - stem + 1 - r + 0.5
        if cy - r < 0:
            return None
        accent[base - stem + 1:base + 1, cx - 1:cx + 1] = 1
        mask = _disc(h, w, cy, cx, r) | accent
    else:
        cw = int(rng.integers(spec.car_size[0], spec.car_size[1] + 1))
        ch = int(rng.integers(spec.car_size[2], spec.car_size[3] + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        y0 = base - 1 - ch
        if y0 < 0:
            return None
        mask[y0:base - 1, x0:x0 + cw] = 1
        accent = _disc(h, w, base - 0.5, x0 + 2.5, 1.8) | _disc(h, w, base - 0.5, x0 + cw - 2.5, 1.8)
        mask = mask | accent
    return mask, accent


def generate_scene(spec: SceneSpec, index: int) -> SceneSample:
    """Deterministic scene for ``(spec.seed, index)``."""
    if index < 0:
        raise ValueError("index must be >= 0")
    rng = make_rng(spec.seed, "scene", index)
    h, w = spec.height, spec.width
    road, horizon, top, top_cx, bot_cx = _road(spec, rng)

    img = np.empty((h, w, 3))
    bg = {k: np.array(v) for k, v in BACKGROUND_COLORS.items()}
    rows = np.clip(np.arange(h) / max(horizon, 1), 0, 1)[:, None, None]
    img[:] = bg["sky_top"] * (1 - rows) + bg["sky_bottom"] * rows
    img[horizon:] = bg["ground"]
    img[road.astype(bool)] = bg["road"]
    ys, xs = np.mgrid[0:h, 0:w]
    cx_line = top_cx + (ys - top) / max(h - 1 - top, 1) * (bot_cx - top_cx)
    marking = road.astype(bool) & (np.abs(xs + 0.5 - cx_line) <= 0.6) & ((ys // 3) % 2 == 0) & (ys > top + 2)
    img[marking] = bg["marking"]

    forbidden = binary_dilation(road.astype(bool))
    instances: list[Instance] = []
    for _attempt in range(20):
        n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        instances = []
        occupied = forbidden.copy()
        layers = []
        for _ in range(n_obj):
            cls = CLASSES[int(rng.integers(len(CLASSES)))]
            for _try in range(100):
                drawn = _object(cls, spec, rng, horizon)
                if drawn is None:
                    continue
                mask, accent = drawn
                if (mask.astype(bool) & occupied).any():
                    continue
                occupied |= binary_dilation(mask.astype(bool))
                palette = spec.palettes[cls]
                body = np.array(palette[int(rng.integers(len(palette)))]) + rng.uniform(-1, 1, 3) * spec.color_jitter
                layers.append((mask, accent, cls, body))
                instances.append(Instance(mask, cls))
                break
        if len(instances) >= spec.min_objects:
            break
    else:
        raise InfeasibleSceneError("could not place the minimum number of objects")

    for mask, accent, cls, body in layers:
        img[mask.astype(bool)] = body
        if accent.any():
            acc = np.array(ACCENTS[cls]) + rng.uniform(-1, 1, 3) * spec.color_jitter / 2
            img[accent.astype(bool)] = acc
    img = np.clip(img + rng.normal(0.0, spec.noise_std, img.shape), 0.0, 1.0)
    return SceneSample(image=img, free_space=road, instances=instances, seed=spec.seed, index=index)


# ---------------------------------------------------------------- datasets

def _write_sample(sample: SceneSample, out_dir: Path, stem: str) -> dict:
    img_rel = f"images/{stem}.ppm"
    lbl_rel = f"labels/{stem}.pgm"
    imaging.save_image(out_dir / img_rel, imaging.quantize(sample.image) / 255.0)
    imaging.save_mask(out_dir / lbl_rel, sample.free_space)
    insts = []
    for j, inst in enumerate(sample.instances):
        rel = f"masks/{stem}_{j}.pgm"
        imaging.save_mask(out_dir / rel, inst.mask)
        insts.append({"mask": rel, "class": inst.cls})
    return {"image": img_rel, "label": lbl_rel, "instances": insts, "seed": sample.seed, "index": sample.index}


def write_manifest(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(r, separators=(",", ":")) + "\n" for r in records]
    path.write_text("".join(lines), encoding="utf-8")


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def generate_dataset(spec: SceneSpec, n: int, out_dir, start_index: int = 0, threads: int = 1) -> list[dict]:
    """Write ``n`` scenes (indices ``start_index ..``) and ``manifest.jsonl``.

    Paths in the manifest are relative to ``out_dir``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(i):
        idx = start_index + i
        return _write_sample(generate_scene(spec, idx), out_dir, f"{idx:05d}")

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            records = list(ex.map(one, range(n)))
    else:
        records = [one(i) for i in range(n)]
    write_manifest(out_dir / "manifest.jsonl", records)
    return records


def load_sample(record: dict, base_dir) -> SceneSample:
    base_dir = Path(base_dir)
    return SceneSample(
        image=imaging.load_image(base_dir / record["image"]),
        free_space=imaging.load_mask(base_dir / record["label"]),
        instances=[Instance(imaging.load_mask(base_dir / r["mask"]), r["class"]) for r in record.get("instances", [])],
        seed=record.get("seed", 0),
        index=record.get("index", 0),
    )
