"""Synthetic grayscale scenes of overlapping rectangles with occlusion tiers.

Objects are painted in order, so later rectangles hide earlier ones. Every
ground-truth box (clipped to the image) records how much of the object's full
rectangle is hidden, either behind later objects or outside the frame.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import InvalidSpec
from ..mefem import Roi

TIERS = ("easy", "moderate", "hard")


def tier_of(covered: float) -> str:
    if covered < 0.10:
        return "easy"
    if covered <= 0.35:
        return "moderate"
    return "hard"


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple = (64, 64)
    num_objects: int = 3
    occlusion_rate: float = 0.3
    truncation_rate: float = 0.1
    seed: int = 0
    min_size: int = 10
    max_size: int = 24
    noise: float = 0.05

    def validate(self):
        h, w = self.image_size
        if not 1 <= self.num_objects <= 5:
            raise InvalidSpec(f"num_objects must be in 1..5, got {self.num_objects}")
        for name in ("occlusion_rate", "truncation_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidSpec(f"{name} must lie in [0, 1], got {v}")
        if not 2 <= self.min_size <= self.max_size < min(h, w):
            raise InvalidSpec(f"object sizes {self.min_size}..{self.max_size} do not fit {self.image_size}")
        if self.noise < 0:
            raise InvalidSpec("noise must be non-negative")
        return self


@dataclass
class Scene:
    image: np.ndarray  # [1, H, W]
    boxes: list  # Roi per object, clipped to the image, paint order
    tiers: list
    covered: list
    seed: int = 0

    @property
    def num_objects(self):
        return len(self.boxes)


def _overlap(a, b):
    """Intersection area of two (x0, y0, x1, y1) integer rectangles."""
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(w, 0) * max(h, 0)


def _place_overlapping(rng, target, w, h, img_w, img_h, tries=200):
    """Place a w x h rectangle covering more than 10% of ``target``."""
    tx0, ty0, tx1, ty1 = target
    area = (tx1 - tx0) * (ty1 - ty0)
    best = None
    for _ in range(tries):
        x0 = int(rng.integers(tx0 - w + 1, tx1))
        y0 = int(rng.integers(ty0 - h + 1, ty1))
        x0 = min(max(x0, 0), img_w - w)
        y0 = min(max(y0, 0), img_h - h)
        rect = (x0, y0, x0 + w, y0 + h)
        frac = _overlap(rect, target) / area
        if 0.15 <= frac <= 0.7:
            return rect
        if frac > 0.10 and (best is None or frac < best[0]):
            best = (frac, rect)
    if best is not None:
        return best[1]
    # centred on the target always overlaps it
    x0 = min(max((tx0 + tx1) // 2 - w // 2, 0), img_w - w)
    y0 = min(max((ty0 + ty1) // 2 - h // 2, 0), img_h - h)
    return (x0, y0, x0 + w, y0 + h)


def _place_free(rng, placed, w, h, img_w, img_h, truncate, tries=50):
    lo_x, hi_x = (-w // 2, img_w - w // 2) if truncate else (0, img_w - w)
    lo_y, hi_y = (-h // 2, img_h - h // 2) if truncate else (0, img_h - h)
    rect = None
    for _ in range(tries):
        x0 = int(rng.integers(lo_x, hi_x + 1))
        y0 = int(rng.integers(lo_y, hi_y + 1))
        rect = (x0, y0, x0 + w, y0 + h)
        if truncate and (x0 >= 0 and y0 >= 0 and x0 + w <= img_w and y0 + h <= img_h):
            continue
        if all(_overlap(rect, p) == 0 for p in placed):
            return rect
    return rect


def generate_scene(spec: SceneSpec) -> Scene:
    """Render one scene; a pure function of ``spec`` (including its seed)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    img_h, img_w = spec.image_size
    rects = []
    for i in range(spec.num_objects):
        w = int(rng.integers(spec.min_size, spec.max_size + 1))
        h = int(rng.integers(spec.min_size, spec.max_size + 1))
        occlude = rects and rng.random() < spec.occlusion_rate
        truncate = rng.random() < spec.truncation_rate
        if occlude:
            target = rects[int(rng.integers(len(rects)))]
            clipped = (max(target[0], 0), max(target[1], 0), min(target[2], img_w), min(target[3], img_h))
            rects.append(_place_overlapping(rng, clipped, w, h, img_w, img_h))
        else:
            rects.append(_place_free(rng, rects, w, h, img_w, img_h, truncate))

    image = np.zeros((img_h, img_w))
    owner = np.full((img_h, img_w), -1)
    intensities = rng.uniform(0.35, 1.0, size=len(rects))
    for i, (x0, y0, x1, y1) in enumerate(rects):
        cx0, cy0, cx1, cy1 = max(x0, 0), max(y0, 0), min(x1, img_w), min(y1, img_h)
        image[cy0:cy1, cx0:cx1] = intensities[i]
        # darker rim on the visible border of the full rectangle
        rim = np.zeros((img_h, img_w), dtype=bool)
        rim[cy0:cy1, cx0:cx1] = True
        inner = np.zeros_like(rim)
        inner[max(y0 + 1, 0):min(y1 - 1, img_h), max(x0 + 1, 0):min(x1 - 1, img_w)] = True
        image[rim & ~inner] = 0.5 * intensities[i]
        owner[cy0:cy1, cx0:cx1] = i
    image = image + spec.noise * rng.standard_normal(image.shape)

    boxes, tiers, covered = [], [], []
    for i, (x0, y0, x1, y1) in enumerate(rects):
        full = (x1 - x0) * (y1 - y0)
        visible = int(np.count_nonzero(owner == i))
        cx0, cy0, cx1, cy1 = max(x0, 0), max(y0, 0), min(x1, img_w), min(y1, img_h)
        boxes.append(Roi(float(cx0), float(cy0), float(cx1 - cx0), float(cy1 - cy0)))
        frac = 1.0 - visible / full
        covered.append(frac)
        tiers.append(tier_of(frac))
    return Scene(image[None], boxes, tiers, covered, spec.seed)


def make_dataset(count: int, seed: int, base: SceneSpec | None = None) -> list:
    """``count`` scenes with 1-5 objects each, seeded from ``seed``."""
    base = base or SceneSpec()
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(count):
        spec = SceneSpec(
            image_size=base.image_size,
            num_objects=int(rng.integers(1, 6)),
            occlusion_rate=base.occlusion_rate,
            truncation_rate=base.truncation_rate,
            seed=int(rng.integers(2**31)),
            min_size=base.min_size,
            max_size=base.max_size,
            noise=base.noise,
        )
        scenes.append(generate_scene(spec))
    return scenes


def export_dataset(scenes, directory) -> Path:
    """Write each image as raw little-endian float64 plus an ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(scenes):
        name = f"scene_{i:05d}.f64"
        s.image.astype("<f8").tofile(directory / name)
        entries.append({
            "file": name,
            "shape": list(s.image.shape),
            "seed": s.seed,
            "boxes": [[b.x, b.y, b.w, b.h] for b in s.boxes],
            "tiers": list(s.tiers),
            "covered": list(s.covered),
        })
    index = {"format_version": 1, "dtype": "float64-le", "scenes": entries}
    (directory / "index.json").write_text(json.dumps(index, indent=2))
    return directory / "index.json"


def import_dataset(directory) -> list:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    scenes = []
    for e in index["scenes"]:
        image = np.fromfile(directory / e["file"], dtype="<f8").reshape(e["shape"]).astype(np.float64)
        boxes = [Roi(*b) for b in e["boxes"]]
        scenes.append(Scene(image, boxes, list(e["tiers"]), list(e["covered"]), e["seed"]))
    return scenes
