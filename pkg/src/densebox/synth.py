"""Synthetic face-like scenes and training patch sampling.

Objects are filled ellipses with four dark landmark dots (two eyes, nose,
mouth) drawn over textured clutter.  Landmark order is: image-left eye,
image-right eye, nose, mouth; a horizontal flip swaps the two eyes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import BBox, iou
from .groundtruth import GeometryConfig, ObjectAnnotation, dump_annotation, load_annotation
from .imaging import read_ppm, resample, to_uint8, write_ppm

FLIP_PAIRS = ((0, 1),)


@dataclass
class SceneConfig:
    width: int = 192
    height: int = 192
    n_objects: tuple[int, int] = (1, 3)        # inclusive range
    object_height: tuple[float, float] = (28.0, 96.0)
    aspect: tuple[float, float] = (0.7, 0.9)  # width / height
    clutter: int = 24                          # shapes per scene
    noise: float = 6.0
    n_landmarks: int = 4
    missing_landmarks: float = 0.0             # fraction of objects without landmark annotation

    def __post_init__(self):
        self.n_objects = tuple(self.n_objects)  # type: ignore[assignment]
        self.object_height = tuple(self.object_height)  # type: ignore[assignment]
        self.aspect = tuple(self.aspect)  # type: ignore[assignment]
        if self.n_landmarks not in (0, 4):
            raise ValueError("synthetic faces carry 0 or 4 landmarks")


@dataclass
class PatchConfig:
    patch_size: int = 240
    target_height: float = 50.0
    jitter: bool = True
    shift: float | None = None                   # +/- translation, default 25/240 of the patch side
    scale_jitter: tuple[float, float] = (0.8, 1.25)
    flip_prob: float = 0.5
    random_scale: tuple[float, float] = (2 ** -2.0, 2 ** 1.5)  # patch px per scene px, log-uniform

    def __post_init__(self):
        self.scale_jitter = tuple(self.scale_jitter)  # type: ignore[assignment]
        self.random_scale = tuple(self.random_scale)  # type: ignore[assignment]
        if self.patch_size <= 0 or not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("patch_size must be positive and flip_prob in [0, 1]")

    @classmethod
    def from_geometry(cls, geo: GeometryConfig, **kw) -> "PatchConfig":
        return cls(patch_size=geo.patch_size, target_height=geo.target_height, **kw)

    @property
    def max_shift(self) -> float:
        return self.shift if self.shift is not None else 25.0 * self.patch_size / 240.0


@dataclass
class SceneAnnotation:
    image: np.ndarray                 # HxWx3 uint8
    objects: list[ObjectAnnotation]


@dataclass
class PatchSample:
    patch: np.ndarray                 # PxPx3 float in [0, 255]
    annotation: list[ObjectAnnotation]
    kind: str                         # "positive" | "random"
    scale: float = 1.0                # patch pixels per scene pixel
    origin: tuple[float, float] = (0.0, 0.0)   # scene coords of the patch's top-left corner
    flip: bool = False
    center_index: int | None = None


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _grid(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def _paint(img: np.ndarray, mask: np.ndarray, color) -> None:
    img[mask] = color


def _ellipse(xs, ys, cx, cy, rx, ry) -> np.ndarray:
    return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0


def _background(rng: np.random.Generator, h: int, w: int, cfg: SceneConfig) -> np.ndarray:
    xs, ys = _grid(h, w)
    c0 = rng.uniform(30, 225, 3)
    c1 = rng.uniform(30, 225, 3)
    ang = rng.uniform(0, 2 * math.pi)
    t = (np.cos(ang) * xs / w + np.sin(ang) * ys / h)
    t = (t - t.min()) / max(1e-9, t.max() - t.min())
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    for _ in range(cfg.clutter):
        kind = rng.integers(0, 4)
        color = rng.uniform(0, 255, 3)
        if kind == 0:
            x0, y0 = rng.uniform(-20, w), rng.uniform(-20, h)
            bw, bh = rng.uniform(4, 60, 2)
            _paint(img, (xs >= x0) & (xs <= x0 + bw) & (ys >= y0) & (ys <= y0 + bh), color)
        elif kind == 1:
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
            r = rng.uniform(2, 14)
            _paint(img, _ellipse(xs, ys, cx, cy, r, r), color)
        elif kind == 2:
            # thin stripe at a random angle
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
            a = rng.uniform(0, math.pi)
            d = np.abs(-(xs - cx) * math.sin(a) + (ys - cy) * math.cos(a))
            along = np.abs((xs - cx) * math.cos(a) + (ys - cy) * math.sin(a))
            _paint(img, (d <= rng.uniform(1, 3)) & (along <= rng.uniform(10, 60)), color)
        else:
            # featureless blob, a hard negative for the detector
            cx, cy = rng.uniform(0, w), rng.uniform(0, h)
            ry = rng.uniform(8, 40)
            _paint(img, _ellipse(xs, ys, cx, cy, ry * rng.uniform(0.5, 1.2), ry), color)
    return img


def _place_boxes(rng: np.random.Generator, cfg: SceneConfig, count: int) -> list[BBox]:
    boxes: list[BBox] = []
    lo, hi = cfg.object_height
    for _ in range(count):
        for _attempt in range(50):
            bh = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
            bw = bh * float(rng.uniform(*cfg.aspect))
            if bh >= cfg.height or bw >= cfg.width:
                continue
            x_t = float(rng.uniform(0, cfg.width - bw))
            y_t = float(rng.uniform(0, cfg.height - bh))
            box = BBox(x_t, y_t, x_t + bw, y_t + bh)
            # keep objects apart so each is unambiguous
            if all(iou(box, b) == 0.0 and _gap(box, b) >= 4.0 for b in boxes):
                boxes.append(box)
                break
    return boxes


def _gap(a: BBox, b: BBox) -> float:
    dx = max(b.x_t - a.x_b, a.x_t - b.x_b, 0.0)
    dy = max(b.y_t - a.y_b, a.y_t - b.y_b, 0.0)
    return max(dx, dy)


def _face(rng: np.random.Generator, box: BBox):
    """Landmark points and dot radii for a face filling ``box``."""
    cx, cy = box.center
    w, h = box.width, box.height
    j = lambda s: float(rng.uniform(-s, s)) * h  # noqa: E731
    eye_dx = 0.22 * w + j(0.02)
    eye_y = cy - 0.12 * h + j(0.02)
    points = [
        (cx - eye_dx, eye_y),
        (cx + eye_dx, eye_y),
        (cx + j(0.03), cy + 0.08 * h + j(0.02)),
        (cx + j(0.03), cy + 0.27 * h + j(0.02)),
    ]
    radii = [0.065 * h, 0.065 * h, 0.045 * h, 0.05 * h]
    return points, radii


def render_scene(seed: int | Sequence[int], cfg: SceneConfig):
    """Render one scene; also returns the per-object landmark pixel masks."""
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    img = _background(rng, h, w, cfg)
    count = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    boxes = _place_boxes(rng, cfg, count)
    xs, ys = _grid(h, w)
    objects: list[ObjectAnnotation] = []
    dot_masks: list[np.ndarray] = []
    for box in boxes:
        cx, cy = box.center
        skin = np.array([rng.uniform(170, 240), rng.uniform(120, 190), rng.uniform(80, 150)])
        _paint(img, _ellipse(xs, ys, cx, cy, box.width / 2, box.height / 2), skin)
        points, radii = _face(rng, box)
        dots = np.zeros((h, w), dtype=bool)
        for (px, py), r in zip(points, radii):
            m = _ellipse(xs, ys, px, py, r * (1.6 if r == radii[3] else 1.0), r)
            dots |= m
            _paint(img, m, skin * rng.uniform(0.15, 0.35))
        dot_masks.append(dots)
        missing = cfg.missing_landmarks > 0 and rng.uniform() < cfg.missing_landmarks
        lms = [None] * cfg.n_landmarks if missing else [(float(px), float(py)) for px, py in points[: cfg.n_landmarks]]
        objects.append(ObjectAnnotation(box, lms))
    img = img + rng.normal(0.0, cfg.noise, img.shape)
    return SceneAnnotation(to_uint8(img), objects), dot_masks


def generate_scene(seed: int | Sequence[int], cfg: SceneConfig) -> SceneAnnotation:
    """Deterministic synthetic scene for ``seed``."""
    return render_scene(seed, cfg)[0]


# ---------------------------------------------------------------------------
# patch sampling
# ---------------------------------------------------------------------------

def transform_objects(
    objects: Sequence[ObjectAnnotation], scale: float, origin: tuple[float, float], flip: bool, width: float
) -> list[ObjectAnnotation]:
    """Map scene annotations into a patch: ``p = scale * (x - origin)``, mirrored if ``flip``."""
    ox, oy = origin
    out = []
    for obj in objects:
        b = obj.box
        x_t, x_b = scale * (b.x_t - ox), scale * (b.x_b - ox)
        y_t, y_b = scale * (b.y_t - oy), scale * (b.y_b - oy)
        if flip:
            x_t, x_b = width - x_b, width - x_t
        lms = []
        for p in obj.landmarks:
            if p is None:
                lms.append(None)
                continue
            px, py = scale * (p[0] - ox), scale * (p[1] - oy)
            lms.append((width - px if flip else px, py))
        if flip:
            for a, c in FLIP_PAIRS:
                if max(a, c) < len(lms):
                    lms[a], lms[c] = lms[c], lms[a]
        out.append(ObjectAnnotation(BBox(x_t, y_t, x_b, y_b), lms))
    return out


def _fill(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(40, 215, 3)
    return base + rng.normal(0.0, 20.0, (size, size, 3))


def _crop(scene: SceneAnnotation, cfg: PatchConfig, rng, scale, origin, flip, kind, index=None) -> PatchSample:
    p = cfg.patch_size
    patch = resample(scene.image, p, p, scale, origin, flip, fill=lambda: _fill(rng, p))
    ann = transform_objects(scene.objects, scale, origin, flip, p)
    return PatchSample(np.clip(patch, 0, 255), ann, kind, scale, origin, flip, index)


def sample_positive_patch(scene: SceneAnnotation, index: int, cfg: PatchConfig, rng: np.random.Generator) -> PatchSample:
    """Crop centred on object ``index`` scaled to ``target_height``, then jittered."""
    if not 0 <= index < len(scene.objects):
        raise IndexError(f"scene has no object {index}")
    box = scene.objects[index].box
    scale = cfg.target_height / box.height
    tx = ty = 0.0
    flip = False
    if cfg.jitter:
        flip = bool(rng.uniform() < cfg.flip_prob)
        tx, ty = rng.uniform(-cfg.max_shift, cfg.max_shift, 2)
        scale *= float(rng.uniform(*cfg.scale_jitter))
    cx, cy = box.center
    half = cfg.patch_size / 2.0
    # object centre lands at (half + tx, half + ty) in the patch
    ox = cx - (half - tx if flip else half + tx) / scale
    oy = cy - (half + ty) / scale
    return _crop(scene, cfg, rng, scale, (float(ox), float(oy)), flip, "positive", index)


def sample_random_patch(scene: SceneAnnotation, cfg: PatchConfig, rng: np.random.Generator) -> PatchSample:
    """Crop at a log-uniform random scale and uniform location."""
    lo, hi = cfg.random_scale
    scale = float(math.exp(rng.uniform(math.log(lo), math.log(hi)))) if hi > lo else float(lo)
    crop = cfg.patch_size / scale
    h, w = scene.image.shape[:2]
    ox = float(rng.uniform(min(0.0, w - crop), max(0.0, w - crop)))
    oy = float(rng.uniform(min(0.0, h - crop), max(0.0, h - crop)))
    flip = bool(cfg.jitter and rng.uniform() < cfg.flip_prob)
    return _crop(scene, cfg, rng, scale, (ox, oy), flip, "random")


class PatchStream:
    """Endless deterministic stream of patches alternating positive / random."""

    def __init__(self, scenes: Sequence[SceneAnnotation], cfg: PatchConfig, seed: int):
        self.scenes = list(scenes)
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.count = 0
        self._with_objects = [i for i, s in enumerate(self.scenes) if s.objects]
        if not self.scenes:
            raise ValueError("no scenes to sample from")

    def next(self) -> PatchSample:
        positive = self.count % 2 == 0 and bool(self._with_objects)
        self.count += 1
        if positive:
            si = self._with_objects[int(self.rng.integers(len(self._with_objects)))]
            scene = self.scenes[si]
            return sample_positive_patch(scene, int(self.rng.integers(len(scene.objects))), self.cfg, self.rng)
        scene = self.scenes[int(self.rng.integers(len(self.scenes)))]
        return sample_random_patch(scene, self.cfg, self.rng)

    def batch(self, size: int) -> list[PatchSample]:
        return [self.next() for _ in range(size)]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def split_counts(n: int) -> tuple[int, int, int]:
    """80/10/10 train/val/test split."""
    n_val = n // 10
    n_test = n // 10
    return n - n_val - n_test, n_val, n_test


def write_dataset(out_dir: str | Path, count: int, cfg: SceneConfig, seed: int) -> dict:
    """Render ``count`` scenes to PPM + JSON and write ``manifest.json``."""
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    n_train, n_val, _ = split_counts(count)
    entries = []
    for i in range(count):
        scene = generate_scene((seed, i), cfg)
        stem = f"scene_{i:05d}"
        write_ppm(out / "scenes" / f"{stem}.ppm", scene.image)
        (out / "scenes" / f"{stem}.json").write_text(
            dump_annotation(scene.objects, image=f"{stem}.ppm", width=cfg.width, height=cfg.height)
        )
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        entries.append({
            "key": stem,
            "image": f"scenes/{stem}.ppm",
            "annotation": f"scenes/{stem}.json",
            "split": split,
            "n_objects": len(scene.objects),
        })
    manifest = {"version": 1, "seed": seed, "count": count, "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_manifest(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["root"] = str(path.parent)
    return manifest


def load_split(manifest: dict, split: str) -> list[tuple[str, SceneAnnotation]]:
    root = Path(manifest["root"])
    out = []
    for e in manifest["scenes"]:
        if e["split"] != split:
            continue
        image = read_ppm(root / e["image"])
        out.append((e["key"], SceneAnnotation(image, load_annotation(root / e["annotation"]))))
    return out
