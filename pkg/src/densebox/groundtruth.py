"""Ground-truth map encoding for training patches.

A patch of size P x P is labelled on a (P/4) x (P/4) output grid.  Output
pixel ``(row, col)`` sits at the continuous output coordinate
``(col + 0.5, row + 0.5)``; one output unit spans ``down_factor`` input pixels,
so the pixel's receptive-field centre in the patch is ``4 * (col + 0.5)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import BBox

Point = tuple[float, float]


@dataclass
class GeometryConfig:
    patch_size: int = 240
    target_height: float = 50.0
    down_factor: int = 4
    r_c_factor: float = 0.3
    scale_range: tuple[float, float] = (0.8, 1.25)
    r_near: float = 2.0
    r_l: float = 1.0
    n_landmarks: int = 4
    reg_norm: float | None = None

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)  # type: ignore[assignment]
        if self.reg_norm is None:
            self.reg_norm = self.target_height / self.down_factor
        if self.down_factor != 4:
            raise ValueError("down_factor is fixed at 4")
        if self.patch_size % self.down_factor:
            raise ValueError("down_factor must divide patch_size")
        lo, hi = self.scale_range
        if not lo < 1.0 < hi:
            raise ValueError(f"scale_range must straddle 1, got {self.scale_range}")
        if self.r_c_factor <= 0:
            raise ValueError("r_c_factor must be positive")

    @property
    def out_size(self) -> int:
        return self.patch_size // self.down_factor

    def in_range(self, box_height: float) -> bool:
        """Whether a box of this height (patch pixels) is labelled positive."""
        lo, hi = self.scale_range
        return lo * self.target_height <= box_height <= hi * self.target_height


@dataclass
class ObjectAnnotation:
    box: BBox
    landmarks: list[Point | None] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "box": self.box.as_list(),
            "landmarks": [None if p is None else [float(p[0]), float(p[1])] for p in self.landmarks],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ObjectAnnotation":
        lms = [None if p is None else (float(p[0]), float(p[1])) for p in obj.get("landmarks", [])]
        return cls(BBox(*map(float, obj["box"])), lms)


def load_annotation(path: str | Path) -> list[ObjectAnnotation]:
    doc = json.loads(Path(path).read_text())
    objects = doc["objects"] if isinstance(doc, dict) else doc
    return [ObjectAnnotation.from_json(o) for o in objects]


def dump_annotation(objects: Sequence[ObjectAnnotation], **extra) -> str:
    doc = dict(extra)
    doc["objects"] = [o.to_json() for o in objects]
    return json.dumps(doc, indent=1, sort_keys=True)


@dataclass
class GroundTruthMap:
    score: np.ndarray        # (h, w)
    reg: np.ndarray          # (4, h, w)
    landmarks: np.ndarray    # (n, h, w)
    ignore: np.ndarray       # (h, w)
    landmark_ignore: np.ndarray | None = None  # (n, h, w)
    n_skipped: int = 0

    def __post_init__(self):
        if self.landmark_ignore is None:
            self.landmark_ignore = np.zeros_like(self.landmarks)

    def flipped(self) -> "GroundTruthMap":
        """Maps for the horizontally mirrored patch (landmark channels unchanged)."""
        reg = self.reg[:, :, ::-1]
        reg = np.stack([-reg[2], reg[1], -reg[0], reg[3]])
        return GroundTruthMap(
            self.score[:, ::-1].copy(), reg, self.landmarks[:, :, ::-1].copy(),
            self.ignore[:, ::-1].copy(), self.landmark_ignore[:, :, ::-1].copy(), self.n_skipped,
        )


def pixel_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Output-space coordinates (x, y) of every pixel centre, shape (h, w)."""
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return xs, ys


def regression_target(pixel: Point, box: BBox, cfg: GeometryConfig) -> np.ndarray:
    """Normalized corner offsets of ``box`` seen from ``pixel`` (both in output units)."""
    x, y = pixel
    return np.array([x - box.x_t, y - box.y_t, x - box.x_b, y - box.y_b]) / cfg.reg_norm


def fill_disc(shape: tuple[int, int], cx: float, cy: float, radius: float) -> np.ndarray:
    """Boolean mask of pixel centres within ``radius`` of ``(cx, cy)``."""
    h, w = shape
    out = np.zeros(shape, dtype=bool)
    x0, x1 = max(0, int(math.floor(cx - radius - 1))), min(w, int(math.ceil(cx + radius + 1)))
    y0, y1 = max(0, int(math.floor(cy - radius - 1))), min(h, int(math.ceil(cy + radius + 1)))
    if x0 >= x1 or y0 >= y1:
        return out
    ys = np.arange(y0, y1)[:, None] + 0.5
    xs = np.arange(x0, x1)[None, :] + 0.5
    out[y0:y1, x0:x1] = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius * radius
    return out


def compute_ignore_flags(score: np.ndarray, r_near: float = 2.0) -> np.ndarray:
    """Gray-zone flags: non-positive pixels with a positive within ``r_near``."""
    pos = np.asarray(score) > 0
    h, w = pos.shape
    near = np.zeros_like(pos)
    r = int(math.floor(r_near))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dx * dx + dy * dy > r_near * r_near:
                continue
            # near[y, x] |= pos[y + dy, x + dx]
            ys = slice(max(0, -dy), min(h, h - dy))
            xs = slice(max(0, -dx), min(w, w - dx))
            ys_src = slice(max(0, dy), min(h, h + dy))
            xs_src = slice(max(0, dx), min(w, w + dx))
            near[ys, xs] |= pos[ys_src, xs_src]
    return (near & ~pos).astype(np.float64)


def encode_patch(
    annotation: Sequence[ObjectAnnotation],
    cfg: GeometryConfig,
    shape: tuple[int, int] | None = None,
) -> GroundTruthMap:
    """Build score, regression, landmark and ignore maps for one patch.

    ``annotation`` is in patch pixel coordinates.  ``shape`` is the patch
    (height, width) and defaults to ``patch_size`` square.  Boxes are clipped
    to the patch; boxes entirely outside are skipped and counted.
    """
    ph, pw = shape if shape is not None else (cfg.patch_size, cfg.patch_size)
    f = cfg.down_factor
    h, w = ph // f, pw // f
    n = cfg.n_landmarks

    score = np.zeros((h, w))
    reg = np.zeros((4, h, w))
    lms = np.zeros((n, h, w))
    unlabelled = np.zeros((n, h, w), dtype=bool)
    skipped = 0

    in_range: list[tuple[BBox, list[Point | None]]] = []
    for obj in annotation:
        clipped = obj.box.clipped(pw, ph)
        if clipped is None:
            skipped += 1
            continue
        if cfg.in_range(clipped.height):
            in_range.append((clipped.scaled(1.0 / f), obj.landmarks))

    if in_range:
        xs, ys = pixel_centers(h, w)
        centers = np.array([b.center for b, _ in in_range])
        d2 = (xs[None] - centers[:, 0, None, None]) ** 2 + (ys[None] - centers[:, 1, None, None]) ** 2
        nearest = np.argmin(d2, axis=0)
        corners = np.array([[b.x_t, b.y_t, b.x_b, b.y_b] for b, _ in in_range])
        c = corners[nearest]  # (h, w, 4)
        reg = np.stack([xs - c[..., 0], ys - c[..., 1], xs - c[..., 2], ys - c[..., 3]]) / cfg.reg_norm

        for box, points in in_range:
            cx, cy = box.center
            score[fill_disc((h, w), cx, cy, cfg.r_c_factor * box.height)] = 1.0
            for k in range(n):
                p = points[k] if k < len(points) else None
                if p is None:
                    # unannotated landmark: the whole object region is neither positive nor negative
                    unlabelled[k] |= _box_mask((h, w), box)
                    continue
                lms[k][fill_disc((h, w), p[0] / f, p[1] / f, cfg.r_l)] = 1.0

    ignore = compute_ignore_flags(score, cfg.r_near)
    lm_ignore = np.zeros((n, h, w))
    for k in range(n):
        gray = compute_ignore_flags(lms[k], cfg.r_near) > 0
        lm_ignore[k] = (gray | unlabelled[k]) & (lms[k] == 0)
    return GroundTruthMap(score, reg, lms, ignore, lm_ignore, skipped)


def _box_mask(shape: tuple[int, int], box: BBox) -> np.ndarray:
    xs, ys = pixel_centers(*shape)
    return (xs >= box.x_t) & (xs <= box.x_b) & (ys >= box.y_t) & (ys <= box.y_b)
