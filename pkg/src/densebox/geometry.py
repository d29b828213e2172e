"""Box arithmetic, overlap and greedy non-maximum suppression.

Boxes are closed real-coordinate rectangles ``(x_t, y_t, x_b, y_b)``; the area
is ``(x_b - x_t) * (y_b - y_t)`` with no +1 pixel convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BBox:
    x_t: float
    y_t: float
    x_b: float
    y_b: float

    def __post_init__(self):
        vals = (self.x_t, self.y_t, self.x_b, self.y_b)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.x_t > self.x_b or self.y_t > self.y_b:
            raise ValueError(f"inverted box {vals}")

    @property
    def width(self) -> float:
        return self.x_b - self.x_t

    @property
    def height(self) -> float:
        return self.y_b - self.y_t

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x_t + self.x_b), 0.5 * (self.y_t + self.y_b)

    def as_list(self) -> list[float]:
        return [self.x_t, self.y_t, self.x_b, self.y_b]

    def scaled(self, s: float) -> "BBox":
        return BBox(self.x_t * s, self.y_t * s, self.x_b * s, self.y_b * s)

    def clipped(self, width: float, height: float) -> "BBox | None":
        """Intersection with ``[0, width] x [0, height]``; None if empty."""
        x_t, y_t = max(0.0, self.x_t), max(0.0, self.y_t)
        x_b, y_b = min(float(width), self.x_b), min(float(height), self.y_b)
        if x_t >= x_b or y_t >= y_b:
            return None
        return BBox(x_t, y_t, x_b, y_b)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    score: float
    scale: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")
        if not self.scale > 0:
            raise ValueError("detection scale must be positive")

    def to_json(self) -> dict:
        return {"box": self.bbox.as_list(), "score": self.score, "scale": self.scale}


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_b, b.x_b) - max(a.x_t, b.x_t)
    ih = min(a.y_b, b.y_b) - max(a.y_t, b.y_t)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) coordinate arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def score_order(scores: Sequence[float]) -> np.ndarray:
    """Indices by descending score; equal scores keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS over arrays; returns kept indices in descending-score order.

    A box is suppressed when its IoU with an already-kept box is strictly
    greater than ``iou_threshold``.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = score_order(scores)
    keep: list[int] = []
    alive = np.ones(len(order), dtype=bool)
    sorted_boxes = boxes[order]
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        keep.append(int(order[pos]))
        rest = np.nonzero(alive[pos + 1:])[0] + pos + 1
        if rest.size:
            ov = iou_matrix(sorted_boxes[pos:pos + 1], sorted_boxes[rest])[0]
            alive[rest[ov > iou_threshold]] = False
    return np.asarray(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    if not dets:
        if not 0.0 < iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
        return []
    boxes = np.array([d.bbox.as_list() for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, iou_threshold)]
