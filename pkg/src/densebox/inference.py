"""Image-pyramid detection: per-scale forward, per-pixel box decoding, global NMS."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import BBox, Detection, nms_indices
from .imaging import pad_to_multiple, resize
from .model import STRIDE, Model, OutputMaps, image_to_input
from .tensor import no_grad


@dataclass
class PyramidConfig:
    min_exp: float = -3.0
    max_exp: float = 1.2
    step: float = 0.3
    score_threshold: float = 0.5
    nms_iou: float = 0.5          # 0.75 for the strict-overlap profile
    reg_norm: float = 12.5
    max_side: int | None = 800
    precision: str = "float64"    # or "float32"

    def __post_init__(self):
        if self.min_exp > self.max_exp:
            raise ValueError("min_exp must not exceed max_exp")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValueError("nms_iou must be in (0, 1]")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"unknown precision {self.precision!r}")


def pyramid_scales(cfg: PyramidConfig) -> list[float]:
    """``2 ** (min_exp + k * step)`` for every k whose exponent stays within ``max_exp``."""
    out = []
    k = 0
    while True:
        e = cfg.min_exp + k * cfg.step
        if e > cfg.max_exp + 1e-9:
            return out
        out.append(2.0 ** e)
        k += 1


def decode_arrays(
    score: np.ndarray,
    reg: np.ndarray,
    scale: float,
    threshold: float,
    reg_norm: float,
    clip_to: tuple[float, float] | None = None,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Vectorised decoding of one score map and its 4-channel offsets.

    Returns (boxes (n, 4) in original-image coordinates, scores (n,), number
    of degenerate boxes dropped).  Output pixel ``(row, col)`` sits at
    ``(col + 0.5, row + 0.5)`` in output units.
    """
    rows, cols = np.nonzero(score > threshold)
    if rows.size == 0:
        return np.zeros((0, 4)), np.zeros(0), 0
    xi = cols + 0.5
    yi = rows + 0.5
    d = reg[:, rows, cols].astype(np.float64) * reg_norm
    f = STRIDE / scale
    boxes = np.stack([(xi - d[0]) * f, (yi - d[1]) * f, (xi - d[2]) * f, (yi - d[3]) * f], axis=1)
    if clip_to is not None:
        w, h = clip_to
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, w)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, h)
    ok = (boxes[:, 0] < boxes[:, 2]) & (boxes[:, 1] < boxes[:, 3]) & np.all(np.isfinite(boxes), axis=1)
    return boxes[ok], score[rows, cols].astype(np.float64)[ok], int((~ok).sum())


def _channels(out: OutputMaps, use_refine: bool) -> tuple[np.ndarray, np.ndarray]:
    chosen = out.refine_score if use_refine and out.refine_score is not None else out.score
    return chosen.data[0], out.reg.data


def decode_map(
    out: OutputMaps,
    scale: float,
    cfg: PyramidConfig,
    use_refine: bool = False,
    clip_to: tuple[float, float] | None = None,
    stats: dict | None = None,
) -> list[Detection]:
    """Every output pixel above the score threshold as a box in original-image coordinates."""
    score, reg = _channels(out, use_refine)
    boxes, scores, n_bad = decode_arrays(score, reg, scale, cfg.score_threshold, cfg.reg_norm, clip_to)
    if stats is not None:
        stats["degenerate"] = stats.get("degenerate", 0) + n_bad
    return [Detection(BBox(*b), float(s), scale) for b, s in zip(boxes.tolist(), scores)]


def detect(image: np.ndarray, model: Model, cfg: PyramidConfig, use_refine: bool = False) -> list[Detection]:
    """Run the detector over the scale pyramid and suppress duplicates across scales."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError(f"detect needs a non-empty HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    base = 1.0
    if cfg.max_side and max(h, w) > cfg.max_side:
        base = cfg.max_side / max(h, w)
        image = resize(image, base)
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    if model.dtype != dtype:
        model = model.astype(dtype)

    all_boxes, all_scores, all_scales = [], [], []
    with no_grad():
        for s in pyramid_scales(cfg):
            level = pad_to_multiple(resize(image, s), 8)
            out = model.forward(image_to_input(level, dtype))
            score, reg = _channels(out, use_refine)
            boxes, scores, _ = decode_arrays(score, reg, base * s, cfg.score_threshold, cfg.reg_norm, (w, h))
            all_boxes.append(boxes)
            all_scores.append(scores)
            all_scales.append(np.full(len(scores), base * s))
    boxes = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    scales = np.concatenate(all_scales)
    if not len(scores):
        return []
    keep = nms_indices(boxes, scores, cfg.nms_iou)
    return [Detection(BBox(*boxes[i].tolist()), float(scores[i]), float(scales[i])) for i in keep]


def detections_to_json(results: Mapping[str, Sequence[Detection]]) -> str:
    doc = {"images": {key: [d.to_json() for d in dets] for key, dets in results.items()}}
    return json.dumps(doc, indent=1, sort_keys=True)


def load_detections(path: str | Path) -> dict[str, list[Detection]]:
    doc = json.loads(Path(path).read_text())
    return {
        key: [Detection(BBox(*d["box"]), float(d["score"]), float(d.get("scale", 1.0))) for d in dets]
        for key, dets in doc["images"].items()
    }
