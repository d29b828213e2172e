"""Detection matching, precision-recall and all-points average precision."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import BBox, Detection, iou_matrix, score_order
from .imaging import write_ppm


@dataclass
class MatchResult:
    tp: np.ndarray           # per detection (input order), bool
    gt_matched: np.ndarray   # per ground truth, bool
    scores: np.ndarray       # per detection
    matched_gt: np.ndarray   # gt index per detection, -1 for false positives

    @property
    def n_gt(self) -> int:
        return len(self.gt_matched)


def match_detections(dets: Sequence[Detection], gts: Sequence[BBox], iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching in descending score order.

    Each detection takes the unmatched ground truth with the highest IoU
    (ties to the lower index) provided the IoU is at least ``iou_threshold``.
    """
    n, m = len(dets), len(gts)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    tp = np.zeros(n, dtype=bool)
    matched = np.zeros(m, dtype=bool)
    owner = np.full(n, -1, dtype=np.int64)
    if n and m:
        ov = iou_matrix(np.array([d.bbox.as_list() for d in dets]), np.array([g.as_list() for g in gts]))
        for i in score_order(scores):
            cand = np.where(matched, -1.0, ov[i])
            j = int(np.argmax(cand))
            if cand[j] >= iou_threshold:
                matched[j] = True
                tp[i] = True
                owner[i] = j
    return MatchResult(tp, matched, scores, owner)


def pr_curve(results: Sequence[MatchResult]) -> tuple[np.ndarray, np.ndarray, int]:
    """Recall and precision after each detection, pooled over images by score rank."""
    n_gt = sum(r.n_gt for r in results)
    if n_gt == 0:
        raise ValueError("average precision is undefined without ground truth")
    scores = np.concatenate([r.scores for r in results]) if results else np.zeros(0)
    tp = np.concatenate([r.tp for r in results]) if results else np.zeros(0, dtype=bool)
    order = score_order(scores)
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    return recall, precision, n_gt


def average_precision(results: Sequence[MatchResult]) -> float:
    """Area under the monotone precision envelope (all-points interpolation)."""
    recall, precision, _ = pr_curve(results)
    if recall.size == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def eval_report(
    detections: dict[str, Sequence[Detection]],
    annotations: dict[str, Sequence[BBox]],
    iou_threshold: float,
) -> dict:
    missing = sorted(set(annotations) ^ set(detections))
    if missing:
        raise KeyError(f"image keys without a counterpart: {missing}")
    keys = sorted(annotations)
    results = [match_detections(detections[k], annotations[k], iou_threshold) for k in keys]
    recall, precision, n_gt = pr_curve(results)
    return {
        "iou_threshold": iou_threshold,
        "ap": average_precision(results),
        "n_gt": n_gt,
        "n_det": int(sum(len(r.scores) for r in results)),
        "pr_curve": [[float(r), float(p)] for r, p in zip(recall, precision)],
    }


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)


def render_pr_curve(path, report: dict, size: int = 200) -> None:
    """Plot the PR curve as white-on-black polyline into a PPM."""
    img = np.zeros((size, size, 3), dtype=np.uint8)
    pts = report["pr_curve"]
    prev = None
    for r, p in pts:
        x = int(round(r * (size - 1)))
        y = int(round((1.0 - p) * (size - 1)))
        if prev is not None:
            steps = max(abs(x - prev[0]), abs(y - prev[1]), 1)
            for t in np.linspace(0.0, 1.0, steps + 1):
                img[int(round(prev[1] + t * (y - prev[1]))), int(round(prev[0] + t * (x - prev[0])))] = 255
        else:
            img[y, x] = 255
        prev = (x, y)
    write_ppm(path, img)
