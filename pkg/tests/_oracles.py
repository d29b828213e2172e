"""Brute-force reference implementations used as test oracles."""

from __future__ import annotations

import numpy as np


def brute_force_iou(a, b) -> float:
    """Area overlap by inclusion-exclusion on explicit corner comparisons."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def brute_force_nms(boxes, scores, thr) -> list[int]:
    """A box survives iff no higher-ranked survivor overlaps it by more than ``thr``.

    Ranks are descending score with input order breaking ties; survivors are
    decided in rank order against every earlier survivor.
    """
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep: list[int] = []
    for i in ranked:
        if all(brute_force_iou(boxes[i], boxes[j]) <= thr for j in keep):
            keep.append(i)
    return keep


def random_boxes(rng: np.random.Generator, n: int, grid: bool = False) -> np.ndarray:
    """``n`` boxes in a 80x80 field; ``grid`` snaps to a coarse lattice to force exact ties."""
    xy = rng.uniform(0, 50, size=(n, 2))
    wh = rng.uniform(1, 30, size=(n, 2))
    if grid:
        xy, wh = np.round(xy / 5) * 5, np.round(wh / 5) * 5 + 5
    return np.concatenate([xy, xy + wh], axis=1)
