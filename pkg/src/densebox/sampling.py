"""Balance sampling and masked multi-task losses.

Per patch, every positive pixel is trained together with an equal number of
negatives: half from the hardest negatives of the current forward pass, the
rest drawn uniformly from the remaining negatives.  Gray-zone pixels never
contribute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .groundtruth import GroundTruthMap
from .tensor import Tensor, masked_l2, weighted_sum


@dataclass
class LossWeights:
    lambda_loc: float = 3.0
    lambda_det: float = 1.0
    lambda_lm: float = 0.5

    def __post_init__(self):
        if min(self.lambda_loc, self.lambda_det, self.lambda_lm) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class MiningConfig:
    hard_fraction: float = 0.01
    hard_share: float = 0.5
    neg_pos_ratio: float = 1.0
    rng_seed: int = 0
    empty_negatives: int = 16   # negatives taken from patches without positives
    refine_own_mask: bool = False

    def __post_init__(self):
        if not 0.0 < self.hard_fraction <= 1.0:
            raise ValueError("hard_fraction must be in (0, 1]")
        if not 0.0 <= self.hard_share <= 1.0:
            raise ValueError("hard_share must be in [0, 1]")


@dataclass
class SampleMask:
    f_ign: np.ndarray
    f_sel: np.ndarray
    M: np.ndarray
    n_pos: int = 0
    n_hard: int = 0
    n_rand: int = 0
    pool_size: int = 0
    no_positives: bool = False


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def hard_pool_size(n_eligible: int, hard_fraction: float) -> int:
    # rounding guards against 0.01 * 300 == 3.0000000000000004
    return int(math.ceil(round(hard_fraction * n_eligible, 9)))


def mine_and_select(
    cls_loss_map: np.ndarray,
    labels: np.ndarray,
    ignore: np.ndarray,
    cfg: MiningConfig,
    rng: np.random.Generator | None = None,
) -> SampleMask:
    """Select training pixels for one map.

    ``cls_loss_map`` holds the per-pixel classification loss of the current
    forward pass.  Hard negatives are the top ``hard_fraction`` of eligible
    negatives (label 0, not ignored) by loss, ties broken in row-major order.
    """
    loss = np.asarray(cls_loss_map, dtype=np.float64).reshape(-1)
    lab = np.asarray(labels).reshape(-1) > 0
    ign = np.asarray(ignore).reshape(-1) > 0
    if not (loss.shape == lab.shape == ign.shape):
        raise ValueError("loss, label and ignore maps must have the same size")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)

    eligible = np.flatnonzero(~lab & ~ign)
    n_pos = int(lab.sum())
    quota = _round_half_up(cfg.neg_pos_ratio * n_pos) if n_pos else int(cfg.empty_negatives)
    quota = min(quota, eligible.size)

    pool_size = hard_pool_size(eligible.size, cfg.hard_fraction) if eligible.size else 0
    ranked = eligible[np.argsort(-loss[eligible], kind="stable")]
    pool = ranked[:pool_size]
    rest = ranked[pool_size:]

    n_hard = min(_round_half_up(quota * cfg.hard_share), pool_size)
    n_rand = quota - n_hard
    chosen = [pool[:n_hard]]
    if n_rand <= rest.size:
        rest_sorted = np.sort(rest)
        chosen.append(rest_sorted[rng.choice(rest.size, size=n_rand, replace=False)] if n_rand else rest[:0])
    else:
        chosen.append(rest)
        backfill = n_rand - rest.size
        chosen.append(pool[n_hard:n_hard + backfill])
        n_hard += backfill
        n_rand = rest.size

    sel = lab.copy()
    sel[np.concatenate(chosen)] = True
    shape = np.asarray(labels).shape
    f_sel = sel.reshape(shape).astype(np.float64)
    f_ign = ign.reshape(shape).astype(np.float64)
    M = (1.0 - f_ign) * f_sel
    return SampleMask(f_ign, f_sel, M, n_pos, n_hard, n_rand, pool_size, n_pos == 0)


def classification_loss_map(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-pixel squared error used for ranking negatives."""
    return (np.asarray(pred) - np.asarray(target)) ** 2


def detection_loss(
    pred_score: Tensor,
    pred_reg: Tensor,
    gt: GroundTruthMap,
    mask: SampleMask,
    w: LossWeights,
) -> tuple[Tensor, dict]:
    """Masked classification loss plus gated, weighted box regression.

    Classification is averaged over selected pixels; regression is summed
    over the four channels and averaged over selected positive pixels.
    """
    M = mask.M.reshape(1, *mask.M.shape)
    cls = masked_l2(pred_score, gt.score[None], M)
    gate = (gt.score > 0) * mask.M
    n_pos = float(gate.sum())
    reg = masked_l2(pred_reg, gt.reg, np.broadcast_to(gate, pred_reg.shape), normalizer=max(1.0, n_pos))
    total = weighted_sum([cls, reg], [1.0, w.lambda_loc])
    return total, {"cls_loss": cls.item(), "reg_loss": reg.item()}


def landmark_masks(pred_lm: np.ndarray, gt: GroundTruthMap, cfg: MiningConfig, rng) -> list[SampleMask]:
    """Independent mining per landmark channel."""
    out = []
    for k in range(gt.landmarks.shape[0]):
        loss_k = classification_loss_map(pred_lm[k], gt.landmarks[k])
        out.append(mine_and_select(loss_k, gt.landmarks[k], gt.landmark_ignore[k], cfg, rng))
    return out


def landmark_loss(pred_lm: Tensor, gt: GroundTruthMap, masks: list[SampleMask]) -> Tensor:
    M = np.stack([m.M for m in masks])
    return masked_l2(pred_lm, gt.landmarks, M)


def refine_loss(pred_refine: Tensor, gt: GroundTruthMap, mask: SampleMask) -> Tensor:
    return masked_l2(pred_refine, gt.score[None], mask.M[None])


def full_loss(det, lm, rf, w: LossWeights):
    """``lambda_det * det + lambda_lm * lm + rf`` on tensors or plain numbers."""
    if all(not isinstance(t, Tensor) for t in (det, lm, rf)):
        return w.lambda_det * det + w.lambda_lm * lm + rf
    terms = [t if isinstance(t, Tensor) else Tensor(np.asarray(float(t))) for t in (det, lm, rf)]
    return weighted_sum(terms, [w.lambda_det, w.lambda_lm, 1.0])


LOG_FIELDS = ("iter", "det_loss", "lm_loss", "rf_loss", "full_loss", "n_pos", "n_hard", "n_rand")


def format_log_line(record: dict) -> str:
    parts = []
    for key in LOG_FIELDS:
        v = record[key]
        parts.append(f"{key}={v:d}" if key in ("iter", "n_pos", "n_hard", "n_rand") else f"{key}={v:.8g}")
    return " ".join(parts)


def parse_log_line(line: str) -> dict:
    out: dict = {}
    for tok in line.split():
        key, _, val = tok.partition("=")
        out[key] = int(val) if key in ("iter", "n_pos", "n_hard", "n_rand") else float(val)
    return out


