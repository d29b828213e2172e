import math

import numpy as np
import pytest

from densebox.groundtruth import GroundTruthMap
from densebox.sampling import (
    LossWeights,
    MiningConfig,
    SampleMask,
    detection_loss,
    format_log_line,
    full_loss,
    hard_pool_size,
    mine_and_select,
    parse_log_line,
)
from densebox.tensor import Tensor


def random_problem(rng, shape=(60, 60), p_pos=None, p_ign=None):
    p_pos = rng.uniform(0, 0.05) if p_pos is None else p_pos
    p_ign = rng.uniform(0, 0.3) if p_ign is None else p_ign
    labels = (rng.uniform(size=shape) < p_pos).astype(float)
    ignore = ((rng.uniform(size=shape) < p_ign) & (labels == 0)).astype(float)
    loss = rng.uniform(size=shape)
    return loss, labels, ignore


def make_gt(score, reg=None):
    h, w = score.shape
    return GroundTruthMap(
        score=score,
        reg=np.zeros((4, h, w)) if reg is None else reg,
        landmarks=np.zeros((0, h, w)),
        ignore=np.zeros((h, w)),
    )


def mask_from(M):
    M = np.asarray(M, dtype=float)
    return SampleMask(np.zeros_like(M), M.copy(), M)


class TestMining:
    def test_ten_positives(self):
        rng = np.random.default_rng(0)
        labels = np.zeros((60, 60))
        labels.reshape(-1)[rng.choice(3600, 10, replace=False)] = 1
        m = mine_and_select(rng.uniform(size=(60, 60)), labels, np.zeros((60, 60)), MiningConfig())
        assert m.pool_size == 36 == math.ceil(0.01 * 3590)
        assert (m.n_hard, m.n_rand) == (5, 5)
        assert int(m.f_sel.sum()) == 20

    def test_hard_negatives_are_top_losses(self):
        rng = np.random.default_rng(1)
        loss, labels, ignore = random_problem(rng)
        m = mine_and_select(loss, labels, ignore, MiningConfig(hard_share=1.0))
        eligible = (labels == 0) & (ignore == 0)
        threshold = np.sort(loss[eligible])[::-1][m.pool_size - 1]
        chosen = (m.f_sel > 0) & (labels == 0)
        # every pool member is taken; the remainder comes from outside the pool
        assert m.n_hard == m.pool_size
        assert int(np.sum(loss[chosen] >= threshold)) == m.pool_size

    def test_only_positives_when_all_ignored(self):
        labels = np.zeros((10, 10))
        labels[4:6, 4:6] = 1
        m = mine_and_select(np.ones((10, 10)), labels, 1.0 - labels, MiningConfig())
        np.testing.assert_array_equal(m.f_sel, labels)
        assert m.n_hard == m.n_rand == 0

    def test_equal_losses_take_first_in_row_major_order(self):
        labels = np.zeros((20, 20))
        labels[0, :4] = 1
        m = mine_and_select(np.ones((20, 20)), labels, np.zeros((20, 20)), MiningConfig(rng_seed=3))
        assert m.pool_size == 4
        assert m.n_hard + m.n_rand == 4
        assert m.f_sel[0, 4] == 1 and m.f_sel[0, 5] == 1  # two hard picks are the first eligible pixels

    def test_no_positives(self):
        m = mine_and_select(np.ones((30, 30)), np.zeros((30, 30)), np.zeros((30, 30)), MiningConfig())
        assert m.no_positives
        assert int(m.f_sel.sum()) == 16

    def test_fewer_eligible_than_quota(self):
        labels = np.zeros((4, 4))
        labels[:3] = 1
        ignore = np.zeros((4, 4))
        ignore[3, :2] = 1
        m = mine_and_select(np.ones((4, 4)), labels, ignore, MiningConfig())
        assert int(m.f_sel.sum()) == 12 + 2

    def test_shortfall_backfilled_from_pool(self):
        labels = np.zeros((10, 10))
        labels.reshape(-1)[:40] = 1
        ignore = np.zeros((10, 10))
        ignore.reshape(-1)[40:55] = 1
        # 45 eligible negatives, quota 40, pool 1: 1 hard, 39 random out of 44
        m = mine_and_select(np.arange(100.0).reshape(10, 10), labels, ignore, MiningConfig(hard_fraction=0.01))
        assert (m.n_hard, m.n_rand, m.pool_size) == (1, 39, 1)
        m = mine_and_select(np.arange(100.0).reshape(10, 10), labels, ignore, MiningConfig(hard_fraction=1.0, hard_share=0.0))
        assert m.n_hard + m.n_rand == 40

    def test_pool_size_rounding(self):
        assert hard_pool_size(300, 0.01) == 3
        assert hard_pool_size(301, 0.01) == 4
        assert hard_pool_size(0, 0.01) == 0

    def test_seeded_selection_is_deterministic(self):
        loss, labels, ignore = random_problem(np.random.default_rng(4))
        a = mine_and_select(loss, labels, ignore, MiningConfig(rng_seed=9))
        b = mine_and_select(loss, labels, ignore, MiningConfig(rng_seed=9))
        np.testing.assert_array_equal(a.f_sel, b.f_sel)

    def test_invariants_random(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            loss, labels, ignore = random_problem(rng, shape=(int(rng.integers(4, 40)), int(rng.integers(4, 40))))
            m = mine_and_select(loss, labels, ignore, MiningConfig(), rng)
            n_pos = int(labels.sum())
            eligible = int(((labels == 0) & (ignore == 0)).sum())
            n_neg = int(((m.f_sel > 0) & (labels == 0)).sum())
            quota = n_pos if n_pos else 16
            assert n_neg == min(quota, eligible)
            assert m.pool_size == math.ceil(round(0.01 * eligible, 9))
            assert not np.any((m.f_sel > 0) & (ignore > 0))
            assert np.all(m.f_sel[labels > 0] == 1)
            np.testing.assert_array_equal(m.M, (1 - ignore) * m.f_sel)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            MiningConfig(hard_fraction=0.0)


class TestDetectionLoss:
    def test_perfect_prediction(self):
        score = np.zeros((4, 4))
        score[1, 1] = 1
        reg = np.random.default_rng(0).normal(size=(4, 4, 4))
        loss, _ = detection_loss(Tensor(score[None]), Tensor(reg), make_gt(score, reg), mask_from(np.ones((4, 4))), LossWeights())
        assert loss.item() == 0.0

    def test_hand_value(self):
        score = np.array([[1.0, 0.0]])
        reg_t = np.zeros((4, 1, 2))
        pred_score = np.array([[[0.5, 0.1]]])
        pred_reg = np.zeros((4, 1, 2))
        pred_reg[2, 0, 0] = 0.2
        pred_reg[:, 0, 1] = 5.0  # background pixel: gated off
        loss, parts = detection_loss(
            Tensor(pred_score), Tensor(pred_reg), make_gt(score, reg_t), mask_from(np.ones((1, 2))), LossWeights(lambda_loc=3)
        )
        assert loss.item() == pytest.approx((0.25 + 0.01) / 2 + 3 * 0.04)
        assert loss.item() == pytest.approx(0.25)
        assert parts["cls_loss"] == pytest.approx(0.13)

    def test_no_selected_positive_zeroes_regression(self):
        rng = np.random.default_rng(1)
        score = np.zeros((5, 5))
        score[2, 2] = 1
        M = np.ones((5, 5))
        M[2, 2] = 0
        _, parts = detection_loss(Tensor(rng.normal(size=(1, 5, 5))), Tensor(rng.normal(size=(4, 5, 5))),
                                  make_gt(score), mask_from(M), LossWeights())
        assert parts["reg_loss"] == 0.0

    def test_regression_gradient_gated(self):
        rng = np.random.default_rng(2)
        score = (rng.uniform(size=(8, 8)) < 0.3).astype(float)
        pred_reg = Tensor(rng.normal(size=(4, 8, 8)), requires_grad=True)
        loss, _ = detection_loss(Tensor(rng.normal(size=(1, 8, 8))), pred_reg, make_gt(score, rng.normal(size=(4, 8, 8))),
                                 mask_from(np.ones((8, 8))), LossWeights())
        loss.backward()
        assert np.all(pred_reg.grad[:, score == 0] == 0.0)
        assert np.any(pred_reg.grad[:, score > 0] != 0.0)


class TestFullLoss:
    @pytest.mark.parametrize(
        "det,lm,rf,expected",
        [(0.0, 0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 1.0), (0.4, 0.2, 0.1, 0.6)],
    )
    def test_values(self, det, lm, rf, expected):
        assert full_loss(det, lm, rf, LossWeights()) == pytest.approx(expected)

    def test_tensor_inputs(self):
        out = full_loss(Tensor(np.array(0.4)), Tensor(np.array(0.2)), 0.1, LossWeights())
        assert out.item() == pytest.approx(0.6)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_lm=-1.0)


class TestLogLine:
    def test_roundtrip(self):
        rec = {"iter": 3, "det_loss": 0.5, "lm_loss": 0.25, "rf_loss": 0.125, "full_loss": 0.75,
               "n_pos": 10, "n_hard": 5, "n_rand": 5}
        line = format_log_line(rec)
        assert line.startswith("iter=3 det_loss=0.5 ")
        assert parse_log_line(line) == rec
