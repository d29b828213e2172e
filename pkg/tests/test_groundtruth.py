import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from densebox.geometry import BBox
from densebox.groundtruth import (
    GeometryConfig,
    ObjectAnnotation,
    compute_ignore_flags,
    dump_annotation,
    encode_patch,
    load_annotation,
    regression_target,
)

CFG = GeometryConfig()


def lattice_count(cx, cy, r, h, w):
    """Pixels whose centre (col + 0.5, row + 0.5) lies within r of (cx, cy)."""
    return sum(
        1
        for row in range(h)
        for col in range(w)
        if (col + 0.5 - cx) ** 2 + (row + 0.5 - cy) ** 2 <= r * r
    )


def centred_box(h, w=None, cx=120.0, cy=120.0):
    w = 0.8 * h if w is None else w
    return BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


class TestGeometryConfig:
    def test_defaults(self):
        assert CFG.out_size == 60
        assert CFG.reg_norm == 12.5

    def test_invalid(self):
        with pytest.raises(ValueError):
            GeometryConfig(patch_size=242)
        with pytest.raises(ValueError):
            GeometryConfig(scale_range=(1.0, 1.25))
        with pytest.raises(ValueError):
            GeometryConfig(down_factor=8)


class TestEncodePatch:
    def test_empty(self):
        gt = encode_patch([], CFG)
        assert gt.score.shape == (60, 60)
        assert not gt.score.any() and not gt.reg.any() and not gt.landmarks.any()

    def test_positive_circle_count(self):
        gt = encode_patch([ObjectAnnotation(centred_box(50.0))], CFG)
        assert int(gt.score.sum()) == lattice_count(30.0, 30.0, 3.75, 60, 60)

    @pytest.mark.parametrize("h", [40.0, 47.3, 55.0, 62.5])
    def test_circle_count_off_centre(self, h):
        box = centred_box(h, cx=101.3, cy=77.9)
        gt = encode_patch([ObjectAnnotation(box)], CFG)
        assert int(gt.score.sum()) == lattice_count(101.3 / 4, 77.9 / 4, 0.3 * h / 4, 60, 60)

    def test_out_of_range_box_not_positive(self):
        big = ObjectAnnotation(centred_box(50.0, cx=60, cy=60))
        small = ObjectAnnotation(centred_box(20.0, cx=180, cy=180))
        gt = encode_patch([big, small], CFG)
        alone = encode_patch([big], CFG)
        np.testing.assert_array_equal(gt.score, alone.score)
        assert not gt.score[40:50, 40:50].any()

    def test_scale_range_bounds_inclusive(self):
        for h, expected in [(40.0, True), (39.99, False), (62.5, True), (62.51, False)]:
            gt = encode_patch([ObjectAnnotation(centred_box(h))], CFG)
            assert bool(gt.score.any()) == expected

    def test_clipped_and_skipped(self):
        outside = ObjectAnnotation(BBox(300, 300, 340, 350))
        partial = ObjectAnnotation(BBox(-10, 100, 30, 150))
        gt = encode_patch([outside, partial], CFG)
        assert gt.n_skipped == 1
        assert np.isfinite(gt.reg).all()

    def test_positive_pixels_inside_box(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            h = rng.uniform(40, 62.5)
            box = centred_box(h, cx=rng.uniform(30, 210), cy=rng.uniform(30, 210))
            gt = encode_patch([ObjectAnnotation(box)], CFG)
            rows, cols = np.nonzero(gt.score)
            assert np.all((cols + 0.5) * 4 >= box.x_t) and np.all((cols + 0.5) * 4 <= box.x_b)
            assert np.all((rows + 0.5) * 4 >= box.y_t) and np.all((rows + 0.5) * 4 <= box.y_b)

    def test_regression_nearest_box(self):
        a = centred_box(50.0, cx=60, cy=120)
        b = centred_box(50.0, cx=180, cy=120)
        gt = encode_patch([ObjectAnnotation(a), ObjectAnnotation(b)], CFG)
        for col, box in [(10, a), (50, b)]:
            expected = regression_target((col + 0.5, 30.5), box.scaled(0.25), CFG)
            np.testing.assert_allclose(gt.reg[:, 30, col], expected)

    def test_landmarks(self):
        pts = [(110.0, 110.0), (130.0, 110.0), None, (120.0, 135.0)]
        gt = encode_patch([ObjectAnnotation(centred_box(50.0), pts)], CFG)
        assert gt.landmarks[0, 27, 27] == 1.0
        assert gt.landmarks[1, 27, 32] == 1.0
        assert not gt.landmarks[2].any()
        # unannotated channel: object region ignored, never negative
        assert gt.landmark_ignore[2, 30, 30] == 1.0
        assert gt.landmark_ignore[2, 5, 5] == 0.0

    def test_landmarks_only_for_in_range(self):
        gt = encode_patch([ObjectAnnotation(centred_box(20.0), [(120.0, 120.0)] * 4)], CFG)
        assert not gt.landmarks.any()

    def test_invariants_random(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            objs = []
            for _ in range(int(rng.integers(0, 4))):
                h = rng.uniform(15, 90)
                objs.append(ObjectAnnotation(centred_box(h, cx=rng.uniform(-20, 260), cy=rng.uniform(-20, 260))))
            gt = encode_patch(objs, CFG)
            assert not np.any((gt.ignore > 0) & (gt.score > 0))
            assert np.isfinite(gt.reg).all()
            assert set(np.unique(gt.score)) <= {0.0, 1.0}

    @settings(max_examples=60, deadline=None)
    @given(st.floats(40.0, 62.0), st.floats(0.0, 0.5))
    def test_monotone_in_height(self, h, dh):
        small = encode_patch([ObjectAnnotation(centred_box(h))], CFG).score.sum()
        large = encode_patch([ObjectAnnotation(centred_box(min(62.5, h + dh)))], CFG).score.sum()
        assert large >= small

    def test_flip_matches_mirrored_annotation(self):
        box = BBox(70.0, 90.0, 112.0, 142.0)
        mirrored = BBox(240 - box.x_b, box.y_t, 240 - box.x_t, box.y_b)
        a = encode_patch([ObjectAnnotation(box)], CFG).flipped()
        b = encode_patch([ObjectAnnotation(mirrored)], CFG)
        np.testing.assert_array_equal(a.score, b.score)
        np.testing.assert_allclose(a.reg, b.reg, atol=1e-12)


class TestIgnoreFlags:
    def test_all_zero(self):
        assert not compute_ignore_flags(np.zeros((8, 8))).any()

    def test_all_positive(self):
        assert not compute_ignore_flags(np.ones((8, 8))).any()

    def test_single_pixel(self):
        score = np.zeros((12, 12))
        score[5, 5] = 1
        ign = compute_ignore_flags(score, 2.0)
        expected = {
            (r, c) for r in range(12) for c in range(12)
            if 0 < (r - 5) ** 2 + (c - 5) ** 2 <= 4
        }
        assert {tuple(p) for p in np.argwhere(ign)} == expected
        assert len(expected) == 12

    def test_brute_force_random(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            score = (rng.uniform(size=(10, 9)) < 0.08).astype(float)
            ign = compute_ignore_flags(score, 2.0)
            pos = np.argwhere(score > 0)
            for r in range(10):
                for c in range(9):
                    near = any((r - pr) ** 2 + (c - pc) ** 2 <= 4 for pr, pc in pos)
                    assert ign[r, c] == float(near and score[r, c] == 0)


class TestRegressionTarget:
    def test_corner(self):
        box = BBox(2.0, 3.0, 12.0, 15.5)
        np.testing.assert_allclose(regression_target((2.0, 3.0), box, CFG), [0, 0, -10 / 12.5, -12.5 / 12.5])

    def test_centre(self):
        box = BBox(0.0, 0.0, 10.0, 12.5)
        np.testing.assert_allclose(regression_target(box.center, box, CFG), [0.4, 0.5, -0.4, -0.5])


class TestAnnotationIO:
    def test_roundtrip(self, tmp_path):
        objs = [ObjectAnnotation(BBox(1.5, 2, 30, 40), [(3.0, 4.0), None]), ObjectAnnotation(BBox(0, 0, 1, 1))]
        path = tmp_path / "a.json"
        path.write_text(dump_annotation(objs, image="x.ppm"))
        back = load_annotation(path)
        assert [o.to_json() for o in back] == [o.to_json() for o in objs]
