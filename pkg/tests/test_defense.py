import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointca.defense import DefenseConfig, apply_defense, mean_knn_distance, outlier_removal, sor, srs
from pointca.errors import AllPointsRemoved, InvalidParam, TooFewPoints
from pointca.metrics import outlier_count

LINE_PLUS_OUTLIER = np.array([[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0], [10, 0, 0]])


def is_subset(sub, full):
    rows = {tuple(r) for r in np.asarray(full)}
    return all(tuple(r) in rows for r in np.asarray(sub))


class TestSor:
    def test_hand_case(self):
        d = mean_knn_distance(LINE_PLUS_OUTLIER, 2)
        np.testing.assert_allclose(d, [0.15, 0.1, 0.1, 0.15, 9.75], atol=1e-12)
        mu, sigma = d.mean(), d.std()
        assert mu == pytest.approx(2.05, abs=1e-12)
        assert sigma == pytest.approx(3.8501, abs=1e-4)
        assert mu + 1.1 * sigma == pytest.approx(6.285, abs=1e-3)
        kept, removed = sor(LINE_PLUS_OUTLIER, 2, 1.1)
        assert removed == 1
        np.testing.assert_array_equal(kept.points, LINE_PLUS_OUTLIER[:4])

    def test_identical_points_kept(self):
        kept, removed = sor(np.ones((6, 3)), 2, 1.1)
        assert removed == 0 and len(kept.points) == 6

    def test_grid_with_large_alpha_is_identity(self):
        g = np.array([[x, y, 0.0] for x in range(5) for y in range(5)])
        kept, removed = sor(g, 2, 100.0)
        assert removed == 0
        np.testing.assert_array_equal(kept.points, g)

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            sor(np.zeros((2, 3)), 2, 1.1)

    def test_matches_outlier_metric(self):
        pts = np.random.default_rng(0).normal(size=(60, 3))
        assert outlier_count(pts, 2, 1.1) == sor(pts, 2, 1.1)[1]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.0, 3.0))
    def test_subset_and_count(self, seed, alpha):
        pts = np.random.default_rng(seed).normal(size=(40, 3))
        kept, removed = sor(pts, 3, alpha)
        assert removed == 40 - len(kept.points)
        assert is_subset(kept.points, pts)


class TestSrs:
    def test_ceiling_count(self):
        pts = np.random.default_rng(0).normal(size=(10, 3))
        out = srs(pts, 0.3, seed=1)
        assert len(out.points) == 7
        assert is_subset(out.points, pts)

    def test_zero_rate_is_identity(self):
        pts = np.random.default_rng(0).normal(size=(10, 3))
        np.testing.assert_array_equal(srs(pts, 0.0).points, pts)

    def test_seeded(self):
        pts = np.random.default_rng(0).normal(size=(50, 3))
        assert np.array_equal(srs(pts, 0.5, seed=3).points, srs(pts, 0.5, seed=3).points)
        assert not np.array_equal(srs(pts, 0.5, seed=3).points, srs(pts, 0.5, seed=4).points)

    def test_invalid_rate(self):
        with pytest.raises(InvalidParam):
            srs(np.zeros((5, 3)), 1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 200), st.floats(0.0, 0.99))
    def test_size(self, m, rate):
        pts = np.arange(3 * m, dtype=float).reshape(m, 3)
        out = srs(pts, rate, seed=0)
        assert len(out.points) == int(np.ceil((1 - rate) * m - 1e-9))


class TestOutlierRemoval:
    def test_far_point_removed(self):
        out = outlier_removal(LINE_PLUS_OUTLIER, threshold=1.0, k=2)
        np.testing.assert_array_equal(out.points, LINE_PLUS_OUTLIER[:4])

    def test_generous_threshold_is_identity(self):
        pts = np.random.default_rng(0).normal(scale=0.01, size=(20, 3))
        np.testing.assert_array_equal(outlier_removal(pts, threshold=1e6).points, pts)

    def test_everything_removed(self):
        with pytest.raises(AllPointsRemoved):
            outlier_removal(LINE_PLUS_OUTLIER, threshold=0.01)

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            outlier_removal(np.zeros((2, 3)), threshold=1.0, k=2)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(srs_drop_rate=1.0), dict(or_threshold=0.0), dict(sor_k=0),
                                    dict(sor_alpha=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(InvalidParam):
            DefenseConfig(**kw).validate()

    def test_apply_dispatch(self):
        pts = LINE_PLUS_OUTLIER
        cfg = DefenseConfig(or_threshold=1.0)
        assert len(apply_defense(pts, "none", cfg).points) == 5
        assert len(apply_defense(pts, "srs", cfg).points) == 4
        assert len(apply_defense(pts, "or", cfg).points) == 4
        assert len(apply_defense(pts, "sor", cfg).points) == 4
        with pytest.raises(InvalidParam):
            apply_defense(pts, "bogus", cfg)

    def test_deterministic(self):
        pts = np.random.default_rng(2).normal(size=(30, 3))
        for name in ("srs", "or", "sor"):
            cfg = DefenseConfig(or_threshold=1.0, seed=5)
            assert np.array_equal(apply_defense(pts, name, cfg).points, apply_defense(pts, name, cfg).points)
