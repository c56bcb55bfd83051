import numpy as np
import pytest

from ripelab.embed import (
    EmbeddingModel,
    RipenessAxis,
    UmapParams,
    exact_knn,
    fit_ripeness_axis,
    fuzzy_union,
    membership_strengths,
    ripeness_value,
    ripeness_values,
    select_extractor_report,
    smooth_knn_calibration,
    umap_embed,
)
from ripelab.errors import EstimationError, ValidationError


def three_cluster_features(n_per=30, dim=64, sep=10.0, sigma=1.0, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, sep, size=(3, dim))
    blocks = [c + rng.normal(0.0, sigma, size=(n_per, dim)) for c in centers]
    labels = np.repeat(np.arange(3), n_per)
    return np.concatenate(blocks), labels


class TestParams:
    def test_defaults(self):
        p = UmapParams()
        assert p.n_neighbors is None
        assert p.min_dist == 0.1
        assert p.n_epochs == 500

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"n_neighbors": 0},
            {"min_dist": 0.0},
            {"n_epochs": 0},
            {"init": "random"},
        ],
    )
    def test_invalid_params_rejected(self, kwargs):
        with pytest.raises(ValidationError):
            UmapParams(**kwargs)


class TestGraph:
    def test_exact_knn_matches_direct_sort(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(40, 5))
        idx, dists = exact_knn(x, 6)
        full = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
        np.fill_diagonal(full, np.inf)
        expect = np.argsort(full, axis=1, kind="stable")[:, :6]
        assert np.array_equal(idx, expect)
        assert np.allclose(dists, np.take_along_axis(full, expect, axis=1))

    def test_calibration_hits_log2k_everywhere(self):
        rng = np.random.default_rng(2)
        _, dists = exact_knn(rng.normal(size=(80, 8)), 10)
        sigmas, rhos = smooth_knn_calibration(dists, 10)
        fuzzy_card = np.exp(
            -np.maximum(0.0, dists - rhos[:, None]) / sigmas[:, None]
        ).sum(axis=1)
        assert np.abs(fuzzy_card - np.log2(10)).max() < 1e-3

    def test_rho_is_nearest_neighbor_distance(self):
        rng = np.random.default_rng(3)
        _, dists = exact_knn(rng.normal(size=(30, 4)), 5)
        _, rhos = smooth_knn_calibration(dists, 5)
        assert np.array_equal(rhos, dists[:, 0])

    def test_fuzzy_union_symmetric_unit_interval(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(50, 6))
        idx, dists = exact_knn(x, 7)
        sigmas, rhos = smooth_knn_calibration(dists, 7)
        graph = fuzzy_union(membership_strengths(idx, dists, sigmas, rhos))
        dense = graph.toarray()
        assert np.allclose(dense, dense.T)
        assert dense.min() >= 0.0
        assert dense.max() <= 1.0 + 1e-12


class TestEmbed:
    def test_two_points(self):
        model = umap_embed(np.array([[0.0, 0.0], [1.0, 1.0]]), seed=0)
        assert model.points.shape == (2, 2)
        assert np.all(np.isfinite(model.points))

    def test_three_clusters_stay_pure(self, umap_warm):
        features, labels = three_cluster_features()
        model = umap_embed(features, UmapParams(n_epochs=200), seed=0)
        centroids = np.stack(
            [model.points[labels == c].mean(axis=0) for c in range(3)]
        )
        d = np.linalg.norm(model.points[:, None, :] - centroids[None, :, :], axis=2)
        purity = float(np.mean(d.argmin(axis=1) == labels))
        assert purity >= 0.95

    def test_duplicate_rows_land_together(self, umap_warm):
        rng = np.random.default_rng(5)
        far = rng.normal(10.0, 1.0, size=(18, 6))
        dup = np.zeros((2, 6))
        model = umap_embed(np.vstack([dup, far]), UmapParams(n_neighbors=4, n_epochs=100), seed=1)
        pts = model.points
        dup_gap = np.linalg.norm(pts[0] - pts[1])
        spread = np.linalg.norm(pts[2:].mean(axis=0) - pts[:2].mean(axis=0))
        assert dup_gap < 0.25 * spread

    def test_bitwise_reproducible(self, umap_warm):
        features, _ = three_cluster_features(n_per=12, dim=16)
        params = UmapParams(n_neighbors=8, n_epochs=60)
        a = umap_embed(features, params, seed=7)
        b = umap_embed(features, params, seed=7)
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.sigmas, b.sigmas)
        assert a.curve == b.curve

    def test_seed_changes_layout(self, umap_warm):
        features, _ = three_cluster_features(n_per=12, dim=16)
        params = UmapParams(n_neighbors=8, n_epochs=60)
        a = umap_embed(features, params, seed=7)
        b = umap_embed(features, params, seed=8)
        assert not np.array_equal(a.points, b.points)

    def test_nan_features_rejected(self):
        x = np.zeros((10, 3))
        x[4, 1] = np.nan
        with pytest.raises(ValidationError, match="NaN"):
            umap_embed(x, seed=0)

    def test_single_point_rejected(self):
        with pytest.raises(ValidationError, match="at least 2"):
            umap_embed(np.zeros((1, 4)), seed=0)

    def test_explicit_neighbors_must_fit(self):
        with pytest.raises(ValidationError, match="n_neighbors"):
            umap_embed(np.zeros((5, 2)), UmapParams(n_neighbors=5), seed=0)

    def test_model_rejects_bad_curve(self):
        pts = np.zeros((3, 2))
        with pytest.raises(ValidationError, match="curve"):
            EmbeddingModel(
                points=pts,
                knn_indices=np.zeros((3, 1), dtype=np.int64),
                knn_dists=np.zeros((3, 1)),
                sigmas=np.ones(3),
                rhos=np.zeros(3),
                curve=(0.0, 1.0),
                params=UmapParams(),
                seed=0,
            )


class TestAxis:
    def test_horizontal_line(self):
        points = np.column_stack([np.arange(11.0), np.full(11, 5.0)])
        axis = fit_ripeness_axis(points, np.arange(11))
        assert axis.direction == pytest.approx((1.0, 0.0))
        assert axis.origin == pytest.approx((0.0, 5.0))
        assert axis.lo == 0.0
        assert axis.hi == pytest.approx(10.0)

    def test_reversed_timepoints_flip_direction(self):
        points = np.column_stack([np.arange(11.0), np.full(11, 5.0)])
        axis = fit_ripeness_axis(points, np.arange(11)[::-1])
        assert axis.direction == pytest.approx((-1.0, 0.0))
        assert axis.origin == pytest.approx((10.0, 5.0))

    def test_midpoint_maps_to_half(self):
        points = np.column_stack([np.arange(11.0), np.full(11, 5.0)])
        axis = fit_ripeness_axis(points, np.arange(11))
        assert ripeness_value(axis, (5.0, 5.0)) == pytest.approx(0.5)

    def test_values_clamped_to_unit_interval(self):
        points = np.column_stack([np.arange(11.0), np.full(11, 5.0)])
        axis = fit_ripeness_axis(points, np.arange(11))
        vals = ripeness_values(axis, np.array([[-3.0, 5.0], [12.0, 5.0]]))
        assert vals.tolist() == [0.0, 1.0]

    def test_projection_spearman_nonnegative(self):
        rng = np.random.default_rng(6)
        t = np.tile(np.arange(6), 8)
        points = np.column_stack([t + rng.normal(0, 0.5, t.size), rng.normal(0, 0.2, t.size)])
        axis = fit_ripeness_axis(points, t)
        from scipy.stats import spearmanr

        proj = (points - np.asarray(axis.origin)) @ np.asarray(axis.direction)
        assert spearmanr(proj, t).statistic >= 0

    def test_rigid_motion_preserves_values(self):
        rng = np.random.default_rng(7)
        t = np.tile(np.arange(6), 5)
        points = np.column_stack([t * 2.0, rng.normal(0, 0.3, t.size)])
        theta = 0.7
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        moved = points @ rot.T + np.array([40.0, -9.0])
        base = ripeness_values(fit_ripeness_axis(points, t), points)
        after = ripeness_values(fit_ripeness_axis(moved, t), moved)
        assert np.allclose(base, after, atol=1e-9)

    def test_zero_variance_rejected(self):
        points = np.tile([[2.0, 3.0]], (6, 1))
        with pytest.raises(EstimationError, match="zero-variance"):
            fit_ripeness_axis(points, [0, 0, 1, 1, 2, 2])

    def test_single_timepoint_rejected(self):
        with pytest.raises(ValidationError, match="distinct timepoints"):
            fit_ripeness_axis(np.random.default_rng(0).normal(size=(5, 2)), [3] * 5)

    def test_direction_must_be_unit(self):
        with pytest.raises(ValidationError, match="unit"):
            RipenessAxis(direction=(1.0, 1.0), origin=(0.0, 0.0), lo=0.0, hi=1.0)

    def test_lo_must_be_below_hi(self):
        with pytest.raises(ValidationError, match="lo < hi"):
            RipenessAxis(direction=(1.0, 0.0), origin=(0.0, 0.0), lo=2.0, hi=2.0)


class TestExtractorReport:
    @staticmethod
    def keys(n_berries=14, n_t=6):
        berries = np.repeat(np.arange(n_berries), n_t)
        times = np.tile(np.arange(n_t), n_berries)
        return berries, times

    def test_linear_trace_scores_high(self):
        berries, times = self.keys()
        rng = np.random.default_rng(8)
        linear = np.column_stack(
            [times + 0.05 * berries, rng.normal(0, 0.01, times.size)]
        )
        scrambled = rng.normal(size=(times.size, 2))
        report = select_extractor_report(
            [("linear", berries, times, linear), ("scrambled", berries, times, scrambled)]
        )
        assert report[0].name == "linear"
        assert report[0].monotonicity == pytest.approx(1.0)
        assert report[0].linearity > 0.99
        assert abs(report[1].monotonicity) < 0.3

    def test_tied_scores_sorted_by_name(self):
        berries, times = self.keys(n_berries=4)
        pts = np.column_stack([times.astype(float), np.zeros(times.size)])
        report = select_extractor_report(
            [("beta", berries, times, pts), ("alpha", berries, times, pts)]
        )
        assert [s.name for s in report] == ["alpha", "beta"]

    def test_mismatched_key_sets_rejected(self):
        berries, times = self.keys(n_berries=3)
        pts = np.zeros((times.size, 2))
        with pytest.raises(ValidationError, match="different"):
            select_extractor_report(
                [
                    ("a", berries, times, pts),
                    ("b", berries[:-1], times[:-1], pts[:-1]),
                ]
            )

    def test_single_extractor_rejected(self):
        berries, times = self.keys(n_berries=3)
        with pytest.raises(ValidationError, match="at least 2"):
            select_extractor_report([("only", berries, times, np.zeros((times.size, 2)))])
