import itertools

import numpy as np
import pytest

from ripelab.albedo import (
    DEFAULT_RISK_THRESHOLD,
    ClassHistogram,
    ColorClassModel,
    class_histogram,
    fit_color_classes,
    kmeans_objective,
    label_berry,
    ripeness_ratio,
    risk_date,
    risk_flag,
    sample_training_pixels,
)
from ripelab.errors import FitError, ValidationError

# well-separated stage colors, green through deep red
STAGE_CENTERS = np.array(
    [
        [45.0, 130.0, 50.0],
        [95.0, 120.0, 45.0],
        [140.0, 95.0, 40.0],
        [165.0, 60.0, 40.0],
        [175.0, 30.0, 45.0],
    ]
)


def blob_pixels(sigma=2.0, per_cluster=400, seed=0):
    rng = np.random.default_rng(seed)
    blocks = [
        center + rng.normal(0.0, sigma, size=(per_cluster, 3))
        for center in STAGE_CENTERS
    ]
    return np.concatenate(blocks)


def table_row_histograms(red_counts, total=2000):
    out = []
    for i, red in enumerate(red_counts):
        counts = (total - red, 0, 0, 0, red)
        out.append(ClassHistogram(session_id=f"s{i}", counts=counts, fractions=None))
    return out


class TestFit:
    def test_recovers_well_separated_centroids(self):
        model = fit_color_classes(blob_pixels(), seed=0)
        fitted = np.array(sorted(model.centroids, key=lambda c: c[0] - c[1]))
        true = np.array(sorted(STAGE_CENTERS.tolist(), key=lambda c: c[0] - c[1]))
        assert np.abs(fitted - true).max() < 3.0

    def test_classes_ordered_by_redness(self):
        model = fit_color_classes(blob_pixels(), seed=0)
        redness = [
            model.centroid_of_class(k)[0] - model.centroid_of_class(k)[1]
            for k in range(1, 6)
        ]
        assert redness == sorted(redness)

    def test_deterministic_for_fixed_seed(self):
        a = fit_color_classes(blob_pixels(), seed=5)
        b = fit_color_classes(blob_pixels(), seed=5)
        assert a == b

    def test_invariant_to_pixel_order(self):
        pixels = blob_pixels()
        rng = np.random.default_rng(1)
        shuffled = pixels[rng.permutation(len(pixels))]
        assert fit_color_classes(pixels, seed=2) == fit_color_classes(shuffled, seed=2)

    def test_fewer_than_five_distinct_pixels_rejected(self):
        pixels = np.tile([[10.0, 20.0, 30.0]], (100, 1))
        with pytest.raises(FitError, match="distinct"):
            fit_color_classes(pixels, seed=0)

    def test_twelve_pixel_instance_matches_brute_force(self):
        # collinear gray values: the optimal 5-clustering of 1-D data uses
        # contiguous intervals in sorted order, so C(11, 4) splits cover
        # every candidate exactly
        values = np.array([3.0, 4.0, 5.0, 30.0, 31.0, 60.0, 62.0, 90.0, 91.0, 120.0, 121.0, 122.0])
        pixels = np.column_stack([values, values, values])
        best = np.inf
        for cuts in itertools.combinations(range(1, 12), 4):
            bounds = [0, *cuts, 12]
            cost = 0.0
            for a, b in zip(bounds, bounds[1:]):
                seg = values[a:b]
                cost += float(((seg - seg.mean()) ** 2).sum() * 3)
            best = min(best, cost)
        model = fit_color_classes(pixels, seed=0)
        fitted = kmeans_objective(pixels, np.array(model.centroids))
        assert fitted == pytest.approx(best, abs=1e-9)

    def test_class_override_changes_source(self):
        model = fit_color_classes(blob_pixels(), seed=0)
        forced = fit_color_classes(
            blob_pixels(), seed=0, class_override=model.class_of_cluster
        )
        assert forced.source == "human_override"
        assert forced.class_of_cluster == model.class_of_cluster


@pytest.fixture(scope="module")
def model():
    return fit_color_classes(blob_pixels(), seed=0)


class TestLabel:
    def test_majority_vote(self, model):
        rng = np.random.default_rng(3)
        pixels = np.concatenate(
            [
                STAGE_CENTERS[4] + rng.normal(0, 2, size=(30, 3)),
                STAGE_CENTERS[0] + rng.normal(0, 2, size=(10, 3)),
            ]
        )
        assert label_berry(pixels, model) == 5

    def test_exact_centroid_pixels_label_perfectly_at_sigma_5(self, model):
        rng = np.random.default_rng(4)
        for k in range(5):
            pixels = STAGE_CENTERS[k] + rng.normal(0, 5, size=(200, 3))
            assert label_berry(pixels, model) == k + 1

    def test_tie_breaks_toward_riper_class(self, model):
        pixels = np.concatenate(
            [np.tile(STAGE_CENTERS[1], (10, 1)), np.tile(STAGE_CENTERS[3], (10, 1))]
        )
        assert label_berry(pixels, model) == 4

    def test_duplicating_pixels_does_not_change_label(self, model):
        rng = np.random.default_rng(5)
        pixels = STAGE_CENTERS[2] + rng.normal(0, 3, size=(40, 3))
        assert label_berry(pixels, model) == label_berry(
            np.concatenate([pixels, pixels]), model
        )

    def test_empty_pixels_rejected(self, model):
        with pytest.raises(ValidationError):
            label_berry(np.zeros((0, 3)), model)


class TestHistogram:
    def test_counts_and_fractions(self):
        hist = class_histogram("s0", [1, 1, 2, 5, 5, 5])
        assert hist.counts == (2, 1, 0, 0, 3)
        assert hist.fractions == pytest.approx((2 / 6, 1 / 6, 0, 0, 3 / 6))
        assert hist.red_fraction == pytest.approx(0.5)

    def test_empty_session_has_no_fractions(self):
        hist = class_histogram("s0", [])
        assert hist.empty
        assert hist.fractions is None
        with pytest.raises(ValidationError, match="no detections"):
            _ = hist.red_fraction

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValidationError):
            class_histogram("s0", [0])

    def test_red_fraction_counts_classes_4_and_5(self):
        hist = class_histogram("s0", [4, 5, 1, 1])
        assert hist.red_fraction == pytest.approx(0.5)


class TestRipenessRatio:
    def test_early_bog_row_reproduced(self):
        # red counts per 2000 berries chosen so red fractions follow the
        # published early-ripening row exactly
        hists = table_row_histograms([7, 82, 331, 497, 902, 1000])
        ratios = ripeness_ratio(hists)
        assert [round(r, 3) for r in ratios] == [0.007, 0.082, 0.331, 0.497, 0.902, 1.0]

    def test_ratio_above_one_preserved(self):
        hists = table_row_histograms([127, 453, 926, 1118, 808, 1000])
        ratios = ripeness_ratio(hists)
        assert [round(r, 3) for r in ratios] == [0.127, 0.453, 0.926, 1.118, 0.808, 1.0]
        assert ratios[3] > 1.0

    def test_late_bog_row_reproduced(self):
        hists = table_row_histograms([2, 88, 419, 609, 968, 1000])
        ratios = ripeness_ratio(hists)
        assert [round(r, 3) for r in ratios] == [0.002, 0.088, 0.419, 0.609, 0.968, 1.0]

    def test_constant_red_fraction_gives_all_ones(self):
        hists = table_row_histograms([500, 500, 500])
        assert ripeness_ratio(hists) == (1.0, 1.0, 1.0)

    def test_final_entry_is_exactly_one(self):
        hists = table_row_histograms([333, 667])
        ratios = ripeness_ratio(hists)
        assert ratios[-1] == 1.0

    def test_zero_final_red_fraction_rejected(self):
        hists = table_row_histograms([100, 0])
        with pytest.raises(ValidationError, match="undefined ratio"):
            ripeness_ratio(hists)

    def test_single_date_rejected(self):
        with pytest.raises(ValidationError):
            ripeness_ratio(table_row_histograms([10]))

    def test_empty_intermediate_session_rejected(self):
        hists = table_row_histograms([10, 20])
        hists.insert(1, ClassHistogram(session_id="gap", counts=(0,) * 5, fractions=None))
        with pytest.raises(ValidationError, match="no detections"):
            ripeness_ratio(hists)


class TestRisk:
    DATES = ["2021-08-02", "2021-08-16", "2021-08-25", "2021-08-31", "2021-09-09", "2021-09-14"]

    def test_early_row_crosses_threshold_on_sept_9(self):
        ratios = (0.007, 0.082, 0.331, 0.497, 0.902, 1.0)
        assert risk_flag(ratios) == 4
        assert risk_date(ratios, self.DATES) == "2021-09-09"

    def test_late_row_crosses_threshold_on_aug_31(self):
        ratios = (0.002, 0.088, 0.419, 0.609, 0.968, 1.0)
        assert risk_flag(ratios) == 3
        assert risk_date(ratios, self.DATES) == "2021-08-31"

    def test_no_crossing_returns_none(self):
        assert risk_flag((0.1, 0.2, 0.59)) is None
        assert risk_date((0.1, 0.2), ["2021-08-02", "2021-08-16"]) is None

    def test_threshold_inclusive(self):
        assert risk_flag((0.2, DEFAULT_RISK_THRESHOLD)) == 1

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValidationError):
            risk_date((0.1, 0.2), ["2021-08-02"])


class TestSampling:
    def test_cap_respected_and_deterministic(self):
        rng = np.random.default_rng(0)
        blocks = [rng.uniform(0, 255, size=(1000, 3)) for _ in range(3)]
        a = sample_training_pixels(blocks, seed=1, cap=500)
        b = sample_training_pixels(blocks, seed=1, cap=500)
        assert a.shape == (500, 3)
        assert np.array_equal(a, b)

    def test_below_cap_keeps_everything(self):
        blocks = [np.full((10, 3), 9.0), np.full((5, 3), 4.0)]
        pool = sample_training_pixels(blocks, seed=0, cap=100)
        assert pool.shape == (15, 3)

    def test_no_pixels_rejected(self):
        with pytest.raises(ValidationError):
            sample_training_pixels([np.zeros((0, 3))], seed=0)
