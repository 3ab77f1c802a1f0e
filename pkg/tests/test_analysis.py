import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perfquant.analysis import (
    EPI_OFFSET,
    ComponentCountError,
    InsufficientSegmentsError,
    SegmentModel,
    assign_segments,
    bounding_box_temporal_variance,
    classify,
    mean_of_lowest,
    per_vessel_statistic,
    ray_extents,
    roc_analysis,
    segment_curves,
    segment_means,
    territory_sectors,
    total_variation,
)
from perfquant.exceptions import ValidationError
from perfquant.phantom import PhantomSpec, generate_phantom, territory_defect

CENTER = (40.0, 40.0)


def _annulus(r_in=18.0, r_out=30.0, shape=(81, 81), center=CENTER):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]].astype(float)
    r = np.hypot(yy - center[0], xx - center[1])
    return (r >= r_in) & (r <= r_out)


def _rv_points(angle_deg, radius=30.0, center=CENTER):
    """Anterior point at ``angle_deg`` and inferior point 120 degrees further on."""
    pts = []
    for a in (angle_deg, angle_deg + 120.0):
        t = math.radians(a)
        pts.append((center[0] - radius * math.sin(t), center[1] + radius * math.cos(t)))
    return pts


def concordance(scores, labels):
    """O(n^2) pair count: P(score_pos > score_neg) + 0.5 P(tie)."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p, n in itertools.product(pos, neg):
        total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


class TestSegmentModel:
    def test_labels_and_territories(self):
        assert SegmentModel(3, "epi").label == 19
        assert SegmentModel.from_label(19) == SegmentModel(3, "epi")
        assert SegmentModel(16, "endo").territory == "LCx"
        assert SegmentModel(13, "endo").slice_level == "apical"
        assert len(SegmentModel.all()) == 32

    def test_invalid(self):
        with pytest.raises(ValidationError):
            SegmentModel(17, "endo")
        with pytest.raises(ValidationError):
            SegmentModel.from_label(33)

    def test_territory_sectors(self):
        assert territory_sectors("LAD", "basal") == ([0, 1], 60.0)
        assert territory_sectors("LCx", "apical") == ([3], 90.0)


class TestBoundingBox:
    def test_static_series(self):
        with pytest.raises(ComponentCountError):
            bounding_box_temporal_variance(np.ones((12, 32, 32)))

    def test_two_disks(self):
        yy, xx = np.mgrid[0:96, 0:96]
        a = np.hypot(yy - 40, xx - 30) <= 5
        b = np.hypot(yy - 50, xx - 60) <= 6
        amp = np.sin(np.linspace(0, np.pi, 20))
        frames = np.ones((20, 96, 96)) + amp[:, None, None] * (a | b)[None] * 10
        box = bounding_box_temporal_variance(frames, margin=8)
        assert box.contains(a | b)
        assert (box.y0, box.y1, box.x0, box.x1) == (27, 65, 17, 75)

    def test_merged_region(self):
        yy, xx = np.mgrid[0:64, 0:64]
        region = np.hypot(yy - 32, xx - 32) <= 8
        frames = np.ones((20, 64, 64)) + np.arange(20)[:, None, None] * region[None]
        with pytest.raises(ComponentCountError):
            bounding_box_temporal_variance(frames)

    def test_too_few_frames(self):
        with pytest.raises(ValidationError):
            bounding_box_temporal_variance(np.ones((5, 8, 8)))


class TestAssignSegments:
    def test_equal_basal_sectors(self):
        # pixels on the 0 and 180 degree rays all fall on one side, so the ring must be
        # large for that edge effect to stay inside the tolerance
        c = (50.0, 50.0)
        mask = _annulus(30.0, 45.0, (101, 101), c)
        seg = assign_segments(mask, _rv_points(0.0, 45.0, c), "basal", centroid=c)
        sector = np.where(seg > EPI_OFFSET, seg - EPI_OFFSET, seg)
        counts = np.array([np.sum(sector == k) for k in range(1, 7)])
        assert np.all(np.abs(counts / counts.mean() - 1) <= 0.02)

    def test_rotation_shifts_one_sector(self):
        mask = _annulus()
        a = assign_segments(mask, _rv_points(10.0), "mid", centroid=CENTER)
        b = assign_segments(mask, _rv_points(70.0), "mid", centroid=CENTER)
        sa = (np.where(a > EPI_OFFSET, a - EPI_OFFSET, a) - 7)[mask]
        sb = (np.where(b > EPI_OFFSET, b - EPI_OFFSET, b) - 7)[mask]
        np.testing.assert_array_equal(sb, (sa - 1) % 6)
        np.testing.assert_array_equal(a > EPI_OFFSET, b > EPI_OFFSET)

    def test_inner_half_of_each_ray_is_endo(self):
        mask = _annulus()
        seg = assign_segments(mask, _rv_points(0.0), "mid", centroid=CENTER)
        angles, r_in, r_out = ray_extents(mask, CENTER, n_rays=72)
        for ang, lo, hi in zip(angles, r_in, r_out):
            for r in np.arange(lo, hi + 1e-9, 0.25):
                y = int(round(CENTER[0] - r * math.sin(ang)))
                x = int(round(CENTER[1] + r * math.cos(ang)))
                if not mask[y, x]:
                    continue
                rr = math.hypot(y - CENTER[0], x - CENTER[1])
                mid = 0.5 * (lo + hi)
                if abs(rr - mid) > 1.0:
                    assert (seg[y, x] <= EPI_OFFSET) == (rr < mid)

    def test_apical_has_four_sectors(self):
        seg = assign_segments(_annulus(), _rv_points(0.0), "apical", centroid=CENTER)
        assert set(np.unique(seg)) == {0, 13, 14, 15, 16, 29, 30, 31, 32}

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0, 360), st.sampled_from(["basal", "mid", "apical"]),
           st.floats(4, 12), st.floats(2, 10))
    def test_partition_covers_mask(self, angle, level, r_in, width):
        mask = _annulus(r_in, r_in + width)
        seg = assign_segments(mask, _rv_points(angle, r_in + width), level)
        np.testing.assert_array_equal(seg > 0, mask)

    def test_errors(self):
        mask = _annulus()
        with pytest.raises(ValidationError):
            assign_segments(np.zeros_like(mask), _rv_points(0.0))
        with pytest.raises(ValidationError):
            assign_segments(mask, [(1.0, 1.0), (1.0, 1.0)])
        with pytest.raises(ValidationError):
            assign_segments(mask, _rv_points(0.0), "septal")


class TestStatistics:
    def test_mean_of_lowest_hand_arithmetic(self):
        values = [2.0, 1.0, 1.5, 1.2, 3.0, 0.8, 2.2, 1.9]
        assert mean_of_lowest(values) == pytest.approx((0.8 + 1.0 + 1.2 + 1.5) / 4, abs=1e-15)
        assert mean_of_lowest(values) == pytest.approx(1.125, abs=1e-15)

    def test_mean_of_lowest_needs_four(self):
        with pytest.raises(InsufficientSegmentsError):
            mean_of_lowest([1.0, 2.0, 3.0])

    def test_equal_segments(self):
        mask = _annulus()
        seg = assign_segments(mask, _rv_points(0.0), "mid", centroid=CENTER)
        stats = per_vessel_statistic(np.full(mask.shape, 2.5), seg)
        assert stats == pytest.approx({"LAD": 2.5, "RCA": 2.5, "LCx": 2.5})

    def test_segment_means_combine_slices(self):
        seg = np.array([[1, 1], [2, 0]])
        means = segment_means([np.array([[1.0, 3.0], [5.0, 9.0]])] * 2, [seg, seg])
        assert means == {1: 2.0, 2: 5.0}

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0.1, 5), min_size=6, max_size=6), st.integers(0, 5),
           st.floats(0, 2))
    def test_monotone_in_segment_means(self, values, which, drop):
        mask = _annulus()
        seg = assign_segments(mask, _rv_points(0.0), "mid", centroid=CENTER)
        sector = np.where(seg > EPI_OFFSET, seg - EPI_OFFSET, seg) - 7
        base = np.where(mask, np.asarray(values)[np.clip(sector, 0, 5)], 0.0)
        lowered = np.where(sector == which, base - drop, base)
        # two segments per territory in a mid slice, both layers present
        a = per_vessel_statistic(base, seg, n_lowest=4)
        b = per_vessel_statistic(lowered, seg, n_lowest=4)
        assert all(b[t] <= a[t] + 1e-12 for t in a)

    def test_insufficient_territory(self):
        seg = np.array([[7, 8], [9, 0]])
        with pytest.raises(InsufficientSegmentsError):
            per_vessel_statistic(np.ones((2, 2)), seg)


class TestClassify:
    def test_boundary_is_negative(self):
        res = classify({"LAD": 1.34, "RCA": 2.0, "LCx": 2.0}, 1.34)
        assert res.vessel_labels["LAD"] == "negative"
        assert res.patient_label == "negative"

    def test_below_threshold_positive(self):
        res = classify({"LAD": 1.2, "RCA": 2.0, "LCx": 2.0}, 1.34)
        assert res.vessel_labels == {"LAD": "positive", "RCA": "negative", "LCx": "negative"}
        assert res.patient_label == "positive"
        assert res.to_dict()["vessels"]["LAD"]["label"] == "positive"

    def test_invalid_threshold(self):
        with pytest.raises(ValidationError):
            classify({"LAD": 1.0}, 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0, 2))
    def test_threshold_monotone(self, value, threshold, raise_by):
        low = classify({"LAD": value}, threshold).vessel_labels["LAD"]
        high = classify({"LAD": value}, threshold + raise_by).vessel_labels["LAD"]
        assert not (low == "positive" and high == "negative")


class TestRoc:
    def test_perfect_separation(self):
        roc = roc_analysis([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert roc.auc == 1.0
        assert roc.youden == 1.0
        assert roc.optimal_threshold == 0.8

    def test_interleaved_half(self):
        roc = roc_analysis([1, 2, 3, 4], [1, 0, 0, 1])
        assert roc.auc == 0.5

    def test_lower_is_positive(self):
        roc = roc_analysis([0.5, 0.7, 2.0, 2.5], [1, 1, 0, 0], greater_is_positive=False)
        assert roc.auc == 1.0
        assert roc.optimal_threshold == 0.7

    def test_twenty_points_matches_pair_count(self):
        rng = np.random.default_rng(20)
        scores = np.round(rng.normal(size=20), 1)
        labels = rng.integers(0, 2, 20)
        labels[:2] = [0, 1]
        assert roc_analysis(scores, labels).auc == concordance(scores, labels)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=30))
    def test_auc_equals_concordance(self, pairs):
        scores = [s for s, _ in pairs]
        labels = [y for _, y in pairs]
        if all(labels) or not any(labels):
            with pytest.raises(ValidationError):
                roc_analysis(scores, labels)
            return
        assert roc_analysis(scores, labels).auc == concordance(scores, labels)

    def test_sensitivity_and_specificity_monotone(self):
        rng = np.random.default_rng(3)
        roc = roc_analysis(rng.normal(size=40), rng.integers(0, 2, 40))
        assert np.all(np.diff(roc.sensitivity) >= 0)
        assert np.all(np.diff(roc.specificity) <= 0)
        assert roc.sensitivity[-1] == 1.0 and roc.specificity[-1] == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            roc_analysis([1, 2], [0, 1, 1])


class TestCurves:
    def test_segment_curves_and_total_variation(self):
        frames = np.arange(12.0).reshape(3, 2, 2)
        seg = np.array([[1, 1], [2, 0]])
        curves = segment_curves(frames, seg)
        np.testing.assert_array_equal(curves[1], [0.5, 4.5, 8.5])
        assert total_variation([0, 2, 1, 4]) == 6.0


def test_hypoperfused_territory_lowest():
    spec = PhantomSpec(defects=[territory_defect("RCA", "mid", 0.6)])
    ph = generate_phantom(spec)
    seg = assign_segments(ph.mask, ph.rv_points, "mid")
    stats = per_vessel_statistic(ph.truth["MBF"], seg)
    assert min(stats, key=stats.get) == "RCA"
    assert stats["RCA"] < min(stats["LAD"], stats["LCx"])
