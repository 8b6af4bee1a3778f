import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from glaciermap.iou_estimation import (
    ConfusionCounts, estimate_iou, evaluate_estimator, iou_from_counts, plot_estimates, write_estimates_csv,
)


class TestIoU:
    def test_cases(self):
        assert iou_from_counts(ConfusionCounts(10, 0, 0, 5)) == 1.0
        assert iou_from_counts(ConfusionCounts(0, 4, 6, 5)) == 0.0
        assert iou_from_counts(ConfusionCounts(50, 25, 25, 0)) == 0.5

    def test_empty_union(self):
        with pytest.raises(ValueError, match="undefined"):
            iou_from_counts(ConfusionCounts(0, 0, 0, 9))

    def test_negative_counts(self):
        with pytest.raises(ValueError):
            ConfusionCounts(-1, 0, 0, 0)

    def test_from_masks(self):
        pred = np.array([[1, 1], [0, 0]])
        ref = np.array([[1, 0], [1, 0]])
        c = ConfusionCounts.from_masks(pred, ref)
        assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)
        assert (c.n_pred_pos, c.n_pred_neg) == (2, 2)


class TestEstimate:
    def test_hand_values(self):
        assert abs(estimate_iou(0.9, 100, 900) - oracles.EST_IOU_A) < 1e-12
        assert abs(estimate_iou(0.9, 100, 900) - 0.47368) < 1e-5
        assert abs(estimate_iou(0.3, 100, 100) - oracles.EST_IOU_B) < 1e-12
        assert estimate_iou(1.0, 7, 3) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            estimate_iou(0.9, 0, 0)
        with pytest.raises(ValueError):
            estimate_iou(1.2, 1, 1)

    def test_negative_estimate_warns(self):
        with pytest.warns(RuntimeWarning, match="negative"):
            v = estimate_iou(0.5, 1, 1000, beta=2.0)
        assert v < 0
        # with beta = 1 and the 1/C floor the estimate stays non-negative
        assert estimate_iou(0.0, 1, 1000) >= 0

    def test_brute_force_tables(self):
        n = 0
        for tp, fp, fn, tn in oracles.brute_force_iou_tables(40):
            total = tp + fp + fn + tn
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                est = estimate_iou((tp + tn) / total, tp + fp, tn + fn)
            assert abs(est - iou_from_counts(ConfusionCounts(tp, fp, fn, tn))) < 1e-9
            n += 1
        assert n > 1000

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.5, 1.0), st.integers(0, 10_000), st.integers(0, 10_000), st.integers(1, 50))
    def test_scale_invariant(self, a, n_p, n_n, k):
        if n_p + n_n == 0:
            return
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert estimate_iou(a, n_p, n_n) == pytest.approx(estimate_iou(a, k * n_p, k * n_n), rel=1e-9, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(1, 1000), st.integers(0, 1000))
    def test_monotone_and_bounded(self, a, b, n_p, n_n):
        lo, hi = sorted((a, b))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            e_lo, e_hi = estimate_iou(lo, n_p, n_n), estimate_iou(hi, n_p, n_n)
        assert e_lo <= e_hi + 1e-12
        assert e_hi <= 1.0


class TestEvaluator:
    def test_perfect(self):
        act = np.linspace(0.3, 0.9, 20)
        rep = evaluate_estimator(np.c_[act, act])
        assert rep.rmse == 0 and rep.r2 == 1 and rep.pearson == pytest.approx(1)

    def test_shift(self):
        act = np.linspace(0.3, 0.9, 20)
        rep = evaluate_estimator(np.c_[act - 0.03, act])
        assert rep.mean_bias == pytest.approx(-0.03) and rep.rmse == pytest.approx(0.03)

    def test_constant_actual(self):
        with pytest.raises(ValueError, match="R\\^2"):
            evaluate_estimator([(0.1, 0.5), (0.2, 0.5), (0.3, 0.5)])

    def test_too_few(self):
        with pytest.raises(ValueError):
            evaluate_estimator([(0.1, 0.2)])

    def test_outputs(self, tmp_path):
        rows = [dict(tile_id="a", mean_conf=0.9, n_p=10, n_n=90, est_iou=0.5, actual_iou=0.6),
                dict(tile_id="b", mean_conf=0.8, n_p=5, n_n=95, est_iou=0.4, actual_iou=None)]
        write_estimates_csv(rows, tmp_path / "e.csv")
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert lines[0] == "tile_id,mean_conf,n_p,n_n,est_iou,actual_iou"
        assert lines[2].endswith(",")
        plot_estimates(rows, tmp_path / "e.png")
        assert (tmp_path / "e.png").exists()
