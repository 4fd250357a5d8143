import numpy as np
import pytest

from icucast.evaluation import (
    _simulate_daily,
    auc_roc,
    baseline_compartmental,
    baseline_zero_mean_gp,
    benchmark_report,
    default_cutoffs,
    format_text_table,
    mae_forecast,
)
from icucast.trend import HospitalSeries


class TestAucRoc:
    def test_perfect_ranking(self):
        assert auc_roc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_reversed_ranking(self):
        assert auc_roc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_four_point_pair_enumeration(self):
        scores = np.array([0.1, 0.4, 0.35, 0.8])
        labels = np.array([0, 0, 1, 1])
        # brute force over all positive-negative pairs
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        pairs = [
            1.0 if p > n else (0.5 if p == n else 0.0) for p in pos for n in neg
        ]
        assert np.mean(pairs) == 0.75
        assert auc_roc(scores, labels) == 0.75

    def test_ties_count_half(self):
        assert auc_roc([0.5, 0.5], [0, 1]) == 0.5

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(size=50)
        labels = (rng.uniform(size=50) < 0.4).astype(int)
        base = auc_roc(scores, labels)
        assert auc_roc(np.exp(3 * scores) + 7, labels) == base
        assert auc_roc(np.log(scores + 1e-9), labels) == base

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            auc_roc([0.1, 0.2], [1, 1])


class TestMaeForecast:
    def test_exact_prediction(self):
        assert mae_forecast([3, 5, 8], [3, 5, 8]) == 0.0

    def test_unit_offset(self):
        assert mae_forecast([3, 5, 8], [4, 6, 9]) == 1.0

    def test_hand_sum(self):
        truth = [3, 5, 8, 9, 7, 6, 4]
        pred = [4, 4, 8, 11, 7, 5, 4]
        assert mae_forecast(truth, pred) == pytest.approx(5 / 7)

    def test_sign_symmetric(self):
        truth = np.array([5.0, 5.0])
        assert mae_forecast(truth, truth + 2) == mae_forecast(truth, truth - 2)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mae_forecast([1, 2], [1, 2, 3])


class TestZeroMeanGpBaseline:
    def test_constant_history_extrapolates_near_constant(self):
        fc = baseline_zero_mean_gp(np.full(30, 20.0), horizon=3, seed=0)
        assert np.all(np.abs(fc.mean - 20.0) <= 2.0)

    def test_interpolation_reproduces_last_observation(self):
        from icucast import gp

        y = np.full(20, 13.0)
        days = np.arange(1.0, 21.0)[:, None]
        model = gp.fit_hyperparameters(days, y, seed=0)
        post = gp.posterior(model, days[-1:])
        assert abs(post.mean[0] - 13.0) < 0.5

    def test_too_short_history(self):
        with pytest.raises(ValueError):
            baseline_zero_mean_gp(np.array([1.0, 2.0]), horizon=3)


class TestCompartmentalBaseline:
    def test_zero_history_near_zero_forecast(self):
        fc, fit = baseline_compartmental(
            np.zeros(25), horizon=10, population=50_000, n_starts=8, seed=0
        )
        assert fc.mean() <= 0.5

    def test_self_consistency_refit(self):
        theta_true = [
            np.log(0.45),
            np.log(0.3),
            np.log(0.22),
            -1.2,
            np.log(25.0),
            np.log(30.0),
        ]
        pop = 120_000.0
        full = _simulate_daily(theta_true, pop, 40, 0.5)
        fc, fit = baseline_compartmental(full[:30], horizon=10, population=pop, seed=0)
        assert mae_forecast(full[30:], fc) <= 0.1

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(2)
        y = np.cumsum(rng.uniform(0, 3, size=25)).round()
        a, _ = baseline_compartmental(y, horizon=5, population=80_000, n_starts=6, seed=4)
        b, _ = baseline_compartmental(y, horizon=5, population=80_000, n_starts=6, seed=4)
        np.testing.assert_array_equal(a, b)


def _toy_world(n_hospitals=2, days=30, seed=0):
    rng = np.random.default_rng(seed)
    series = []
    for i in range(n_hospitals):
        adm = np.round(10 + 5 * np.sin(np.arange(days) / 4.0) + rng.integers(0, 3, days))
        series.append(
            HospitalSeries(
                hospital_id=f"H{i:03d}",
                admissions=np.maximum(adm, 0),
                mobility=np.zeros((days, 6)),
            )
        )
    return series


class TestBenchmarkReport:
    def test_identical_stub_methods_identical_rows(self):
        series = _toy_world()
        stub = lambda hist, horizon, mob: np.full(horizon, 10.0)
        report = benchmark_report(
            series, {"a": stub, "b": stub}, cutoffs={"pre": 10, "post": 20}, horizon=7
        )
        for stage in ("pre", "post"):
            for s in series:
                assert report.mae(s.hospital_id, "a", stage) == report.mae(
                    s.hospital_id, "b", stage
                )

    def test_row_count(self):
        series = _toy_world(n_hospitals=3)
        stub = lambda hist, horizon, mob: np.zeros(horizon)
        report = benchmark_report(series, {"a": stub}, cutoffs={"pre": 10}, horizon=7)
        assert len(report.rows) == 3
        assert len(report.national) == 1
        table = format_text_table(report)
        assert len(table.splitlines()) == 3 + 2  # header + hospitals + national

    def test_national_row_is_mae_of_summed_forecasts(self):
        series = _toy_world(n_hospitals=2, seed=3)
        pred_by_hospital = {
            "H000": np.full(7, 8.0),
            "H001": np.full(7, 12.0),
        }
        method = lambda hist, horizon, mob: pred_by_hospital[hist.hospital_id]
        report = benchmark_report(series, {"m": method}, cutoffs={"pre": 12}, horizon=7)
        truth_sum = sum(s.admissions[12:19] for s in series)
        expected = mae_forecast(truth_sum, np.full(7, 20.0))
        assert report.mae(None, "m", "pre") == pytest.approx(expected)

    def test_default_cutoffs_ordering(self):
        cuts = default_cutoffs(peak_day=30, n_days=90)
        assert cuts["pre_peak"] < cuts["at_peak"] <= cuts["post_peak"]
