import math

import numpy as np
import pytest
from gym.utils import seeding

from caformer import metrics
from caformer.errors import ContractError, DegenerateSeriesError, NumericError
from caformer.metrics import MetricReport


def test_regression_examples():
    assert metrics.regression_metrics([1.0, 2.0], [1.0, 2.0]) == {"mse": 0.0, "mae": 0.0}
    assert metrics.regression_metrics([0.0, 0.0], [1.0, -1.0]) == {"mse": 1.0, "mae": 1.0}
    out = metrics.regression_metrics([1.0, 2.0, 3.0], [2.0, 2.0, 2.0])
    assert out["mse"] == pytest.approx(2.0 / 3, abs=1e-9)
    assert out["mae"] == pytest.approx(2.0 / 3, abs=1e-9)
    with pytest.raises(ContractError):
        metrics.regression_metrics([1.0, 2.0], [1.0])


def test_masked_regression_uses_selected_entries_only():
    truth = np.array([[0.0, 5.0], [0.0, 7.0]])
    pred = np.array([[1.0, 0.0], [-1.0, 0.0]])
    mask = np.array([[True, False], [True, False]])
    assert metrics.regression_metrics(truth, pred, mask) == {"mse": 1.0, "mae": 1.0}
    with pytest.raises(ContractError):
        metrics.regression_metrics(truth, pred, np.zeros((2, 2), dtype=bool))


def test_m4_examples():
    assert metrics.smape([100.0], [110.0]) == pytest.approx(2000.0 / 210, abs=1e-9)
    assert metrics.mape([100.0], [110.0]) == pytest.approx(10.0, abs=1e-9)
    insample = np.arange(1.0, 25.0)
    perfect = metrics.m4_metrics([30.0, 31.0], [30.0, 31.0], insample, 1, 5.0, 2.0)
    assert (perfect["smape"], perfect["mase"], perfect["owa"]) == (0.0, 0.0, 0.0)
    assert metrics.owa(5.0, 2.0, 5.0, 2.0) == pytest.approx(1.0, abs=1e-9)


def test_smape_zero_terms_count_as_zero():
    assert metrics.smape([0.0, 0.0], [0.0, 0.0]) == 0.0
    assert metrics.smape([0.0], [3.0]) == pytest.approx(200.0)


def test_mase_on_flat_seasonal_differences():
    with pytest.raises(DegenerateSeriesError):
        metrics.mase([1.0], [2.0], np.full(24, 4.0), 12)
    with pytest.raises(ContractError):
        metrics.mase([1.0], [2.0], np.arange(10.0), 10)


def test_detection_examples():
    truth = np.array([1, 0, 1, 0, 1], dtype=bool)
    assert metrics.detection_metrics(truth, truth) == {"precision": 1.0, "recall": 1.0, "f1": 1.0}
    assert metrics.detection_metrics([1, 0, 0], [0, 0, 0])["f1"] == 0.0
    # TP=2, FP=1, FN=2
    out = metrics.detection_metrics([1, 1, 1, 1, 0], [1, 1, 0, 0, 1])
    assert out["precision"] == pytest.approx(2.0 / 3, abs=1e-9)
    assert out["recall"] == pytest.approx(0.5, abs=1e-9)
    assert out["f1"] == pytest.approx(4.0 / 7, abs=1e-9)


def test_point_adjust_credits_whole_segment():
    truth = np.array([0, 1, 1, 1, 0, 0, 1, 1], dtype=bool)
    pred = np.array([0, 0, 1, 0, 0, 0, 0, 0], dtype=bool)
    np.testing.assert_array_equal(metrics.adjust_predictions(truth, pred), [0, 1, 1, 1, 0, 0, 0, 0])
    plain = metrics.detection_metrics(truth, pred)
    adjusted = metrics.detection_metrics(truth, pred, point_adjust=True)
    assert plain["recall"] == pytest.approx(0.2)
    assert adjusted["recall"] == pytest.approx(0.6)
    assert adjusted["precision"] == 1.0


def test_accuracy_examples():
    assert metrics.accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert metrics.accuracy([0, 0], [1, 1]) == 0.0
    assert metrics.accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75
    with pytest.raises(ContractError):
        metrics.accuracy([], [])


def test_metric_ranges_and_f1_identity_on_random_inputs():
    rng, _ = seeding.np_random(0)
    for _ in range(200):
        truth = rng.normal(size=20) * rng.uniform(0.1, 10.0)
        pred = rng.normal(size=20) * rng.uniform(0.1, 10.0)
        assert 0.0 <= metrics.smape(truth, pred) <= 200.0
        reg = metrics.regression_metrics(truth, pred)
        assert reg["mse"] >= 0.0 and reg["mae"] >= 0.0
        flags_true = rng.uniform(size=30) < 0.3
        flags_pred = rng.uniform(size=30) < 0.3
        out = metrics.detection_metrics(flags_true, flags_pred)
        p, r, f1 = out["precision"], out["recall"], out["f1"]
        assert 0.0 <= min(p, r, f1) and max(p, r, f1) <= 1.0
        assert f1 * (p + r) == pytest.approx(2 * p * r, abs=1e-12)


def test_metrics_are_permutation_invariant():
    rng, _ = seeding.np_random(1)
    truth, pred = rng.normal(size=50), rng.normal(size=50)
    order = rng.permutation(50)
    before = metrics.regression_metrics(truth, pred)
    after = metrics.regression_metrics(truth[order], pred[order])
    assert after["mse"] == pytest.approx(before["mse"], rel=1e-12)
    assert after["mae"] == pytest.approx(before["mae"], rel=1e-12)
    labels = rng.choice(3, size=50)
    guesses = rng.choice(3, size=50)
    assert metrics.accuracy(labels[order], guesses[order]) == metrics.accuracy(labels, guesses)


def test_naive2_non_seasonal_and_constant():
    insample = np.array([3.0, 1.0, 4.0, 1.0, 5.0])
    np.testing.assert_array_equal(metrics.naive2_forecast(insample, 1, 3), [5.0, 5.0, 5.0])
    np.testing.assert_array_equal(metrics.naive2_forecast(np.full(48, 2.5), 12, 6), np.full(6, 2.5))
    with pytest.raises(ContractError):
        metrics.naive2_forecast(np.arange(10.0), 12, 4)


def test_naive2_repeats_the_last_period():
    t = np.arange(96)
    insample = 10.0 + np.sin(2 * np.pi * t / 12)
    assert metrics.seasonality_test(insample, 12)
    forecast = metrics.naive2_forecast(insample, 12, 12)
    np.testing.assert_allclose(forecast, insample[-12:], atol=1e-9)


def test_seasonality_needs_three_seasons():
    t = np.arange(30)
    assert not metrics.seasonality_test(10.0 + np.sin(2 * np.pi * t / 12), 12)


def test_naive2_reference_feeds_owa():
    t = np.arange(60)
    insample = 10.0 + np.sin(2 * np.pi * t / 12) + 0.01 * t
    truth = 10.0 + np.sin(2 * np.pi * np.arange(60, 66) / 12) + 0.6
    s, q = metrics.naive2_reference(insample, truth, 12)
    baseline = metrics.naive2_forecast(insample, 12, 6)
    out = metrics.m4_metrics(truth, baseline, insample, 12, s, q)
    assert out["owa"] == pytest.approx(1.0, abs=1e-9)


def test_metric_report_contract():
    report = MetricReport("long_forecast", {"mse": 0.5, "mae": np.float64(0.25)}, support=10)
    assert report["mae"] == 0.25
    assert report.to_dict() == {"task": "long_forecast", "support": 10, "values": {"mse": 0.5, "mae": 0.25}}
    assert '"support": 10' in report.to_json()
    with pytest.raises(NumericError):
        MetricReport("long_forecast", {"mse": math.nan}, support=10)
    with pytest.raises(ContractError):
        MetricReport("long_forecast", {"mse": 0.5}, support=0)
