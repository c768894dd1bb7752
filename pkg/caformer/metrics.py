"""
Evaluation metrics.

    Task            Metrics
    forecast        mse, mae
    short forecast  smape, mape, mase, owa (against Naive2)
    imputation      mse, mae on the hidden entries only
    classification  accuracy
    anomaly         precision, recall, f1 (optionally point-adjusted)
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from caformer.errors import ContractError, DegenerateSeriesError, NumericError

# one-sided 95% point, i.e. the 90% two-sided autocorrelation test
SEASONALITY_CONFIDENCE = 0.95


@dataclass
class MetricReport:
    task: str
    values: dict = field(default_factory=dict)
    support: int = 0

    def __post_init__(self):
        self.values = {name: float(value) for name, value in self.values.items()}
        bad = [name for name, value in self.values.items() if not math.isfinite(value)]
        if bad:
            raise NumericError("%s metrics are not finite: %s" % (self.task, ", ".join(sorted(bad))))
        if self.support <= 0:
            raise ContractError("%s report without support" % self.task)

    def __getitem__(self, name):
        return self.values[name]

    def to_dict(self):
        return {"task": self.task, "support": int(self.support), "values": dict(self.values)}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _pair(truth, pred):
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ContractError("truth shape %s differs from prediction shape %s" % (truth.shape, pred.shape))
    if truth.size == 0:
        raise ContractError("metrics need at least one point")
    return truth, pred


def regression_metrics(truth, pred, mask=None):
    """MSE and MAE over all entries, or over the entries where mask is True."""
    truth, pred = _pair(truth, pred)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != truth.shape:
            raise ContractError("mask shape %s differs from data shape %s" % (mask.shape, truth.shape))
        if not mask.any():
            raise ContractError("mask selects no entries")
        truth, pred = truth[mask], pred[mask]
    error = truth - pred
    return {"mse": float(np.mean(error ** 2)), "mae": float(np.mean(np.abs(error)))}


def smape(truth, pred):
    """Symmetric MAPE on a 0..200 scale; terms with |x| + |x_hat| == 0 count as 0."""
    truth, pred = _pair(truth, pred)
    denom = np.abs(truth) + np.abs(pred)
    # zero denominators only occur with a zero numerator
    denom[denom == 0.0] = 1.0
    return float(200.0 * np.mean(np.abs(truth - pred) / denom))


def mape(truth, pred):
    truth, pred = _pair(truth, pred)
    denom = np.abs(truth)
    denom[denom == 0.0] = 1.0
    return float(100.0 * np.mean(np.abs(truth - pred) / denom))


def mase(truth, pred, insample, m):
    truth, pred = _pair(truth, pred)
    insample = np.asarray(insample, dtype=np.float64)
    if m < 1 or insample.shape[-1] <= m:
        raise ContractError("MASE needs 1 <= m < len(insample), got m=%r, len=%d" % (m, insample.shape[-1]))
    scale = np.mean(np.abs(insample[m:] - insample[:-m]))
    if scale == 0.0:
        raise DegenerateSeriesError("MASE undefined: seasonal differences of the in-sample series are all zero (m=%d)" % m)
    return float(np.mean(np.abs(truth - pred)) / scale)


def owa(smape_value, mase_value, naive2_smape, naive2_mase):
    if naive2_smape <= 0 or naive2_mase <= 0:
        raise DegenerateSeriesError("OWA needs positive Naive2 references, got %r and %r" % (naive2_smape, naive2_mase))
    return 0.5 * (smape_value / naive2_smape + mase_value / naive2_mase)


def m4_metrics(truth, pred, insample, m, naive2_smape, naive2_mase):
    s = smape(truth, pred)
    q = mase(truth, pred, insample, m)
    return {"smape": s, "mape": mape(truth, pred), "mase": q, "owa": owa(s, q, naive2_smape, naive2_mase)}


def detection_metrics(true_flags, pred_flags, point_adjust=False):
    true_flags = np.asarray(true_flags, dtype=bool).ravel()
    pred_flags = np.asarray(pred_flags, dtype=bool).ravel()
    if true_flags.shape != pred_flags.shape:
        raise ContractError("%d true flags but %d predicted flags" % (true_flags.size, pred_flags.size))
    if point_adjust:
        pred_flags = adjust_predictions(true_flags, pred_flags)
    tp = int(np.sum(true_flags & pred_flags))
    fp = int(np.sum(~true_flags & pred_flags))
    fn = int(np.sum(true_flags & ~pred_flags))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def adjust_predictions(true_flags, pred_flags):
    """Point-adjust: one detection inside a true anomalous segment credits the whole segment."""
    adjusted = np.array(pred_flags, dtype=bool)
    edges = np.diff(np.concatenate([[0], true_flags.astype(np.int8), [0]]))
    for start, end in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
        if adjusted[start:end].any():
            adjusted[start:end] = True
    return adjusted


def accuracy(true_labels, pred_labels):
    true_labels = np.asarray(true_labels).ravel()
    pred_labels = np.asarray(pred_labels).ravel()
    if true_labels.size == 0:
        raise ContractError("accuracy of an empty label set")
    if true_labels.shape != pred_labels.shape:
        raise ContractError("%d true labels but %d predictions" % (true_labels.size, pred_labels.size))
    return float(np.mean(true_labels == pred_labels))


def acf(x, lag):
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean()
    denom = np.sum(centred ** 2)
    if denom == 0.0:
        return 0.0
    return float(np.sum(centred[lag:] * centred[:len(x) - lag]) / denom)


def seasonality_test(insample, m):
    """
    Autocorrelation test at lag m: seasonal when |acf(m)| exceeds
    z * sqrt((1 + 2 * sum_{i<m} acf(i)^2) / n). Needs at least three seasons.
    """
    insample = np.asarray(insample, dtype=np.float64)
    if m <= 1 or len(insample) < 3 * m:
        return False
    spread = sum(acf(insample, i) ** 2 for i in range(1, m))
    limit = norm.ppf(SEASONALITY_CONFIDENCE) * math.sqrt((1.0 + 2.0 * spread) / len(insample))
    return abs(acf(insample, m)) > limit


def seasonal_indices(insample, m):
    """Multiplicative indices from a centred moving average (2 x m for even m), normalized to mean 1."""
    insample = np.asarray(insample, dtype=np.float64)
    if m % 2 == 0:
        weights = np.concatenate([[0.5], np.ones(m - 1), [0.5]]) / m
    else:
        weights = np.ones(m) / m
    trend = np.convolve(insample, weights, mode="valid")
    offset = (len(weights) - 1) // 2
    steps = np.arange(offset, offset + len(trend))
    if np.any(trend == 0.0):
        raise DegenerateSeriesError("moving-average trend touches zero; multiplicative decomposition undefined")
    ratios = insample[steps] / trend
    indices = np.array([ratios[steps % m == phase].mean() for phase in range(m)])
    return indices / indices.mean()


def naive2_forecast(insample, m, horizon):
    """Seasonally adjusted naive forecast; plain naive when m == 1 or the series fails the seasonality test."""
    insample = np.asarray(insample, dtype=np.float64).ravel()
    if m < 1 or horizon < 1:
        raise ContractError("Naive2 needs m >= 1 and horizon >= 1, got %r, %r" % (m, horizon))
    if len(insample) < 2 * m:
        raise ContractError("Naive2 needs at least 2m = %d in-sample points, got %d" % (2 * m, len(insample)))
    n = len(insample)
    if not seasonality_test(insample, m):
        return np.full(horizon, insample[-1])
    indices = seasonal_indices(insample, m)
    adjusted = insample / indices[np.arange(n) % m]
    return adjusted[-1] * indices[np.arange(n, n + horizon) % m]


def naive2_reference(insample, truth, m):
    """SMAPE and MASE of Naive2 on the same in-sample series, the denominators of OWA."""
    truth = np.asarray(truth, dtype=np.float64).ravel()
    baseline = naive2_forecast(insample, m, len(truth))
    return smape(truth, baseline), mase(truth, baseline, np.ravel(insample), m)
