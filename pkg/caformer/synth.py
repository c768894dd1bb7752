"""
Synthetic series with known structure, standing in for the public benchmarks.

    Kind         Contents
    coupled_ar   lagged nonlinear cross-dimension couplings plus a hidden,
                 shared low-frequency confounder driving every dimension
    seasonal     positive multi-period series (short-term forecasting, Naive2)
    two_class    equal-length segments whose frequency encodes the class
    spiked       smooth periodic series with labelled point anomalies

The ground truth (coupling matrix, lags, confounder path, anomaly positions) is
kept in SeriesDataset.meta.
"""
import math

import numpy as np
from gym.utils import seeding

from caformer.data import SeriesDataset, default_split
from caformer.errors import ContractError

KINDS = ("coupled_ar", "seasonal", "two_class", "spiked")

MAX_LAG = 3
MIN_LENGTH = 64


def _coupled_ar(rng, M, L, params):
    noise = params.get("noise", 0.3)
    period = params.get("confounder_period", 64)
    persistence = params.get("persistence", 0.5)
    budget = params.get("coupling_budget", 0.4)

    coefficients = np.zeros((M, M))
    lags = np.zeros((M, M), dtype=np.int64)
    for i in range(M):
        others = [j for j in range(M) if j != i]
        weights = rng.uniform(0.5, 1.0, size=len(others)) * rng.choice([-1.0, 1.0], size=len(others))
        coefficients[i, others] = budget * weights / len(others)
        lags[i, others] = rng.choice(np.arange(1, MAX_LAG + 1), size=len(others))
    loading = rng.uniform(0.8, 1.5, size=M)

    steps = np.arange(L + MAX_LAG)
    drift = np.zeros(L + MAX_LAG)
    shocks = rng.normal(0.0, 0.05, size=L + MAX_LAG)
    for t in range(1, L + MAX_LAG):
        drift[t] = 0.98 * drift[t - 1] + shocks[t]
    confounder = np.sin(2 * math.pi * steps / period + rng.uniform(0, 2 * math.pi)) + drift

    x = np.zeros((M, L + MAX_LAG))
    eps = rng.normal(0.0, noise, size=(M, L + MAX_LAG))
    for t in range(MAX_LAG, L + MAX_LAG):
        for i in range(M):
            coupled = sum(coefficients[i, j] * math.tanh(x[j, t - lags[i, j]]) for j in range(M) if j != i)
            x[i, t] = persistence * x[i, t - 1] + coupled + loading[i] * confounder[t] + eps[i, t]
    meta = {"coefficients": coefficients, "lags": lags, "confounder": confounder[MAX_LAG:], "loading": loading}
    return x[:, MAX_LAG:], meta


def _seasonal(rng, M, L, params):
    periods = params.get("periods", (24, 12))
    noise = params.get("noise", 0.05)
    level = params.get("level", 10.0)
    t = np.arange(L)
    x = np.zeros((M, L))
    for i in range(M):
        x[i] = level + 0.002 * (i + 1) * t
        for p in periods:
            x[i] += rng.uniform(0.5, 2.0) * np.sin(2 * math.pi * t / p + rng.uniform(0, 2 * math.pi))
        x[i] += rng.normal(0.0, noise, size=L)
    return x, {"periods": list(periods)}


def _two_class(rng, M, segment_length, params):
    n_series = params.get("n_series", 200)
    cycles = params.get("cycles", (4, 9))
    noise = params.get("noise", 0.1)
    labels = rng.permutation(np.arange(n_series) % 2)
    t = np.arange(segment_length)
    x = np.zeros((M, n_series * segment_length))
    for s, label in enumerate(labels):
        block = slice(s * segment_length, (s + 1) * segment_length)
        for i in range(M):
            amplitude = rng.uniform(0.8, 1.2) * (1.0 + 0.25 * i)
            phase = rng.uniform(0, 2 * math.pi)
            x[i, block] = amplitude * np.sin(2 * math.pi * cycles[label] * t / segment_length + phase)
            if noise > 0:
                x[i, block] += rng.normal(0.0, noise, size=segment_length)
    return x, labels, {"cycles": list(cycles)}


def _spiked(rng, M, L, split, params):
    n_anomalies = params.get("n_anomalies", 10)
    magnitude = params.get("spike_scale", 6.0)
    period = params.get("period", 32)
    noise = params.get("noise", 0.1)
    region = params.get("region", "test")

    t = np.arange(L)
    x = np.zeros((M, L))
    for i in range(M):
        x[i] = np.sin(2 * math.pi * t / period + rng.uniform(0, 2 * math.pi)) + rng.normal(0.0, noise, size=L)

    lo, hi = {"test": (split[1], L), "val": (split[0], split[1]), "all": (0, L)}[region]
    if hi - lo < n_anomalies:
        raise ContractError("%d steps cannot hold %d anomalies" % (hi - lo, n_anomalies))
    positions = np.sort(rng.choice(np.arange(lo, hi), size=n_anomalies, replace=False))
    labels = np.zeros(L, dtype=bool)
    labels[positions] = True
    dims = rng.choice(M, size=n_anomalies)
    signs = rng.choice([-1.0, 1.0], size=n_anomalies)
    x[dims, positions] += signs * magnitude * x.std(axis=1)[dims]
    return x, labels, {"positions": positions, "dimensions": dims}


def synth_generate(kind, M, L, seed, params=None):
    """
    Build a synthetic SeriesDataset. For two_class, L is the length of one
    series (segment) and params["n_series"] the number of segments.
    """
    params = dict(params or {})
    if kind not in KINDS:
        raise ContractError("unknown synthetic kind %r, expected one of %s" % (kind, KINDS))
    if M < 2 or L < MIN_LENGTH:
        raise ContractError("synthetic series need M >= 2 and L >= %d, got M=%d, L=%d" % (MIN_LENGTH, M, L))
    rng, _ = seeding.np_random(int(seed))
    horizon = params.get("horizon")
    names = tuple("x%d" % i for i in range(M))

    if kind == "two_class":
        values, labels, meta = _two_class(rng, M, L, params)
        split = default_split(values.shape[1], unit=L)
        return SeriesDataset(values=values, dim_names=names, split=split, class_labels=labels,
                             segment_length=L, meta=dict(meta, kind=kind))
    split = default_split(L)
    if kind == "spiked":
        values, flags, meta = _spiked(rng, M, L, split, params)
        return SeriesDataset(values=values, dim_names=names, split=split, anomaly_labels=flags,
                             meta=dict(meta, kind=kind))
    values, meta = _coupled_ar(rng, M, L, params) if kind == "coupled_ar" else _seasonal(rng, M, L, params)
    return SeriesDataset(values=values, dim_names=names, split=split, horizon=horizon, meta=dict(meta, kind=kind))
