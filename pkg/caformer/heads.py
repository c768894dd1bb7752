"""
Task heads on top of S_temporal (..., N, M, E).

    Task            Head                      Output
    long_forecast   forecast_head             (..., M, H)
    short_forecast  forecast_head             (..., M, H)
    imputation      reconstruction_head       (..., M, L_in)
    anomaly         reconstruction_head       (..., M, L_in), scored per step
    classification  classification_head       (..., num_classes) logits

Heads are affine in S_temporal. Their raw output lives in the in-patch
normalized space and instance_denormalize maps it back with the patch
statistics kept by the backbone.
"""
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.stats import median_abs_deviation

from caformer import numerics as nx
from caformer.errors import ContractError
from caformer.numerics import EPS, uniform_init
from caformer.patching import PatchSet, per_step_stats

HEAD_TASKS = ("long_forecast", "short_forecast", "imputation", "classification", "anomaly")

DEFAULT_QUANTILE = 0.99
# robust deviations (normal-scaled MAD) beyond which a residual is bridged before scoring
OUTLIER_CUTOFF = 3.5


@dataclass
class HeadConfig:
    task: str
    H: Optional[int] = None
    num_classes: Optional[int] = None
    quantile: float = DEFAULT_QUANTILE

    def __post_init__(self):
        if self.task not in HEAD_TASKS:
            raise ContractError("unknown head task %r, expected one of %s" % (self.task, HEAD_TASKS))
        if self.is_forecast and (self.H is None or self.H < 1):
            raise ContractError("%s head needs H >= 1, got %r" % (self.task, self.H))
        if self.task == "classification" and (self.num_classes is None or self.num_classes < 2):
            raise ContractError("classification head needs num_classes >= 2, got %r" % self.num_classes)
        if not 0.0 < self.quantile < 1.0:
            raise ContractError("quantile must lie in (0, 1), got %r" % self.quantile)

    @property
    def is_forecast(self):
        return self.task in ("long_forecast", "short_forecast")

    @property
    def family(self):
        """The data-pipeline task this head consumes."""
        return "forecast" if self.is_forecast else self.task

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


def init_head_params(config, head_config: HeadConfig, rng):
    width = config.N * config.E
    if head_config.is_forecast:
        fan_in, fan_out = width, head_config.H
    elif head_config.task == "classification":
        fan_in, fan_out = width * config.M, head_config.num_classes
    else:
        fan_in, fan_out = width, config.L_in
    return {"head.weight": uniform_init(rng, (fan_in, fan_out), fan_in), "head.bias": np.zeros(fan_out)}


def _per_dimension(s):
    """(..., N, M, E) -> (..., M, N * E)."""
    s = nx.swapaxes(s, -3, -2)
    return nx.reshape(s, s.shape[:-2] + (s.shape[-2] * s.shape[-1],))


def _check_width(s, params, kernel):
    if params["head.weight"].shape[0] != s.shape[-1]:
        raise ContractError("%s: head expects width %d, got features of width %d"
                            % (kernel, params["head.weight"].shape[0], s.shape[-1]))


def forecast_head(s, params):
    flat = _per_dimension(s)
    _check_width(flat, params, "forecast_head")
    return nx.affine(flat, params["head.weight"], params["head.bias"])


def reconstruction_head(s, params):
    flat = _per_dimension(s)
    _check_width(flat, params, "reconstruction_head")
    return nx.affine(flat, params["head.weight"], params["head.bias"])


def classification_head(s, params):
    flat = nx.flatten(s, s.ndim - 3)
    _check_width(flat, params, "classification_head")
    return nx.affine(flat, params["head.weight"], params["head.bias"])


def class_probabilities(logits):
    return nx.softmax(logits).data


def instance_denormalize(out, ps: PatchSet, reconstruction=False):
    """
    Map a head output back out of the in-patch normalized space. Forecasts use
    the statistics of the last patch made only of observed steps; reconstructions
    use the statistics of the patches covering each step.
    """
    if reconstruction:
        mean, std = per_step_stats(ps)
    else:
        last = ps.N - 2
        mean, std = ps.mean[..., last:last + 1], ps.std[..., last:last + 1]
    return nx.add(nx.multiply(out, std), mean)


def anomaly_scores(recon, observed):
    """Mean over dimensions of the squared reconstruction error at every step."""
    recon = np.asarray(recon, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if recon.shape != observed.shape:
        raise ContractError("reconstruction shape %s differs from observed shape %s" % (recon.shape, observed.shape))
    return ((recon - observed) ** 2).mean(axis=-2)


def threshold(scores_val, quantile=DEFAULT_QUANTILE):
    """Linearly interpolated quantile of the validation scores."""
    if not 0.0 < quantile < 1.0:
        raise ContractError("quantile must lie in (0, 1), got %r" % quantile)
    scores_val = np.ravel(np.asarray(scores_val, dtype=np.float64))
    if scores_val.size == 0:
        raise ContractError("threshold needs at least one validation score")
    return float(np.quantile(scores_val, quantile))


def flag(scores, limit):
    return np.asarray(scores) > limit


def outlier_steps(residual, cutoff=OUTLIER_CUTOFF):
    """Entries lying more than cutoff normal-scaled MADs from the median of their row (last axis)."""
    residual = np.asarray(residual, dtype=np.float64)
    center = np.median(residual, axis=-1, keepdims=True)
    spread = median_abs_deviation(residual, axis=-1, scale="normal")[..., None]
    return np.abs(residual - center) > cutoff * np.maximum(spread, EPS)


def bridge(X, flagged):
    """Replace the flagged steps of every row by linear interpolation between its other steps."""
    X = np.array(X, dtype=np.float64)
    flagged = np.asarray(flagged, dtype=bool)
    if flagged.shape != X.shape:
        raise ContractError("flag shape %s differs from series shape %s" % (flagged.shape, X.shape))
    steps = np.arange(X.shape[-1])
    for row, mark in zip(X.reshape(-1, X.shape[-1]), flagged.reshape(-1, X.shape[-1])):
        if mark.any() and not mark.all():
            row[mark] = np.interp(steps[mark], steps[~mark], row[~mark])
    return X
