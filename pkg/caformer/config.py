"""
Flat run configuration.

One TOML file of key = value pairs, overridden by command-line flags and
repeated --set key=value pairs (later wins). Unknown keys are rejected.
k = 0 ties the aligning matrix to the patch count N and beta = 0 means
beta = E. Every run writes the resolved values to config.resolved.toml
before doing anything else.
"""
import dataclasses
from dataclasses import dataclass, field, fields
from typing import List

import toml

from caformer.backbone import CaformerConfig
from caformer.errors import ConfigError, ContractError
from caformer.heads import HeadConfig
from caformer.training import TrainConfig

SYNTH_FOR_TASK = {
    "long_forecast": "coupled_ar",
    "short_forecast": "seasonal",
    "imputation": "coupled_ar",
    "classification": "two_class",
    "anomaly": "spiked",
}


@dataclass
class RunConfig:
    # task and data
    task: str = "long_forecast"
    data: str = ""
    has_header: bool = True
    timestamp_col: str = ""
    mask_path: str = ""
    labels_path: str = ""
    segment_length: int = 0
    synth_kind: str = ""
    synth_M: int = 4
    synth_L: int = 512
    n_series: int = 200
    n_anomalies: int = 10
    mask_ratio: float = 0.25
    # model
    L_in: int = 96
    horizon: int = 48
    P: int = 16
    S: int = 8
    E: int = 16
    k: int = 0
    blocks: int = 3
    alpha: float = 1.0
    beta: float = 0.0
    # head and metrics
    num_classes: int = 0
    quantile: float = 0.99
    seasonality: int = 1
    point_adjust: bool = True
    # training
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    ablation: str = "full"
    loss: str = ""
    patience: int = 5
    stride: int = 1
    # ablate
    seeds: List[int] = field(default_factory=list)
    workers: int = 4
    # output
    out_dir: str = "runs/default"

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type is int and isinstance(value, float) and value.is_integer():
                setattr(self, f.name, int(value))
            elif f.type is float and isinstance(value, int) and not isinstance(value, bool):
                setattr(self, f.name, float(value))
        try:
            self.train_config()
            HeadConfig(task=self.task, H=self.horizon, num_classes=self.num_classes or 2, quantile=self.quantile)
        except ContractError as exc:
            raise ConfigError(str(exc)) from None
        if self.mask_ratio <= 0 or self.mask_ratio >= 1:
            raise ConfigError("mask_ratio must lie in (0, 1), got %r" % self.mask_ratio)
        if self.k < 0 or self.beta < 0 or self.seasonality < 1 or self.workers < 1:
            raise ConfigError("k and beta must be >= 0, seasonality and workers >= 1")

    @property
    def synth(self):
        return self.synth_kind or SYNTH_FOR_TASK[self.task]

    def train_config(self):
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           seed=self.seed, task=self.task, ablation=self.ablation, loss=self.loss or None,
                           patience=self.patience, stride=self.stride)

    def caformer_config(self, M, L_in=None):
        try:
            config = CaformerConfig(M=M, L_in=L_in or self.L_in, P=self.P, S=self.S, E=self.E, k=self.k or 1,
                                    blocks=self.blocks, alpha=self.alpha, beta=self.beta or None)
        except ContractError as exc:
            raise ConfigError(str(exc)) from None
        if not self.k:
            config.k = config.N
        return config

    def head_config(self, num_classes=None):
        try:
            return HeadConfig(task=self.task, H=self.horizon, num_classes=self.num_classes or num_classes,
                              quantile=self.quantile)
        except ContractError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_toml(self):
        return toml.dumps(dataclasses.asdict(self))


def parse_override(text):
    """'key=value' with the value parsed as a TOML value, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError("override %r is not key=value" % text)
    key, raw = (part.strip() for part in text.split("=", 1))
    try:
        value = toml.loads("value = %s" % raw)["value"]
    except toml.TomlDecodeError:
        value = raw
    return key, value


def load_run_config(path=None, overrides=()):
    """File values, then overrides (a mapping or key=value strings) on top."""
    values = {}
    if path:
        try:
            values.update(toml.load(path))
        except (toml.TomlDecodeError, OSError) as exc:
            raise ConfigError("cannot read config %s: %s" % (path, exc)) from None
    items = overrides.items() if isinstance(overrides, dict) else (parse_override(o) for o in overrides)
    for key, value in items:
        values[key] = value
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError("unknown config keys: %s" % ", ".join(unknown))
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def write_resolved(config: RunConfig, path):
    with open(path, "w") as fh:
        fh.write(config.to_toml())
