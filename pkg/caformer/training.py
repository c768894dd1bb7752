"""
Losses, the Adam optimizer, the training loop, evaluation per task and the
ablation harness.
"""
import dataclasses
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from gym import logger
from gym.utils import seeding

from caformer import heads
from caformer import numerics as nx
from caformer.backbone import ABLATIONS, CaformerConfig
from caformer.data import RECONSTRUCTION_TASKS, SeriesDataset, SeriesScaler, make_windows
from caformer.errors import ContractError, NumericError
from caformer.heads import HEAD_TASKS, HeadConfig
from caformer.metrics import (MetricReport, accuracy, detection_metrics, mape, mase, naive2_reference, owa,
                              regression_metrics, smape)
from caformer.model import Caformer

LOSSES = ("mse", "smape", "cross_entropy")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

EVAL_BATCH = 64


@dataclass
class TrainConfig:
    """
    Description:
        Optimization settings. loss=None picks cross_entropy for classification
        and mse otherwise; patience counts epochs without a better validation loss.
    """

    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    task: str = "long_forecast"
    ablation: str = "full"
    loss: Optional[str] = None
    patience: int = 5
    stride: int = 1

    def __post_init__(self):
        if self.task not in HEAD_TASKS:
            raise ContractError("unknown task %r, expected one of %s" % (self.task, HEAD_TASKS))
        if self.ablation not in ABLATIONS:
            raise ContractError("unknown ablation %r, expected one of %s" % (self.ablation, ABLATIONS))
        if self.loss is None:
            self.loss = "cross_entropy" if self.task == "classification" else "mse"
        if self.loss not in LOSSES:
            raise ContractError("unknown loss %r, expected one of %s" % (self.loss, LOSSES))
        if (self.loss == "cross_entropy") != (self.task == "classification"):
            raise ContractError("loss %r does not fit task %r" % (self.loss, self.task))
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0, got %r" % self.learning_rate)
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1 or self.stride < 1:
            raise ContractError("epochs, batch_size, patience and stride must be positive")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def loss_fn(pred, target, mask=None, kind="mse"):
    """
    Scalar loss on the tape. mse and smape average over the entries where mask
    is True (all entries without a mask); cross_entropy takes logits (B, C) and
    integer class ids (B,).
    """
    pred = nx.as_array(pred)
    if kind == "cross_entropy":
        labels = np.asarray(target, dtype=np.int64).ravel()
        if pred.ndim != 2 or labels.shape[0] != pred.shape[0]:
            raise ContractError("cross_entropy needs logits (B, C) and B labels, got %s and %s"
                                % (pred.shape, labels.shape))
        onehot = np.zeros(pred.shape)
        onehot[np.arange(len(labels)), labels] = 1.0
        return nx.scale(nx.sum_all(nx.multiply(nx.log_softmax(pred), onehot)), -1.0 / len(labels))

    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ContractError("prediction shape %s differs from target shape %s" % (pred.shape, target.shape))
    if kind == "mse":
        diff = nx.subtract(pred, target)
        terms = nx.multiply(diff, diff)
    elif kind == "smape":
        denom = nx.add(nx.absolute(pred), np.abs(target))
        # |x| + |x_hat| == 0 only with a zero numerator; count such terms as 0
        denom = nx.add(denom, (denom.data == 0.0).astype(np.float64))
        terms = nx.scale(nx.divide(nx.absolute(nx.subtract(pred, target)), denom), 200.0)
    else:
        raise ContractError("unknown loss %r, expected one of %s" % (kind, LOSSES))
    if mask is None:
        return nx.mean_all(terms)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != terms.shape:
        raise ContractError("mask shape %s differs from loss shape %s" % (mask.shape, terms.shape))
    support = int(mask.sum())
    if support == 0:
        raise ContractError("loss mask selects no entries")
    return nx.divide_scalar(nx.sum_all(nx.multiply(terms, mask.astype(np.float64))), support)


class Adam(object):
    """Adaptive moment estimation over a CaformerParams mapping; updates arrays in place."""

    def __init__(self, params, learning_rate=1e-3, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        if learning_rate < 0:
            raise ContractError("learning_rate must be >= 0, got %r" % learning_rate)
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.steps = 0
        self._m = {name: np.zeros(p.shape) for name, p in params.items()}
        self._v = {name: np.zeros(p.shape) for name, p in params.items()}

    def step(self, grads):
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for name, param in self.params.items():
            g = grads[name]
            self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * g * g
            m_hat = self._m[name] / correction1
            v_hat = self._v[name] / correction2
            param.data = param.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


class JsonlLog(object):
    """Append-only JSON-lines sink shared by concurrent training arms."""

    _lock = threading.Lock()

    def __init__(self, path):
        self.path = path
        open(path, "w").close()

    def write(self, record):
        line = json.dumps(record, sort_keys=True)
        with self._lock:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")


def default_head_config(dataset: SeriesDataset, train_config: TrainConfig, horizon=None):
    task = train_config.task
    if task in ("long_forecast", "short_forecast"):
        return HeadConfig(task=task, H=horizon or dataset.horizon)
    if task == "classification":
        return HeadConfig(task=task, num_classes=max(2, int(dataset.class_labels.max()) + 1))
    return HeadConfig(task=task)


def _horizon(head_config):
    return head_config.H if head_config.is_forecast else 0


def _batch_loss(model, batch, train_config, scaler):
    pred, _ = model.forward(batch.inputs)
    family = model.head_config.family
    if family == "classification":
        return loss_fn(pred, batch.targets, kind="cross_entropy")
    target = batch.inputs if family == "anomaly" else batch.targets
    if train_config.loss == "smape":
        # SMAPE is scale dependent: compare in original units
        scale, mean = scaler.scale[:, None], scaler.mean[:, None]
        pred = nx.add(nx.multiply(pred, scale), mean)
        target = target * scale + mean
    return loss_fn(pred, target, kind=train_config.loss)


def _check_gradients(grads):
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient in parameter %s" % name)


def _split_loss(model, dataset, config, train_config, scaler, split):
    total, count = 0.0, 0
    windows = make_windows(dataset, config.L_in, _horizon(model.head_config), train_config.stride, split,
                           task=model.head_config.family, batch_size=EVAL_BATCH, scaler=scaler, lookback=True)
    for batch in windows:
        total += _batch_loss(model, batch, train_config, scaler).item() * len(batch)
        count += len(batch)
    return total / count if count else None


def train(dataset: SeriesDataset, config: CaformerConfig, train_config: TrainConfig,
          head_config: Optional[HeadConfig] = None, log_path=None):
    """
    Fit a Caformer with Adam on the train split, early-stopping on the
    validation loss. Returns (model with the best-validation parameters, log
    records {epoch, train_loss, val_loss, wall_ms}).
    """
    head_config = head_config or default_head_config(dataset, train_config)
    if head_config.task != train_config.task:
        raise ContractError("head task %r differs from training task %r" % (head_config.task, train_config.task))
    if dataset.task != head_config.family:
        raise ContractError("dataset carries a %r payload, training task %r needs %r"
                            % (dataset.task, train_config.task, head_config.family))
    if dataset.M != config.M:
        raise ContractError("dataset has M=%d, model expects M=%d" % (dataset.M, config.M))

    scaler = SeriesScaler(dataset)
    model = Caformer(config, head_config, ablation=train_config.ablation, seed=train_config.seed)
    optimizer = Adam(model.params, train_config.learning_rate)
    rng, _ = seeding.np_random(int(train_config.seed))
    sink = JsonlLog(log_path) if log_path else None

    log = []
    best_loss, best_state, stale = None, model.params.state(), 0
    for epoch in range(1, train_config.epochs + 1):
        began = time.perf_counter()
        total, count = 0.0, 0
        for batch in make_windows(dataset, config.L_in, _horizon(head_config), train_config.stride, "train",
                                  task=head_config.family, batch_size=train_config.batch_size,
                                  scaler=scaler, rng=rng):
            graph = nx.ComputeGraph(model.params)
            with graph.recording():
                loss = _batch_loss(model, batch, train_config, scaler)
            grads = nx.backward(graph, loss)
            _check_gradients(grads)
            optimizer.step(grads)
            total += loss.item() * len(batch)
            count += len(batch)
            logger.debug("epoch %d batch of %d: loss %.6f", epoch, len(batch), loss.item())
        if count == 0:
            raise ContractError("train split yields no windows for L_in=%d" % config.L_in)
        train_loss = total / count
        val_loss = _split_loss(model, dataset, config, train_config, scaler, "val")
        record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                  "wall_ms": int(round(1000 * (time.perf_counter() - began)))}
        log.append(record)
        if sink is not None:
            sink.write(record)
        logger.info("epoch %d: train %.6f, val %s", epoch, train_loss, "%.6f" % val_loss if val_loss is not None else "n/a")

        monitored = val_loss if val_loss is not None else train_loss
        if best_loss is None or monitored < best_loss:
            best_loss, best_state, stale = monitored, model.params.state(), 0
        else:
            stale += 1
            if stale >= train_config.patience:
                logger.warn("early stop after epoch %d: no improvement for %d epochs", epoch, stale)
                break
    model.params.load_state(best_state)
    model.scaler = scaler
    return model, log


# evaluation


@dataclass
class Predictions:
    """
    Windowed truth and prediction in original units, plus what each task needs
    to score them. For reconstruction tasks owned marks, per window and step,
    the in-split steps that window scores; at stride L_in every step of the
    split is owned exactly once.
    """

    inputs: np.ndarray
    truth: np.ndarray
    pred: np.ndarray
    starts: np.ndarray
    mask: Optional[np.ndarray] = None
    scores: Optional[np.ndarray] = None
    owned: Optional[np.ndarray] = None


def _unscale(scaler, values):
    return scaler.inverse_transform(values) if scaler is not None else values


def owned_steps(starts, L_in, split_start, tiling):
    """(windows, L_in) booleans; with tiling a step already owned by an earlier window is dropped."""
    starts = np.asarray(starts, dtype=np.int64)
    steps = starts[:, None] + np.arange(L_in)
    owned = steps >= split_start
    if tiling and len(starts):
        previous_end = np.concatenate([[split_start], starts[:-1] + L_in])
        owned &= steps >= previous_end[:, None]
    return owned


def collect_predictions(model: Caformer, dataset: SeriesDataset, scaler: SeriesScaler, split="test", stride=None):
    """Anomaly windows default to stride L_in so every step is scored once; other tasks to stride 1."""
    family = model.head_config.family
    L_in = model.config.L_in
    if stride is None:
        stride = L_in if family == "anomaly" else 1
    inputs, truth, pred, starts, masks, scores = [], [], [], [], [], []
    for batch in make_windows(dataset, L_in, _horizon(model.head_config), stride, split,
                              task=family, batch_size=EVAL_BATCH, scaler=scaler, lookback=True):
        if family == "anomaly":
            out, _ = model.screened_reconstruction(batch.inputs)
        else:
            out = model.predict(batch.inputs)
        starts.append(batch.starts)
        if family == "classification":
            inputs.append(batch.inputs)
            truth.append(batch.targets)
            pred.append(out)
            continue
        observed = batch.targets if family != "anomaly" else batch.inputs
        inputs.append(_unscale(scaler, batch.inputs))
        truth.append(_unscale(scaler, observed))
        pred.append(_unscale(scaler, out))
        if batch.mask is not None:
            masks.append(batch.mask)
        if family == "anomaly":
            scores.append(heads.anomaly_scores(out, batch.inputs))
            truth[-1] = batch.targets
    if not starts:
        raise ContractError("%s split yields no windows for evaluation" % split)
    starts = np.concatenate(starts)
    owned, mask = None, np.concatenate(masks) if masks else None
    if family in RECONSTRUCTION_TASKS:
        owned = owned_steps(starts, L_in, dataset.segment(split)[0], tiling=stride >= L_in)
        if mask is not None:
            mask = mask & owned[:, None, :]
    return Predictions(inputs=np.concatenate(inputs), truth=np.concatenate(truth), pred=np.concatenate(pred),
                       starts=starts, mask=mask, scores=np.concatenate(scores) if scores else None, owned=owned)


def persistence_forecast(inputs, H):
    """Repeat the last observed value of every dimension H times."""
    inputs = np.asarray(inputs, dtype=np.float64)
    return np.repeat(inputs[..., -1:], H, axis=-1)


def mean_imputation(inputs, mask, means):
    """Fill hidden entries with the per-dimension train-split mean."""
    means = np.asarray(means, dtype=np.float64)[:, None]
    return np.where(mask, np.broadcast_to(means, np.shape(inputs)), inputs)


def evaluate(model: Caformer, dataset: SeriesDataset, split="test", scaler=None, seasonality=1,
             point_adjust=True, predictions=None):
    """Score model on one split with the metrics of its task."""
    scaler = scaler or model.scaler or SeriesScaler(dataset)
    p = predictions or collect_predictions(model, dataset, scaler, split)
    task = model.head_config.task
    if task == "long_forecast":
        values = regression_metrics(p.truth, p.pred)
        baseline = regression_metrics(p.truth, persistence_forecast(p.inputs, p.truth.shape[-1]))
        values.update({"persistence_mse": baseline["mse"], "persistence_mae": baseline["mae"]})
        return MetricReport(task, values, support=p.truth.size)
    if task == "short_forecast":
        return MetricReport(task, _short_forecast_metrics(p, seasonality), support=p.truth.shape[0] * p.truth.shape[1])
    if task == "imputation":
        values = regression_metrics(p.truth, p.pred, mask=p.mask)
        baseline = regression_metrics(p.truth, mean_imputation(p.truth, p.mask, scaler.mean), mask=p.mask)
        values.update({"mean_imputation_mse": baseline["mse"], "mean_imputation_mae": baseline["mae"]})
        return MetricReport(task, values, support=int(p.mask.sum()))
    if task == "classification":
        labels = np.argmax(p.pred, axis=-1)
        return MetricReport(task, {"accuracy": accuracy(p.truth, labels)}, support=len(labels))

    val = collect_predictions(model, dataset, scaler, "val", stride=1)
    limit = heads.threshold(val.scores[val.owned], model.head_config.quantile)
    # at stride L_in the owned steps come out in time order, one score per step
    flags = heads.flag(p.scores[p.owned], limit)
    values = detection_metrics(p.truth[p.owned], flags, point_adjust=point_adjust)
    values["threshold"] = limit
    return MetricReport(task, values, support=flags.size)


def _short_forecast_metrics(p: Predictions, m):
    rows = []
    for window in range(p.truth.shape[0]):
        for dim in range(p.truth.shape[1]):
            insample, truth, pred = p.inputs[window, dim], p.truth[window, dim], p.pred[window, dim]
            naive2_smape, naive2_mase = naive2_reference(insample, truth, m)
            rows.append((smape(truth, pred), mape(truth, pred), mase(truth, pred, insample, m), naive2_smape, naive2_mase))
    smape_, mape_, mase_, n2_smape, n2_mase = np.mean(np.array(rows), axis=0)
    return {"smape": smape_, "mape": mape_, "mase": mase_, "owa": owa(smape_, mase_, n2_smape, n2_mase),
            "naive2_smape": n2_smape, "naive2_mase": n2_mase}


# ablation


def _primary(report: MetricReport):
    return {k: v for k, v in report.values.items() if not k.startswith(("persistence_", "mean_imputation_", "naive2_"))
            and k != "threshold"}


def ablation_run(dataset: SeriesDataset, config: CaformerConfig, train_config: TrainConfig,
                 head_config: Optional[HeadConfig] = None, variants: Sequence[str] = ABLATIONS,
                 seeds: Sequence[int] = None, max_workers=4, out_dir=None):
    """
    Train and score every variant under every seed, one thread per arm. Returns
    (table, reports): table has one row per metric and one column per variant,
    holding the median over seeds.
    """
    for variant in variants:
        if variant not in ABLATIONS:
            raise ContractError("unknown ablation %r, expected one of %s" % (variant, ABLATIONS))
    seeds = list(seeds) if seeds is not None else [train_config.seed]
    head_config = head_config or default_head_config(dataset, train_config)

    def arm(variant, seed):
        log_path = None
        if out_dir is not None:
            arm_dir = out_dir / ("%s_seed%d" % (variant, seed))
            arm_dir.mkdir(parents=True, exist_ok=True)
            log_path = arm_dir / "log.jsonl"
        arm_config = train_config.replace(ablation=variant, seed=seed)
        model, _ = train(dataset, config, arm_config, head_config, log_path=log_path)
        return evaluate(model, dataset, "test")

    arms = [(variant, seed) for variant in variants for seed in seeds]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        reports = dict(zip(arms, pool.map(lambda a: arm(*a), arms)))

    columns = {}
    for variant in variants:
        frame = pd.DataFrame([_primary(reports[(variant, seed)]) for seed in seeds])
        columns[variant] = frame.median(axis=0)
    table = pd.DataFrame(columns)
    table.index.name = "metric"
    return table, reports


def ablation_direction(table: pd.DataFrame, metric="mse", tolerance=1.10):
    """Whether the full model's metric is within tolerance x each ablated variant's (lower is better)."""
    if "full" not in table.columns or metric not in table.index:
        raise ContractError("table lacks the full variant or metric %r" % metric)
    full = table.loc[metric, "full"]
    return {variant: bool(full <= tolerance * table.loc[metric, variant])
            for variant in table.columns if variant != "full"}
