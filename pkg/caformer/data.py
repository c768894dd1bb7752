"""
Series ingestion, train-split scaling, windowing and imputation masks.

A SeriesDataset is one multivariate series X (M dimensions x L steps) cut into
train/val/test by two step indices. The task payload decides what a window's
target is:

    Task            Payload                         Window target
    forecast        horizon H                       next H steps (M x H)
    imputation      mask (M x L, True = hidden)     the clean window (M x L_in)
    classification  one class id per segment        the segment's class id
    anomaly         one 0/1 flag per step           the window's flags (L_in)

Classification data is a single series made of equal-length segments laid end
to end, so splits and windows both fall on segment boundaries.
"""
import dataclasses
import re
from dataclasses import dataclass, field
from typing import Iterator, Optional, Tuple

import numpy as np
import pandas as pd
from gym import logger
from gym.utils import seeding
from sklearn.preprocessing import StandardScaler

from caformer.errors import ContractError, DataParseError

TASK_FAMILIES = ("forecast", "imputation", "classification", "anomaly")
RECONSTRUCTION_TASKS = ("imputation", "anomaly")
SPLITS = ("train", "val", "test")

TRAIN_RATIO = 0.7
VAL_RATIO = 0.1


def default_split(L, train_ratio=TRAIN_RATIO, val_ratio=VAL_RATIO, unit=1):
    """70/10/20 split boundaries, rounded to multiples of unit steps."""
    units = L // unit
    train_end = max(1, int(round(units * train_ratio)))
    val_end = min(units, max(train_end + 1, int(round(units * (train_ratio + val_ratio)))))
    return train_end * unit, val_end * unit


def _frozen(array, dtype):
    if array is None:
        return None
    array = np.array(array, dtype=dtype)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class SeriesDataset:
    """
    Description:
        Immutable multivariate series with split boundaries and one task payload.

    Invariants:
        0 < train_end < val_end <= L; mask, when present, has the shape of values.
    """

    values: np.ndarray
    dim_names: Tuple[str, ...]
    split: Tuple[int, int]
    horizon: Optional[int] = None
    mask: Optional[np.ndarray] = None
    class_labels: Optional[np.ndarray] = None
    segment_length: Optional[int] = None
    anomaly_labels: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        if values.ndim != 2 or values.size == 0:
            raise ContractError("values must be a non-empty M x L array, got shape %s" % (values.shape,))
        if not np.isfinite(values).all():
            raise ContractError("values contain non-finite entries")
        object.__setattr__(self, "values", values)
        M, L = values.shape
        object.__setattr__(self, "dim_names", tuple(self.dim_names) if self.dim_names else
                           tuple("dim%d" % i for i in range(M)))
        if len(self.dim_names) != M:
            raise ContractError("%d dimension names for %d dimensions" % (len(self.dim_names), M))
        train_end, val_end = (int(b) for b in self.split)
        if not 0 < train_end < val_end <= L:
            raise ContractError("split (%d, %d) violates 0 < train_end < val_end <= %d" % (train_end, val_end, L))
        object.__setattr__(self, "split", (train_end, val_end))
        if self.horizon is not None and int(self.horizon) < 1:
            raise ContractError("forecast horizon must be >= 1, got %r" % self.horizon)
        mask = _frozen(self.mask, bool)
        if mask is not None and mask.shape != values.shape:
            raise ContractError("mask shape %s differs from values shape %s" % (mask.shape, values.shape))
        object.__setattr__(self, "mask", mask)
        labels = _frozen(self.class_labels, np.int64)
        if labels is not None:
            if not self.segment_length or L % self.segment_length or labels.shape != (L // self.segment_length,):
                raise ContractError("class labels need one id per segment of length %r" % self.segment_length)
            if train_end % self.segment_length or val_end % self.segment_length:
                raise ContractError("classification splits must fall on segment boundaries")
        object.__setattr__(self, "class_labels", labels)
        flags = _frozen(self.anomaly_labels, bool)
        if flags is not None and flags.shape != (L,):
            raise ContractError("anomaly labels need one flag per step, got shape %s" % (flags.shape,))
        object.__setattr__(self, "anomaly_labels", flags)

    @property
    def M(self):
        return self.values.shape[0]

    @property
    def L(self):
        return self.values.shape[1]

    @property
    def task(self):
        if self.class_labels is not None:
            return "classification"
        if self.anomaly_labels is not None:
            return "anomaly"
        if self.mask is not None:
            return "imputation"
        if self.horizon is not None:
            return "forecast"
        return None

    def segment(self, name):
        train_end, val_end = self.split
        bounds = {"train": (0, train_end), "val": (train_end, val_end), "test": (val_end, self.L)}
        if name not in bounds:
            raise ContractError("unknown split %r, expected one of %s" % (name, SPLITS))
        return bounds[name]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class WindowBatch:
    inputs: np.ndarray
    targets: np.ndarray
    starts: np.ndarray
    mask: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.starts)


class SeriesScaler:
    """
    Per-dimension z-score whose statistics come from the train split only;
    hidden (masked) entries are left out of the fit.
    """

    def __init__(self, dataset: SeriesDataset):
        train_end, _ = dataset.split
        train = np.array(dataset.values[:, :train_end], dtype=np.float64)
        if dataset.mask is not None:
            train[dataset.mask[:, :train_end]] = np.nan
        self._scaler = StandardScaler().fit(train.T)
        self.mean = np.nan_to_num(self._scaler.mean_, nan=0.0)
        self.scale = np.where(np.isfinite(self._scaler.scale_), self._scaler.scale_, 1.0)

    def _apply(self, method, values):
        values = np.asarray(values, dtype=np.float64)
        moved = np.moveaxis(values, -2, -1)
        flat = moved.reshape(-1, moved.shape[-1])
        out = getattr(self._scaler, method)(flat).reshape(moved.shape)
        return np.moveaxis(out, -1, -2)

    def transform(self, values):
        """values shaped (..., M, T)."""
        return self._apply("transform", values)

    def inverse_transform(self, values):
        return self._apply("inverse_transform", values)


def load_csv(path, has_header=True, timestamp_col=None, split=None, horizon=None):
    """
    Read a comma-separated series, one row per step and one column per
    dimension. timestamp_col (column name or position) is dropped.
    """
    try:
        frame = pd.read_csv(path, header=0 if has_header else None, dtype=str,
                            keep_default_na=False, skipinitialspace=True, encoding="utf-8")
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        line = int(match.group(1)) if match else 0
        raise DataParseError(path, line - (1 if has_header else 0), "?", "ragged row (%s)" % exc) from None
    except pd.errors.EmptyDataError:
        raise DataParseError(path, 0, "?", "file is empty") from None

    if timestamp_col is not None:
        column = frame.columns[timestamp_col] if isinstance(timestamp_col, int) else timestamp_col
        if column not in frame.columns:
            raise ContractError("%s: no timestamp column %r" % (path, timestamp_col))
        frame = frame.drop(columns=[column])

    bad = []
    for position, column in enumerate(frame.columns):
        raw = frame[column]
        parsed = pd.to_numeric(raw, errors="coerce")
        for row in np.flatnonzero(parsed.isna().to_numpy()):
            bad.append((row, position, column, raw.iloc[row]))
    if bad:
        row, _, column, cell = min(bad, key=lambda b: (b[0], b[1]))
        detail = "missing cell (ragged row)" if pd.isna(cell) else "non-numeric cell %r" % cell
        raise DataParseError(path, int(row) + 1, column, detail)

    values = frame.apply(pd.to_numeric).to_numpy(dtype=np.float64).T
    names = tuple(str(c) for c in frame.columns) if has_header else None
    if split is None:
        split = default_split(values.shape[1])
    return SeriesDataset(values=values, dim_names=names, split=split, horizon=horizon)


def load_mask_csv(path, shape):
    """0/1 mask laid out like the data file (steps x dimensions); returns M x L booleans."""
    frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False)
    cells = frame.to_numpy()
    if not np.isin(cells, ("0", "1")).all():
        row, col = np.argwhere(~np.isin(cells, ("0", "1")))[0]
        raise DataParseError(path, int(row) + 1, int(col), "mask cells must be 0 or 1")
    mask = (cells == "1").T
    if mask.shape != tuple(shape):
        raise ContractError("mask shape %s differs from data shape %s" % (mask.shape, tuple(shape)))
    return mask


def load_labels_csv(path):
    frame = pd.read_csv(path, header=None)
    return frame.iloc[:, 0].to_numpy(dtype=np.int64)


def save_csv(path, values, dim_names=None):
    frame = pd.DataFrame(np.asarray(values).T, columns=list(dim_names) if dim_names else None)
    frame.to_csv(path, index=False, header=dim_names is not None)


def split_segments(ds: SeriesDataset):
    """The train, val and test slices of the series, each M x (segment length)."""
    return {name: ds.values[:, slice(*ds.segment(name))] for name in SPLITS}


def window_starts(start, end, L_in, H, stride):
    if end - start < L_in + H:
        return np.zeros(0, dtype=np.int64)
    return np.arange(start, end - L_in - H + 1, stride, dtype=np.int64)


def make_windows(ds: SeriesDataset, L_in, H=0, stride=1, split="train", task=None,
                 batch_size=None, scaler: Optional[SeriesScaler] = None, rng=None,
                 lookback=False) -> Iterator[WindowBatch]:
    """
    Return an iterator of WindowBatch objects covering one split. Every window (input and
    target) lies inside that split. With lookback, forecast windows of the val
    and test splits may take their inputs from the L_in steps before the split;
    their targets still lie inside it. Reconstruction windows (imputation,
    anomaly) of those splits borrow steps from before the split only when it
    is shorter than L_in, and the last window always ends on the split end.
    With a scaler the series is z-scored first; hidden entries of an
    imputation mask are then set to 0 in the inputs. With an rng the window
    order is shuffled.
    """
    task = task or ds.task
    if task not in TASK_FAMILIES:
        raise ContractError("unknown task %r" % task)
    if task == "forecast" and H < 1:
        raise ContractError("forecast windows need H >= 1, got %r" % H)
    if L_in < 1 or stride < 1:
        raise ContractError("L_in and stride must be positive")
    if task == "classification" and L_in != ds.segment_length:
        raise ContractError("classification windows must span one segment (%d steps)" % ds.segment_length)

    start, end = ds.segment(split)
    evaluating = lookback and split != "train"
    if evaluating and task == "forecast":
        start = max(0, start - L_in)
    elif evaluating and task in RECONSTRUCTION_TASKS:
        start = min(start, max(0, end - L_in))
    if task == "classification":
        stride = ds.segment_length
    starts = window_starts(start, end, L_in, H if task == "forecast" else 0, stride)
    if evaluating and task in RECONSTRUCTION_TASKS and len(starts) and starts[-1] + L_in < end:
        starts = np.append(starts, end - L_in)
    if len(starts) == 0:
        logger.warn("%s segment of %d steps is too short for L_in=%d, H=%d; no windows", split, end - start, L_in, H)
        return iter(())
    if rng is not None:
        starts = starts[rng.permutation(len(starts))]
    values = scaler.transform(ds.values) if scaler is not None else np.array(ds.values)
    return _iter_windows(ds, values, starts, L_in, H, task, batch_size or len(starts))


def _iter_windows(ds, values, starts, L_in, H, task, batch_size):
    for offset in range(0, len(starts), batch_size):
        chunk = starts[offset:offset + batch_size]
        index = chunk[:, None] + np.arange(L_in)
        inputs = np.moveaxis(values[:, index], 1, 0)
        mask = None
        if task == "forecast":
            targets = np.moveaxis(values[:, chunk[:, None] + L_in + np.arange(H)], 1, 0)
        elif task == "imputation":
            targets = inputs.copy()
            mask = np.moveaxis(ds.mask[:, index], 1, 0)
            inputs = np.where(mask, 0.0, inputs)
        elif task == "classification":
            targets = ds.class_labels[chunk // ds.segment_length]
        else:
            targets = ds.anomaly_labels[index]
        yield WindowBatch(inputs=inputs, targets=targets, starts=chunk, mask=mask)


def apply_imputation_mask(ds: SeriesDataset, ratio, seed):
    """Hide exactly round(ratio * M * L) entries, chosen uniformly under seed."""
    if not 0.0 < ratio < 1.0:
        raise ContractError("mask ratio must lie in (0, 1), got %r" % ratio)
    rng, _ = seeding.np_random(int(seed))
    total = ds.M * ds.L
    count = int(np.floor(ratio * total + 0.5))
    hidden = np.zeros(total, dtype=bool)
    hidden[rng.choice(total, size=count, replace=False)] = True
    return ds.replace(mask=hidden.reshape(ds.M, ds.L), horizon=None)
