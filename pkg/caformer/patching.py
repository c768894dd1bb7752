"""
Overlapping patches and in-patch normalization.

A series of L steps is end-padded by repeating its final value S times and cut
into N = floor((L - P) / S) + 2 patches of P steps taken every S steps. Patches
are stored with the patch length before the patch index, (..., M, P, N).
"""
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from caformer.errors import ContractError
from caformer.numerics import EPS


def _check_bounds(L, P, S):
    if not (1 <= P <= L and 1 <= S <= P):
        raise ContractError("patching needs 1 <= P <= L and 1 <= S <= P, got L=%r, P=%r, S=%r" % (L, P, S))


def patch_count(L, P, S):
    _check_bounds(L, P, S)
    return (L - P) // S + 2


@dataclass(frozen=True)
class PatchSet:
    """
    Description:
        Patches of a (batch of) multivariate series plus the per-(dimension,
        patch) statistics needed to undo in-patch normalization.

    Fields:
        patches     (..., M, P, N)
        mean, std   (..., M, N); std is the guarded denominator max(std, EPS)
        P, S, L     patch length, stride and the unpadded series length
    """

    patches: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    P: int
    S: int
    L: int
    normalized: bool = False

    @property
    def N(self):
        return self.patches.shape[-1]

    @property
    def M(self):
        return self.patches.shape[-3]


def make_patches(series, P, S):
    series = np.asarray(series, dtype=np.float64)
    if series.ndim < 2:
        raise ContractError("series must be shaped (..., M, L), got %s" % (series.shape,))
    L = series.shape[-1]
    _check_bounds(L, P, S)
    tail = np.repeat(series[..., -1:], S, axis=-1)
    padded = np.concatenate([series, tail], axis=-1)
    windows = sliding_window_view(padded, P, axis=-1)[..., ::S, :]
    patches = np.ascontiguousarray(np.swapaxes(windows, -1, -2))
    assert patches.shape[-1] == patch_count(L, P, S), "patch count %d != %d" % (patches.shape[-1], patch_count(L, P, S))
    stats_shape = patches.shape[:-2] + patches.shape[-1:]
    return PatchSet(patches, np.zeros(stats_shape), np.ones(stats_shape), P, S, L)


def in_patch_normalize(ps: PatchSet):
    """Standardize every (dimension, patch) slice with its population statistics."""
    if ps.normalized:
        return ps
    mean = ps.patches.mean(axis=-2)
    std = np.maximum(ps.patches.std(axis=-2), EPS)
    patches = (ps.patches - mean[..., None, :]) / std[..., None, :]
    return replace(ps, patches=patches, mean=mean, std=std, normalized=True)


def denormalize(ps: PatchSet):
    if not ps.normalized:
        return ps
    patches = ps.patches * ps.std[..., None, :] + ps.mean[..., None, :]
    stats_shape = ps.mean.shape
    return replace(ps, patches=patches, mean=np.zeros(stats_shape), std=np.ones(stats_shape), normalized=False)


def _coverage(ps: PatchSet):
    starts = np.arange(ps.N) * ps.S
    index = starts[None, :] + np.arange(ps.P)[:, None]
    counts = np.zeros(ps.L + ps.S)
    np.add.at(counts, index, 1.0)
    return index, counts


def _spread(values, ps, index, counts):
    """Average (..., P, N) patch values back onto the padded step axis."""
    out = np.zeros(values.shape[:-2] + (ps.L + ps.S,))
    flat = out.reshape(-1, out.shape[-1])
    for row, patch in zip(flat, values.reshape((-1,) + values.shape[-2:])):
        np.add.at(row, index, patch)
    return out[..., :ps.L] / counts[:ps.L]


def unpatch(ps: PatchSet):
    """Average overlapping unnormalized patches back into a (..., M, L) series."""
    ps = denormalize(ps)
    index, counts = _coverage(ps)
    return _spread(ps.patches, ps, index, counts)


def per_step_stats(ps: PatchSet):
    """Mean and denominator of the patches covering each step, averaged; both (..., M, L)."""
    index, counts = _coverage(ps)
    shape = ps.mean.shape[:-1] + (ps.P, ps.N)
    mean = np.broadcast_to(ps.mean[..., None, :], shape)
    std = np.broadcast_to(ps.std[..., None, :], shape)
    return _spread(mean, ps, index, counts), _spread(std, ps, index, counts)
