import numpy as np
import pytest
from gym.utils import seeding

from caformer.errors import ContractError
from caformer.patching import denormalize, in_patch_normalize, make_patches, patch_count, per_step_stats, unpatch


@pytest.mark.parametrize("L, P, S, N", [(96, 16, 8, 12), (36, 16, 8, 4), (32, 8, 4, 8), (50, 50, 7, 2)])
def test_patch_count(L, P, S, N):
    assert patch_count(L, P, S) == N


@pytest.mark.parametrize("L, P, S", [(10, 0, 1), (10, 11, 1), (10, 4, 5), (10, 4, 0)])
def test_patch_count_bounds(L, P, S):
    with pytest.raises(ContractError):
        patch_count(L, P, S)


def test_patch_count_is_monotone():
    for L in (32, 96, 100):
        for P in range(1, 17):
            counts = [patch_count(L, P, S) for S in range(1, P + 1)]
            assert all(a >= b for a, b in zip(counts, counts[1:]))
        for S in range(1, 5):
            counts = [patch_count(L, P, S) for P in range(S, 17)]
            assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_patch_layout_on_padded_series():
    series = np.arange(96, dtype=np.float64)[None, :]
    ps = make_patches(series, 16, 8)
    assert ps.patches.shape == (1, 16, 12)
    starts = ps.patches[0, 0, :]
    np.testing.assert_array_equal(starts, np.arange(0, 96, 8))
    # the last patch starts at 88 and runs into the padding
    np.testing.assert_array_equal(ps.patches[0, :, -1], np.r_[np.arange(88, 96), np.full(8, 95.0)])


def test_non_overlapping_patches_tile_the_series():
    series = np.arange(24, dtype=np.float64).reshape(1, 24)
    ps = make_patches(series, 6, 6)
    assert ps.N == 5
    np.testing.assert_array_equal(ps.patches[0].T[:4].ravel(), series[0])
    np.testing.assert_array_equal(ps.patches[0, :, 4], np.full(6, 23.0))


def test_constant_series_gives_identical_patches():
    ps = make_patches(np.full((2, 40), 3.0), 8, 4)
    assert (ps.patches == 3.0).all()


def test_in_patch_normalize_values():
    ps = make_patches(np.array([[1.0, 2.0, 3.0]]), 3, 3)
    normalized = in_patch_normalize(ps)
    np.testing.assert_allclose(normalized.patches[0, :, 0], [-1.224744871391589, 0.0, 1.224744871391589])
    # padded final patch [3, 3, 3] is constant
    np.testing.assert_array_equal(normalized.patches[0, :, 1], [0.0, 0.0, 0.0])


def test_normalized_slices_have_zero_mean_and_unit_std():
    rng, _ = seeding.np_random(0)
    for _ in range(20):
        series = rng.normal(size=(3, 96)) * rng.uniform(0.1, 50.0) + rng.uniform(-100, 100)
        ps = in_patch_normalize(make_patches(series, 16, 8))
        np.testing.assert_allclose(ps.patches.mean(axis=-2), 0.0, atol=1e-9)
        np.testing.assert_allclose(ps.patches.std(axis=-2), 1.0, atol=1e-6)


def test_denormalize_inverts_normalization():
    rng, _ = seeding.np_random(1)
    series = rng.normal(size=(2, 3, 40)) * 10.0
    raw = make_patches(series, 8, 4)
    back = denormalize(in_patch_normalize(raw))
    np.testing.assert_allclose(back.patches, raw.patches, atol=1e-9)


def test_unpatch_reproduces_series():
    rng, _ = seeding.np_random(2)
    for _ in range(100):
        L = int(rng.choice(np.arange(20, 120)))
        P = int(rng.choice(np.arange(2, 17)))
        S = int(rng.choice(np.arange(1, P + 1)))
        series = rng.normal(size=(2, L))
        np.testing.assert_allclose(unpatch(make_patches(series, P, S)), series, atol=1e-12)
        np.testing.assert_allclose(unpatch(in_patch_normalize(make_patches(series, P, S))), series, atol=1e-9)


def test_every_step_is_covered():
    ps = make_patches(np.zeros((1, 37)), 9, 5)
    covered = np.zeros(37 + 5, dtype=bool)
    for j in range(ps.N):
        covered[j * 5:j * 5 + 9] = True
    assert covered[:37].all()


def test_per_step_stats_of_raw_patches_are_identity():
    ps = make_patches(np.ones((2, 30)), 8, 4)
    mean, std = per_step_stats(ps)
    assert mean.shape == (2, 30)
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_array_equal(std, 1.0)


@pytest.mark.filterwarnings("error")
@pytest.mark.parametrize("L, P, S", [(37, 9, 5), (30, 8, 4), (50, 50, 7)])
def test_averaging_stays_on_covered_steps(L, P, S):
    rng, _ = seeding.np_random(4)
    ps = in_patch_normalize(make_patches(rng.normal(size=(2, L)), P, S))
    mean, std = per_step_stats(ps)
    assert mean.shape == std.shape == unpatch(ps).shape == (2, L)
    assert np.isfinite(mean).all() and (std > 0).all()
