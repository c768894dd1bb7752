import numpy as np
import pytest
from gym.utils import seeding

from caformer import heads
from caformer import numerics as nx
from caformer.backbone import CaformerConfig, CaformerParams
from caformer.errors import ContractError
from caformer.heads import HeadConfig
from caformer.patching import in_patch_normalize, make_patches
from caformer.training import loss_fn


def _head(task, seed=0, **head_values):
    config = CaformerConfig.desk(M=4, L_in=96, E=8)
    head_config = HeadConfig(task=task, **head_values)
    rng, _ = seeding.np_random(seed)
    return config, CaformerParams(heads.init_head_params(config, head_config, rng))


def _features(seed=1, shape=(12, 4, 8)):
    rng, _ = seeding.np_random(seed)
    return nx.NdArray(rng.normal(size=shape))


def test_head_config_validation():
    with pytest.raises(ContractError):
        HeadConfig(task="long_forecast")
    with pytest.raises(ContractError):
        HeadConfig(task="classification", num_classes=1)
    with pytest.raises(ContractError):
        HeadConfig(task="anomaly", quantile=1.0)
    with pytest.raises(ContractError):
        HeadConfig(task="regression")
    config = HeadConfig(task="short_forecast", H=6)
    assert config.family == "forecast"
    assert HeadConfig.from_dict(config.to_dict()) == config


def test_forecast_head_shape():
    _, params = _head("long_forecast", H=48)
    assert heads.forecast_head(_features(), params).shape == (4, 48)
    batched = heads.forecast_head(_features(shape=(5, 12, 4, 8)), params)
    assert batched.shape == (5, 4, 48)


def test_zero_weights_give_denormalized_bias():
    config, params = _head("long_forecast", H=4)
    params["head.weight"].data = np.zeros_like(params["head.weight"].data)
    params["head.bias"].data = np.array([1.0, 2.0, 3.0, 4.0])
    rng, _ = seeding.np_random(2)
    ps = in_patch_normalize(make_patches(rng.normal(size=(4, 96)) * 3.0 + 7.0, config.P, config.S))
    out = heads.instance_denormalize(heads.forecast_head(_features(), params), ps).data
    last = ps.N - 2
    expected = np.array([1.0, 2.0, 3.0, 4.0]) * ps.std[:, last:last + 1] + ps.mean[:, last:last + 1]
    np.testing.assert_allclose(out, expected)


def test_reconstruction_and_classification_shapes():
    _, params = _head("imputation")
    assert heads.reconstruction_head(_features(), params).shape == (4, 96)
    _, params = _head("classification", num_classes=2)
    logits = heads.classification_head(_features(), params)
    assert logits.shape == (2,)
    batch = heads.classification_head(_features(shape=(3, 12, 4, 8)), params)
    assert batch.shape == (3, 2)


def test_head_width_mismatch():
    _, params = _head("long_forecast", H=4)
    with pytest.raises(ContractError):
        heads.forecast_head(_features(shape=(10, 4, 8)), params)


def test_equal_logits_give_uniform_probabilities():
    np.testing.assert_allclose(heads.class_probabilities(np.zeros((2, 3))), 1.0 / 3)


def test_heads_are_affine_in_features():
    _, params = _head("long_forecast", H=6)
    s1, s2, a = _features(1), _features(2), 0.3
    mixed = heads.forecast_head(nx.NdArray(a * s1.data + (1 - a) * s2.data), params).data
    expected = a * heads.forecast_head(s1, params).data + (1 - a) * heads.forecast_head(s2, params).data
    np.testing.assert_allclose(mixed, expected, atol=1e-12)


def test_forecast_head_gradients():
    _, params = _head("long_forecast", H=3)
    features = _features()
    target = _features(3, shape=(4, 3)).data
    report = nx.grad_check(lambda p: loss_fn(heads.forecast_head(features, p), target), params)
    assert report.max_rel_error < 1e-6


def test_classification_head_cross_entropy_gradients():
    _, params = _head("classification", num_classes=3)
    features = _features(shape=(2, 12, 4, 8))
    report = nx.grad_check(
        lambda p: loss_fn(heads.classification_head(features, p), np.array([0, 2]), kind="cross_entropy"), params)
    assert report.max_rel_error < 1e-6


def test_reconstruction_denormalizes_exactly():
    config, _ = _head("imputation")
    rng, _ = seeding.np_random(4)
    series = rng.normal(size=(4, 96)) * 5.0 - 2.0
    ps = in_patch_normalize(make_patches(series, config.P, config.S))
    mean, std = heads.per_step_stats(ps)
    normalized = (series - mean) / std
    np.testing.assert_allclose(heads.instance_denormalize(normalized, ps, reconstruction=True).data, series,
                               atol=1e-9)


def test_anomaly_scores():
    observed = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(heads.anomaly_scores(observed, observed), np.zeros(4))
    assert not heads.flag(heads.anomaly_scores(observed, observed), 1e-9).any()
    corrupted = observed.copy()
    corrupted[1, 2] += 5.0
    scores = heads.anomaly_scores(corrupted, observed)
    assert np.argmax(scores) == 2
    assert scores[2] == pytest.approx(25.0 / 3)
    with pytest.raises(ContractError):
        heads.anomaly_scores(observed, observed[:, :3])


def test_outlier_steps_flag_isolated_spikes_only():
    rng, _ = seeding.np_random(6)
    residual = rng.normal(scale=0.1, size=(2, 3, 64))
    assert heads.outlier_steps(residual, cutoff=6.0).sum() == 0
    residual[1, 2, 40] += 5.0
    flagged = heads.outlier_steps(residual, cutoff=6.0)
    assert flagged.sum() == 1 and flagged[1, 2, 40]
    assert not heads.outlier_steps(np.zeros((2, 8))).any()


def test_bridge_interpolates_flagged_steps():
    X = np.array([[0.0, 1.0, 50.0, 3.0, 4.0], [5.0, 5.0, 5.0, 5.0, -9.0]])
    flagged = np.zeros_like(X, dtype=bool)
    flagged[0, 2] = flagged[1, 4] = True
    np.testing.assert_array_equal(heads.bridge(X, flagged), [[0.0, 1.0, 2.0, 3.0, 4.0], [5.0] * 5])
    assert X[0, 2] == 50.0
    np.testing.assert_array_equal(heads.bridge(X, np.ones_like(flagged)), X)
    with pytest.raises(ContractError):
        heads.bridge(X, flagged[:, :3])


def test_threshold_is_interpolated_order_statistic():
    rng, _ = seeding.np_random(5)
    scores = rng.uniform(size=1000)
    ordered = np.sort(scores)
    expected = ordered[989] + 0.01 * (ordered[990] - ordered[989])
    assert heads.threshold(scores, 0.99) == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ContractError):
        heads.threshold(scores, 0.0)
