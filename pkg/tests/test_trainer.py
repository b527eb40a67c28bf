import math

import numpy as np
import pytest

from lmdp.clipping import clip_batch
from lmdp.data import generate_synthetic
from lmdp.errors import ConfigError, DivergenceError
from lmdp.nn import LayeredModel, LayerSpec, mlp, per_example_gradient, per_example_gradients
from lmdp.trainer import (
    TrainConfig,
    baseline_step,
    lm_dpsgd_step,
    poisson_sample,
    select_weights,
    train,
)


def _data(n=200, seed=0):
    return generate_synthetic("blobs", n, 4, 3, seed, center_scale=3.0)


def test_poisson_sampling_extremes():
    rng = np.random.default_rng(0)
    assert poisson_sample(50, 1.0, rng).tolist() == list(range(50))
    assert poisson_sample(50, 1e-12, rng).size == 0
    with pytest.raises(ConfigError):
        poisson_sample(50, 0.0, rng)


def test_poisson_sampling_mean_size():
    rng = np.random.default_rng(1)
    sizes = [poisson_sample(10_000, 0.01, rng).size for _ in range(1000)]
    assert 90 <= np.mean(sizes) <= 110


def test_single_layer_reduces_to_standard_dpsgd():
    data = _data(30)
    model = mlp([4, 3], np.random.default_rng(2))
    C, lr = 0.5, 0.3
    cfg = TrainConfig(method="lm-dp-sgd", C=C, lr=lr, r=3.0)
    got, _ = lm_dpsgd_step(model, data.X, data.y, cfg, [0.4], 0.0, np.random.default_rng(0))
    # plain per-example clipping, written out independently
    acc = np.zeros(model.num_params)
    for x, y in zip(data.X, data.y):
        g = per_example_gradient(model, x, y).flat()
        acc += g * min(1.0, C / np.linalg.norm(g))
    want = model.flat() - lr * acc / len(data)
    assert np.max(np.abs(got.flat() - want)) <= 1e-15


def test_identical_examples_have_no_bias_under_equal_risk():
    x = np.tile(np.array([[0.4, -1.0, 0.3, 2.0]]), (8, 1))
    y = np.zeros(8, dtype=int)
    model = mlp([4, 6, 5, 3], np.random.default_rng(3))
    cfg = TrainConfig(C=1e3, r=4.0)
    _, log = lm_dpsgd_step(model, x, y, cfg, [0.3, 0.3, 0.3], 0.0, np.random.default_rng(0))
    assert log.bias_norm <= 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_lagrange_bias_not_above_heuristic(seed):
    data = _data(64, seed)
    model = mlp([4, 8, 8, 3], np.random.default_rng(seed))
    bias = {}
    for scheme in ("heuristic", "lagrange"):
        cfg = TrainConfig(weight_scheme=scheme, C=0.1, r=2.0)
        _, log = lm_dpsgd_step(model, data.X, data.y, cfg, [0.5, 0.4, 0.3], 0.0, np.random.default_rng(0))
        bias[scheme] = log.bias_norm
    assert bias["lagrange"] <= bias["heuristic"] + 1e-12


def test_zero_iterations_keep_model():
    model = mlp([4, 5, 3], np.random.default_rng(4))
    res = train(model, _data(), TrainConfig(T=0))
    assert res.model == model
    assert res.epsilon == 0.0 and res.logs == []


def test_training_is_bitwise_deterministic():
    data = _data()
    cfg = TrainConfig(T=20, q=0.1, seed=9, r=2.0)
    a = train(mlp([4, 5, 3], np.random.default_rng(5)), data, cfg, [0.4, 0.3])
    b = train(mlp([4, 5, 3], np.random.default_rng(5)), data, cfg, [0.4, 0.3])
    assert a.model.flat().tobytes() == b.model.flat().tobytes()
    assert a.sigma == b.sigma and a.epsilon == b.epsilon


def test_batches_do_not_depend_on_noise_level():
    data = _data()
    model = mlp([4, 5, 3], np.random.default_rng(6))
    cfg = TrainConfig(method="dp-sgd", T=15, q=0.1, seed=2)
    a = train(model, data, cfg, sigma=0.5)
    b = train(model, data, cfg, sigma=2.0)
    assert [l.batch_size for l in a.logs] == [l.batch_size for l in b.logs]


def test_huge_threshold_gives_plain_sgd_step():
    data = _data(20)
    model = mlp([4, 5, 3], np.random.default_rng(7))
    cfg = TrainConfig(method="dp-sgd", C=1e300, lr=0.2)
    got, _ = baseline_step(model, data.X, data.y, cfg, 0.0, np.random.default_rng(0))
    plain, _ = baseline_step(model, data.X, data.y, TrainConfig(method="non-private", lr=0.2), 0.0, None)
    np.testing.assert_allclose(got.flat(), plain.flat(), rtol=0, atol=1e-15)


def test_standard_clipping_inactive_has_no_bias():
    data = _data(20)
    model = mlp([4, 5, 3], np.random.default_rng(8))
    norms = per_example_gradients(model, data.X, data.y).global_norms
    cfg = TrainConfig(method="dp-sgd", C=float(norms.max()) * 1.01)
    _, log = baseline_step(model, data.X, data.y, cfg, 0.0, np.random.default_rng(0))
    assert log.bias_norm <= 1e-12


@pytest.mark.parametrize("method", ["lm-dp-sgd", "dp-sgd", "auto-s", "psac"])
def test_neighbouring_batches_within_sensitivity(method):
    rng = np.random.default_rng(11)
    model = mlp([4, 6, 3], rng)
    cfg = TrainConfig(method=method, C=0.7, weight_scheme="fixed", fixed_weights=[0.6, 0.8])
    clip_method = cfg.clip_method
    for _ in range(100):
        X = rng.normal(size=(10, 4)) * rng.uniform(0.1, 10)
        y = rng.integers(0, 3, size=10)
        grads = per_example_gradients(model, X, y)
        full = np.concatenate(clip_batch(grads, clip_method, cfg.fixed_weights).summed())
        drop = int(rng.integers(0, 10))
        keep = [i for i in range(10) if i != drop]
        part = np.concatenate(clip_batch(per_example_gradients(model, X[keep], y[keep]), clip_method,
                                         cfg.fixed_weights).summed())
        assert np.linalg.norm(full - part) <= clip_method.sensitivity * (1 + 1e-12)


def test_noise_scale_on_a_zero_gradient_model():
    # identity layer whose output already equals the target: every gradient is zero
    model = LayeredModel([LayerSpec(2, 2, "identity")], [np.zeros(6)])
    X, Y = np.ones((4, 2)), np.zeros((4, 2))
    C, sigma, lr = 0.8, 1.5, 1.0
    cfg = TrainConfig(method="dp-sgd", C=C, lr=lr, loss="mse")
    noise_rng = np.random.default_rng(12)
    updates = []
    for _ in range(10_000):
        new, _ = baseline_step(model, X, Y, cfg, sigma, noise_rng)
        updates.append((model.flat() - new.flat()) / lr)
    sd = np.std(np.concatenate(updates))
    want = C * sigma / 4
    assert abs(sd - want) / want <= 0.05


def test_empty_batches_count_for_privacy_only():
    data = _data(30)
    model = mlp([4, 5, 3], np.random.default_rng(13))
    res = train(model, data, TrainConfig(method="dp-sgd", T=40, q=0.02, seed=1), sigma=1.0)
    assert res.steps_accounted == 40
    assert res.steps_with_data < res.steps_accounted
    empty = [l for l in res.logs if l.batch_size == 0]
    assert empty and all(l.bias_norm == 0.0 for l in empty)

    tiny = train(model, data, TrainConfig(method="dp-sgd", T=5, q=1e-12), sigma=1.0)
    assert tiny.model == model and tiny.steps_with_data == 0


def test_divergence_reports_iteration():
    data = _data(50)
    data = type(data)(data.X * 1e6, data.y)
    with pytest.raises(DivergenceError) as exc:
        train(mlp([4, 5, 3], np.random.default_rng(14)), data,
              TrainConfig(method="non-private", T=50, q=1.0, lr=1e6))
    assert exc.value.index is not None and 0 <= exc.value.index < 50


def test_weight_selection_fallbacks():
    model = LayeredModel([LayerSpec(2, 2, "identity"), LayerSpec(2, 2, "identity")],
                         [np.concatenate([np.eye(2).ravel(), np.zeros(2)])] * 2)
    X = np.ones((3, 2))
    grads = per_example_gradients(model, X, X, "mse")  # all zero
    for scheme in ("heuristic", "lagrange"):
        w = select_weights(grads, TrainConfig(weight_scheme=scheme, loss="mse"))
        np.testing.assert_allclose(w, [2**-0.5, 2**-0.5])
    with pytest.raises(ConfigError):
        select_weights(grads, TrainConfig(), [0.5, 0.5, 0.5])


def test_sqrt_schedule_and_config_checks():
    assert TrainConfig(lr=1.0, T=100, lr_schedule="sqrt").step_size() == 0.1
    assert TrainConfig(lr=1.0, T=100).step_size() == 1.0
    for bad in ({"method": "adam"}, {"weight_scheme": "fixed"}, {"r": 0.5}, {"lr": 0.0}, {"T": -1}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_non_private_run_has_infinite_epsilon():
    res = train(mlp([4, 5, 3], np.random.default_rng(15)), _data(), TrainConfig(method="non-private", T=5))
    assert math.isinf(res.epsilon) and res.sigma == 0.0


def test_private_run_meets_budget_and_learns():
    data, test = _data(600, 1).split(400)
    res = train(mlp([4, 16, 3], np.random.default_rng(16)), data,
                TrainConfig(epsilon=4.0, q=0.05, T=200, lr=0.5, r=2.0, seed=3), [0.5, 0.45], test=test)
    assert res.epsilon <= 4.0
    assert res.logs[-1].test_acc is not None and res.logs[-1].test_acc >= 0.8
