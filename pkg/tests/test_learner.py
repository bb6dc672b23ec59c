import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from compcate.learner import (
    EPS_VAR,
    GaussianRegressor,
    TrainConfig,
    TrainingError,
    backprop_gradients,
    inverse_softplus,
    nll_loss,
    predict_gaussian,
    softplus,
    train_regressor,
)
from oracles import gradient_relative_error, r2, scalar_nll

finite = st.floats(-50, 50, allow_nan=False)


def zero_model(in_dim: int, hidden=(3,), mean_bias=0.0, var_bias=0.0) -> GaussianRegressor:
    model = GaussianRegressor(in_dim, hidden)
    for v in model.params.values():
        v[:] = 0.0
    model.params[f"mean_b{model.n_layers - 1}"][:] = mean_bias
    model.params[f"var_b{model.n_layers - 1}"][:] = var_bias
    return model


# -- prediction ------------------------------------------------------------


@pytest.mark.parametrize("b", [-2.5, 0.0, 7.0])
def test_zero_network_mean_is_bias(b):
    mean, _ = predict_gaussian(zero_model(3, mean_bias=b), np.array([1.0, -4.0, 9.0]))
    assert mean == b


def test_zero_network_variance_is_softplus_zero_plus_floor():
    _, var = predict_gaussian(zero_model(2), np.zeros(2))
    assert var == pytest.approx(math.log(2.0) + EPS_VAR, abs=1e-15)


def test_prediction_is_deterministic_and_checks_arity():
    model = GaussianRegressor(4, (5, 5), seed=3)
    x = np.arange(4.0)
    assert predict_gaussian(model, x) == predict_gaussian(model, x)
    with pytest.raises(ValueError, match="arity"):
        predict_gaussian(model, np.zeros(3))


@given(st.floats(-40, 40))
def test_variance_is_positive(v):
    model = zero_model(1, hidden=(), var_bias=v)
    assert predict_gaussian(model, np.zeros(1))[1] >= EPS_VAR


@given(st.floats(1e-4, 30))
def test_inverse_softplus(y):
    assert float(softplus(np.array(inverse_softplus(y)))) == pytest.approx(y, rel=1e-9)


# -- loss ------------------------------------------------------------------


def test_nll_vanishes_at_reference_variance():
    assert nll_loss(1.7, 1.0 / (2.0 * math.pi), 1.7) == pytest.approx(0.0, abs=1e-9)


def test_nll_unit_gaussian_value():
    assert nll_loss(0.0, 1.0, 1.0) == pytest.approx(0.5 * math.log(2 * math.pi) + 0.5, abs=1e-9)


@given(finite, st.floats(1e-3, 1e3), finite)
def test_nll_matches_scalar_oracle(mean, variance, target):
    assert nll_loss(mean, variance, target) == pytest.approx(scalar_nll(mean, variance, target), rel=1e-12, abs=1e-9)


@given(finite, st.floats(1e-3, 1e3), st.floats(-30, 30).filter(lambda r: abs(r) > 1e-3))
def test_doubling_squared_residual(mean, variance, resid):
    base = nll_loss(mean, variance, mean + resid)
    doubled = nll_loss(mean, variance, mean + math.sqrt(2.0) * resid)
    assert doubled - base == pytest.approx(resid**2 / (2 * variance), rel=1e-8, abs=1e-9)


def test_nll_batch_mean():
    m, v, t = np.array([0.0, 1.0]), np.array([1.0, 2.0]), np.array([1.0, -1.0])
    expected = np.mean([scalar_nll(0.0, 1.0, 1.0), scalar_nll(1.0, 2.0, -1.0)])
    assert nll_loss(m, v, t) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("variance", [0.0, -1.0])
def test_nll_rejects_non_positive_variance(variance):
    with pytest.raises(ValueError):
        nll_loss(0.0, variance, 0.0)


# -- gradients -------------------------------------------------------------


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-5, 5), st.floats(-5, 5))
def test_linear_mse_hand_gradient(w, b, x, y):
    model = GaussianRegressor(1, ())
    model.params["mean_W0"][:] = w
    model.params["mean_b0"][:] = b
    g = backprop_gradients(model, np.array([[x]]), np.array([y]), "mse")
    assert g["mean_W0"][0, 0] == pytest.approx(2 * (w * x + b - y) * x, rel=1e-12, abs=1e-12)
    assert g["mean_b0"][0] == pytest.approx(2 * (w * x + b - y), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_central_differences(seed):
    assert gradient_relative_error(seed) < 1e-4


def test_zero_residual_mse_gradients_vanish():
    model = GaussianRegressor(3, (4,), seed=1)
    X = np.random.default_rng(0).normal(size=(6, 3))
    g = backprop_gradients(model, X, model.predict_mean(X), "mse")
    for k, v in g.items():
        assert np.all(v == 0.0), k


def test_gradients_cover_every_parameter():
    model = GaussianRegressor(3, (4,), projection=(2, 2), seed=1)
    g = backprop_gradients(model, np.ones((2, 3)), np.zeros(2), "nll")
    assert set(g) == set(model.params)
    assert all(g[k].shape == v.shape for k, v in model.params.items())


def test_empty_batch_is_rejected():
    with pytest.raises(ValueError):
        backprop_gradients(GaussianRegressor(2), np.zeros((0, 2)), np.zeros(0))


# -- training --------------------------------------------------------------


def test_constant_target_is_learned():
    X = np.random.default_rng(0).normal(size=(200, 3))
    model = train_regressor(X, np.full(200, 4.2), TrainConfig(epochs=200), "mse")
    assert np.abs(model.predict_mean(X) - 4.2).max() < 1e-2


def test_linear_target_is_realizable():
    x = np.linspace(-2, 2, 256)[:, None]
    y = 3 * x[:, 0] + 1
    model = train_regressor(x, y, TrainConfig(epochs=200, n_hidden_layers=0, learning_rate=0.05), "mse")
    assert r2(model.predict_mean(x), y) >= 0.999


def test_nll_training_recovers_noise_scale():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, size=(3000, 1))
    y = 2 * x[:, 0] + rng.normal(scale=0.5, size=3000)
    # the default width rule gives only two units for a scalar input
    model = train_regressor(x, y, TrainConfig(epochs=40, hidden=16), "nll")
    mean, var = model.predict(x)
    assert r2(mean, 2 * x[:, 0]) > 0.98
    assert np.median(var) == pytest.approx(0.25, rel=0.2)
    nll_epochs = model.history[8:]  # after the 20% MSE warmup
    assert np.mean(nll_epochs[-5:]) < np.mean(nll_epochs[:5])


def test_training_is_bit_deterministic():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(100, 4)), rng.normal(size=100)
    cfg = TrainConfig(epochs=5, seed=11)
    a, b = train_regressor(X, y, cfg), train_regressor(X, y, cfg)
    assert a.dumps() == b.dumps()
    c = train_regressor(X, y, cfg.replace(seed=12))
    assert c.dumps() != a.dumps()


def test_non_finite_loss_aborts():
    X = np.ones((4, 1))
    with pytest.raises(TrainingError, match="non-finite"):
        train_regressor(X, np.array([1.0, np.nan, 2.0, 3.0]), TrainConfig(epochs=2), "mse")


@pytest.mark.parametrize(
    "X, y",
    [(np.zeros((0, 2)), np.zeros(0)), (np.zeros((3, 2)), np.zeros(4)), (np.zeros(3), np.zeros(3))],
)
def test_bad_training_sets(X, y):
    with pytest.raises(ValueError):
        train_regressor(X, y, TrainConfig(epochs=1))


@pytest.mark.parametrize("field, value", [("learning_rate", 0.0), ("epochs", 0), ("batch_size", 0), ("mse_warmup", 1.0)])
def test_config_validation(field, value):
    with pytest.raises(ValueError):
        TrainConfig(**{field: value})


def test_default_hidden_width_is_twice_input():
    assert TrainConfig().hidden_sizes(5) == (10, 10)
    assert TrainConfig(hidden=7, n_hidden_layers=3).hidden_sizes(5) == (7, 7, 7)


def test_json_roundtrip_preserves_predictions():
    rng = np.random.default_rng(3)
    X, y = rng.normal(size=(50, 5)), rng.normal(size=50)
    model = train_regressor(X, y, TrainConfig(epochs=3), projection=(3, 2))
    again = GaussianRegressor.from_json(model.to_json())
    m1, v1 = model.predict(X)
    m2, v2 = again.predict(X)
    np.testing.assert_array_equal(m1, m2)
    np.testing.assert_array_equal(v1, v2)
