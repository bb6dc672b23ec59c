"""Independent reference computations used by the unit and acceptance tests."""

from __future__ import annotations

import math

import numpy as np

from compcate.learner import GaussianRegressor, backprop_gradients, batch_loss


def scalar_nll(mean: float, variance: float, target: float) -> float:
    """Gaussian negative log-likelihood written out term by term."""
    return 0.5 * math.log(2.0 * math.pi) + 0.5 * math.log(variance) + (target - mean) ** 2 / (2.0 * variance)


def finite_difference_gradients(model: GaussianRegressor, X, y, loss: str, h: float = 1e-4) -> dict[str, np.ndarray]:
    """Central differences of the batch loss for every parameter entry."""
    out = {}
    for name, p in model.params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = batch_loss(model, X, y, loss)
            flat[i] = old - h
            down = batch_loss(model, X, y, loss)
            flat[i] = old
            gf[i] = (up - down) / (2.0 * h)
        out[name] = g
    return out


def min_relu_margin(model: GaussianRegressor, X: np.ndarray) -> float:
    """Smallest |pre-activation| over all hidden ReLUs of both towers."""
    cache = model.forward(X)
    margin = math.inf
    for tower in ("mean", "var"):
        h = cache[f"{tower}_acts"][0]
        for i in range(model.n_layers - 1):
            pre = h @ model.params[f"{tower}_W{i}"] + model.params[f"{tower}_b{i}"]
            margin = min(margin, float(np.abs(pre).min()))
            h = np.maximum(pre, 0.0)
    return margin


def gradient_case(seed: int, kink_margin: float = 1e-3) -> tuple[GaussianRegressor, np.ndarray, np.ndarray, str]:
    """A random model (depth, widths, projection, normalization) and batch.

    Central differences are only meaningful where the loss is smooth within
    the step, so draws with a ReLU pre-activation closer than ``kink_margin``
    to zero are redrawn.
    """
    for attempt in range(100):
        case = _draw_case(seed, attempt)
        if min_relu_margin(case[0], case[1]) >= kink_margin:
            return case
    raise RuntimeError(f"no kink-free draw for seed {seed}")


def _draw_case(seed: int, attempt: int) -> tuple[GaussianRegressor, np.ndarray, np.ndarray, str]:
    rng = np.random.default_rng([seed, 2024, attempt])
    in_dim = int(rng.integers(1, 6))
    hidden = tuple(int(w) for w in rng.integers(1, 7, size=int(rng.integers(0, 3))))
    projection = None
    if in_dim > 1 and rng.random() < 0.4:
        projection = (int(rng.integers(1, in_dim + 1)), int(rng.integers(1, 4)))
    model = GaussianRegressor(in_dim, hidden, projection, seed=int(rng.integers(2**31)))
    n = int(rng.integers(1, 9))
    X = rng.normal(size=(n, in_dim)) * rng.uniform(0.5, 3.0)
    y = rng.normal(size=n) * 2.0 + 1.0
    model.fit_normalization(rng.normal(size=(16, in_dim)) * 2.0, rng.normal(size=16) * 3.0 - 1.0)
    loss = "nll" if rng.random() < 0.5 else "mse"
    return model, X, y, loss


def gradient_relative_error(seed: int, h: float = 1e-4) -> float:
    """Max-norm relative error between backprop and central differences."""
    model, X, y, loss = gradient_case(seed)
    analytic = backprop_gradients(model, X, y, loss)
    numeric = finite_difference_gradients(model, X, y, loss, h)
    a = np.concatenate([analytic[k].ravel() for k in sorted(model.params)])
    b = np.concatenate([numeric[k].ravel() for k in sorted(model.params)])
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def r2(estimates, truths) -> float:
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    return float(1.0 - np.sum((est - tru) ** 2) / np.sum((tru - tru.mean()) ** 2))
