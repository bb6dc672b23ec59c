"""Gaussian MLP regressor with hand-written backprop and Adam.

The regressor has two independent towers over a shared (optionally
projected) input: a mean tower and a variance tower whose output passes
through softplus plus a small floor. Inputs and outputs are standardized with
constants fit on the training data and stored with the model, so callers
always work in raw units.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping

import numpy as np

EPS_VAR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


class TrainingError(RuntimeError):
    """Raised when optimization produces a non-finite loss."""


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def inverse_softplus(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    epochs: int = 50
    hidden: int | None = None
    """Hidden width; ``None`` means twice the input size."""
    n_hidden_layers: int = 2
    seed: int = 0
    cosine_schedule: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mse_warmup: float = 0.2
    """Fraction of epochs spent fitting the mean tower alone before NLL."""

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.mse_warmup < 1.0:
            raise ValueError("mse_warmup must lie in [0, 1)")

    def hidden_sizes(self, in_dim: int) -> tuple[int, ...]:
        width = self.hidden if self.hidden is not None else 2 * in_dim
        return (max(int(width), 1),) * self.n_hidden_layers

    def replace(self, **changes: Any) -> "TrainConfig":
        doc = asdict(self)
        doc.update(changes)
        return TrainConfig(**doc)


class GaussianRegressor:
    """Mean/variance MLP ``x -> (mean, variance)``.

    Args:
        in_dim: raw input arity.
        hidden_sizes: widths of the ReLU hidden layers of each tower; empty
            gives a linear model.
        projection: optional ``(n_prefix, width)``; the first ``n_prefix``
            inputs pass through a learned affine map to ``width`` features
            before the towers, the remaining inputs pass through unchanged.
        seed: initialization seed.
    """

    def __init__(
        self,
        in_dim: int,
        hidden_sizes: tuple[int, ...] = (),
        projection: tuple[int, int] | None = None,
        seed: int = 0,
        eps_var: float = EPS_VAR,
    ) -> None:
        if projection is not None and not 0 < projection[0] <= in_dim:
            raise ValueError("projection prefix must lie within the input")
        self.in_dim = int(in_dim)
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        self.projection = None if projection is None else (int(projection[0]), int(projection[1]))
        self.eps_var = float(eps_var)
        self.seed = int(seed)
        self.in_shift = np.zeros(self.in_dim)
        self.in_scale = np.ones(self.in_dim)
        self.out_shift = 0.0
        self.out_scale = 1.0
        self.params: dict[str, np.ndarray] = {}
        self.history: list[float] = []
        self._init_params(np.random.default_rng(self.seed))

    # -- construction -----------------------------------------------------

    @property
    def tower_in(self) -> int:
        if self.projection is None:
            return self.in_dim
        p, w = self.projection
        return self.in_dim - p + w

    def _layer_shapes(self) -> list[tuple[int, int]]:
        sizes = (self.tower_in, *self.hidden_sizes, 1)
        return list(zip(sizes[:-1], sizes[1:]))

    def _init_params(self, rng: np.random.Generator) -> None:
        def uniform(fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        if self.projection is not None:
            p, w = self.projection
            self.params["proj_W"] = uniform(p, (p, w))
            self.params["proj_b"] = uniform(p, (w,))
        for tower in ("mean", "var"):
            for i, (a, b) in enumerate(self._layer_shapes()):
                self.params[f"{tower}_W{i}"] = uniform(a, (a, b))
                self.params[f"{tower}_b{i}"] = uniform(a, (b,))

    @property
    def n_layers(self) -> int:
        return len(self.hidden_sizes) + 1

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def fit_normalization(self, X: np.ndarray, y: np.ndarray | None = None) -> None:
        X = np.asarray(X, dtype=float)
        self.in_shift = X.mean(axis=0)
        sd = X.std(axis=0)
        self.in_scale = np.where(sd > 1e-12, sd, 1.0)
        if y is not None:
            y = np.asarray(y, dtype=float)
            self.out_shift = float(y.mean())
            sd_y = float(y.std())
            self.out_scale = sd_y if sd_y > 1e-12 else 1.0

    # -- forward / backward -----------------------------------------------

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.in_dim:
            raise ValueError(f"input arity {X.shape[1]} does not match model arity {self.in_dim}")
        return X

    def _tower(self, name: str, Z: np.ndarray, keep: bool) -> tuple[np.ndarray, list]:
        acts = [Z]
        h = Z
        last = self.n_layers - 1
        for i in range(self.n_layers):
            a = h @ self.params[f"{name}_W{i}"] + self.params[f"{name}_b{i}"]
            h = np.maximum(a, 0.0) if i < last else a
            if keep and i < last:
                acts.append(h)
        return h[:, 0], acts

    def forward(self, X: np.ndarray, need_var: bool = True) -> dict[str, Any]:
        """Run both towers on raw inputs, keeping activations for backward."""
        X = self._check(X)
        Xn = (X - self.in_shift) / self.in_scale
        if self.projection is not None:
            p, _ = self.projection
            Z = np.concatenate([Xn[:, :p] @ self.params["proj_W"] + self.params["proj_b"], Xn[:, p:]], axis=1)
        else:
            Z = Xn
        m_raw, m_acts = self._tower("mean", Z, keep=True)
        cache: dict[str, Any] = {
            "Xn": Xn,
            "mean_acts": m_acts,
            "mean": self.out_shift + self.out_scale * m_raw,
        }
        if need_var:
            v_raw, v_acts = self._tower("var", Z, keep=True)
            cache["var_acts"] = v_acts
            cache["v_raw"] = v_raw
            cache["var"] = self.out_scale**2 * softplus(v_raw) + self.eps_var
        return cache

    def _tower_backward(self, name: str, acts: list, dout: np.ndarray, grads: dict) -> np.ndarray:
        d = dout[:, None]
        for i in reversed(range(self.n_layers)):
            h = acts[i]
            grads[f"{name}_W{i}"] = grads.get(f"{name}_W{i}", 0.0) + h.T @ d
            grads[f"{name}_b{i}"] = grads.get(f"{name}_b{i}", 0.0) + d.sum(axis=0)
            d = d @ self.params[f"{name}_W{i}"].T
            if i > 0:
                d = d * (acts[i] > 0.0)
        return d

    def backward(
        self,
        cache: Mapping[str, Any],
        dmean: np.ndarray | None,
        dvar: np.ndarray | None = None,
        need_input_grad: bool = False,
    ) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
        """Gradients of a loss given its derivatives w.r.t. the raw outputs.

        Returns parameter gradients (zeros for untouched parameters) and,
        when requested, the gradient w.r.t. the raw inputs.
        """
        grads: dict[str, Any] = {}
        dZ = 0.0
        if dmean is not None:
            dZ = dZ + self._tower_backward("mean", cache["mean_acts"], np.asarray(dmean) * self.out_scale, grads)
        if dvar is not None:
            dv_raw = np.asarray(dvar) * self.out_scale**2 * sigmoid(cache["v_raw"])
            dZ = dZ + self._tower_backward("var", cache["var_acts"], dv_raw, grads)
        out = {k: np.asarray(grads.get(k, np.zeros_like(v)), dtype=float) for k, v in self.params.items()}
        if self.projection is not None:
            p, w = self.projection
            if np.ndim(dZ):
                dproj = dZ[:, :w]
                out["proj_W"] = cache["Xn"][:, :p].T @ dproj
                out["proj_b"] = dproj.sum(axis=0)
        dX = None
        if need_input_grad:
            if not np.ndim(dZ):
                dX = np.zeros_like(cache["Xn"])
            else:
                if self.projection is not None:
                    p, w = self.projection
                    dXn = np.concatenate([dZ[:, :w] @ self.params["proj_W"].T, dZ[:, w:]], axis=1)
                else:
                    dXn = dZ
                dX = dXn / self.in_scale
        return out, dX

    # -- prediction --------------------------------------------------------

    def predict(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        cache = self.forward(X)
        return cache["mean"], cache["var"]

    def predict_mean(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X, need_var=False)["mean"]

    # -- serialization -----------------------------------------------------

    def to_json(self) -> dict[str, Any]:
        return {
            "in_dim": self.in_dim,
            "hidden_sizes": list(self.hidden_sizes),
            "projection": None if self.projection is None else list(self.projection),
            "eps_var": self.eps_var,
            "seed": self.seed,
            "in_shift": self.in_shift.tolist(),
            "in_scale": self.in_scale.tolist(),
            "out_shift": self.out_shift,
            "out_scale": self.out_scale,
            "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in sorted(self.params.items())},
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "GaussianRegressor":
        model = cls(
            doc["in_dim"],
            tuple(doc["hidden_sizes"]),
            None if doc["projection"] is None else tuple(doc["projection"]),
            seed=doc["seed"],
            eps_var=doc["eps_var"],
        )
        model.in_shift = np.array(doc["in_shift"], dtype=float)
        model.in_scale = np.array(doc["in_scale"], dtype=float)
        model.out_shift = float(doc["out_shift"])
        model.out_scale = float(doc["out_scale"])
        model.params = {
            k: np.array(v["values"], dtype=float).reshape(v["shape"]) for k, v in doc["params"].items()
        }
        return model

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))


def predict_gaussian(model: GaussianRegressor, x: np.ndarray) -> tuple[float, float]:
    """Mean and variance for a single input vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predict_gaussian takes one input vector")
    mean, var = model.predict(x)
    return float(mean[0]), float(var[0])


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def nll_loss(mean: Any, variance: Any, target: Any) -> Any:
    """Gaussian negative log-likelihood; arrays give the batch mean."""
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    target = np.asarray(target, dtype=float)
    if np.any(variance <= 0):
        raise ValueError("variance must be positive")
    per = 0.5 * (LOG_2PI + np.log(variance)) + (target - mean) ** 2 / (2.0 * variance)
    return float(per) if per.ndim == 0 else float(per.mean())


def _loss_and_output_grads(cache, y: np.ndarray, loss: str):
    n = y.shape[0]
    resid = cache["mean"] - y
    if loss == "mse":
        return float(np.mean(resid**2)), 2.0 * resid / n, None
    if loss == "nll":
        var = cache["var"]
        value = float(np.mean(0.5 * (LOG_2PI + np.log(var)) + resid**2 / (2.0 * var)))
        dmean = resid / var / n
        dvar = (0.5 / var - resid**2 / (2.0 * var**2)) / n
        return value, dmean, dvar
    raise ValueError(f"unknown loss {loss!r}")


def batch_loss(model: GaussianRegressor, X: np.ndarray, y: np.ndarray, loss: str = "nll") -> float:
    cache = model.forward(X, need_var=(loss == "nll"))
    return _loss_and_output_grads(cache, np.asarray(y, dtype=float), loss)[0]


def backprop_gradients(
    model: GaussianRegressor, X: np.ndarray, y: np.ndarray, loss: str = "nll"
) -> dict[str, np.ndarray]:
    """Analytic gradient of the batch-mean loss for every parameter."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    cache = model.forward(X, need_var=(loss == "nll"))
    _, dmean, dvar = _loss_and_output_grads(cache, y, loss)
    grads, _ = model.backward(cache, dmean, dvar)
    return grads


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    if not config.cosine_schedule:
        return config.learning_rate
    return 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * epoch / config.epochs))


def train_regressor(
    X: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    loss: str = "nll",
    projection: tuple[int, int] | None = None,
    model: GaussianRegressor | None = None,
) -> GaussianRegressor:
    """Fit a :class:`GaussianRegressor` by minibatch Adam.

    With ``loss="nll"`` the first ``config.mse_warmup`` fraction of epochs
    fits the mean tower by MSE, then both towers minimize the Gaussian NLL.
    ``loss="mse"`` trains the mean tower only. Fully determined by
    ``config.seed``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training set must be a non-empty 2-D array")
    if X.shape[0] != y.shape[0]:
        raise ValueError("inputs and targets differ in length")
    if model is None:
        model = GaussianRegressor(X.shape[1], config.hidden_sizes(X.shape[1]), projection, seed=config.seed)
        model.fit_normalization(X, y)
        if loss == "nll":
            model.params[f"var_b{model.n_layers - 1}"][:] = inverse_softplus(1.0)
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng([config.seed, 1])
    n = X.shape[0]
    warm = int(round(config.mse_warmup * config.epochs)) if loss == "nll" else 0
    for epoch in range(config.epochs):
        lr = learning_rate_at(config, epoch)
        phase = "mse" if epoch < warm or loss == "mse" else "nll"
        if epoch == warm and phase == "nll" and warm > 0:
            # moment estimates from the MSE phase are on a different gradient scale
            opt = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            cache = model.forward(X[idx], need_var=(phase == "nll"))
            value, dmean, dvar = _loss_and_output_grads(cache, y[idx], phase)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite {phase} loss at epoch {epoch}")
            grads, _ = model.backward(cache, dmean, dvar)
            if phase == "mse":
                grads = {k: g for k, g in grads.items() if not k.startswith("var_")}
            opt.step(model.params, grads, lr)
            total += value * idx.shape[0]
        model.history.append(total / n)
    return model
