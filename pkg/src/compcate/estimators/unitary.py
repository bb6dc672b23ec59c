"""Unitary baselines on the flattened unit representation: S-, T-, X-learner."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from ..core import StructuredUnit, UnitarySchema, UnitDataset, flatten_many
from ..learner import GaussianRegressor, TrainConfig, sigmoid, train_regressor
from .compositional import CateEstimate

__all__ = [
    "LogisticModel",
    "UnitaryModel",
    "fit_logistic",
    "fit_unitary",
    "fit_xlearner",
    "infer_cate_unitary",
    "predict_cate_unitary",
]

VARIANTS = ("s", "t", "x")


@dataclass
class LogisticModel:
    """Standardized-feature logistic regression with a small ridge penalty."""

    coef: np.ndarray
    intercept: float
    shift: np.ndarray
    scale: np.ndarray

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        Xs = (np.asarray(X, dtype=float) - self.shift) / self.scale
        return sigmoid(Xs @ self.coef + self.intercept)

    def to_json(self) -> dict[str, Any]:
        return {
            "coef": self.coef.tolist(),
            "intercept": self.intercept,
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "LogisticModel":
        return cls(np.array(doc["coef"]), float(doc["intercept"]), np.array(doc["shift"]), np.array(doc["scale"]))


def fit_logistic(X: np.ndarray, t: np.ndarray, ridge: float = 1e-3, max_iter: int = 100) -> LogisticModel:
    """Newton-Raphson (IRLS) fit of ``P(t=1 | x)``."""
    X = np.asarray(X, dtype=float)
    t = np.asarray(t, dtype=float)
    if t.min() == t.max():
        raise ValueError("propensity model needs both treatment arms")
    shift = X.mean(axis=0)
    sd = X.std(axis=0)
    scale = np.where(sd > 1e-12, sd, 1.0)
    A = np.column_stack([np.ones(X.shape[0]), (X - shift) / scale])
    w = np.zeros(A.shape[1])
    w[0] = np.log(t.mean() / (1.0 - t.mean()))
    penalty = ridge * X.shape[0] * np.eye(A.shape[1])
    penalty[0, 0] = 0.0
    for _ in range(max_iter):
        p = sigmoid(A @ w)
        grad = A.T @ (p - t) + penalty @ w
        H = (A * (p * (1 - p))[:, None]).T @ A + penalty
        step = np.linalg.solve(H + 1e-10 * np.eye(A.shape[1]), grad)
        w -= step
        if np.max(np.abs(step)) < 1e-10:
            break
    return LogisticModel(w[1:], float(w[0]), shift, scale)


@dataclass
class UnitaryModel:
    variant: str
    schema: UnitarySchema
    models: dict[str, GaussianRegressor]
    propensity: LogisticModel | None = None
    propensity_override: float | None = field(default=None)

    def features(self, units: Sequence[StructuredUnit]) -> np.ndarray:
        return flatten_many(list(units), self.schema)


def _factual(dataset: UnitDataset) -> tuple[list[StructuredUnit], np.ndarray, np.ndarray]:
    units = list(dataset.units)
    if not units:
        raise ValueError("cannot fit on an empty dataset")
    for u in units:
        if not u.is_factual:
            raise ValueError(f"unit {u.unit_id} is not factual")
    t = np.array([u.treatment for u in units], dtype=int)
    y = np.array([u.unit_outcome.y for u in units], dtype=float)
    return units, t, y


def fit_unitary(
    dataset: UnitDataset,
    variant: str = "s",
    schema: UnitarySchema | None = None,
    config: TrainConfig | None = None,
) -> UnitaryModel:
    """S-learner (treatment as a feature) or T-learner (one model per arm)."""
    variant = variant.lower()
    if variant == "x":
        return fit_xlearner(dataset, schema, config)
    if variant not in ("s", "t"):
        raise ValueError(f"unknown unitary variant {variant!r}")
    config = config or TrainConfig()
    schema = schema or UnitarySchema.from_dataset(dataset)
    units, t, y = _factual(dataset)
    X = flatten_many(units, schema)
    if variant == "s":
        Xt = np.column_stack([X, t])
        return UnitaryModel("s", schema, {"mu": train_regressor(Xt, y, config, "mse")})
    models = {}
    for arm in (0, 1):
        sel = t == arm
        if not sel.any():
            raise ValueError(f"T-learner needs samples in arm {arm}")
        models[f"mu{arm}"] = train_regressor(X[sel], y[sel], config.replace(seed=config.seed + arm), "mse")
    return UnitaryModel("t", schema, models)


def fit_xlearner(
    dataset: UnitDataset,
    schema: UnitarySchema | None = None,
    config: TrainConfig | None = None,
) -> UnitaryModel:
    """X-learner: arm outcome models, imputed-effect models, propensity blend."""
    config = config or TrainConfig()
    schema = schema or UnitarySchema.from_dataset(dataset)
    units, t, y = _factual(dataset)
    if t.min() == t.max():
        raise ValueError("X-learner needs both treatment arms")
    X = flatten_many(units, schema)
    treated, control = t == 1, t == 0
    mu0 = train_regressor(X[control], y[control], config.replace(seed=config.seed + 0), "mse")
    mu1 = train_regressor(X[treated], y[treated], config.replace(seed=config.seed + 1), "mse")
    d1 = y[treated] - mu0.predict_mean(X[treated])
    d0 = mu1.predict_mean(X[control]) - y[control]
    tau1 = train_regressor(X[treated], d1, config.replace(seed=config.seed + 2), "mse")
    tau0 = train_regressor(X[control], d0, config.replace(seed=config.seed + 3), "mse")
    prop = fit_logistic(X, t)
    return UnitaryModel("x", schema, {"mu0": mu0, "mu1": mu1, "tau0": tau0, "tau1": tau1}, prop)


def predict_cate_unitary(model: UnitaryModel, units: Sequence[StructuredUnit]) -> list[CateEstimate]:
    units = list(units)
    if not units:
        return []
    X = model.features(units)
    n = X.shape[0]
    if model.variant == "s":
        m = model.models["mu"]
        y0 = m.predict_mean(np.column_stack([X, np.zeros(n)]))
        y1 = m.predict_mean(np.column_stack([X, np.ones(n)]))
        tau = y1 - y0
    elif model.variant == "t":
        y0 = model.models["mu0"].predict_mean(X)
        y1 = model.models["mu1"].predict_mean(X)
        tau = y1 - y0
    elif model.variant == "x":
        y0 = model.models["mu0"].predict_mean(X)
        y1 = model.models["mu1"].predict_mean(X)
        if model.propensity_override is not None:
            e = np.full(n, model.propensity_override)
        else:
            e = model.propensity.predict_proba(X)
        tau = e * model.models["tau0"].predict_mean(X) + (1.0 - e) * model.models["tau1"].predict_mean(X)
    else:
        raise ValueError(f"unknown unitary variant {model.variant!r}")
    return [CateEstimate(u.unit_id, float(tau[i]), float(y0[i]), float(y1[i])) for i, u in enumerate(units)]


def infer_cate_unitary(model: UnitaryModel, unit: StructuredUnit) -> CateEstimate:
    return predict_cate_unitary(model, [unit])[0]
