"""Compositional CATE estimators.

One Gaussian regressor per component class. With observed component outcomes
the class models train independently on pooled instances; without them the
class models are composed along each unit's tree (or summed, for parallel
units) and trained end-to-end on the unit outcome.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..core import (
    CompositionKind,
    StructuredUnit,
    UnitarySchema,
    UnitDataset,
    substream,
    unit_covariates,
)
from ..learner import (
    Adam,
    GaussianRegressor,
    TrainConfig,
    TrainingError,
    learning_rate_at,
    train_regressor,
)
from ._tables import NodeTable, build_table, component_inputs

__all__ = [
    "AccessCase",
    "CateEstimate",
    "CompositionalModel",
    "MissingClassError",
    "fit_compositional",
    "infer_cate_hierarchical",
    "infer_cate_parallel",
    "pooled_component_data",
    "predict_cate",
]

MC_CHUNK = 400_000


class MissingClassError(ValueError):
    """A unit uses a component class the model was never trained on."""


class AccessCase(str, enum.Enum):
    XY = "xy"
    Y_ONLY = "y_only"
    X_ONLY = "x_only"
    NEITHER = "neither"

    @property
    def observes_x(self) -> bool:
        return self in (AccessCase.XY, AccessCase.X_ONLY)

    @property
    def observes_y(self) -> bool:
        return self in (AccessCase.XY, AccessCase.Y_ONLY)


@dataclass(frozen=True)
class CateEstimate:
    unit_id: int
    tau: float
    y0: float
    y1: float
    se: float | None = None


@dataclass
class CompositionalModel:
    composition: CompositionKind
    case: AccessCase
    class_dims: dict[int, int]
    max_in_degree: int
    schema: UnitarySchema
    models: dict[int, GaussianRegressor]
    n_samples: int = 1000
    representation_dim: int = 4
    stochastic: bool = field(default=True)
    """Sample intermediate outcomes at inference; off for end-to-end models."""

    @property
    def uses_parents(self) -> bool:
        return self.composition.uses_parents

    def cov_dim(self, c: int) -> int:
        return self.class_dims[c] if self.case.observes_x else self.schema.covariate_length

    def input_dim(self, c: int) -> int:
        return self.cov_dim(c) + (2 * self.max_in_degree if self.uses_parents else 0) + 1

    def check_covers(self, units: Iterable[StructuredUnit]) -> None:
        missing = set()
        for u in units:
            missing |= u.class_set() - set(self.models)
        if missing:
            raise MissingClassError(f"no trained model for component classes {sorted(missing)}")

    def table(self, units: Sequence[StructuredUnit]) -> NodeTable:
        return build_table(units, self.max_in_degree, None if self.case.observes_x else self.schema)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def pooled_component_data(
    units: Sequence[StructuredUnit],
    case: AccessCase,
    composition: CompositionKind,
    max_in_degree: int,
    schema: UnitarySchema,
) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per class, all instances across units as ``(inputs, targets)``.

    Inputs are the (own or unit-level) covariates, the observed outcomes of
    the parents in ascending id order, slot masks, and the unit treatment.
    """
    rows: dict[int, list[np.ndarray]] = {}
    targets: dict[int, list[float]] = {}
    for u in units:
        if not u.is_factual or u.component_outcomes is None:
            raise ValueError(f"unit {u.unit_id} lacks factual component outcomes")
        t = u.treatment
        g = u.graph
        shared = None
        if not case.observes_x:
            shared = unit_covariates(u, schema)
        ys = u.component_outcomes
        for n, c in g.nodes:
            cov = shared if shared is not None else u.covariates[n]
            parts = [cov]
            if composition.uses_parents:
                ps = g.parents[n]
                pv = np.zeros(max_in_degree)
                mask = np.zeros(max_in_degree)
                for s, p in enumerate(ps):
                    pv[s] = ys[p].y
                    mask[s] = 1.0
                parts += [pv, mask]
            parts.append(np.array([float(t)]))
            rows.setdefault(c, []).append(np.concatenate(parts))
            targets.setdefault(c, []).append(ys[n].y)
    return {c: (np.stack(rows[c]), np.array(targets[c])) for c in sorted(rows)}


def _class_seed(seed: int, c: int) -> int:
    return int(substream(seed, "class-model", c).integers(2**31 - 1))


def _fit_independent(units, case, composition, config, D, schema, repr_dim):
    data = pooled_component_data(units, case, composition, D, schema)
    loss = "mse" if composition is CompositionKind.PARALLEL else "nll"
    models = {}
    for c, (X, y) in data.items():
        projection = None if case.observes_x else (schema.covariate_length, repr_dim)
        models[c] = train_regressor(X, y, config.replace(seed=_class_seed(config.seed, c)), loss, projection)
    return models


def _joint_forward(models, table: NodeTable, t_units: np.ndarray, uses_parents: bool, keep: bool):
    vals = np.zeros(table.n_nodes)
    caches = []
    for _, c, rows, pos in table.groups:
        cov = table.covariates[c][pos]
        pv = mask = None
        if uses_parents:
            pidx = table.parents[rows]
            present = pidx >= 0
            pv = np.where(present, vals[np.maximum(pidx, 0)], 0.0)
            mask = present.astype(float)
        X = component_inputs(cov, pv, mask, t_units[table.unit_index[rows]])
        cache = models[c].forward(X, need_var=False)
        vals[rows] = cache["mean"]
        if keep:
            caches.append(cache)
    return vals, caches


def _unit_predictions(vals: np.ndarray, table: NodeTable, composition: CompositionKind) -> np.ndarray:
    if composition is CompositionKind.PARALLEL:
        return np.bincount(table.unit_index, weights=vals, minlength=table.n_units)
    return vals[table.sink]


def _fit_joint(units, case, composition, config, D, schema, repr_dim):
    uses_parents = composition.uses_parents
    y_all = np.array([u.unit_outcome.y for u in units], dtype=float)
    t_all = np.array([u.treatment for u in units], dtype=float)
    full = build_table(units, D, None if case.observes_x else schema)
    y_mean = float(y_all.mean())
    y_sd = float(y_all.std()) or 1.0
    avg_m = full.n_nodes / max(full.n_units, 1)
    models: dict[int, GaussianRegressor] = {}
    for c in sorted(full.rows_of_class):
        cov = full.covariates[c]
        rows = full.rows_of_class[c]
        d_cov = cov.shape[1]
        in_dim = d_cov + (2 * D if uses_parents else 0) + 1
        projection = None if case.observes_x else (d_cov, repr_dim)
        m = GaussianRegressor(in_dim, config.hidden_sizes(in_dim), projection, seed=_class_seed(config.seed, c))
        shift = [cov.mean(axis=0)]
        scale = [cov.std(axis=0)]
        if uses_parents:
            present = (full.parents[rows] >= 0).astype(float)
            shift += [np.full(D, y_mean), present.mean(axis=0)]
            scale += [np.full(D, y_sd), present.std(axis=0)]
        tc = t_all[full.unit_index[rows]]
        shift.append(np.array([tc.mean()]))
        scale.append(np.array([tc.std()]))
        m.in_shift = np.concatenate(shift)
        sc = np.concatenate(scale)
        m.in_scale = np.where(sc > 1e-12, sc, 1.0)
        if composition is CompositionKind.PARALLEL:
            m.out_shift = y_mean / avg_m
            m.out_scale = y_sd / math.sqrt(avg_m)
        else:
            m.out_shift, m.out_scale = y_mean, y_sd
        models[c] = m
    opts = {c: Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps) for c in models}
    rng = np.random.default_rng([config.seed, 2])
    n = len(units)
    history = []
    for epoch in range(config.epochs):
        lr = learning_rate_at(config, epoch)
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            batch = [units[i] for i in idx]
            table = build_table(batch, D, None if case.observes_x else schema)
            t_b = t_all[idx]
            vals, caches = _joint_forward(models, table, t_b, uses_parents, keep=True)
            pred = _unit_predictions(vals, table, composition)
            resid = pred - y_all[idx]
            value = float(np.mean(resid**2))
            if not math.isfinite(value):
                raise TrainingError(f"non-finite joint loss at epoch {epoch}")
            total += value * idx.shape[0]
            dunit = 2.0 * resid / idx.shape[0]
            dvals = np.zeros(table.n_nodes)
            if composition is CompositionKind.PARALLEL:
                dvals[:] = dunit[table.unit_index]
            else:
                dvals[table.sink] = dunit
            grads: dict[int, dict[str, np.ndarray]] = {}
            n_cov = {c: table.covariates[c].shape[1] for c in table.covariates}
            for (_, c, rows, _), cache in zip(reversed(table.groups), reversed(caches)):
                g, dX = models[c].backward(cache, dvals[rows], None, need_input_grad=uses_parents)
                acc = grads.setdefault(c, {})
                for k, v in g.items():
                    if not k.startswith("var_"):
                        acc[k] = acc.get(k, 0.0) + v
                if uses_parents:
                    pidx = table.parents[rows]
                    for s in range(D):
                        ok = pidx[:, s] >= 0
                        np.add.at(dvals, pidx[ok, s], dX[ok, n_cov[c] + s])
            for c, g in grads.items():
                opts[c].step(models[c].params, g, lr)
        history.append(total / n)
    for m in models.values():
        m.history = list(history)
    return models


def fit_compositional(
    dataset: UnitDataset,
    case: AccessCase | str = AccessCase.XY,
    composition: CompositionKind | str | None = None,
    config: TrainConfig | None = None,
    n_samples: int = 1000,
    representation_dim: int = 4,
    schema: UnitarySchema | None = None,
) -> CompositionalModel:
    """Fit one model per component class for the given data-access case.

    ``xy``/``y_only`` train each class independently on its pooled
    instances (Gaussian NLL for cumulative compositions, MSE for parallel).
    ``x_only``/``neither`` train all classes jointly on the unit outcome.
    ``y_only``/``neither`` replace component covariates with a learned
    projection of the unit-level covariates.
    """
    case = AccessCase(case)
    composition = CompositionKind(composition if composition is not None else dataset.composition)
    config = config or TrainConfig()
    schema = schema or UnitarySchema.from_dataset(dataset)
    units = list(dataset.units)
    if not units:
        raise ValueError("cannot fit on an empty dataset")
    for u in units:
        if not u.is_factual:
            raise ValueError(f"unit {u.unit_id} is not factual; fit on observational data")
    D = dataset.max_in_degree
    if case.observes_y:
        models = _fit_independent(units, case, composition, config, D, schema, representation_dim)
    else:
        models = _fit_joint(units, case, composition, config, D, schema, representation_dim)
    return CompositionalModel(
        composition,
        case,
        dict(dataset.class_dims),
        D,
        schema,
        models,
        n_samples,
        representation_dim,
        stochastic=case.observes_y and composition.uses_parents,
    )


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def _deterministic(model: CompositionalModel, units: Sequence[StructuredUnit]) -> list[CateEstimate]:
    table = model.table(units)
    arms = []
    for t in (0, 1):
        vals, _ = _joint_forward(model.models, table, np.full(len(units), float(t)), model.uses_parents, keep=False)
        arms.append(_unit_predictions(vals, table, model.composition))
    return [
        CateEstimate(u.unit_id, float(arms[1][i] - arms[0][i]), float(arms[0][i]), float(arms[1][i]), 0.0)
        for i, u in enumerate(units)
    ]


def _mc_sink_means(model: CompositionalModel, table: NodeTable, t: int, Z: np.ndarray) -> np.ndarray:
    S = Z.shape[1]
    D = model.max_in_degree
    sampled = np.zeros_like(Z)
    means = np.zeros_like(Z)
    for _, c, rows, pos in table.groups:
        n_g = rows.shape[0]
        cov = np.repeat(table.covariates[c][pos], S, axis=0)
        pidx = table.parents[rows]
        present = pidx >= 0
        pv = np.where(present[:, :, None], sampled[np.maximum(pidx, 0)], 0.0)
        pv = pv.transpose(0, 2, 1).reshape(n_g * S, D)
        mask = np.repeat(present.astype(float), S, axis=0)
        X = component_inputs(cov, pv, mask, np.full(n_g * S, float(t)))
        mean, var = model.models[c].predict(X)
        mean = mean.reshape(n_g, S)
        means[rows] = mean
        sampled[rows] = mean + np.sqrt(var).reshape(n_g, S) * Z[rows]
    return means[table.sink]


def _monte_carlo(model: CompositionalModel, units: Sequence[StructuredUnit], S: int, seed: int) -> list[CateEstimate]:
    out: list[CateEstimate] = []
    start = 0
    while start < len(units):
        stop = start
        nodes = 0
        while stop < len(units) and (stop == start or (nodes + len(units[stop].graph)) * S <= MC_CHUNK):
            nodes += len(units[stop].graph)
            stop += 1
        chunk = units[start:stop]
        table = model.table(chunk)
        # common random numbers for both arms; one stream per unit
        Z = np.empty((table.n_nodes, S))
        row = 0
        for u in chunk:
            m = len(u.graph)
            Z[row : row + m] = substream(seed, "mc", u.unit_id).standard_normal((m, S))
            row += m
        m0 = _mc_sink_means(model, table, 0, Z)
        m1 = _mc_sink_means(model, table, 1, Z)
        diff = m1 - m0
        se = diff.std(axis=1, ddof=1) / math.sqrt(S) if S > 1 else np.zeros(len(chunk))
        for i, u in enumerate(chunk):
            out.append(CateEstimate(u.unit_id, float(diff[i].mean()), float(m0[i].mean()), float(m1[i].mean()), float(se[i])))
        start = stop
    return out


def predict_cate(
    model: CompositionalModel,
    units: Sequence[StructuredUnit],
    n_samples: int | None = None,
    seed: int = 0,
) -> list[CateEstimate]:
    """CATE estimates for many units (vectorized over trees and MC paths)."""
    units = list(units)
    if not units:
        return []
    model.check_covers(units)
    S = model.n_samples if n_samples is None else int(n_samples)
    if S < 1:
        raise ValueError("number of Monte-Carlo samples must be >= 1")
    if model.stochastic and model.uses_parents:
        return _monte_carlo(model, units, S, seed)
    return _deterministic(model, units)


def infer_cate_hierarchical(
    model: CompositionalModel, unit: StructuredUnit, n_samples: int | None = None, seed: int = 0
) -> CateEstimate:
    """Monte-Carlo CATE for one sequential/hierarchical unit."""
    if not model.uses_parents:
        raise ValueError("hierarchical inference needs a sequential or hierarchical model")
    return predict_cate(model, [unit], n_samples, seed)[0]


def infer_cate_parallel(model: CompositionalModel, unit: StructuredUnit) -> CateEstimate:
    """Sum of per-instance effects for one parallel unit."""
    if model.composition is not CompositionKind.PARALLEL:
        raise ValueError("parallel inference needs a parallel-composition model")
    return predict_cate(model, [unit])[0]
