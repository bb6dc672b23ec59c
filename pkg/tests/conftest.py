"""Shared builders for hand-made units and oracle component models."""

from __future__ import annotations

from typing import Callable

import numpy as np
import pytest

from compcate.core import (
    CompositionKind,
    FactualOutcome,
    InteractionGraph,
    ObservationalDataset,
    PotentialOutcomes,
    StructuredUnit,
    UnitarySchema,
)
from compcate.dgp import ComponentClass, PolynomialMean
from compcate.estimators import AccessCase, CompositionalModel


class OracleComponent:
    """Stand-in for a trained component model with a known mean and variance.

    ``fn`` receives the covariate block, the parent-value block, the slot
    mask and the treatment column of the component inputs.
    """

    def __init__(self, d: int, max_in_degree: int, uses_parents: bool, fn: Callable, variance: float = 0.0):
        self.d = d
        self.D = max_in_degree if uses_parents else 0
        self.fn = fn
        self.variance = variance

    def predict(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(X)
        d, D = self.d, self.D
        x = X[:, :d]
        pv = X[:, d : d + D]
        mask = X[:, d + D : d + 2 * D]
        t = X[:, -1]
        return self.fn(x, pv, mask, t), np.full(X.shape[0], self.variance)

    def predict_mean(self, X: np.ndarray) -> np.ndarray:
        return self.predict(X)[0]

    def forward(self, X: np.ndarray, need_var: bool = True) -> dict:
        mean, var = self.predict(X)
        return {"mean": mean, "var": var} if need_var else {"mean": mean}


def oracle_model(
    composition: CompositionKind,
    fns: dict[int, Callable],
    variances: dict[int, float] | None = None,
    d: int = 1,
    max_in_degree: int = 2,
    max_depth: int = 10,
    n_samples: int = 1000,
) -> CompositionalModel:
    variances = variances or {}
    uses = composition.uses_parents
    models = {c: OracleComponent(d, max_in_degree, uses, fn, variances.get(c, 0.0)) for c, fn in fns.items()}
    class_dims = {c: d for c in fns}
    schema = UnitarySchema(tuple(sorted(class_dims.items())), max_depth)
    return CompositionalModel(
        composition,
        AccessCase.XY,
        class_dims,
        max_in_degree,
        schema,
        models,
        n_samples=n_samples,
        stochastic=uses,
    )


def gaussian_chain_model(n_samples=1000):
    """Three-component chain whose treatment changes the parent slopes.

    y_A = x + t + e_A,  y_B = (1 + t) y_A + t + e_B,  y_C = (2 - t) y_B + x_C + e_C
    """
    return oracle_model(
        CompositionKind.SEQUENTIAL,
        {
            0: lambda x, pv, m, t: x[:, 0] + t,
            1: lambda x, pv, m, t: (1 + t) * pv[:, 0] + t,
            2: lambda x, pv, m, t: (2 - t) * pv[:, 0] + x[:, 0],
        },
        {0: 0.5, 1: 1.0, 2: 0.3},
        n_samples=n_samples,
    )


def gaussian_chain_tau(xa: float) -> float:
    # E[y_C | t] by linearity: t=1 -> 2(xa + 1) + 1 + xc, t=0 -> 2 xa + xc
    return (2 * (xa + 1) + 1) - 2 * xa


def chain_graph(classes: list[int]) -> InteractionGraph:
    """Chain whose node ``i`` has class ``classes[i]`` and feeds node ``i + 1``."""
    nodes = tuple(enumerate(classes))
    edges = tuple((i, i + 1) for i in range(len(classes) - 1))
    return InteractionGraph(nodes, edges)


def make_unit(unit_id: int, graph: InteractionGraph, xs: dict[int, list[float]], t: int | None = 0) -> StructuredUnit:
    outcome = None if t is None else FactualOutcome(t, 0.0)
    return StructuredUnit(unit_id, graph, xs, None, outcome)


def linear_class(cid: int, cov: tuple[float, float], intercept: tuple[float, float] = (0.0, 0.0),
                 parent: tuple[float, float] = (0.0, 0.0), noise: tuple[float, float] = (0.0, 0.0)) -> ComponentClass:
    """One-covariate class with ``mu_t(x, p) = a_t + c_t x + b_t p`` (no clipping or scaling)."""
    mean = PolynomialMean(intercept, ([[cov[0]]], [[cov[1]]]), ((parent[0],), (parent[1],)), (0.0,), (1.0,))
    return ComponentClass(cid, 1, mean, noise)


def factual_dataset(units: list[StructuredUnit], class_dims: dict[int, int],
                    composition: CompositionKind, max_depth: int | None = None) -> ObservationalDataset:
    return ObservationalDataset(units, class_dims, composition, 2, max_depth)


def experimental_unit(unit_id: int, graph: InteractionGraph, xs: dict[int, list[float]],
                      y: tuple[float, float]) -> StructuredUnit:
    return StructuredUnit(unit_id, graph, xs, None, PotentialOutcomes(*y))


@pytest.fixture
def two_class_schema() -> UnitarySchema:
    return UnitarySchema(((1, 1), (2, 1)), 2)


PIPELINE_CONFIG = """
seed = 11

[dataset]
n = 120
k = 3
composition = "sequential"
max_depth = 4
min_depth = 2

[bias]
kind = "tree_depth"

[train]
epochs = 4
hidden = 8
n_samples = 20
"""


def cli_pipeline(root, estimator: str = "compositional", alpha: float = 1.0) -> dict[str, object]:
    """Run generate → bias → train → infer → eval under ``root``; returns the output directories."""
    from compcate.cli import run_command

    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.toml"
    cfg.write_text(PIPELINE_CONFIG)
    dirs = {name: root / name for name in ("gen", "bias", "train", "infer", "eval")}
    steps = [
        ["generate", "--config", str(cfg), "--out", str(dirs["gen"])],
        ["bias", "--config", str(cfg), "--dataset", str(dirs["gen"] / "data.jsonl"), "--alpha", str(alpha),
         "--out", str(dirs["bias"])],
        ["train", "--config", str(cfg), "--dataset", str(dirs["bias"] / "factual.jsonl"), "--estimator", estimator,
         "--out", str(dirs["train"])],
        ["infer", "--config", str(cfg), "--dataset", str(dirs["bias"] / "factual.jsonl"),
         "--model", str(dirs["train"] / "model"), "--out", str(dirs["infer"])],
        ["eval", "--config", str(cfg), "--dataset", str(dirs["bias"] / "factual.jsonl"),
         "--model", str(dirs["train"] / "model"), "--out", str(dirs["eval"])],
    ]
    for argv in steps:
        code = run_command(argv)
        if code != 0:
            raise AssertionError(f"{argv[0]} exited with {code}")
    return dirs


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion; shown in the terminal summary."""

    def record(name: str, passed: bool, detail: str) -> bool:
        line = f"{name}: {'PASS' if passed else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
