"""Synthetic compositional data: random trees, polynomial component classes.

Each component class owns a polynomial mean function per treatment arm over
its standardized covariates and, for cumulative compositions, the mean of its
parents' outcomes. Noise is additive Gaussian and the per-node noise draw is
shared between the two arms, so unit effects are clean when the arm noise
scales match.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .core import (
    CompositionKind,
    ExperimentalDataset,
    InteractionGraph,
    PotentialOutcomes,
    StructuredUnit,
    post_order,
    substream,
)

__all__ = [
    "ComponentClass",
    "DgpConfig",
    "InfeasibleTreeError",
    "PolynomialMean",
    "expected_outcomes",
    "generate_experimental_dataset",
    "ground_truth_outcome",
    "load_classes",
    "sample_classes",
    "sample_tree",
    "save_classes",
]

OUTCOME_BOUND = 1e3


class InfeasibleTreeError(ValueError):
    """Raised when tree constraints cannot be met (e.g. combination > node budget)."""


@dataclass(frozen=True)
class PolynomialMean:
    """``mu_t(x, p) = a_t + sum_i sum_k c_t[i,k] * xs_i**(k+1) + s * sum_k b_t[k] * (p/s)**(k+1)``.

    ``xs`` is the covariate standardized by ``(x_center, x_scale)`` and
    optionally clipped to ``[-clip, clip]``; ``p`` is the mean of the parent
    outcomes and ``s`` is ``parent_scale``.
    """

    intercept: tuple[float, float]
    cov_coef: tuple[Any, Any]
    parent_coef: tuple[tuple[float, ...], tuple[float, ...]]
    x_center: tuple[float, ...]
    x_scale: tuple[float, ...]
    clip: float | None = None
    parent_scale: float = 1.0

    def __post_init__(self) -> None:
        cov = tuple(np.asarray(c, dtype=float).reshape(len(self.x_center), -1) for c in self.cov_coef)
        object.__setattr__(self, "cov_coef", cov)

    @property
    def parent_linear(self) -> bool:
        return all(len(b) <= 1 or not any(b[1:]) for b in self.parent_coef)

    def __call__(self, x: np.ndarray, parent_mean: float | None, t: int) -> float:
        xs = (np.asarray(x, dtype=float) - np.asarray(self.x_center)) / np.asarray(self.x_scale)
        if self.clip is not None:
            xs = np.clip(xs, -self.clip, self.clip)
        coef = self.cov_coef[t]
        powers = xs[:, None] ** np.arange(1, coef.shape[1] + 1)[None, :]
        value = self.intercept[t] + float((coef * powers).sum())
        if parent_mean is not None:
            ps = parent_mean / self.parent_scale
            value += self.parent_scale * sum(b * ps ** (k + 1) for k, b in enumerate(self.parent_coef[t]))
        return float(value)

    def to_json(self) -> dict[str, Any]:
        return {
            "intercept": list(self.intercept),
            "cov_coef": [c.tolist() for c in self.cov_coef],
            "parent_coef": [list(b) for b in self.parent_coef],
            "x_center": list(self.x_center),
            "x_scale": list(self.x_scale),
            "clip": self.clip,
            "parent_scale": self.parent_scale,
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "PolynomialMean":
        return cls(
            tuple(doc["intercept"]),
            tuple(doc["cov_coef"]),
            tuple(tuple(b) for b in doc["parent_coef"]),
            tuple(doc["x_center"]),
            tuple(doc["x_scale"]),
            doc.get("clip"),
            doc.get("parent_scale", 1.0),
        )


@dataclass(frozen=True)
class ComponentClass:
    id: int
    d: int
    mean: PolynomialMean
    noise_sd: tuple[float, float] = (0.0, 0.0)
    law: str = "gaussian"
    law_mean: tuple[float, ...] = (0.0,)
    law_scale: tuple[float, ...] = (1.0,)

    def __post_init__(self) -> None:
        if min(self.noise_sd) < 0:
            raise ValueError("noise scale must be non-negative")

    def sample_covariates(self, rng: np.random.Generator) -> np.ndarray:
        m = np.asarray(self.law_mean)
        s = np.asarray(self.law_scale)
        if self.law == "uniform":
            return rng.uniform(m - s, m + s)
        return rng.normal(m, s)

    def is_heterogeneous(self) -> bool:
        pm = self.mean
        return (
            pm.intercept[0] != pm.intercept[1]
            or not np.array_equal(pm.cov_coef[0], pm.cov_coef[1])
            or tuple(pm.parent_coef[0]) != tuple(pm.parent_coef[1])
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "d": self.d,
            "mean": self.mean.to_json(),
            "noise_sd": list(self.noise_sd),
            "law": self.law,
            "law_mean": list(self.law_mean),
            "law_scale": list(self.law_scale),
        }

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "ComponentClass":
        return cls(
            doc["id"],
            doc["d"],
            PolynomialMean.from_json(doc["mean"]),
            tuple(doc["noise_sd"]),
            doc["law"],
            tuple(doc["law_mean"]),
            tuple(doc["law_scale"]),
        )


@dataclass
class DgpConfig:
    n: int = 1000
    k: int = 10
    d: int = 1
    composition: CompositionKind = CompositionKind.SEQUENTIAL
    structure: str = "variable"
    """``"variable"`` (depth uniform in [min_depth, max_depth]) or ``"fixed"``."""
    max_depth: int = 10
    min_depth: int = 4
    combination_sizes: tuple[int, int] | None = None
    """Inclusive range of distinct-class counts per unit; enables combination mode."""
    branch_prob: float = 0.5
    max_nodes: int = 32
    covariate_degree: int = 3
    parent_degree: int = 1
    parent_coef_range: tuple[float, float] = (-1.0, 1.0)
    noise_max: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        self.composition = CompositionKind(self.composition)
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.structure not in ("variable", "fixed"):
            raise ValueError(f"unknown structure mode {self.structure!r}")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 1 <= self.covariate_degree <= 3 or not 1 <= self.parent_degree <= 3:
            raise ValueError("polynomial degree must lie in [1, 3]")
        self.parent_coef_range = (float(self.parent_coef_range[0]), float(self.parent_coef_range[1]))
        if self.combination_sizes is not None:
            lo, hi = self.combination_sizes
            self.combination_sizes = (int(lo), int(hi))
            if not 1 <= lo <= hi <= self.k:
                raise ValueError("combination sizes must satisfy 1 <= lo <= hi <= k")

    def to_json(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["composition"] = self.composition.value
        doc["combination_sizes"] = None if self.combination_sizes is None else list(self.combination_sizes)
        doc["parent_coef_range"] = list(self.parent_coef_range)
        return doc


# ---------------------------------------------------------------------------
# Classes
# ---------------------------------------------------------------------------


def sample_classes(config: DgpConfig, seed: int | None = None) -> list[ComponentClass]:
    """Draw the k ground-truth classes for a benchmark seed."""
    rng = substream(config.seed if seed is None else seed, "classes")
    classes = []
    for o in range(config.k):
        law = "gaussian" if rng.random() < 0.5 else "uniform"
        law_mean = rng.uniform(0.0, 3.0, size=config.d)
        variance = rng.uniform(0.25, 3.0, size=config.d)
        sd = np.sqrt(variance)
        law_scale = sd if law == "gaussian" else sd * math.sqrt(3.0)
        cov = tuple(rng.uniform(-1.0, 1.0, size=(config.d, config.covariate_degree)) for _ in range(2))
        intercept = tuple(float(v) for v in rng.uniform(-1.0, 1.0, size=2))
        lo, hi = config.parent_coef_range
        parent = tuple(tuple(float(v) for v in rng.uniform(lo, hi, size=config.parent_degree)) for _ in range(2))
        mean = PolynomialMean(
            intercept,
            cov,
            parent,
            tuple(float(v) for v in law_mean),
            tuple(float(v) for v in sd),
            clip=3.0,
            parent_scale=10.0,
        )
        noise = tuple(float(v) for v in rng.uniform(0.0, config.noise_max, size=2))
        classes.append(
            ComponentClass(
                o,
                config.d,
                mean,
                noise,
                law,
                tuple(float(v) for v in law_mean),
                tuple(float(v) for v in law_scale),
            )
        )
    return classes


def save_classes(classes: Sequence[ComponentClass], path: str | Path, **extra: Any) -> None:
    doc = {"classes": [c.to_json() for c in classes]}
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_classes(path: str | Path) -> list[ComponentClass]:
    doc = json.loads(Path(path).read_text())
    return [ComponentClass.from_json(c) for c in doc["classes"]]


def ground_truth_outcome(
    cls: ComponentClass,
    x: np.ndarray,
    parent_values: Sequence[float],
    t: int,
    noise_draw: float = 0.0,
) -> float:
    """One component outcome: class mean at ``(x, mean(parents), t)`` plus scaled noise."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != cls.d:
        raise ValueError(f"class {cls.id} expects {cls.d} covariates, got {x.shape[0]}")
    parent_mean = float(np.mean(parent_values)) if len(parent_values) else None
    return cls.mean(x, parent_mean, t) + cls.noise_sd[t] * float(noise_draw)


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------


def _tree_depth(config: DgpConfig, rng: np.random.Generator, min_nodes: int) -> int:
    if config.structure == "fixed":
        depth = config.max_depth
    else:
        lo = min(config.min_depth, config.max_depth)
        if config.composition is CompositionKind.SEQUENTIAL:
            lo = max(lo, min_nodes)
        if lo > config.max_depth:
            raise InfeasibleTreeError(
                f"a chain of at most {config.max_depth} nodes cannot hold {min_nodes} distinct classes"
            )
        depth = int(rng.integers(lo, config.max_depth + 1))
    if config.composition is CompositionKind.SEQUENTIAL and depth < min_nodes:
        raise InfeasibleTreeError(f"chain of depth {depth} cannot hold {min_nodes} distinct classes")
    return depth


def _grow_binary(depth: int, config: DgpConfig, rng: np.random.Generator, min_nodes: int):
    """Parent lists for a binary tree whose longest path has ``depth`` nodes.

    Node 0 is the sink; a spine of ``depth`` nodes guarantees the depth, and
    extra parents are attached with probability ``branch_prob`` while the node
    budget allows.
    """
    budget = max(config.max_nodes, min_nodes, depth)
    parents: list[list[int]] = [[i + 1] for i in range(depth - 1)] + [[]]
    level = [depth - i for i in range(depth)]
    queue = [(i, True) for i in range(depth)]
    head = 0
    while head < len(queue):
        node, on_spine = queue[head]
        head += 1
        if level[node] == 1:
            continue
        if on_spine:
            extra = 1 if rng.random() < config.branch_prob else 0
        else:
            u = rng.random()
            extra = 2 if u < config.branch_prob**2 else (1 if u < config.branch_prob else 0)
        for _ in range(extra):
            if len(parents) >= budget:
                break
            pid = len(parents)
            parents.append([])
            level.append(level[node] - 1)
            parents[node].append(pid)
            queue.append((pid, False))
    # too few nodes for the combination: add leaves under nodes with spare in-degree
    while len(parents) < min_nodes:
        spare = [n for n in range(len(parents)) if len(parents[n]) < 2 and level[n] > 1]
        if not spare:
            raise InfeasibleTreeError("cannot place all combination classes in the tree")
        node = spare[int(rng.integers(len(spare)))]
        pid = len(parents)
        parents.append([])
        level.append(level[node] - 1)
        parents[node].append(pid)
    return parents


def sample_tree(
    config: DgpConfig,
    rng: np.random.Generator | int,
    combination: Sequence[int] | None = None,
) -> InteractionGraph:
    """Sample one interaction tree.

    Sequential composition yields chains; parallel and hierarchical yield
    binary trees. With ``combination`` only those classes appear and each
    appears at least once. Node ids follow the processing order.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    need = len(set(combination)) if combination is not None else 1
    depth = _tree_depth(config, rng, need)
    if config.composition is CompositionKind.SEQUENTIAL:
        parents = [[i + 1] for i in range(depth - 1)] + [[]]
    else:
        parents = _grow_binary(depth, config, rng, need)
    m = len(parents)
    if combination is not None:
        pool = sorted(set(int(c) for c in combination))
        if len(pool) > m:
            raise InfeasibleTreeError(f"{len(pool)} classes do not fit in {m} nodes")
        classes = rng.choice(pool, size=m)
        slots = rng.permutation(m)[: len(pool)]
        classes[slots] = rng.permutation(pool)
    else:
        classes = rng.integers(0, config.k, size=m)
    # relabel so that ids follow the post-order traversal from the sink
    order: list[int] = []
    stack = [(0, 0)]
    while stack:
        node, i = stack.pop()
        ps = sorted(parents[node])
        if i < len(ps):
            stack.append((node, i + 1))
            stack.append((ps[i], 0))
        else:
            order.append(node)
    new_id = {old: new for new, old in enumerate(order)}
    nodes = tuple((new_id[n], int(classes[n])) for n in order)
    edges = tuple(sorted((new_id[p], new_id[c]) for c in range(m) for p in parents[c]))
    return InteractionGraph(nodes, edges)


# ---------------------------------------------------------------------------
# Units and datasets
# ---------------------------------------------------------------------------


def _unit_combination(config: DgpConfig, unit_id: int, rng: np.random.Generator) -> list[int] | None:
    if config.combination_sizes is None:
        return None
    lo, hi = config.combination_sizes
    size = lo + unit_id % (hi - lo + 1)
    return sorted(int(c) for c in rng.choice(config.k, size=size, replace=False))


def _outcomes(
    graph: InteractionGraph,
    covariates: Mapping[int, np.ndarray],
    classes: Sequence[ComponentClass],
    composition: CompositionKind,
    t: int,
    noise: Mapping[int, float],
) -> dict[int, float]:
    ys: dict[int, float] = {}
    for n in post_order(graph):
        cls = classes[graph.class_of[n]]
        pv = [ys[p] for p in graph.parents[n]] if composition.uses_parents else []
        ys[n] = ground_truth_outcome(cls, covariates[n], pv, t, noise.get(n, 0.0))
    return ys


def aggregate(ys: Mapping[int, float], graph: InteractionGraph, composition: CompositionKind) -> float:
    if composition is CompositionKind.PARALLEL:
        return float(sum(ys.values()))
    return float(ys[graph.sink])


def make_unit(
    unit_id: int,
    graph: InteractionGraph,
    covariates: Mapping[int, np.ndarray],
    classes: Sequence[ComponentClass],
    composition: CompositionKind,
    noise: Mapping[int, float] | None = None,
) -> StructuredUnit:
    noise = noise or {}
    y0 = _outcomes(graph, covariates, classes, composition, 0, noise)
    y1 = _outcomes(graph, covariates, classes, composition, 1, noise)
    comps = {n: PotentialOutcomes(y0[n], y1[n]) for n in y0}
    unit_y = PotentialOutcomes(aggregate(y0, graph, composition), aggregate(y1, graph, composition))
    return StructuredUnit(unit_id, graph, covariates, comps, unit_y)


def generate_unit(
    config: DgpConfig, classes: Sequence[ComponentClass], unit_id: int
) -> StructuredUnit:
    rng = substream(config.seed, "unit", unit_id)
    combo = _unit_combination(config, unit_id, rng)
    graph = sample_tree(config, rng, combo)
    covariates = {n: classes[c].sample_covariates(rng) for n, c in graph.nodes}
    noise = {n: float(rng.standard_normal()) for n, _ in graph.nodes}
    return make_unit(unit_id, graph, covariates, classes, config.composition, noise)


def generate_experimental_dataset(
    config: DgpConfig, classes: Sequence[ComponentClass] | None = None
) -> ExperimentalDataset:
    """Units with component- and unit-level outcomes under both arms."""
    if classes is None:
        classes = sample_classes(config)
    units = [generate_unit(config, classes, i) for i in range(config.n)]
    for u in units:
        lo, hi = u.unit_outcome.y0, u.unit_outcome.y1
        if not (abs(lo) <= OUTCOME_BOUND and abs(hi) <= OUTCOME_BOUND):
            raise ValueError(f"unit {u.unit_id} outcome outside the supported range")
    return ExperimentalDataset(
        units,
        {c.id: c.d for c in classes},
        config.composition,
        max_in_degree=2,
        max_depth=config.max_depth,
        meta={"source": "synthetic", "dgp": config.to_json()},
    )


def expected_outcomes(
    unit: StructuredUnit,
    classes: Sequence[ComponentClass],
    composition: CompositionKind,
    n_draws: int = 4000,
    seed: int = 0,
) -> PotentialOutcomes:
    """Conditional expectation of the unit outcome under each arm.

    Exact by mean propagation when every parent term is linear (or the
    composition is parallel, or noise is absent); Monte-Carlo otherwise.
    """
    graph = unit.graph
    noiseless = all(max(classes[c].noise_sd) == 0 for _, c in graph.nodes)
    linear = all(classes[c].mean.parent_linear for _, c in graph.nodes)
    if noiseless or linear or not composition.uses_parents:
        e = [aggregate(_outcomes(graph, unit.covariates, classes, composition, t, {}), graph, composition) for t in (0, 1)]
        return PotentialOutcomes(e[0], e[1])
    rng = substream(seed, "expectation", unit.unit_id)
    acc = np.zeros(2)
    for _ in range(n_draws):
        noise = {n: float(rng.standard_normal()) for n, _ in graph.nodes}
        for t in (0, 1):
            acc[t] += aggregate(_outcomes(graph, unit.covariates, classes, composition, t, noise), graph, composition)
    acc /= n_draws
    return PotentialOutcomes(float(acc[0]), float(acc[1]))
