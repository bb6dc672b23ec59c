"""Observational datasets from experimental ones via biased treatment sampling.

Treatment probability is a clamped logistic function of a per-unit biasing
score (sum of all component covariates, or tree depth), centered at the
dataset median and scaled by its interquartile range. Counterfactual outcomes
move to a separate truth table that only evaluation code reads.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import (
    ExperimentalDataset,
    FactualOutcome,
    ObservationalDataset,
    PotentialOutcomes,
    StructuredUnit,
    UnitDataset,
    substream,
)

log = logging.getLogger(__name__)

__all__ = [
    "BiasPolicy",
    "BiasStats",
    "TruthRecord",
    "fit_stats",
    "propensity_score",
    "read_truth",
    "reconstruct_experimental",
    "sample_observational",
    "truth_path",
    "write_truth",
]

SCORE_KINDS = ("covariate_sum", "tree_depth")


@dataclass(frozen=True)
class BiasPolicy:
    kind: str = "tree_depth"
    alpha: float = 0.0
    clamp: tuple[float, float] = (0.01, 0.99)

    def __post_init__(self) -> None:
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown bias kind {self.kind!r}; expected one of {SCORE_KINDS}")
        if not self.alpha >= 0:
            raise ValueError("bias strength must be non-negative")
        lo, hi = self.clamp
        if not 0.0 < lo < hi < 1.0:
            raise ValueError("clamp bounds must satisfy 0 < lo < hi < 1")


@dataclass(frozen=True)
class BiasStats:
    center: float
    scale: float


def bias_score(unit: StructuredUnit, kind: str) -> float:
    if kind == "covariate_sum":
        return unit.covariate_sum()
    if kind == "tree_depth":
        return float(unit.depth)
    raise ValueError(f"unknown bias kind {kind!r}")


def fit_stats(units: Iterable[StructuredUnit], kind: str) -> BiasStats:
    """Median and interquartile range of the biasing score."""
    scores = np.array([bias_score(u, kind) for u in units], dtype=float)
    q1, med, q3 = np.percentile(scores, [25, 50, 75])
    scale = float(q3 - q1)
    if scale <= 0:
        log.warning("biasing score has zero interquartile range; using scale 1")
        scale = 1.0
    return BiasStats(float(med), scale)


def propensity_score(unit: StructuredUnit, policy: BiasPolicy, stats: BiasStats) -> float:
    z = policy.alpha * (bias_score(unit, policy.kind) - stats.center) / stats.scale
    p = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
    lo, hi = policy.clamp
    return min(max(p, lo), hi)


@dataclass(frozen=True)
class TruthRecord:
    unit_id: int
    t: int
    propensity: float
    y0: float
    y1: float
    tau: float
    y_components: Mapping[int, PotentialOutcomes] | None = None

    @property
    def ite(self) -> float:
        return self.y1 - self.y0

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "unit_id": self.unit_id,
            "t": self.t,
            "propensity": self.propensity,
            "y0": self.y0,
            "y1": self.y1,
            "tau": self.tau,
        }
        if self.y_components is not None:
            doc["y_components"] = {
                str(n): {"y0": o.y0, "y1": o.y1} for n, o in sorted(self.y_components.items())
            }
        return doc

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "TruthRecord":
        comps = doc.get("y_components")
        if comps is not None:
            comps = {int(k): PotentialOutcomes(v["y0"], v["y1"]) for k, v in comps.items()}
        return cls(doc["unit_id"], doc["t"], doc["propensity"], doc["y0"], doc["y1"], doc["tau"], comps)


def _factual_unit(unit: StructuredUnit, t: int) -> StructuredUnit:
    comps = None
    if unit.component_outcomes is not None:
        comps = {n: FactualOutcome(t, o[t]) for n, o in unit.component_outcomes.items()}
    return StructuredUnit(unit.unit_id, unit.graph, unit.covariates, comps, FactualOutcome(t, unit.unit_outcome[t]))


def sample_observational(
    experimental: UnitDataset,
    policy: BiasPolicy,
    seed: int,
    tau: Mapping[int, float] | None = None,
    stats: BiasStats | None = None,
) -> tuple[ObservationalDataset, list[TruthRecord]]:
    """Draw one treatment per unit and split factual data from the truth.

    Args:
        experimental: units carrying both potential outcomes.
        policy: biasing score and strength.
        seed: root seed; each unit draws from its own substream.
        tau: optional ground-truth CATE per unit id. Defaults to the realized
            difference ``y1 - y0``.
        stats: score centering; fit on ``experimental`` when omitted.
    """
    if stats is None:
        stats = fit_stats(experimental.units, policy.kind)
    factual = []
    truth = []
    for u in experimental.units:
        if not u.is_experimental:
            raise ValueError(f"unit {u.unit_id} lacks both potential outcomes")
        p = propensity_score(u, policy, stats)
        t = int(substream(seed, "treatment", u.unit_id).random() < p)
        factual.append(_factual_unit(u, t))
        y = u.unit_outcome
        truth.append(
            TruthRecord(
                u.unit_id,
                t,
                p,
                y.y0,
                y.y1,
                float(tau[u.unit_id]) if tau is not None else y.effect,
                dict(u.component_outcomes) if u.component_outcomes is not None else None,
            )
        )
    meta = dict(experimental.meta)
    meta.update({"bias": {"kind": policy.kind, "alpha": policy.alpha, "seed": seed}})
    meta.pop("data_hash", None)
    obs = ObservationalDataset(
        factual,
        dict(experimental.class_dims),
        experimental.composition,
        experimental.max_in_degree,
        experimental.max_depth,
        meta,
    )
    return obs, truth


def reconstruct_experimental(factual: UnitDataset, truth: Sequence[TruthRecord]) -> ExperimentalDataset:
    by_id = {r.unit_id: r for r in truth}
    units = []
    for u in factual.units:
        r = by_id[u.unit_id]
        units.append(
            StructuredUnit(u.unit_id, u.graph, u.covariates, r.y_components, PotentialOutcomes(r.y0, r.y1))
        )
    return ExperimentalDataset(units, dict(factual.class_dims), factual.composition, factual.max_in_degree, factual.max_depth)


def truth_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name.removesuffix(".jsonl") + ".truth.jsonl")


def write_truth(records: Sequence[TruthRecord], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")))
            fh.write("\n")
    return path


def read_truth(path: str | Path) -> list[TruthRecord]:
    with Path(path).open(encoding="utf-8") as fh:
        return [TruthRecord.from_json(json.loads(line)) for line in fh if line.strip()]
