"""Domain types for structured units and the unitary flattening transform.

A structured unit is an instance-specific tree of component instances. Edges
point from a parent (processed first) to its child; the single sink is the
last component to run and carries the unit-level outcome for cumulative
compositions.
"""

from __future__ import annotations

import enum
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "CompositionKind",
    "ExperimentalDataset",
    "FactualOutcome",
    "InteractionGraph",
    "InvalidGraphError",
    "ObservationalDataset",
    "PotentialOutcomes",
    "StructuredUnit",
    "UnitDataset",
    "UnitarySchema",
    "ValidationReport",
    "flatten_many",
    "flatten_unitary",
    "post_order",
    "read_dataset",
    "substream",
    "validate_unit",
    "write_dataset",
]

DEFAULT_MAX_IN_DEGREE = 2


class InvalidGraphError(ValueError):
    """Raised when an interaction graph is not a single-sink directed tree."""


class CompositionKind(str, enum.Enum):
    PARALLEL = "parallel"
    SEQUENTIAL = "sequential"
    HIERARCHICAL = "hierarchical"

    @property
    def aggregation(self) -> str:
        return "additive" if self is CompositionKind.PARALLEL else "cumulative"

    @property
    def uses_parents(self) -> bool:
        return self is not CompositionKind.PARALLEL


def substream(seed: int, *names: Union[str, int]) -> np.random.Generator:
    """Return an independent generator for the named substream of ``seed``.

    ``substream(7, "unit", 12)`` always yields the same stream, and streams
    with different name paths are statistically independent.
    """
    key = tuple(
        n if isinstance(n, int) else zlib.crc32(n.encode("utf-8")) for n in names
    )
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


# ---------------------------------------------------------------------------
# Graphs and units
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InteractionGraph:
    """Directed tree over component instances.

    ``nodes`` holds ``(node_id, class_id)`` pairs, ``edges`` holds
    ``(parent_id, child_id)`` pairs. Depth is measured so that the
    first-processed nodes on the longest path sit at depth 1 and the sink sits
    at the unit's depth.
    """

    nodes: tuple[tuple[int, int], ...]
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple((int(n), int(c)) for n, c in self.nodes))
        object.__setattr__(self, "edges", tuple((int(p), int(c)) for p, c in self.edges))

    @cached_property
    def class_of(self) -> dict[int, int]:
        return dict(self.nodes)

    @property
    def node_ids(self) -> list[int]:
        return sorted(self.class_of)

    @cached_property
    def parents(self) -> dict[int, tuple[int, ...]]:
        pa: dict[int, list[int]] = {n: [] for n, _ in self.nodes}
        for p, c in self.edges:
            pa.setdefault(c, []).append(p)
        return {n: tuple(sorted(ps)) for n, ps in pa.items()}

    @cached_property
    def children(self) -> dict[int, tuple[int, ...]]:
        ch: dict[int, list[int]] = {n: [] for n, _ in self.nodes}
        for p, c in self.edges:
            ch.setdefault(p, []).append(c)
        return {n: tuple(sorted(cs)) for n, cs in ch.items()}

    @cached_property
    def sink(self) -> int:
        sinks = [n for n, cs in self.children.items() if not cs]
        if len(sinks) != 1:
            raise InvalidGraphError(f"expected exactly one sink, found {len(sinks)}")
        return sinks[0]

    @cached_property
    def depth_of(self) -> dict[int, int]:
        order = post_order(self)
        dist = {self.sink: 0}
        for n in reversed(order):
            for p in self.parents[n]:
                dist[p] = dist[n] + 1
        height = max(dist.values()) + 1
        return {n: height - d for n, d in dist.items()}

    @property
    def depth(self) -> int:
        return self.depth_of[self.sink]

    @property
    def max_in_degree(self) -> int:
        return max((len(p) for p in self.parents.values()), default=0)

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class PotentialOutcomes:
    y0: float
    y1: float

    def __getitem__(self, t: int) -> float:
        return self.y1 if t else self.y0

    @property
    def effect(self) -> float:
        return self.y1 - self.y0


@dataclass(frozen=True)
class FactualOutcome:
    t: int
    y: float


Outcome = Union[PotentialOutcomes, FactualOutcome]


@dataclass(frozen=True)
class StructuredUnit:
    unit_id: int
    graph: InteractionGraph
    covariates: Mapping[int, np.ndarray]
    component_outcomes: Mapping[int, Outcome] | None = None
    unit_outcome: Outcome | None = None

    def __post_init__(self) -> None:
        cov = {}
        for n, x in self.covariates.items():
            arr = np.array(x, dtype=float).reshape(-1)
            arr.setflags(write=False)
            cov[int(n)] = arr
        object.__setattr__(self, "covariates", cov)

    @property
    def is_experimental(self) -> bool:
        return isinstance(self.unit_outcome, PotentialOutcomes)

    @property
    def is_factual(self) -> bool:
        return isinstance(self.unit_outcome, FactualOutcome)

    @property
    def treatment(self) -> int:
        if not isinstance(self.unit_outcome, FactualOutcome):
            raise ValueError(f"unit {self.unit_id} has no factual treatment")
        return self.unit_outcome.t

    @property
    def depth(self) -> int:
        return self.graph.depth

    def class_set(self) -> frozenset[int]:
        return frozenset(self.graph.class_of.values())

    def covariate_sum(self) -> float:
        return float(sum(x.sum() for x in self.covariates.values()))

    def strip_components(self, covariates: bool = False) -> "StructuredUnit":
        """Copy without component outcomes (and optionally blank covariates)."""
        cov = self.covariates
        if covariates:
            cov = {n: np.zeros_like(x) for n, x in cov.items()}
        return StructuredUnit(self.unit_id, self.graph, cov, None, self.unit_outcome)


# ---------------------------------------------------------------------------
# Validation and traversal
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def kinds(self) -> set[str]:
        return {v.split(":", 1)[0] for v in self.violations}


def _arity_map(registry: Any) -> dict[int, int]:
    if isinstance(registry, Mapping):
        return {int(k): int(v) for k, v in registry.items()}
    return {int(c.id): int(c.d) for c in registry}


def _find_cycle(graph: InteractionGraph) -> bool:
    state: dict[int, int] = {}
    children = graph.children
    for start in graph.node_ids:
        if state.get(start):
            continue
        stack = [(start, iter(children.get(start, ())))]
        state[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state.get(nxt) == 1:
                return True
            elif not state.get(nxt):
                state[nxt] = 1
                stack.append((nxt, iter(children.get(nxt, ()))))
    return False


def validate_unit(
    unit: StructuredUnit,
    registry: Any,
    max_in_degree: int = DEFAULT_MAX_IN_DEGREE,
    max_depth: int | None = None,
) -> ValidationReport:
    """Check a unit against the tree invariants and the class registry.

    ``registry`` is either a mapping ``class_id -> covariate arity`` or a
    sequence of objects exposing ``id`` and ``d``. Violations are reported as
    ``"<kind>: <detail>"`` strings; nothing is raised.
    """
    report = ValidationReport()
    g = unit.graph
    arity = _arity_map(registry)
    ids = [n for n, _ in g.nodes]
    if not ids:
        report.violations.append("empty: unit has no nodes")
        return report
    if len(set(ids)) != len(ids):
        report.violations.append("duplicate: repeated node id")
    known = set(ids)
    for p, c in g.edges:
        if p not in known or c not in known:
            report.violations.append(f"dangling: edge ({p}, {c}) references unknown node")
        if p == c:
            report.violations.append(f"cycle: self-loop on node {p}")
    if len(set(g.edges)) != len(g.edges):
        report.violations.append("duplicate: repeated edge")
    if _find_cycle(g):
        report.violations.append("cycle: graph contains a directed cycle")
    out_deg = {n: len(cs) for n, cs in g.children.items() if n in known}
    sinks = [n for n, d in out_deg.items() if d == 0]
    if len(sinks) != 1:
        report.violations.append(f"multi-sink: {len(sinks)} nodes without a child")
    for n, d in out_deg.items():
        if d > 1:
            report.violations.append(f"out-degree: node {n} feeds {d} children")
    for n, ps in g.parents.items():
        if len(ps) > max_in_degree:
            report.violations.append(f"in-degree: node {n} has {len(ps)} parents > {max_in_degree}")
    if not report.violations and len(g.edges) != len(ids) - 1:
        report.violations.append("disconnected: edge count does not form a tree")
    for n, c in g.nodes:
        if c not in arity:
            report.violations.append(f"class: node {n} has unknown class {c}")
            continue
        x = unit.covariates.get(n)
        if x is None:
            report.violations.append(f"arity: node {n} has no covariates")
        elif x.shape[0] != arity[c]:
            report.violations.append(
                f"arity: node {n} of class {c} carries {x.shape[0]} covariates, expected {arity[c]}"
            )
    if report.ok and max_depth is not None and g.depth > max_depth:
        report.violations.append(f"depth: unit depth {g.depth} > {max_depth}")
    if unit.component_outcomes is not None:
        missing = known - set(unit.component_outcomes)
        if missing:
            report.violations.append(f"outcomes: nodes {sorted(missing)} lack component outcomes")
    return report


def post_order(graph: InteractionGraph) -> list[int]:
    """Processing order: each node after all of its parents, sink last.

    This is a post-order traversal of the tree rooted at the sink, visiting
    parents in ascending node id.
    """
    if not graph.nodes:
        raise InvalidGraphError("graph has no nodes")
    if _find_cycle(graph):
        raise InvalidGraphError("graph contains a cycle")
    sink = graph.sink
    parents = graph.parents
    order: list[int] = []
    stack: list[tuple[int, int]] = [(sink, 0)]
    while stack:
        node, i = stack.pop()
        ps = parents[node]
        if i < len(ps):
            stack.append((node, i + 1))
            stack.append((ps[i], 0))
        else:
            order.append(node)
    if len(order) != len(graph.nodes):
        raise InvalidGraphError("graph is not connected to its sink")
    return order


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class UnitDataset:
    """A collection of units sharing one class registry and composition."""

    units: list[StructuredUnit]
    class_dims: dict[int, int]
    composition: CompositionKind
    max_in_degree: int = DEFAULT_MAX_IN_DEGREE
    max_depth: int | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    kind = "units"

    def __post_init__(self) -> None:
        self.class_dims = {int(k): int(v) for k, v in self.class_dims.items()}
        self.composition = CompositionKind(self.composition)
        if self.max_depth is None:
            self.max_depth = max((u.depth for u in self.units), default=1)

    def __len__(self) -> int:
        return len(self.units)

    def __iter__(self) -> Iterator[StructuredUnit]:
        return iter(self.units)

    @property
    def k(self) -> int:
        return len(self.class_dims)

    def subset(self, units: Iterable[StructuredUnit]) -> "UnitDataset":
        return type(self)(
            list(units),
            dict(self.class_dims),
            self.composition,
            self.max_in_degree,
            self.max_depth,
            dict(self.meta),
        )

    def by_id(self) -> dict[int, StructuredUnit]:
        return {u.unit_id: u for u in self.units}


class ExperimentalDataset(UnitDataset):
    """Units carrying both potential outcomes."""

    kind = "experimental"


class ObservationalDataset(UnitDataset):
    """Units carrying factual outcomes only."""

    kind = "observational"

    @property
    def treatments(self) -> np.ndarray:
        return np.array([u.treatment for u in self.units], dtype=int)


# ---------------------------------------------------------------------------
# Unitary representation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnitarySchema:
    """Layout of the flat vector: per-class mean covariates, then counts N[j, l]."""

    class_dims: tuple[tuple[int, int], ...]
    max_depth: int

    @classmethod
    def from_dataset(cls, dataset: UnitDataset) -> "UnitarySchema":
        return cls(tuple(sorted(dataset.class_dims.items())), int(dataset.max_depth))

    @property
    def k(self) -> int:
        return len(self.class_dims)

    @property
    def covariate_length(self) -> int:
        return sum(d for _, d in self.class_dims)

    @property
    def length(self) -> int:
        return self.covariate_length + self.k * self.max_depth

    def to_json(self) -> dict[str, Any]:
        return {"class_dims": [list(p) for p in self.class_dims], "max_depth": self.max_depth}

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "UnitarySchema":
        return cls(tuple((int(a), int(b)) for a, b in doc["class_dims"]), int(doc["max_depth"]))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json()).encode()).hexdigest()[:16]


def flatten_unitary(unit: StructuredUnit, schema: UnitarySchema) -> np.ndarray:
    """Fixed-length vector: class-mean covariates then per-depth instance counts.

    Classes absent from the unit contribute zeros.
    """
    g = unit.graph
    depth = g.depth_of
    if g.depth > schema.max_depth:
        raise ValueError(f"unit {unit.unit_id} depth {g.depth} exceeds schema max_depth {schema.max_depth}")
    out = np.zeros(schema.length)
    offset = 0
    slot = {}
    for j, (c, d) in enumerate(schema.class_dims):
        slot[c] = (j, offset, d)
        offset += d
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for n, c in g.nodes:
        if c not in slot:
            raise ValueError(f"unit {unit.unit_id} uses class {c} unknown to the schema")
        j, off, d = slot[c]
        sums[c] = sums.get(c, 0.0) + unit.covariates[n]
        counts[c] = counts.get(c, 0) + 1
        out[schema.covariate_length + j * schema.max_depth + depth[n] - 1] += 1.0
    for c, s in sums.items():
        _, off, d = slot[c]
        out[off : off + d] = s / counts[c]
    return out


def flatten_many(units: Sequence[StructuredUnit], schema: UnitarySchema) -> np.ndarray:
    if not units:
        return np.zeros((0, schema.length))
    return np.stack([flatten_unitary(u, schema) for u in units])


def unit_covariates(unit: StructuredUnit, schema: UnitarySchema) -> np.ndarray:
    """Unit-level covariates: the mean-aggregated part of the flat vector."""
    return flatten_unitary(unit, schema)[: schema.covariate_length]


# ---------------------------------------------------------------------------
# JSONL format
# ---------------------------------------------------------------------------


def _outcome_to_json(o: Outcome) -> dict[str, Any]:
    if isinstance(o, PotentialOutcomes):
        return {"y0": float(o.y0), "y1": float(o.y1)}
    return {"t": int(o.t), "y": float(o.y)}


def _outcome_from_json(doc: Mapping[str, Any]) -> Outcome:
    if "y0" in doc:
        return PotentialOutcomes(float(doc["y0"]), float(doc["y1"]))
    return FactualOutcome(int(doc["t"]), float(doc["y"]))


def unit_to_record(unit: StructuredUnit) -> dict[str, Any]:
    depth = unit.graph.depth_of
    rec: dict[str, Any] = {
        "unit_id": unit.unit_id,
        "nodes": [
            {"id": n, "class": c, "depth": depth[n], "x": [float(v) for v in unit.covariates[n]]}
            for n, c in unit.graph.nodes
        ],
        "edges": [[p, c] for p, c in unit.graph.edges],
    }
    if unit.component_outcomes is not None:
        rec["y_components"] = {
            str(n): _outcome_to_json(o) for n, o in sorted(unit.component_outcomes.items())
        }
    if unit.unit_outcome is not None:
        rec["y_unit"] = _outcome_to_json(unit.unit_outcome)
    return rec


def unit_from_record(rec: Mapping[str, Any]) -> StructuredUnit:
    graph = InteractionGraph(
        tuple((nd["id"], nd["class"]) for nd in rec["nodes"]),
        tuple((p, c) for p, c in rec["edges"]),
    )
    cov = {int(nd["id"]): nd["x"] for nd in rec["nodes"]}
    comps = None
    if rec.get("y_components") is not None:
        comps = {int(k): _outcome_from_json(v) for k, v in rec["y_components"].items()}
    y = _outcome_from_json(rec["y_unit"]) if rec.get("y_unit") is not None else None
    unit = StructuredUnit(int(rec["unit_id"]), graph, cov, comps, y)
    stored = {int(nd["id"]): nd.get("depth") for nd in rec["nodes"]}
    if any(d is not None for d in stored.values()) and stored != graph.depth_of:
        raise ValueError(f"unit {unit.unit_id}: stored depths disagree with the graph")
    return unit


def dumps_unit(unit: StructuredUnit) -> str:
    return json.dumps(unit_to_record(unit), separators=(",", ":"))


def meta_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name.removesuffix(".jsonl") + ".meta.json")


def file_digest(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset(dataset: UnitDataset, path: Union[str, Path], **meta: Any) -> Path:
    """Write units as JSONL plus a ``.meta.json`` header sidecar.

    Output is byte-stable for identical inputs.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for u in dataset.units:
            fh.write(dumps_unit(u))
            fh.write("\n")
    header = {
        "kind": dataset.kind,
        "composition": dataset.composition.value,
        "class_dims": {str(k): v for k, v in sorted(dataset.class_dims.items())},
        "max_in_degree": dataset.max_in_degree,
        "max_depth": dataset.max_depth,
        "n_units": len(dataset),
        "data_hash": file_digest(path),
    }
    header.update({k: v for k, v in dataset.meta.items() if k not in header})
    header.update(meta)
    meta_path(path).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    dataset.meta.update(header)
    return path


def read_dataset(path: Union[str, Path]) -> UnitDataset:
    path = Path(path)
    mp = meta_path(path)
    header: dict[str, Any] = json.loads(mp.read_text()) if mp.exists() else {}
    with path.open(encoding="utf-8") as fh:
        units = [unit_from_record(json.loads(line)) for line in fh if line.strip()]
    if not header:
        dims: dict[int, int] = {}
        for u in units:
            for n, c in u.graph.nodes:
                dims[c] = u.covariates[n].shape[0]
        header = {"class_dims": dims, "composition": "hierarchical"}
    kind = header.get("kind")
    if kind is None:
        kind = "experimental" if units and units[0].is_experimental else "observational"
    cls = {"experimental": ExperimentalDataset, "observational": ObservationalDataset}.get(kind, UnitDataset)
    return cls(
        units,
        {int(k): int(v) for k, v in header["class_dims"].items()},
        CompositionKind(header["composition"]),
        int(header.get("max_in_degree", DEFAULT_MAX_IN_DEGREE)),
        header.get("max_depth"),
        header,
    )
