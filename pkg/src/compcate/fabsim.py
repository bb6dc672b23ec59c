"""Discrete-event manufacturing-line simulator.

A layout is a tree of process stations feeding a final Assembly station.
Every station turns one part from each upstream station, plus raw items
from its share of the plant inventory, into one new part. Stations run
concurrently with one worker at a time; the worker for each part is drawn
from the plant's pool and needs ``base_time * complexity / skill`` time
units. Low skill makes scrap (the part is lost) and rework (the cycle is
repeated) more likely.

The treatment is the worker pool: arm 0 has a few highly skilled workers,
arm 1 many less skilled ones. The unit outcome is the number of finished
parts leaving the sink within the time horizon. A station's counters depend
only on its own inputs, worker draws and the parts its parents deliver.
"""

from __future__ import annotations

import enum
import heapq
import json
from dataclasses import dataclass, field
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
    "ARCHETYPES",
    "COVARIATE_NAMES",
    "Archetype",
    "Item",
    "Layout",
    "ProcessArchetype",
    "SimConfig",
    "SimResult",
    "SimRun",
    "StationStats",
    "WorkerPool",
    "allocate_inventory",
    "build_layout",
    "export_layouts",
    "generate_manufacturing_dataset",
    "sample_run",
    "simulate_run",
    "station_covariates",
]

N_LAYOUTS = 50
MAX_PARENTS = 2
DRAW_CHUNK = 256


class Archetype(enum.IntEnum):
    """Station kinds; the integer value doubles as the component class id."""

    MATERIAL_PROCESSING = 0
    MATERIAL_JOINING = 1
    ELECTRONICS_PROCESSING = 2
    ASSEMBLY = 3


class Item(enum.IntEnum):
    """Raw-item kinds held in the plant inventory."""

    FASTENER = 0
    ELECTRONIC_COMPONENT = 1
    RAW_MATERIAL = 2
    MISC_COMPONENT = 3


@dataclass(frozen=True)
class ProcessArchetype:
    """Static description of a station kind.

    Attributes:
        kind: which archetype this is.
        base_time: range ``(lo, hi)`` the per-station base processing time is
            drawn from.
        complexity: range of the per-station complexity multiplier.
        arity: allowed input counts (upstream parts plus raw items per part).
        max_parents: how many upstream stations may feed the station.
        raw_item: the inventory item used to fill inputs not supplied by
            upstream stations.
    """

    kind: Archetype
    base_time: tuple[float, float]
    complexity: tuple[float, float]
    arity: tuple[int, ...]
    max_parents: int
    raw_item: Item

    def __post_init__(self) -> None:
        if not 0 < self.base_time[0] <= self.base_time[1]:
            raise ValueError("base time must be positive")
        if not 0 < self.complexity[0] <= self.complexity[1]:
            raise ValueError("complexity must be positive")
        if min(self.arity) < 1 or self.max_parents > max(self.arity):
            raise ValueError(f"{self.kind.name}: inconsistent arity")


ARCHETYPES: dict[Archetype, ProcessArchetype] = {
    Archetype.MATERIAL_PROCESSING: ProcessArchetype(
        Archetype.MATERIAL_PROCESSING, (1.0, 3.0), (1.0, 1.5), (1,), 1, Item.RAW_MATERIAL
    ),
    Archetype.MATERIAL_JOINING: ProcessArchetype(
        Archetype.MATERIAL_JOINING, (2.0, 4.0), (1.0, 2.0), (2,), 2, Item.FASTENER
    ),
    Archetype.ELECTRONICS_PROCESSING: ProcessArchetype(
        Archetype.ELECTRONICS_PROCESSING, (2.0, 5.0), (1.5, 2.5), (2, 3), 2, Item.ELECTRONIC_COMPONENT
    ),
    Archetype.ASSEMBLY: ProcessArchetype(
        Archetype.ASSEMBLY, (3.0, 6.0), (1.0, 2.0), (2, 3, 4), 2, Item.MISC_COMPONENT
    ),
}


@dataclass(frozen=True)
class Station:
    id: int
    kind: Archetype
    base_time: float
    complexity: float
    arity: int

    @property
    def cycle(self) -> float:
        """Processing time with a perfectly skilled worker."""
        return self.base_time * self.complexity


@dataclass(frozen=True)
class Layout:
    """A production line: a station tree whose sink is an Assembly station."""

    layout_id: int
    graph: InteractionGraph
    stations: tuple[Station, ...]

    def __post_init__(self) -> None:
        if self.stations[self.graph.sink].kind is not Archetype.ASSEMBLY:
            raise ValueError("the final station must be an Assembly station")
        for s in self.stations:
            n_par = len(self.graph.parents[s.id])
            if n_par > ARCHETYPES[s.kind].max_parents or s.arity < n_par:
                raise ValueError(f"station {s.id} has too many upstream stations")

    def raw_inputs(self, station: int) -> int:
        return self.stations[station].arity - len(self.graph.parents[station])

    def requirement(self) -> np.ndarray:
        """Raw items of each kind consumed per finished part of every station."""
        need = np.zeros(len(Item), dtype=int)
        for s in self.stations:
            need[ARCHETYPES[s.kind].raw_item] += self.raw_inputs(s.id)
        return need

    def upstream_count(self, station: int) -> int:
        count, stack = 0, list(self.graph.parents[station])
        while stack:
            count += 1
            stack.extend(self.graph.parents[stack.pop()])
        return count

    def to_json(self) -> dict[str, Any]:
        return {
            "layout_id": self.layout_id,
            "edges": [list(e) for e in self.graph.edges],
            "stations": [
                {
                    "id": s.id,
                    "kind": s.kind.name,
                    "base_time": s.base_time,
                    "complexity": s.complexity,
                    "arity": s.arity,
                }
                for s in self.stations
            ],
        }


def build_layout(layout_id: int, seed: int = 0) -> Layout:
    """Deterministically construct layout ``layout_id`` of the library.

    Stations are attached one at a time as suppliers of a randomly chosen
    station that still has a free input slot, starting from the final
    Assembly station. Ids are then relabelled in processing order so the
    sink has the largest id.
    """
    if not 0 <= layout_id < N_LAYOUTS:
        raise ValueError(f"layout id must lie in [0, {N_LAYOUTS}), got {layout_id}")
    rng = substream(seed, "layout", layout_id)
    size = int(rng.integers(3, 13))
    kinds = [Archetype.ASSEMBLY]
    parents: list[list[int]] = [[]]
    for new in range(1, size):
        open_slots = [
            n for n, k in enumerate(kinds) if len(parents[n]) < min(MAX_PARENTS, ARCHETYPES[k].max_parents)
        ]
        target = open_slots[int(rng.integers(len(open_slots)))]
        parents[target].append(new)
        parents.append([])
        kinds.append(Archetype(int(rng.integers(len(Archetype)))))
    base = [float(rng.uniform(*ARCHETYPES[k].base_time)) for k in kinds]
    cx = [float(rng.uniform(*ARCHETYPES[k].complexity)) for k in kinds]
    arity = []
    for n, k in enumerate(kinds):
        allowed = [a for a in ARCHETYPES[k].arity if a >= len(parents[n])]
        arity.append(int(allowed[int(rng.integers(len(allowed)))]))

    draft = InteractionGraph(
        tuple((n, int(k)) for n, k in enumerate(kinds)),
        tuple((p, c) for c in range(size) for p in parents[c]),
    )
    new_id = {old: new for new, old in enumerate(post_order(draft))}
    graph = InteractionGraph(
        tuple(sorted((new_id[n], int(k)) for n, k in enumerate(kinds))),
        tuple(sorted((new_id[p], new_id[c]) for p, c in draft.edges)),
    )
    stations = [None] * size
    for old in range(size):
        n = new_id[old]
        stations[n] = Station(n, kinds[old], base[old], cx[old], arity[old])
    return Layout(layout_id, graph, tuple(stations))


def export_layouts(path: str | Path, seed: int = 0) -> Path:
    """Write the whole layout library as JSON for inspection."""
    path = Path(path)
    doc = {"seed": seed, "layouts": [build_layout(i, seed).to_json() for i in range(N_LAYOUTS)]}
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# Workers and runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimConfig:
    """Knobs of the simulator and the dataset generator.

    Attributes:
        pool_sizes: number of workers in arm 0 and arm 1.
        skill_mean: mean of the per-arm skill distribution.
        skill_sd: standard deviation of the per-arm skill distribution.
        scrap_coef: scrap probability is ``scrap_coef * (1 - skill)``.
        rework_coef: rework probability is ``rework_coef * (1 - skill)``.
        horizon: simulated time budget; ``None`` runs until the line drains.
        demand: inclusive range of the product demand.
        inventory_slack: inventory of each item is the exact requirement for
            the demand scaled by a factor drawn from this range.
    """

    pool_sizes: tuple[int, int] = (5, 15)
    skill_mean: tuple[float, float] = (0.8, 0.5)
    skill_sd: tuple[float, float] = (0.1, 0.15)
    scrap_coef: float = 0.1
    rework_coef: float = 0.2
    horizon: float | None = 1500.0
    demand: tuple[int, int] = (5, 1000)
    inventory_slack: tuple[float, float] = (0.5, 1.5)

    def to_json(self) -> dict[str, Any]:
        return {
            "pool_sizes": list(self.pool_sizes),
            "skill_mean": list(self.skill_mean),
            "skill_sd": list(self.skill_sd),
            "scrap_coef": self.scrap_coef,
            "rework_coef": self.rework_coef,
            "horizon": self.horizon,
            "demand": list(self.demand),
            "inventory_slack": list(self.inventory_slack),
        }


@dataclass(frozen=True)
class WorkerPool:
    """Worker skills for one treatment arm, each in ``(0, 1]``."""

    arm: int
    skills: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.skills:
            raise ValueError("worker pool must not be empty")
        if not all(0.0 < s <= 1.0 for s in self.skills):
            raise ValueError("worker skills must lie in (0, 1]")

    @classmethod
    def sample(cls, arm: int, rng: np.random.Generator, config: SimConfig = SimConfig()) -> "WorkerPool":
        """Draw skills from the arm's Gaussian, truncated to ``(0, 1]`` by rejection."""
        size, mu, sd = config.pool_sizes[arm], config.skill_mean[arm], config.skill_sd[arm]
        out: list[float] = []
        while len(out) < size:
            draw = rng.normal(mu, sd, size=2 * size)
            out.extend(float(s) for s in draw if 0.0 < s <= 1.0)
        return cls(arm, tuple(out[:size]))


@dataclass(frozen=True)
class SimRun:
    """Everything a single simulation needs.

    Attributes:
        layout: the production line.
        demand: number of finished parts wanted.
        inventory: available count per raw-item kind, indexed by ``Item``.
        pool: worker pool (the treatment).
        seed: root of the per-station scrap/rework random streams.
        scrap_coef: scale of the skill-dependent scrap probability.
        rework_coef: scale of the skill-dependent rework probability.
        horizon: simulated time budget, ``None`` for unlimited.
    """

    layout: Layout
    demand: int
    inventory: tuple[int, ...]
    pool: WorkerPool
    seed: int
    scrap_coef: float = 0.1
    rework_coef: float = 0.2
    horizon: float | None = None

    def __post_init__(self) -> None:
        if self.demand < 0:
            raise ValueError("demand must be non-negative")
        if len(self.inventory) != len(Item) or min(self.inventory) < 0:
            raise ValueError(f"inventory needs {len(Item)} non-negative counts")
        if not (0 <= self.scrap_coef <= 1 and 0 <= self.rework_coef <= 1):
            raise ValueError("scrap and rework coefficients must lie in [0, 1]")


@dataclass
class StationStats:
    good: int = 0
    scrapped: int = 0
    reworked: int = 0
    consumed: int = 0
    busy_time: float = 0.0
    last_finish: float = 0.0


@dataclass
class SimResult:
    """Per-station counters and the unit-level outputs of one run."""

    stations: dict[int, StationStats]
    total_parts: int
    total_time: float
    inventory_used: tuple[int, ...] = field(default=())

    @property
    def output_per_time(self) -> float:
        return self.total_parts / self.total_time if self.total_time > 0 else 0.0


class _Draws:
    """Chunked uniform stream so both arms see the same draws per attempt."""

    __slots__ = ("rng", "buf", "pos")

    def __init__(self, rng: np.random.Generator) -> None:
        self.rng = rng
        self.buf = rng.random((DRAW_CHUNK, 3)).tolist()
        self.pos = 0

    def next(self) -> list[float]:
        if self.pos == DRAW_CHUNK:
            self.buf = self.rng.random((DRAW_CHUNK, 3)).tolist()
            self.pos = 0
        u = self.buf[self.pos]
        self.pos += 1
        return u


def allocate_inventory(layout: Layout, inventory: Sequence[int]) -> list[int]:
    """Split each raw-item stock across its consuming stations.

    A station's share is proportional to the items it uses per part, so a
    station never competes with others for raw items during a run.
    """
    need = layout.requirement()
    alloc = []
    for s in layout.stations:
        k = ARCHETYPES[s.kind].raw_item
        r = layout.raw_inputs(s.id)
        alloc.append(int(inventory[k] * r // need[k]) if r else 0)
    return alloc


def simulate_run(run: SimRun) -> SimResult:
    """Run the event queue until the horizon passes or no work remains.

    Stations work concurrently, each with at most one worker at a time. A
    station starts a part once it holds a part from every upstream station
    and enough raw items, and stops when it has met the demand. The worker
    for each part is drawn from the pool. Events are ordered by
    ``(time, station, event)``.
    """
    layout = run.layout
    graph = layout.graph
    n = len(layout.stations)
    parents = [graph.parents[s] for s in range(n)]
    child = [graph.children[s][0] if graph.children[s] else -1 for s in range(n)]
    raw_need = [layout.raw_inputs(s) for s in range(n)]
    stock = allocate_inventory(layout, run.inventory)
    cycle = [s.cycle for s in layout.stations]
    stats = {s: StationStats() for s in range(n)}
    buffer = [0] * n  # finished parts waiting at each station's output
    busy = [False] * n
    draws = [_Draws(substream(run.seed, "station", s)) for s in range(n)]
    skills = run.pool.skills
    n_workers = len(skills)
    horizon = float("inf") if run.horizon is None else run.horizon
    demand = run.demand
    queue: list[tuple[float, int, int, bool, bool, float]] = []
    event_id = 0

    def try_start(s: int, now: float) -> None:
        nonlocal event_id
        st = stats[s]
        if busy[s] or st.good >= demand or stock[s] < raw_need[s]:
            return
        for p in parents[s]:
            if buffer[p] == 0:
                return
        for p in parents[s]:
            buffer[p] -= 1
        stock[s] -= raw_need[s]
        st.consumed += 1
        u_worker, u_scrap, u_rework = draws[s].next()
        skill = skills[min(int(u_worker * n_workers), n_workers - 1)]
        duration = cycle[s] / skill
        rework = u_rework < run.rework_coef * (1.0 - skill)
        if rework:
            duration *= 2.0
        scrap = u_scrap < run.scrap_coef * (1.0 - skill)
        busy[s] = True
        heapq.heappush(queue, (now + duration, s, event_id, scrap, rework, now))
        event_id += 1

    if demand > 0:
        for s in range(n):
            try_start(s, 0.0)
    while queue:
        when, s, _, scrap, rework, started = heapq.heappop(queue)
        if when > horizon:
            break
        st = stats[s]
        st.busy_time += when - started
        busy[s] = False
        st.last_finish = when
        st.reworked += rework
        if scrap:
            st.scrapped += 1
        else:
            st.good += 1
            if child[s] >= 0:
                buffer[s] += 1
                try_start(child[s], when)
        try_start(s, when)
    used = tuple(int(a) for a in np.bincount(
        [int(ARCHETYPES[x.kind].raw_item) for x in layout.stations],
        weights=[raw_need[x] * stats[x].consumed for x in range(n)],
        minlength=len(Item),
    ))
    sink = graph.sink
    return SimResult(stats, stats[sink].good, stats[sink].last_finish, used)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

COVARIATE_NAMES = (
    "demand",
    "fastener_share",
    "electronic_share",
    "raw_material_share",
    "misc_share",
    "base_time",
    "complexity",
    "upstream_inputs",
    "raw_inputs",
    "upstream_stations",
    "raw_stock",
)


def station_covariates(layout: Layout, demand: int, inventory: Sequence[int], station: int) -> np.ndarray:
    """Pre-treatment features of one station.

    Inventory enters as the available count per unit of demand, so the
    features of a station are comparable across demands.
    """
    s = layout.stations[station]
    per_demand = [inv / max(demand, 1) for inv in inventory]
    stock = allocate_inventory(layout, inventory)[station]
    parts_from_stock = stock / layout.raw_inputs(station) if layout.raw_inputs(station) else demand
    return np.array(
        [
            demand / 1000.0,
            *per_demand,
            s.base_time,
            s.complexity,
            len(layout.graph.parents[station]),
            layout.raw_inputs(station),
            layout.upstream_count(station),
            parts_from_stock / max(demand, 1),
        ],
        dtype=float,
    )


def sample_run(
    unit_id: int, seed: int, config: SimConfig = SimConfig(), layout_seed: int | None = None
) -> tuple[Layout, int, tuple[int, ...], int]:
    """Draw ``(layout, demand, inventory, run_seed)`` for one unit."""
    rng = substream(seed, "unit", unit_id)
    layout = build_layout(int(rng.integers(N_LAYOUTS)), seed if layout_seed is None else layout_seed)
    demand = int(rng.integers(config.demand[0], config.demand[1] + 1))
    need = layout.requirement()
    slack = rng.uniform(*config.inventory_slack, size=len(Item))
    # items the layout never uses still get a stock level, so the share is informative noise
    inventory = tuple(int(np.floor(demand * max(k, 1) * f)) for k, f in zip(need, slack))
    run_seed = int(rng.integers(2**62))
    return layout, demand, inventory, run_seed


def _simulate_unit(args: tuple[int, int, SimConfig, int | None]) -> StructuredUnit:
    unit_id, seed, config, layout_seed = args
    layout, demand, inventory, run_seed = sample_run(unit_id, seed, config, layout_seed)
    results = []
    for arm in (0, 1):
        pool = WorkerPool.sample(arm, substream(seed, "workers", unit_id, arm), config)
        run = SimRun(layout, demand, inventory, pool, run_seed, config.scrap_coef, config.rework_coef, config.horizon)
        results.append(simulate_run(run))
    graph = layout.graph
    covariates = {n: station_covariates(layout, demand, inventory, n) for n in graph.class_of}
    comps = {
        n: PotentialOutcomes(float(results[0].stations[n].good), float(results[1].stations[n].good))
        for n in graph.class_of
    }
    unit_y = PotentialOutcomes(float(results[0].total_parts), float(results[1].total_parts))
    return StructuredUnit(unit_id, graph, covariates, comps, unit_y)


def generate_manufacturing_dataset(
    n_units: int,
    seed: int = 0,
    config: SimConfig = SimConfig(),
    jobs: int = 1,
    layout_seed: int | None = None,
) -> ExperimentalDataset:
    """Simulate ``n_units`` plants under both worker pools.

    Both arms of a unit share the layout, demand, inventory and the
    per-station scrap/rework random streams; only the worker pool differs.
    Component classes are the station archetypes and the composition is
    hierarchical (the unit outcome is the sink station's output).

    Args:
        n_units: number of units.
        seed: root seed of the dataset.
        config: simulator settings.
        jobs: worker processes; results do not depend on this.
        layout_seed: seed of the layout library; defaults to ``seed``.
    """
    if n_units < 1:
        raise ValueError("n_units must be at least 1")
    tasks = [(i, seed, config, layout_seed) for i in range(n_units)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            units = list(ex.map(_simulate_unit, tasks, chunksize=max(1, n_units // (8 * jobs))))
    else:
        units = [_simulate_unit(t) for t in tasks]
    return ExperimentalDataset(
        units,
        {int(a): len(COVARIATE_NAMES) for a in Archetype},
        CompositionKind.HIERARCHICAL,
        max_in_degree=MAX_PARENTS,
        max_depth=None,
        meta={
            "source": "fabsim",
            "seed": seed,
            "layout_seed": seed if layout_seed is None else layout_seed,
            "sim": config.to_json(),
        },
    )
