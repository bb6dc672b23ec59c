"""Flattened node tables for running per-class models over many trees at once."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..core import StructuredUnit, UnitarySchema, flatten_unitary


@dataclass
class NodeTable:
    """All nodes of a batch of units, in per-unit processing order.

    ``parents`` holds global row indices (``-1`` for empty slots), ``groups``
    maps ``(level, class)`` to the rows in that group; iterating levels in
    ascending order visits every parent before its child.
    """

    unit_index: np.ndarray
    cls: np.ndarray
    level: np.ndarray
    parents: np.ndarray
    sink: np.ndarray
    covariates: dict[int, np.ndarray]
    """Per class: covariate rows aligned with ``rows_of_class[c]``."""
    rows_of_class: dict[int, np.ndarray]
    groups: list[tuple[int, int, np.ndarray, np.ndarray]]
    """``(level, class, rows, positions)``; positions index into the class covariates."""
    n_units: int

    @property
    def n_nodes(self) -> int:
        return self.cls.shape[0]

    @property
    def is_sink(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[self.sink] = True
        return mask


def build_table(
    units: Sequence[StructuredUnit],
    max_in_degree: int,
    unit_level_schema: UnitarySchema | None = None,
) -> NodeTable:
    """Tabulate nodes of ``units``.

    When ``unit_level_schema`` is given, every node carries its unit's
    mean-aggregated covariates instead of its own.
    """
    unit_index, cls, level, sink = [], [], [], []
    parents: list[list[int]] = []
    cov_rows: dict[int, list[np.ndarray]] = {}
    rows_of: dict[int, list[int]] = {}
    row = 0
    for ui, u in enumerate(units):
        g = u.graph
        depth = g.depth_of
        order = sorted(g.class_of)  # any order; parents resolved by id map
        local = {n: row + i for i, n in enumerate(order)}
        shared = None
        if unit_level_schema is not None:
            shared = flatten_unitary(u, unit_level_schema)[: unit_level_schema.covariate_length]
        for n in order:
            c = g.class_of[n]
            ps = [local[p] for p in g.parents[n]]
            if len(ps) > max_in_degree:
                raise ValueError(f"unit {u.unit_id}: node {n} exceeds in-degree {max_in_degree}")
            parents.append(ps + [-1] * (max_in_degree - len(ps)))
            unit_index.append(ui)
            cls.append(c)
            level.append(depth[n])
            cov_rows.setdefault(c, []).append(shared if shared is not None else u.covariates[n])
            rows_of.setdefault(c, []).append(local[n])
        sink.append(local[g.sink])
        row += len(order)
    cls_a = np.array(cls, dtype=int)
    level_a = np.array(level, dtype=int)
    covariates = {c: np.asarray(v, dtype=float) for c, v in cov_rows.items()}
    rows_of_class = {c: np.array(v, dtype=int) for c, v in rows_of.items()}
    position = np.empty(row, dtype=int)
    for c, rows in rows_of_class.items():
        position[rows] = np.arange(rows.shape[0])
    groups = []
    for lv in np.unique(level_a):
        at = level_a == lv
        for c in np.unique(cls_a[at]):
            rows = np.flatnonzero(at & (cls_a == c))
            groups.append((int(lv), int(c), rows, position[rows]))
    par = np.array(parents, dtype=int).reshape(row, max_in_degree)
    return NodeTable(
        np.array(unit_index, dtype=int),
        cls_a,
        level_a,
        par,
        np.array(sink, dtype=int),
        covariates,
        rows_of_class,
        groups,
        len(units),
    )


def component_inputs(
    cov: np.ndarray,
    parent_values: np.ndarray | None,
    parent_mask: np.ndarray | None,
    t: np.ndarray,
) -> np.ndarray:
    """Assemble ``[covariates, parent values, parent masks, t]`` rows.

    Parent slots are omitted entirely when ``parent_values`` is ``None``
    (parallel composition).
    """
    cols = [cov]
    if parent_values is not None:
        cols.append(parent_values)
        cols.append(parent_mask)
    cols.append(np.asarray(t, dtype=float).reshape(-1, 1))
    return np.concatenate(cols, axis=1)
