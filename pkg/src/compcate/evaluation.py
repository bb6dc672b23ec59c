"""Metrics, train/test splits and the experiment sweep runner."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .bias import BiasPolicy, TruthRecord, read_truth, reconstruct_experimental, sample_observational, truth_path
from .core import UnitarySchema, UnitDataset, file_digest, read_dataset, substream
from .estimators import estimate, fit_compositional, fit_unitary
from .learner import TrainConfig

log = logging.getLogger(__name__)

__all__ = [
    "ESTIMATORS",
    "RESULT_COLUMNS",
    "ExperimentConfig",
    "ResultTable",
    "SplitSpec",
    "fit_estimator",
    "pehe",
    "r2_score",
    "run_experiment",
    "score",
    "split_compgen",
]

ESTIMATORS = ("compositional", "s_learner", "t_learner", "x_learner")
SPLIT_KINDS = ("wid", "depth", "combos", "bias")
RESULT_COLUMNS = ("estimator", "case", "split", "alpha", "n_train", "seed", "pehe", "r2", "error")


def _pair(estimates: Sequence[float], truths: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    est = np.asarray(estimates, dtype=float).reshape(-1)
    tru = np.asarray(truths, dtype=float).reshape(-1)
    if est.shape != tru.shape:
        raise ValueError(f"length mismatch: {est.shape[0]} estimates vs {tru.shape[0]} truths")
    return est, tru


def pehe(estimates: Sequence[float], truths: Sequence[float]) -> float:
    """Mean squared error between estimated and true effects."""
    est, tru = _pair(estimates, truths)
    if est.size == 0:
        raise ValueError("need at least one estimate")
    return float(np.mean((est - tru) ** 2))


def r2_score(estimates: Sequence[float], truths: Sequence[float]) -> float:
    """Coefficient of determination of the estimates against the truths."""
    est, tru = _pair(estimates, truths)
    if est.size < 2:
        raise ValueError("R^2 needs at least two samples")
    ss_tot = float(np.sum((tru - tru.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R^2 is undefined for constant truths")
    return 1.0 - float(np.sum((est - tru) ** 2)) / ss_tot


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """How to divide a dataset into training and test units.

    Attributes:
        kind: ``wid`` (random), ``depth`` (train on shallow trees, test on a
            deeper evaluation depth), ``combos`` (train on units with at most
            ``k`` distinct classes, test on units containing every class) or
            ``bias`` (random split, swept over bias strengths ``alphas``).
        k: depth or class-combination bound for the generalization modes.
        test_fraction: share of eligible units held out for testing.
        eval_depth: test depth in ``depth`` mode; defaults to the deepest.
        test_size: absolute test-set size; overrides ``test_fraction``.
        alphas: bias strengths of a ``bias`` sweep.
        seed: seed of the held-out selection.
    """

    kind: str = "wid"
    k: int | None = None
    test_fraction: float = 0.2
    eval_depth: int | None = None
    test_size: int | None = None
    alphas: tuple[float, ...] = (0.0,)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in SPLIT_KINDS:
            raise ValueError(f"unknown split kind {self.kind!r}; expected one of {SPLIT_KINDS}")
        if self.kind in ("depth", "combos") and self.k is None:
            raise ValueError(f"{self.kind} split needs a bound k")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))

    @property
    def label(self) -> str:
        return self.kind if self.k is None else f"{self.kind}:{self.k}"

    def to_json(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["alphas"] = list(self.alphas)
        return doc

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "SplitSpec":
        doc = dict(doc)
        if "alphas" in doc:
            doc["alphas"] = tuple(doc["alphas"])
        return cls(**doc)


def _held_out(candidates: Sequence[int], spec: SplitSpec) -> set[int]:
    n = spec.test_size if spec.test_size is not None else int(round(spec.test_fraction * len(candidates)))
    n = min(max(n, 0), len(candidates))
    order = substream(spec.seed, "split", spec.kind).permutation(len(candidates))
    return {candidates[i] for i in order[:n]}


def split_compgen(dataset: UnitDataset, spec: SplitSpec) -> tuple[UnitDataset, UnitDataset]:
    """Disjoint ``(train, test)`` subsets of ``dataset`` according to ``spec``.

    The test set is chosen from the eligible units independently of ``k``,
    so sweeps over ``k`` share one test set.
    """
    units = list(dataset.units)
    ids = [u.unit_id for u in units]
    if len(set(ids)) != len(ids):
        raise ValueError("unit ids must be unique")
    if spec.kind in ("wid", "bias"):
        test_ids = _held_out(ids, spec)
        train = [u for u in units if u.unit_id not in test_ids]
    elif spec.kind == "depth":
        eval_depth = spec.eval_depth if spec.eval_depth is not None else max(u.depth for u in units)
        test_ids = _held_out([u.unit_id for u in units if u.depth == eval_depth], spec)
        train = [u for u in units if u.unit_id not in test_ids and u.depth <= spec.k]
    else:
        k_all = dataset.k
        if not 2 <= spec.k <= k_all:
            raise ValueError(f"combination bound must lie in [2, {k_all}], got {spec.k}")
        test_ids = _held_out([u.unit_id for u in units if len(u.class_set()) == k_all], spec)
        train = [u for u in units if u.unit_id not in test_ids and 2 <= len(u.class_set()) <= spec.k]
    test = [u for u in units if u.unit_id in test_ids]
    if not train:
        raise ValueError(f"split {spec.label} leaves no training units")
    if not test:
        raise ValueError(f"split {spec.label} leaves no test units")
    return dataset.subset(train), dataset.subset(test)


# ---------------------------------------------------------------------------
# Estimators and scoring
# ---------------------------------------------------------------------------


def fit_estimator(
    name: str,
    train: UnitDataset,
    case: str = "xy",
    config: TrainConfig | None = None,
    schema: UnitarySchema | None = None,
    n_samples: int = 1000,
):
    """Fit one of :data:`ESTIMATORS` on factual training data."""
    if name == "compositional":
        return fit_compositional(train, case, config=config, n_samples=n_samples, schema=schema)
    if name in ("s_learner", "t_learner", "x_learner"):
        return fit_unitary(train, name[0], schema, config)
    raise ValueError(f"unknown estimator {name!r}; expected one of {ESTIMATORS}")


def score(estimates: Iterable, truth: Mapping[int, TruthRecord]) -> tuple[float, float]:
    """``(PEHE, R^2)`` of CATE estimates against the truth table."""
    est = list(estimates)
    tau_hat = [e.tau for e in est]
    tau = [truth[e.unit_id].tau for e in est]
    return pehe(tau_hat, tau), r2_score(tau_hat, tau)


@dataclass
class ResultTable:
    """Sweep results, one row per cell; serialized as CSV."""

    rows: list[dict[str, Any]] = field(default_factory=list)

    @staticmethod
    def key(row: Mapping[str, Any]) -> tuple:
        return (row["estimator"], row["case"], row["split"], float(row["alpha"]), str(row["n_train"]), int(row["seed"]))

    def add(self, row: Mapping[str, Any]) -> None:
        self.rows.append({c: row.get(c, "") for c in RESULT_COLUMNS})

    def keys(self) -> set[tuple]:
        return {self.key(r) for r in self.rows}

    @staticmethod
    def _fmt(value: Any) -> str:
        if isinstance(value, float):
            return "" if math.isnan(value) else repr(value)
        return str(value)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in self.rows:
            w.writerow([self._fmt(r[c]) for c in RESULT_COLUMNS])
        return buf.getvalue()

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv())
        return path

    @classmethod
    def read(cls, path: str | Path) -> "ResultTable":
        table = cls()
        with Path(path).open(newline="") as fh:
            for r in csv.DictReader(fh):
                r["alpha"] = float(r["alpha"]) if r["alpha"] != "" else float("nan")
                r["seed"] = int(r["seed"])
                r["n_train"] = int(r["n_train"]) if r["n_train"] not in ("", "all") else r["n_train"]
                for m in ("pehe", "r2"):
                    r[m] = float(r[m]) if r[m] != "" else float("nan")
                table.add(r)
        return table


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """A cartesian sweep over estimators, cases, bias strengths, sizes and seeds.

    ``dataset`` is a factual JSONL file with its truth sidecar. With a
    ``bias`` split the experimental data is rebuilt from the truth table and
    re-biased at each strength.
    """

    dataset: str
    estimators: tuple[str, ...] = ("compositional", "s_learner")
    cases: tuple[str, ...] = ("xy",)
    split: SplitSpec = SplitSpec()
    n_train: tuple[int | None, ...] = (None,)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    bias_kind: str = "tree_depth"
    train: TrainConfig = TrainConfig()
    n_samples: int = 1000
    jobs: int = 1

    def cells(self) -> list[dict[str, Any]]:
        alphas = self.split.alphas if self.split.kind == "bias" else (None,)
        out = []
        for est, alpha, n, seed in product(self.estimators, alphas, self.n_train, self.seeds):
            for case in self.cases if est == "compositional" else ("",):
                out.append({"estimator": est, "case": case, "alpha": alpha, "n_train": n, "seed": seed})
        return out

    def to_json(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "estimators": list(self.estimators),
            "cases": list(self.cases),
            "split": self.split.to_json(),
            "n_train": list(self.n_train),
            "seeds": list(self.seeds),
            "bias_kind": self.bias_kind,
            "train": asdict(self.train),
            "n_samples": self.n_samples,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


_CACHE: dict[tuple[str, str], tuple[UnitDataset, list[TruthRecord]]] = {}


def _load_inputs(path: str) -> tuple[UnitDataset, list[TruthRecord]]:
    tp = truth_path(path)
    if not tp.exists():
        raise FileNotFoundError(f"truth sidecar {tp} not found")
    key = (str(Path(path).resolve()), file_digest(path) + file_digest(tp))
    if key not in _CACHE:
        _CACHE.clear()
        _CACHE[key] = (read_dataset(path), read_truth(tp))
    data, truth = _CACHE[key]
    return data.subset(data.units), list(truth)


def _run_cell(config: ExperimentConfig, cell: Mapping[str, Any]) -> dict[str, Any]:
    row = dict(cell, split=config.split.label)
    row["alpha"] = float(cell["alpha"]) if cell["alpha"] is not None else float("nan")
    row["n_train"] = cell["n_train"] if cell["n_train"] is not None else "all"
    try:
        data, truth = _load_inputs(config.dataset)
        if cell["alpha"] is not None:
            exp = reconstruct_experimental(data, truth)
            tau = {r.unit_id: r.tau for r in truth}
            data, truth = sample_observational(exp, BiasPolicy(config.bias_kind, cell["alpha"]), config.split.seed, tau)
            row["alpha"] = float(cell["alpha"])
        elif "bias" in data.meta:
            row["alpha"] = float(data.meta["bias"]["alpha"])
        schema = UnitarySchema.from_dataset(data)
        train, test = split_compgen(data, config.split)
        seed = int(cell["seed"])
        if cell["n_train"] is not None and cell["n_train"] < len(train):
            pick = np.sort(substream(seed, "subsample").permutation(len(train))[: cell["n_train"]])
            train = train.subset([train.units[i] for i in pick])
        model_seed = int(substream(seed, "model", cell["estimator"], cell["case"]).integers(2**31 - 1))
        model = fit_estimator(
            cell["estimator"], train, cell["case"] or "xy", config.train.replace(seed=model_seed), schema, config.n_samples
        )
        est = estimate(model, test.units, config.n_samples, seed)
        p, r = score(est, {t.unit_id: t for t in truth})
        if not (math.isfinite(p) and math.isfinite(r)):
            raise FloatingPointError("non-finite metric")
        row.update(pehe=p, r2=r, error="")
    except Exception as exc:  # one failing cell must not abort the sweep
        log.warning("cell %s failed: %s", cell, exc)
        row.update(pehe=float("nan"), r2=float("nan"), error=f"{type(exc).__name__}: {exc}")
    return row


def _cell_key(config: ExperimentConfig, cell: Mapping[str, Any]) -> tuple:
    return (
        cell["estimator"],
        cell["case"],
        config.split.label,
        float(cell["alpha"]) if cell["alpha"] is not None else float("nan"),
        str(cell["n_train"] if cell["n_train"] is not None else "all"),
        int(cell["seed"]),
    )


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None) -> ResultTable:
    """Run every cell of the sweep and collect one result row per cell.

    With ``out_dir`` the table is rewritten after each finished cell
    (``results.csv``) together with a manifest binding it to the dataset
    and config hashes, and a rerun skips cells already present. Rows come
    out in sweep order regardless of ``config.jobs``; wall-clock timings go
    to a separate ``timings.csv`` so the results file is reproducible.
    """
    _load_inputs(config.dataset)  # fail early on a missing truth sidecar
    cells = config.cells()
    done: dict[tuple, dict[str, Any]] = {}
    timings: dict[tuple, float] = {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        prev = out / "results.csv"
        if prev.exists() and _manifest_matches(out, config):
            for r in ResultTable.read(prev).rows:
                done[_row_key(config, r)] = r
            timings.update(_read_timings(out / "timings.csv"))

    def finish(cell: Mapping[str, Any], row: dict[str, Any], seconds: float) -> None:
        k = _normalize_key(_cell_key(config, cell))
        done[k] = row
        timings[k] = seconds
        if out is not None:
            _write_outputs(out, config, cells, done, timings)

    todo = [c for c in cells if _normalize_key(_cell_key(config, c)) not in done]
    if config.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as ex:
            futures = [(c, ex.submit(_timed_cell, config, c)) for c in todo]
            for c, fut in futures:
                row, seconds = fut.result()
                finish(c, row, seconds)
    else:
        for c in todo:
            row, seconds = _timed_cell(config, c)
            finish(c, row, seconds)
    table = _ordered(config, cells, done)
    if out is not None:
        _write_outputs(out, config, cells, done, timings)
    return table


def _timed_cell(config: ExperimentConfig, cell: Mapping[str, Any]) -> tuple[dict[str, Any], float]:
    start = time.perf_counter()
    row = _run_cell(config, cell)
    return row, time.perf_counter() - start


def _read_timings(path: Path) -> dict[tuple, float]:
    if not path.exists():
        return {}
    found = {}
    with path.open(newline="") as fh:
        for r in csv.DictReader(fh):
            alpha = "none" if r["alpha"] == "none" else float(r["alpha"])
            key = (r["estimator"], r["case"], r["split"], alpha, r["n_train"], int(r["seed"]))
            found[key] = float(r["seconds"])
    return found


def _row_key(config: ExperimentConfig, row: Mapping[str, Any]) -> tuple:
    key = _normalize_key(ResultTable.key(row))
    if config.split.kind != "bias":
        # outside a bias sweep the cell has no alpha; the row reports the dataset's
        key = key[:3] + ("none",) + key[4:]
    return key


def _normalize_key(key: tuple) -> tuple:
    # NaN never compares equal; use a sentinel for "no alpha"
    return tuple("none" if isinstance(v, float) and math.isnan(v) else v for v in key)


def _ordered(config: ExperimentConfig, cells, done) -> ResultTable:
    table = ResultTable()
    for c in cells:
        k = _normalize_key(_cell_key(config, c))
        if k in done:
            table.add(done[k])
    return table


def _manifest_matches(out: Path, config: ExperimentConfig) -> bool:
    mp = out / "results.manifest.json"
    if not mp.exists():
        return False
    doc = json.loads(mp.read_text())
    return doc.get("config_hash") == config.digest() and doc.get("dataset_hash") == file_digest(config.dataset)


def _write_outputs(out: Path, config: ExperimentConfig, cells, done, timings) -> None:
    table = _ordered(config, cells, done)
    table.write(out / "results.csv")
    manifest = {
        "tool_version": __version__,
        "config_hash": config.digest(),
        "dataset": Path(config.dataset).name,
        "dataset_hash": file_digest(config.dataset),
        "truth_hash": file_digest(truth_path(config.dataset)),
        "n_rows": len(table.rows),
        "n_cells": len(cells),
        "seeds": list(config.seeds),
    }
    (out / "results.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    lines = ["estimator,case,split,alpha,n_train,seed,seconds"]
    for k, secs in timings.items():
        lines.append(",".join(str(v) for v in k) + f",{secs:.3f}")
    (out / "timings.csv").write_text("\n".join(lines) + "\n")
