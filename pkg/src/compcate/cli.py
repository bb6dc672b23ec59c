"""Command-line pipeline: generate/simulate → bias → train → infer/eval, plus sweeps.

Every subcommand reads an optional TOML config, validates it against a JSON
schema, applies command-line overrides and writes the resolved config next
to its outputs. Failures print one JSON line on stderr and exit with a
category-specific status.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import tomli

from . import __version__
from .bias import BiasPolicy, read_truth, sample_observational, truth_path, write_truth
from .core import (
    CompositionKind,
    InvalidGraphError,
    UnitarySchema,
    file_digest,
    read_dataset,
    write_dataset,
)
from .dgp import DgpConfig, expected_outcomes, generate_experimental_dataset, load_classes, sample_classes, save_classes
from .estimators import estimate, load_model, read_manifest, save_model
from .evaluation import ExperimentConfig, ResultTable, SplitSpec, fit_estimator, run_experiment, score, split_compgen
from .fabsim import SimConfig, export_layouts, generate_manufacturing_dataset
from .learner import TrainConfig, TrainingError

log = logging.getLogger("compcate")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5
SEED_ENV = "COMPCATE_SEED"
COMMANDS = ("generate", "simulate", "bias", "train", "infer", "eval", "sweep")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str) -> None:
        super().__init__(message)
        self.code = code
        self.kind = kind


_int = {"type": "integer"}
_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": _pos_int,
                "k": _pos_int,
                "d": _pos_int,
                "composition": {"enum": [c.value for c in CompositionKind]},
                "structure": {"enum": ["variable", "fixed"]},
                "max_depth": _pos_int,
                "min_depth": _pos_int,
                "combination_sizes": {"type": "array", "items": _pos_int, "minItems": 2, "maxItems": 2},
                "branch_prob": {"type": "number", "minimum": 0, "maximum": 1},
                "max_nodes": _pos_int,
                "covariate_degree": {"type": "integer", "minimum": 1, "maximum": 3},
                "parent_degree": {"type": "integer", "minimum": 1, "maximum": 3},
                "parent_coef_range": _pair,
                "noise_max": {"type": "number", "minimum": 0},
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_units": _pos_int,
                "layout_seed": {"type": "integer", "minimum": 0},
                "pool_sizes": {"type": "array", "items": _pos_int, "minItems": 2, "maxItems": 2},
                "skill_mean": _pair,
                "skill_sd": _pair,
                "scrap_coef": {"type": "number", "minimum": 0, "maximum": 1},
                "rework_coef": {"type": "number", "minimum": 0, "maximum": 1},
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "demand": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
                "inventory_slack": _pair,
            },
        },
        "bias": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["tree_depth", "covariate_sum"]},
                "alpha": {"type": "number", "minimum": 0},
                "clamp": _pair,
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "estimator": {"enum": ["compositional", "s_learner", "t_learner", "x_learner"]},
                "case": {"enum": ["xy", "y_only", "x_only", "neither"]},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": _pos_int,
                "epochs": _pos_int,
                "hidden": _pos_int,
                "n_hidden_layers": {"type": "integer", "minimum": 0},
                "cosine_schedule": {"type": "boolean"},
                "mse_warmup": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "n_samples": _pos_int,
                "representation_dim": _pos_int,
            },
        },
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["wid", "depth", "combos", "bias"]},
                "k": _pos_int,
                "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "eval_depth": _pos_int,
                "test_size": _pos_int,
                "alphas": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dataset": {"type": "string"},
                "estimators": {
                    "type": "array",
                    "items": {"enum": ["compositional", "s_learner", "t_learner", "x_learner"]},
                    "minItems": 1,
                },
                "cases": {"type": "array", "items": {"enum": ["xy", "y_only", "x_only", "neither"]}, "minItems": 1},
                "n_train": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "bias_kind": {"enum": ["tree_depth", "covariate_sum"]},
            },
        },
    },
}

TRAIN_KEYS = ("learning_rate", "batch_size", "epochs", "hidden", "n_hidden_layers", "cosine_schedule", "mse_warmup")


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except FileNotFoundError as exc:
        raise CliError(EXIT_CONFIG, "config", f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise CliError(EXIT_CONFIG, "config", f"{path}: {exc}") from exc
    validate_config(doc)
    return doc


def validate_config(doc: dict[str, Any]) -> None:
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise CliError(EXIT_CONFIG, "config", f"{where}: {err.message}")


def resolve_seed(cfg: dict[str, Any], flag: int | None) -> int:
    """Command-line flag, then the environment override, then the config."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None and env != "":
        try:
            value = int(env)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, "config", f"{SEED_ENV} must be an integer, got {env!r}") from exc
        if value < 0:
            raise CliError(EXIT_CONFIG, "config", f"{SEED_ENV} must be non-negative")
        return value
    return int(cfg.get("seed", 0))


def config_hash(cfg: dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_resolved(out: Path, cfg: dict[str, Any]) -> str:
    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    doc = {"tool_version": __version__, "config_hash": digest, "config": cfg}
    (out / "config.resolved.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return digest


def provenance(cfg: dict[str, Any], seed: int) -> dict[str, Any]:
    return {"tool_version": __version__, "config_hash": config_hash(cfg), "seed": seed}


def train_config(section: dict[str, Any], seed: int) -> TrainConfig:
    return TrainConfig(seed=seed, **{k: section[k] for k in TRAIN_KEYS if k in section})


def split_spec(section: dict[str, Any], seed: int) -> SplitSpec:
    doc = dict(section)
    if "alphas" in doc:
        doc["alphas"] = tuple(doc["alphas"])
    try:
        return SplitSpec(seed=seed, **doc)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, "config", f"split: {exc}") from exc


def require(path: str | None, flag: str) -> Path:
    if not path:
        raise CliError(EXIT_USAGE, "usage", f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_DATA, "data", f"{flag} {path} does not exist")
    return p


def classes_path(path: Path) -> Path:
    return path.with_name(path.name.removesuffix(".jsonl") + ".classes.json")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args, cfg: dict[str, Any], seed: int) -> dict[str, Any]:
    section = dict(cfg.get("dataset", {}))
    try:
        dgp = DgpConfig(seed=seed, **section)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, "config", f"dataset: {exc}") from exc
    resolved = {"seed": seed, "dataset": {k: v for k, v in dgp.to_json().items() if k != "seed"}}
    out = Path(args.out)
    write_resolved(out, resolved)
    classes = sample_classes(dgp)
    data = generate_experimental_dataset(dgp, classes)
    path = out / "data.jsonl"
    save_classes(classes, classes_path(path), **provenance(resolved, seed))
    write_dataset(data, path, **provenance(resolved, seed))
    return {"dataset": str(path), "n_units": len(data)}


def cmd_simulate(args, cfg: dict[str, Any], seed: int) -> dict[str, Any]:
    section = dict(cfg.get("simulation", {}))
    n_units = int(section.pop("n_units", 1000))
    layout_seed = section.pop("layout_seed", None)
    for key in ("pool_sizes", "skill_mean", "skill_sd", "demand", "inventory_slack"):
        if key in section:
            section[key] = tuple(section[key])
    try:
        sim = SimConfig(**section)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, "config", f"simulation: {exc}") from exc
    resolved = {"seed": seed, "simulation": dict(sim.to_json(), n_units=n_units, layout_seed=layout_seed)}
    out = Path(args.out)
    write_resolved(out, resolved)
    data = generate_manufacturing_dataset(n_units, seed, sim, jobs=args.jobs, layout_seed=layout_seed)
    path = out / "data.jsonl"
    write_dataset(data, path, **provenance(resolved, seed))
    export_layouts(out / "layouts.json", seed if layout_seed is None else layout_seed)
    return {"dataset": str(path), "n_units": len(data)}


def cmd_bias(args, cfg: dict[str, Any], seed: int) -> dict[str, Any]:
    src = require(args.dataset, "--dataset")
    section = dict(cfg.get("bias", {}))
    if args.alpha is not None:
        section["alpha"] = args.alpha
    section.setdefault("kind", "tree_depth")
    section.setdefault("alpha", 0.0)
    try:
        policy = BiasPolicy(section["kind"], float(section["alpha"]), tuple(section.get("clamp", (0.01, 0.99))))
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, "config", f"bias: {exc}") from exc
    data = read_dataset(src)
    if data.kind != "experimental":
        raise CliError(EXIT_DATA, "data", f"{src} does not carry both potential outcomes")
    tau = None
    cp = classes_path(src)
    if cp.exists():
        classes = load_classes(cp)
        tau = {u.unit_id: expected_outcomes(u, classes, data.composition).effect for u in data}
    resolved = {
        "seed": seed,
        "bias": {"kind": policy.kind, "alpha": policy.alpha, "clamp": list(policy.clamp)},
        "source_hash": file_digest(src),
    }
    out = Path(args.out)
    write_resolved(out, resolved)
    obs, truth = sample_observational(data, policy, seed, tau)
    path = out / "factual.jsonl"
    write_truth(truth, truth_path(path))
    write_dataset(obs, path, truth_hash=file_digest(truth_path(path)), source_hash=file_digest(src), **provenance(resolved, seed))
    treated = float(obs.treatments.mean())
    return {"dataset": str(path), "n_units": len(obs), "treated_fraction": treated}


def _factual(path: Path):
    data = read_dataset(path)
    if data.kind != "observational":
        raise CliError(EXIT_DATA, "data", f"{path} is not a factual dataset; run `bias` first")
    return data


def cmd_train(args, cfg: dict[str, Any], seed: int) -> dict[str, Any]:
    src = require(args.dataset, "--dataset")
    section = dict(cfg.get("train", {}))
    estimator = args.estimator or section.get("estimator", "compositional")
    case = args.case or section.get("case", "xy")
    n_samples = int(section.get("n_samples", 1000))
    split_section = dict(cfg.get("split", {}))
    spec = split_spec(split_section, seed)
    tc = train_config(section, seed)
    resolved = {
        "seed": seed,
        "train": dict(asdict(tc), estimator=estimator, case=case, n_samples=n_samples),
        "split": spec.to_json(),
    }
    out = Path(args.out)
    write_resolved(out, resolved)
    data = _factual(src)
    schema = UnitarySchema.from_dataset(data)
    train, test = split_compgen(data, spec)
    model = fit_estimator(estimator, train, case, tc, schema, n_samples)
    save_model(
        model,
        out / "model",
        estimator=estimator,
        dataset_hash=file_digest(src),
        split=spec.to_json(),
        n_train=len(train),
        **provenance(resolved, seed),
    )
    return {"model": str(out / "model"), "n_train": len(train), "n_test": len(test)}


def _check_schema(model, data) -> None:
    if model.schema.digest() != UnitarySchema.from_dataset(data).digest():
        raise CliError(EXIT_DATA, "data", "dataset schema does not match the model's schema")


def cmd_infer(args, cfg: dict[str, Any], seed: int) -> dict[str, Any]:
    mdir = require(args.model, "--model")
    src = require(args.dataset, "--dataset")
    model = load_model(mdir)
    data = read_dataset(src)
    _check_schema(model, data)
    resolved = {"seed": seed, "model_config_hash": read_manifest(mdir).get("config_hash"), "dataset_hash": file_digest(src)}
    out = Path(args.out)
    write_resolved(out, resolved)
    est = estimate(model, data.units, None, seed)
    path = out / "cate.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit_id", "tau", "y0", "y1", "se"])
        for e in est:
            w.writerow([e.unit_id, repr(e.tau), repr(e.y0), repr(e.y1), "" if e.se is None else repr(e.se)])
    return {"estimates": str(path), "n_units": len(est)}


def cmd_eval(args, cfg: dict[str, Any], seed: int) -> dict[str, Any]:
    mdir = require(args.model, "--model")
    src = require(args.dataset, "--dataset")
    manifest = read_manifest(mdir)
    if manifest.get("dataset_hash") != file_digest(src):
        raise CliError(EXIT_DATA, "data", "dataset hash differs from the one the model was trained on")
    tp = truth_path(src)
    if not tp.exists():
        raise CliError(EXIT_DATA, "data", f"truth sidecar {tp} not found")
    data = _factual(src)
    if data.meta.get("truth_hash") not in (None, file_digest(tp)):
        raise CliError(EXIT_DATA, "data", "truth sidecar hash does not match the dataset header")
    model = load_model(mdir)
    _check_schema(model, data)
    spec = SplitSpec.from_json(manifest["split"])
    _, test = split_compgen(data, spec)
    truth = {r.unit_id: r for r in read_truth(tp)}
    resolved = {"seed": seed, "model_config_hash": manifest.get("config_hash"), "dataset_hash": file_digest(src)}
    out = Path(args.out)
    write_resolved(out, resolved)
    est = estimate(model, test.units, None, seed)
    p, r = score(est, truth)
    table = ResultTable()
    table.add(
        {
            "estimator": manifest.get("estimator", manifest["kind"]),
            "case": manifest.get("case", ""),
            "split": spec.label,
            "alpha": float(data.meta.get("bias", {}).get("alpha", float("nan"))),
            "n_train": manifest.get("n_train", ""),
            "seed": seed,
            "pehe": p,
            "r2": r,
            "error": "",
        }
    )
    table.write(out / "results.csv")
    doc = dict(provenance(resolved, seed), dataset_hash=file_digest(src), truth_hash=file_digest(tp), n_rows=1)
    (out / "results.manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return {"results": str(out / "results.csv"), "pehe": p, "r2": r}


def cmd_sweep(args, cfg: dict[str, Any], seed: int) -> dict[str, Any]:
    section = dict(cfg.get("sweep", {}))
    dataset = args.dataset or section.get("dataset")
    src = require(dataset, "--dataset")
    estimators = [args.estimator] if args.estimator else section.get("estimators", ["compositional", "s_learner"])
    cases = [args.case] if args.case else section.get("cases", ["xy"])
    train_section = dict(cfg.get("train", {}))
    spec = split_spec(dict(cfg.get("split", {})), seed)
    n_train = tuple(n if n else None for n in section.get("n_train", [0]))
    config = ExperimentConfig(
        dataset=str(src),
        estimators=tuple(estimators),
        cases=tuple(cases),
        split=spec,
        n_train=n_train,
        seeds=tuple(section.get("seeds", [seed])),
        bias_kind=section.get("bias_kind", "tree_depth"),
        train=train_config(train_section, seed),
        n_samples=int(train_section.get("n_samples", 1000)),
        jobs=args.jobs,
    )
    resolved = dict(config.to_json(), dataset=Path(dataset).name, seed=seed)
    out = Path(args.out)
    write_resolved(out, resolved)
    table = run_experiment(config, out)
    failed = sum(1 for r in table.rows if r["error"])
    return {"results": str(out / "results.csv"), "rows": len(table.rows), "failed": failed}


HANDLERS = {
    "generate": cmd_generate,
    "simulate": cmd_simulate,
    "bias": cmd_bias,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compcate", description="Compositional CATE estimation pipeline.")
    parser.add_argument("--version", action="version", version=f"compcate {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    helps = {
        "generate": "synthetic experimental dataset (+ class oracle sidecar)",
        "simulate": "manufacturing-line dataset from the discrete-event simulator",
        "bias": "factual dataset with biased treatment assignment (+ truth sidecar)",
        "train": "fit an estimator on the training split; writes a model bundle",
        "infer": "per-unit CATE estimates as CSV",
        "eval": "score a model on its test split against the truth sidecar",
        "sweep": "run a configured experiment sweep",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, help=f"root seed (overrides {SEED_ENV} and the config)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--dataset", help="input dataset (JSONL)")
        p.add_argument("--estimator", choices=("compositional", "s_learner", "t_learner", "x_learner"))
        p.add_argument("--case", choices=("xy", "y_only", "x_only", "neither"))
        p.add_argument("--alpha", type=float, help="bias strength")
        p.add_argument("--model", help="model bundle directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
    return parser


def _fail(err: CliError) -> int:
    sys.stderr.write(json.dumps({"error": err.kind, "message": str(err), "exit_code": err.code}) + "\n")
    return err.code


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        if args.jobs < 1:
            raise CliError(EXIT_USAGE, "usage", "--jobs must be >= 1")
        if args.seed is not None and args.seed < 0:
            raise CliError(EXIT_USAGE, "usage", "--seed must be non-negative")
        cfg = load_config(args.config)
        seed = resolve_seed(cfg, args.seed)
        summary = HANDLERS[args.command](args, cfg, seed)
    except CliError as err:
        return _fail(err)
    except (TrainingError, FloatingPointError, OverflowError) as exc:
        return _fail(CliError(EXIT_NUMERIC, "numeric", str(exc)))
    except (FileNotFoundError, InvalidGraphError, json.JSONDecodeError, KeyError, ValueError) as exc:
        return _fail(CliError(EXIT_DATA, "data", f"{type(exc).__name__}: {exc}"))
    sys.stdout.write(json.dumps(dict(summary, command=args.command), sort_keys=True) + "\n")
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run_command())


if __name__ == "__main__":
    main()
