import csv
import json

import pytest

from compcate.cli import CONFIG_SCHEMA, SEED_ENV, CliError, resolve_seed, run_command, validate_config
from compcate.core import read_dataset
from conftest import cli_pipeline


def last_error(capsys) -> dict:
    lines = capsys.readouterr().err.strip().splitlines()
    return json.loads(lines[-1])


def resolved(out) -> dict:
    return json.loads((out / "config.resolved.json").read_text())


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text('seed = 3\n[dataset]\nn = 30\nk = 3\nmax_depth = 3\nmin_depth = 1\ncomposition = "hierarchical"\n')
    return path


# -- usage and config errors -------------------------------------------------


@pytest.mark.parametrize(
    "argv",
    [[], ["frobnicate", "--out", "x"], ["generate"], ["generate", "--out", "x", "--seed", "abc"],
     ["generate", "--out", "x", "--jobs", "0"], ["bias", "--out", "x"]],
)
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run_command(argv) == 2


@pytest.mark.parametrize(
    "text",
    ["seed = -1", "[dataset]\nn = 0", "[dataset]\ncolour = 1", "[train]\nestimator = 'r_learner'", "not toml ["],
)
def test_bad_config_exits_3(text, tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(text)
    assert run_command(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    err = last_error(capsys)
    assert err["error"] == "config" and err["exit_code"] == 3


def test_missing_config_exits_3(tmp_path):
    assert run_command(["generate", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 3


def test_semantic_config_error_exits_3(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[dataset]\ncombination_sizes = [3, 2]\n")
    assert run_command(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_schema_covers_every_section():
    assert set(CONFIG_SCHEMA["properties"]) == {"seed", "dataset", "simulation", "bias", "train", "split", "sweep"}
    validate_config({"seed": 1, "train": {"epochs": 3}})
    with pytest.raises(CliError):
        validate_config({"train": {"epochs": 0}})


# -- data errors -------------------------------------------------------------


def test_missing_dataset_exits_4(tmp_path, capsys):
    assert run_command(["bias", "--dataset", str(tmp_path / "none.jsonl"), "--out", str(tmp_path)]) == 4
    assert last_error(capsys)["error"] == "data"


def test_corrupt_dataset_exits_4(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert run_command(["bias", "--dataset", str(bad), "--out", str(tmp_path / "o")]) == 4


def test_training_on_experimental_data_exits_4(tmp_path, small_config):
    assert run_command(["generate", "--config", str(small_config), "--out", str(tmp_path / "g")]) == 0
    argv = ["train", "--dataset", str(tmp_path / "g" / "data.jsonl"), "--out", str(tmp_path / "t")]
    assert run_command(argv) == 4


def test_eval_without_truth_exits_4(tmp_path):
    dirs = cli_pipeline(tmp_path, estimator="s_learner")
    (dirs["bias"] / "factual.truth.jsonl").unlink()
    argv = ["eval", "--dataset", str(dirs["bias"] / "factual.jsonl"), "--model", str(dirs["train"] / "model"),
            "--out", str(tmp_path / "e2")]
    assert run_command(argv) == 4


# -- seeds -------------------------------------------------------------------


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert resolve_seed({"seed": 5}, None) == 5
    assert resolve_seed({}, None) == 0
    monkeypatch.setenv(SEED_ENV, "9")
    assert resolve_seed({"seed": 5}, None) == 9
    assert resolve_seed({"seed": 5}, 2) == 2
    monkeypatch.setenv(SEED_ENV, "nine")
    with pytest.raises(CliError):
        resolve_seed({}, None)


def test_env_seed_reaches_resolved_config(tmp_path, small_config, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "21")
    assert run_command(["generate", "--config", str(small_config), "--out", str(tmp_path / "a")]) == 0
    assert resolved(tmp_path / "a")["config"]["seed"] == 21
    assert run_command(["generate", "--config", str(small_config), "--seed", "4", "--out", str(tmp_path / "b")]) == 0
    doc = resolved(tmp_path / "b")
    assert doc["config"]["seed"] == 4 and doc["config"]["dataset"]["n"] == 30
    assert len(doc["config_hash"]) == 64


# -- outputs -----------------------------------------------------------------


def test_generate_is_byte_identical(tmp_path, small_config, capsys):
    for name in ("a", "b"):
        assert run_command(["generate", "--config", str(small_config), "--out", str(tmp_path / name)]) == 0
    summary = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert summary["command"] == "generate" and summary["n_units"] == 30
    for f in ("data.jsonl", "data.meta.json", "data.classes.json", "config.resolved.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_unbiased_assignment_via_cli(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[dataset]\nn = 2000\nk = 2\nmax_depth = 3\n")
    assert run_command(["generate", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    argv = ["bias", "--dataset", str(tmp_path / "g" / "data.jsonl"), "--alpha", "0", "--out", str(tmp_path / "b")]
    assert run_command(argv) == 0
    obs = read_dataset(tmp_path / "b" / "factual.jsonl")
    assert abs(obs.treatments.mean() - 0.5) < 0.035
    assert (tmp_path / "b" / "factual.truth.jsonl").exists()


def test_simulate_writes_a_dataset(tmp_path):
    cfg = tmp_path / "s.toml"
    cfg.write_text("[simulation]\nn_units = 8\n")
    assert run_command(["simulate", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "s")]) == 0
    data = read_dataset(tmp_path / "s" / "data.jsonl")
    assert len(data) == 8 and data.kind == "experimental"
    assert (tmp_path / "s" / "layouts.json").exists()


@pytest.mark.parametrize("estimator", ["compositional", "x_learner"])
def test_full_pipeline(tmp_path, estimator):
    dirs = cli_pipeline(tmp_path, estimator=estimator)
    manifest = json.loads((dirs["train"] / "model" / "manifest.json").read_text())
    assert manifest["estimator"] == estimator
    with (dirs["infer"] / "cate.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 120 and set(rows[0]) == {"unit_id", "tau", "y0", "y1", "se"}
    with (dirs["eval"] / "results.csv").open() as fh:
        (row,) = list(csv.DictReader(fh))
    assert row["estimator"] == estimator and row["alpha"] == "1.0" and row["error"] == ""
    assert float(row["pehe"]) >= 0


def test_eval_rejects_a_different_dataset(tmp_path):
    dirs = cli_pipeline(tmp_path, estimator="s_learner")
    argv = ["bias", "--dataset", str(dirs["gen"] / "data.jsonl"), "--alpha", "3", "--out", str(tmp_path / "b2")]
    assert run_command(argv) == 0
    argv = ["eval", "--dataset", str(tmp_path / "b2" / "factual.jsonl"), "--model", str(dirs["train"] / "model"),
            "--out", str(tmp_path / "e2")]
    assert run_command(argv) == 4


def test_sweep_writes_results_and_timings(tmp_path):
    dirs = cli_pipeline(tmp_path, estimator="s_learner")
    cfg = tmp_path / "sweep.toml"
    cfg.write_text('[train]\nepochs = 2\nn_samples = 5\n[sweep]\nestimators = ["s_learner", "t_learner"]\nseeds = [0, 1]\n')
    argv = ["sweep", "--config", str(cfg), "--dataset", str(dirs["bias"] / "factual.jsonl"), "--out", str(tmp_path / "sw")]
    assert run_command(argv) == 0
    with (tmp_path / "sw" / "results.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["estimator"], r["seed"]) for r in rows] == [("s_learner", "0"), ("s_learner", "1"),
                                                           ("t_learner", "0"), ("t_learner", "1")]
    assert (tmp_path / "sw" / "timings.csv").exists()
    assert json.loads((tmp_path / "sw" / "results.manifest.json").read_text())["n_rows"] == 4
