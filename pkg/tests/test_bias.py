import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from compcate.bias import (
    BiasPolicy,
    BiasStats,
    TruthRecord,
    fit_stats,
    propensity_score,
    read_truth,
    reconstruct_experimental,
    sample_observational,
    truth_path,
    write_truth,
)
from compcate.core import CompositionKind, ExperimentalDataset, PotentialOutcomes
from compcate.dgp import DgpConfig, generate_experimental_dataset
from conftest import chain_graph, experimental_unit, make_unit


def chain_dataset(n: int, seed: int = 0, max_len: int = 8) -> ExperimentalDataset:
    """Experimental chains of random length; outcomes depend on length and covariates."""
    rng = np.random.default_rng(seed)
    units = []
    for i in range(n):
        m = int(rng.integers(1, max_len + 1))
        xs = {j: [float(rng.normal())] for j in range(m)}
        y0 = float(rng.normal())
        units.append(experimental_unit(i, chain_graph([j % 3 for j in range(m)]), xs, (y0, y0 + 0.1 * m)))
    return ExperimentalDataset(units, {0: 1, 1: 1, 2: 1}, CompositionKind.SEQUENTIAL)


@pytest.mark.parametrize("kind", ["tree_depth", "covariate_sum"])
def test_zero_strength_is_a_fair_coin(kind):
    ds = chain_dataset(50)
    stats = fit_stats(ds.units, kind)
    assert {propensity_score(u, BiasPolicy(kind, 0.0), stats) for u in ds} == {0.5}


@given(st.floats(0, 50))
def test_score_at_center_is_a_fair_coin(alpha):
    unit = make_unit(0, chain_graph([0, 0, 0]), {0: [0.0], 1: [0.0], 2: [0.0]}, None)
    assert propensity_score(unit, BiasPolicy("tree_depth", alpha), BiasStats(3.0, 1.0)) == 0.5


def test_strong_bias_is_clamped():
    deep = make_unit(0, chain_graph([0] * 10), {j: [0.0] for j in range(10)}, None)
    shallow = make_unit(1, chain_graph([0]), {0: [0.0]}, None)
    stats = BiasStats(4.0, 2.0)
    policy = BiasPolicy("tree_depth", 10.0)
    assert propensity_score(deep, policy, stats) == 0.99
    assert propensity_score(shallow, policy, stats) == 0.01


@given(st.floats(0, 20), st.floats(-20, 20), st.floats(-20, 20))
def test_propensity_is_bounded_and_monotone(alpha, center, shift):
    units = [make_unit(i, chain_graph([0]), {0: [v]}, None) for i, v in enumerate((-1.0, 0.0, 2.0))]
    policy = BiasPolicy("covariate_sum", alpha)
    stats = BiasStats(center + shift, 1.5)
    p = [propensity_score(u, policy, stats) for u in units]
    assert all(0.01 <= v <= 0.99 for v in p)
    assert p == sorted(p)


def test_degenerate_spread_falls_back_to_unit_scale(caplog):
    units = [make_unit(i, chain_graph([0, 0]), {0: [0.0], 1: [0.0]}, None) for i in range(5)]
    with caplog.at_level(logging.WARNING):
        stats = fit_stats(units, "tree_depth")
    assert stats == BiasStats(2.0, 1.0)
    assert "interquartile" in caplog.text


@pytest.mark.parametrize("kwargs", [{"kind": "age"}, {"alpha": -1.0}, {"clamp": (0.0, 0.99)}, {"clamp": (0.6, 0.4)}])
def test_policy_validation(kwargs):
    with pytest.raises(ValueError):
        BiasPolicy(**kwargs)


def test_unbiased_treated_fraction():
    obs, _ = sample_observational(chain_dataset(10_000), BiasPolicy("tree_depth", 0.0), seed=4)
    frac = obs.treatments.mean()
    assert abs(frac - 0.5) <= 3 * np.sqrt(0.25 / 10_000)


def test_depth_bias_separates_groups():
    ds = chain_dataset(4000)
    obs, truth = sample_observational(ds, BiasPolicy("tree_depth", 10.0), seed=1)
    t = obs.treatments
    depth = np.array([u.depth for u in obs])
    assert depth[t == 1].mean() > depth[t == 0].mean() + 1.0
    assert [r.t for r in truth] == t.tolist()


def test_assignment_is_seeded():
    ds = chain_dataset(500)
    policy = BiasPolicy("covariate_sum", 2.0)
    a = sample_observational(ds, policy, seed=9)[0].treatments
    b = sample_observational(ds, policy, seed=9)[0].treatments
    c = sample_observational(ds, policy, seed=10)[0].treatments
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    # a unit's draw does not depend on the rest of the dataset
    sub = ds.subset(ds.units[100:200])
    np.testing.assert_array_equal(
        sample_observational(sub, policy, seed=9, stats=fit_stats(ds.units, "covariate_sum"))[0].treatments, a[100:200]
    )


def test_factual_data_hides_the_counterfactual():
    ds = chain_dataset(30)
    obs, truth = sample_observational(ds, BiasPolicy("tree_depth", 1.0), seed=0)
    for u, src, r in zip(obs, ds, truth):
        assert u.is_factual and not u.is_experimental
        assert u.unit_outcome.y == src.unit_outcome[u.treatment]
        assert (r.y0, r.y1, r.tau) == (src.unit_outcome.y0, src.unit_outcome.y1, src.unit_outcome.effect)


def test_explicit_truth_effect_is_recorded():
    ds = chain_dataset(10)
    tau = {u.unit_id: 100.0 + u.unit_id for u in ds}
    _, truth = sample_observational(ds, BiasPolicy(), seed=0, tau=tau)
    assert [r.tau for r in truth] == [100.0 + i for i in range(10)]


def test_reconstruction_is_lossless(tmp_path):
    ds = generate_experimental_dataset(DgpConfig(n=40, composition="hierarchical", seed=3))
    obs, truth = sample_observational(ds, BiasPolicy("tree_depth", 3.0), seed=2)
    path = write_truth(truth, truth_path(tmp_path / "factual.jsonl"))
    assert path.name == "factual.truth.jsonl"
    back = reconstruct_experimental(obs, read_truth(path))
    for a, b in zip(ds, back):
        assert a.unit_outcome == b.unit_outcome
        assert dict(a.component_outcomes) == dict(b.component_outcomes)
        assert a.graph == b.graph


def test_truth_record_json_roundtrip():
    r = TruthRecord(3, 1, 0.25, 1.5, -2.0, -3.0, {0: PotentialOutcomes(1.0, 2.0)})
    assert TruthRecord.from_json(r.to_json()) == r
    assert r.ite == -3.5


def test_units_without_both_outcomes_are_rejected():
    obs, _ = sample_observational(chain_dataset(5), BiasPolicy(), seed=0)
    with pytest.raises(ValueError, match="potential outcomes"):
        sample_observational(obs, BiasPolicy(), seed=0)
