import itertools

import networkx as nx
import numpy as np
import pytest
from gym.utils import seeding

from caformer import scm
from caformer.errors import ConfigError, ContractError, SizeError, UndefinedConditionalError
from caformer.scm import DiscreteSCM


def _coins():
    half = np.array([0.5, 0.5])
    return DiscreteSCM({"C": 2, "X": 2}, {}, {"C": half, "X": half})


def _confounded(x_given_c=((0.9, 0.1), (0.1, 0.9))):
    # P(T = 1 | C, X) is driven mostly by C
    t_given_cx = np.array([[[0.9, 0.1], [0.8, 0.2]], [[0.2, 0.8], [0.1, 0.9]]])
    return DiscreteSCM({"C": 2, "X": 2, "T": 2}, {"X": ("C",), "T": ("C", "X")},
                       {"C": np.array([0.5, 0.5]), "X": np.array(x_given_c), "T": t_given_cx})


def _random(name, seed=0):
    return scm.fixture_scm(name, seed)


def test_independent_coins_joint_is_uniform():
    np.testing.assert_allclose(scm.joint(_coins()).table, np.full((2, 2), 0.25), atol=1e-15)


def test_joint_normalizes_and_marginalizes():
    model = _random("environment", seed=3)
    dist = scm.joint(model)
    assert dist.table.sum() == pytest.approx(1.0, abs=1e-12)
    # D is a leaf: summing it out leaves the joint of the other three tables
    without_leaf = DiscreteSCM({v: model.cards[v] for v in ("X", "C", "T")}, model.parents,
                               {v: model.cpts[v] for v in ("X", "C", "T")})
    np.testing.assert_allclose(dist.marginal(("X", "C", "T")).table, scm.joint(without_leaf).table, atol=1e-15)


def test_model_validation():
    half = np.array([0.5, 0.5])
    with pytest.raises(ContractError):
        DiscreteSCM({"A": 2, "B": 2}, {"A": ("B",), "B": ("A",)}, {"A": np.eye(2), "B": np.eye(2)})
    with pytest.raises(ContractError):
        DiscreteSCM({"A": 2}, {}, {"A": np.array([0.5, 0.6])})
    with pytest.raises(ContractError):
        DiscreteSCM({"A": 2, "B": 2}, {"B": ("A",)}, {"A": half, "B": half})
    with pytest.raises(ContractError):
        DiscreteSCM({"A": 2}, {"A": ("Q",)}, {"A": half})


def test_joint_size_limit():
    names = ["V%d" % i for i in range(10)]
    quarter = np.full(4, 0.25)
    big = DiscreteSCM({n: 4 for n in names}, {}, {n: quarter for n in names})
    with pytest.raises(SizeError):
        scm.joint(big)


def test_do_on_root_equals_conditioning():
    model = _random("confounded", seed=4)
    observed = scm.joint(model)
    for c in range(model.cards["C"]):
        intervened = scm.truncated_do(model, "C", c).marginal(("X", "T")).table
        conditioned = observed.conditional(("X", "T"), {"C": c})
        np.testing.assert_allclose(intervened, conditioned, atol=1e-12)


def test_truncated_do_is_normalized():
    model = _random("environment", seed=5)
    for x in range(model.cards["X"]):
        dist = scm.truncated_do(model, "X", x)
        assert dist.table.sum() == pytest.approx(1.0, abs=1e-12)
        assert dist.marginal(("D",)).table.sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ContractError):
        scm.truncated_do(model, "X", 9)


def test_confounding_separates_intervention_from_observation():
    model = _confounded()
    interventional = scm.truncated_do(model, "X", 1).marginal(("T",)).table
    observational = scm.joint(model).conditional(("T",), {"X": 1})
    assert abs(interventional[1] - observational[1]) > 0.1
    np.testing.assert_allclose(scm.backdoor_estimate(model, 1), interventional, atol=1e-12)


def test_backdoor_without_confounding_is_plain_conditional():
    rng, _ = seeding.np_random(6)
    model = scm.random_scm({"C": (), "X": (), "T": ("X",)}, rng)
    for x in range(model.cards["X"]):
        expected = scm.joint(model).conditional(("T",), {"X": x})
        np.testing.assert_allclose(scm.backdoor_estimate(model, x), expected, atol=1e-12)


def test_backdoor_with_uniform_strata_averages_conditionals():
    model = _confounded()
    observed = scm.joint(model)
    strata = [observed.conditional(("T",), {"X": 0, "C": c}) for c in (0, 1)]
    np.testing.assert_allclose(scm.backdoor_estimate(model, 0), np.mean(strata, axis=0), atol=1e-12)


def test_empty_stratum_is_named():
    model = _confounded(x_given_c=((1.0, 0.0), (0.3, 0.7)))
    with pytest.raises(UndefinedConditionalError) as info:
        scm.backdoor_estimate(model, 1)
    assert info.value.stratum == {"C": 0, "X": 1}
    assert "C=0" in str(info.value)


def test_adjustment_must_satisfy_the_criterion():
    chain = _random("chain")
    with pytest.raises(ContractError):
        scm.backdoor_estimate(chain, 0, treatment="X", outcome="Y", adjustment=("Z",))
    assert not scm.satisfies_backdoor(nx.DiGraph([("C", "X"), ("C", "T"), ("X", "T")]), "X", "T", ())
    assert scm.satisfies_backdoor(nx.DiGraph([("C", "X"), ("C", "T"), ("X", "T")]), "X", "T", ("C",))


def test_d_separation_examples():
    chain = nx.DiGraph([("X", "Z"), ("Z", "Y")])
    fork = nx.DiGraph([("Z", "X"), ("Z", "Y")])
    collider = nx.DiGraph([("X", "Z"), ("Y", "Z"), ("Z", "W")])
    assert not scm.d_separated(chain, ["X"], ["Y"])
    assert scm.d_separated(chain, ["X"], ["Y"], ["Z"])
    assert not scm.d_separated(fork, ["X"], ["Y"])
    assert scm.d_separated(fork, ["X"], ["Y"], ["Z"])
    assert scm.d_separated(collider, ["X"], ["Y"])
    assert not scm.d_separated(collider, ["X"], ["Y"], ["Z"])
    assert not scm.d_separated(collider, ["X"], ["Y"], ["W"])


def test_d_separation_implies_independence():
    for seed in range(10):
        model = _random("environment", seed=seed)
        dist = scm.joint(model)
        for a, b in itertools.combinations(model.variables, 2):
            others = [v for v in model.variables if v not in (a, b)]
            for size in (0, 1):
                for given in itertools.combinations(others, size):
                    if not scm.d_separated(model.graph, [a], [b], given):
                        continue
                    for values in itertools.product(*(range(model.cards[g]) for g in given)):
                        stratum = dict(zip(given, values))
                        pair = dist.conditional((a, b), stratum)
                        product = np.outer(pair.sum(axis=1), pair.sum(axis=0))
                        np.testing.assert_allclose(pair, product, atol=1e-12)


def test_rules_on_disconnected_model_all_verify():
    report = scm.verify_docalculus_rules(_random("disconnected"), "X", "Z", "Y")
    for rule in ("rule1", "rule2", "rule3"):
        assert report[rule]["premise"]
        assert report[rule]["status"] == "verified"
        assert report[rule]["max_abs_diff"] < 1e-12


def test_rules_on_chain():
    report = scm.verify_docalculus_rules(_random("chain", seed=2), "X", "Z", "Y")
    assert report["rule2"]["status"] == "verified"
    assert report["rule2"]["strata"] > 0
    assert report["rule1"] == {"premise": False, "status": "not applicable", "max_abs_diff": None, "strata": 0}
    assert report["rule3"]["status"] == "not applicable"


def test_backdoor_suite():
    report = scm.verify_backdoor_suite(trials=100, seed=1)
    assert report["passed"]
    assert report["max_abs_diff"] < 1e-12
    assert set(report["rules"]) == {"chain", "fork", "disconnected"}
    assert all(r["status"] != "failed" for rules in report["rules"].values() for r in rules.values())
    with pytest.raises(ContractError):
        scm.verify_backdoor_suite(trials=0)


def test_random_models_are_seeded():
    a, b = _random("environment", seed=9), _random("environment", seed=9)
    assert a.cards == b.cards
    for v in a.variables:
        np.testing.assert_array_equal(a.cpts[v], b.cpts[v])
        assert 2 <= a.cards[v] <= scm.MAX_CARDINALITY


def test_definition_file_roundtrip(tmp_path):
    model = _random("environment", seed=11)
    path = tmp_path / "model.toml"
    scm.dump_scm(model, path)
    back = scm.load_scm(path)
    assert back.parents == model.parents
    for v in model.variables:
        np.testing.assert_allclose(back.cpts[v], model.cpts[v], rtol=0, atol=1e-15)


def test_definition_file_errors(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text('[variables.X]\ncard = 2\ncpt = [[0.5, 0.5]]\nweight = 3\n')
    with pytest.raises(ConfigError):
        scm.load_scm(path)
    path.write_text('[variables.X]\ncard = 2\ncpt = [[0.5, 0.25, 0.25]]\n')
    with pytest.raises(ConfigError):
        scm.load_scm(path)
    path.write_text('[variables.X]\ncard = 2\n')
    with pytest.raises(ConfigError, match="cpt"):
        scm.load_scm(path)
    path.write_text("not = [toml")
    with pytest.raises(ConfigError):
        scm.load_scm(path)
    with pytest.raises(ConfigError):
        scm.load_scm(tmp_path / "missing.toml")
