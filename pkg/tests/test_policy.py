import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cbdr.dataset import Dataset
from cbdr.policy import LinearRule, SearchError, SearchSettings, assign, contrast_init, optimize_rule
from cbdr.simulation import OPTIMAL_ETA, ScenarioSpec, gen_covariates, generate
from cbdr.value import ValueProblem, EstimatorKind

from conftest import make_dataset

QUICK = SearchSettings(restarts=2, population=15, max_evals=300, seed=4)


def test_assign_examples():
    rule = LinearRule([1.0, 0.0, 0.0])
    x = np.random.default_rng(0).standard_normal((20, 2))
    assert np.all(assign(rule, x) == 1)
    tie = LinearRule([1.0, -1.0])
    assert assign(tie, np.array([[1.0]]))[0] == 1
    with pytest.raises(ValueError):
        assign(rule, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        LinearRule([0.0, 0.0])


@given(eta=hnp.arrays(float, (3,), elements=st.floats(-5, 5)).filter(lambda e: np.linalg.norm(e) > 1e-3),
       c=st.floats(0.01, 100))
@settings(max_examples=50, deadline=None)
def test_scale_invariance(eta, c):
    x = np.random.default_rng(1).standard_normal((200, 2))
    np.testing.assert_array_equal(LinearRule(eta).assign(x), LinearRule(c * eta).assign(x))
    assert abs(np.linalg.norm(LinearRule(eta).eta) - 1) < 1e-12


@pytest.mark.parametrize("kind", ["udr", "cbdr"])
def test_search_is_deterministic_and_improves_on_start(kind):
    ds = make_dataset(n=300, seed=2)
    r1 = optimize_rule(ds, kind, settings=QUICK)
    r2 = optimize_rule(ds, kind, settings=QUICK)
    np.testing.assert_array_equal(r1.eta, r2.eta)
    assert abs(np.linalg.norm(r1.eta) - 1) < 1e-12
    problem = ValueProblem(ds)
    start = LinearRule(contrast_init(ds))
    k = EstimatorKind.parse(kind)
    assert r1.train_value >= problem.value(k, start.assign(ds.x))
    assert r1.train_value == pytest.approx(problem.value(k, r1.assign(ds.x)), rel=1e-12)


def test_constant_outcome_returns_start():
    ds = make_dataset(n=200, seed=3)
    flat = ds.replace(y=np.full(ds.n, 4.0))
    rule = optimize_rule(flat, "udr", settings=QUICK)
    np.testing.assert_allclose(rule.eta, LinearRule(contrast_init(flat)).eta)


def test_needs_two_units_per_arm():
    ds = Dataset(np.arange(4.0)[:, None], [1, 1, 1, -1], [1, 2, 3, 4])
    with pytest.raises(SearchError):
        optimize_rule(ds, "udr", settings=QUICK)


@pytest.mark.slow
@pytest.mark.parametrize("outcome, floor", [("lin", 0.95), ("nonlin", 0.90)])
def test_recovers_oracle_rule(outcome, floor):
    train = generate(ScenarioSpec("lin", outcome, reps=1), 1000, 0)
    rule = optimize_rule(train, "udr", settings=SearchSettings(restarts=2, population=30, max_evals=1500, seed=0))
    x, _ = gen_covariates(100_000, np.random.default_rng(5))
    agree = np.mean(rule.assign(x) == LinearRule(OPTIMAL_ETA).assign(x))
    assert agree >= floor
