import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cbdr.outcome import OutcomeModel, RankDeficiencyError, dq_dbeta, features, fit_ols, predict


def test_feature_layout():
    np.testing.assert_array_equal(features([2.0], -1), [1, -1, 2, -2])
    np.testing.assert_array_equal(features([0.0, 0.0], 1), [1, 1, 0, 0, 0, 0])


def test_extended_layout():
    # [X | W~ | R] with p = 1, q = 1
    m = features([3.0, 5.0, 1.0], -1, q=1)
    np.testing.assert_array_equal(m, [1, -1, 3, -3, 1, -1, 5, -5])


@given(hnp.arrays(float, (4,), elements=st.floats(-10, 10)))
@settings(max_examples=50, deadline=None)
def test_arms_differ_only_in_interaction_blocks(row):
    plus, minus = features(row, 1, q=1), features(row, -1, q=1)
    # layout 1 | a | X | aX | R | aR | W~ | aW~ with p = 2, q = 1
    p = 2
    idx_int = np.r_[1, 2 + p:2 + 2 * p, 2 + 2 * p + 1, 2 + 2 * p + 3]
    idx_main = np.setdiff1d(np.arange(plus.size), idx_int)
    np.testing.assert_array_equal(plus[idx_main], minus[idx_main])
    np.testing.assert_array_equal(plus[idx_int], -minus[idx_int])


def test_exact_interpolation():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((50, 1))
    a = rng.choice([-1.0, 1.0], 50)
    y = 1 + 2 * a + 3 * x[:, 0]
    model = fit_ols(x, a, y)
    np.testing.assert_allclose(model.coef, [1, 2, 3, 0], atol=1e-8)


def test_saturated_fit_has_zero_residuals():
    x = np.empty((2, 0))
    a = np.array([1.0, -1.0])
    y = np.array([3.0, -4.0])
    model = fit_ols(x, a, y)
    np.testing.assert_allclose(predict(model, x, a), y, atol=1e-12)


def test_duplicated_column_is_rank_deficient():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((30, 1))
    with pytest.raises(RankDeficiencyError, match="offending"):
        fit_ols(np.hstack([x, x]), rng.choice([-1.0, 1.0], 30), rng.standard_normal(30))


def test_normal_equations_and_optimality():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((200, 2))
    a = rng.choice([-1.0, 1.0], 200)
    y = rng.standard_normal(200) + x[:, 0] * a
    model = fit_ols(x, a, y)
    m = features(x, a)
    resid = y - m @ model.coef
    assert np.max(np.abs(m.T @ resid)) < 1e-6 * 200
    best = resid @ resid
    for _ in range(100):
        other = model.coef + rng.normal(0, 0.1, model.coef.size)
        r = y - m @ other
        assert best <= r @ r


def test_predict_examples():
    assert predict(OutcomeModel(np.zeros(4)), [1.5], 1) == 0.0
    assert predict(OutcomeModel([1.0, 1.0, 0.0, 0.0]), [7.0], 1) == 2.0
    rng = np.random.default_rng(3)
    model = OutcomeModel(rng.standard_normal(6))
    x = rng.standard_normal((20, 2))
    d = rng.choice([-1.0, 1.0], 20)
    arm = np.where(d > 0, predict(model, x, np.ones(20)), predict(model, x, -np.ones(20)))
    np.testing.assert_allclose(predict(model, x, d), arm, rtol=1e-14)
    main = features(x, np.ones(20))[:, [0, 2, 3]] @ model.coef[[0, 2, 3]]
    np.testing.assert_allclose(predict(model, x, np.ones(20)) + predict(model, x, -np.ones(20)), 2 * main,
                               rtol=1e-12)
    with pytest.raises(ValueError):
        predict(model, [1.0], 1)


def test_dq_dbeta_is_features_and_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(2)
    coef = rng.standard_normal(6)
    g = dq_dbeta(x, -1)
    np.testing.assert_array_equal(g, features(x, -1))
    h = 1e-4
    fd = np.array([(predict(OutcomeModel(coef + h * e), x, -1) - predict(OutcomeModel(coef - h * e), x, -1))
                   / (2 * h) for e in np.eye(6)])
    assert np.max(np.abs(fd - g)) / np.max(np.abs(g)) < 1e-8
