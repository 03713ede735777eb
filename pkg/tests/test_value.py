import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cbdr.design import Design, X
from cbdr.outcome import OutcomeModel, fit_ols, predict
from cbdr.propensity import (
    BalanceFunction, PropensityModel, cbps_influence, dpi_dalpha, fit_cbps, fit_mle, pi_rule, score_alpha,
)
from cbdr.value import (
    EstimatorKind, EstimatorOptions, ValueProblem, _unconstrained, aipw_value, beta_opt, bootstrap, estimate,
    gamma_matrix, h_alpha_alpha, idr_beta, influence_phi, influence_phi_short, sigma_hat, sigma_objective,
)

from conftest import make_dataset

EMPTY2 = np.empty((2, 0))


def _rule(ds):
    return np.where(1 - 2 * ds.x[:, 0] + ds.x[:, 1] > 0, 1.0, -1.0)


def test_two_unit_aipw():
    ps = PropensityModel([0.0])
    om = OutcomeModel([1.0, 0.0])
    v = aipw_value(EMPTY2, [1.0, -1.0], [2.0, 1.0], [1.0, 1.0], ps, om)
    assert v == pytest.approx(2.0, abs=1e-14)


def test_single_unit_near_certain_propensity():
    # pi_d is clamped to 1 - 1e-6, so the value is Y up to that clamp
    ps = PropensityModel([40.0])
    v = aipw_value(np.empty((1, 0)), [1.0], [3.0], [1.0], ps, OutcomeModel([100.0, 0.0]))
    assert v == pytest.approx(3.0, abs=2e-4)


def test_zero_outcome_model_gives_ipw(sim_data):
    ds = sim_data
    ps = fit_mle(ds.x, ds.a)
    d = _rule(ds)
    v = aipw_value(ds.x, ds.a, ds.y, d, ps, OutcomeModel(np.zeros(6)))
    pid = pi_rule(ps, ds.x, d)
    assert v == pytest.approx(np.mean(ds.y * (ds.a == d) / pid), rel=1e-12)


def test_influence_forms(rng):
    for _ in range(20):
        n = 50
        x = rng.standard_normal((n, 2))
        a = rng.choice([-1.0, 1.0], n)
        d = rng.choice([-1.0, 1.0], n)
        y = rng.standard_normal(n) * 5
        ps = PropensityModel(rng.normal(0, 0.5, 3))
        om = OutcomeModel(rng.standard_normal(6))
        v = aipw_value(x, a, y, d, ps, om)
        long = influence_phi(x, a, y, d, ps, om, v)
        short = influence_phi_short(x, a, y, d, ps, om, v)
        assert np.max(np.abs(long - short)) < 1e-10
        assert abs(long.mean()) < 1e-10
        off = a != d
        np.testing.assert_allclose(long[off], predict(om, x[off], d[off]) - v, atol=1e-12)


def test_gamma_examples():
    ps = PropensityModel([0.0, 0.0])
    g = gamma_matrix(np.array([[0.0]]), [1.0], [2.0], [1.0], ps, OutcomeModel(np.zeros(4)))
    np.testing.assert_allclose(g, [2.0, 0.0], atol=1e-15)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((30, 1))
    a = rng.choice([-1.0, 1.0], 30)
    om = OutcomeModel(rng.standard_normal(4))
    y = predict(om, x, a)
    assert np.all(gamma_matrix(x, a, y, a, PropensityModel([0.2, -0.1]), om) == 0.0)


def test_gamma_finite_differences(rng):
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        n = 40
        x = rng.standard_normal((n, 2))
        a = rng.choice([-1.0, 1.0], n)
        d = rng.choice([-1.0, 1.0], n)
        y = rng.standard_normal(n) * 3
        alpha = rng.normal(0, 0.5, 3)
        om = OutcomeModel(rng.standard_normal(6))
        fd = np.empty(3)
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            up = influence_phi(x, a, y, d, PropensityModel(alpha + e), om, 0.0)
            dn = influence_phi(x, a, y, d, PropensityModel(alpha - e), om, 0.0)
            fd[j] = -np.mean(up - dn) / (2 * h)
        g = gamma_matrix(x, a, y, d, PropensityModel(alpha), om)
        worst = max(worst, np.max(np.abs(g - fd)) / max(np.max(np.abs(g)), 1e-12))
    assert worst < 1e-6


def test_h_alpha_alpha(rng):
    x = rng.standard_normal((100, 3))
    a = rng.choice([-1.0, 1.0], 100)
    h = h_alpha_alpha(x, a, PropensityModel(rng.standard_normal(4)))
    np.testing.assert_array_equal(h, h.T)
    assert np.linalg.eigvalsh(h).min() >= -1e-10
    ps = PropensityModel([0.3])
    p = 1 / (1 + np.exp(-0.3))
    np.testing.assert_allclose(h_alpha_alpha(np.empty((100, 0)), a, ps), [[np.mean(((a > 0) - p) ** 2)]])


def _literal_sigma(x, a, y, d, ps, om):
    """phi - Gamma' H^{-1} S, re-centred and averaged in square, from first principles."""
    pid = pi_rule(ps, x, d)
    ind = (a == d).astype(float)
    q = predict(om, x, d)
    v = np.mean(y * ind / pid - (ind - pid) / pid * q)
    phi = ind * (y - q) / pid + q - v
    dpi = dpi_dalpha(ps, x, d)
    gamma = (ind * (y - q) / pid**2) @ dpi / len(y)
    s = score_alpha(ps, x, a)
    hmat = s.T @ s / len(y)
    phi = phi - s @ np.linalg.solve(hmat, gamma)
    phi = phi - phi.mean()
    return np.mean(phi**2)


def test_sigma_hat_matches_literal_formula():
    ds = make_dataset(n=400, seed=4, outcome="nonlin")
    d = _rule(ds)
    ps = fit_mle(ds.x, ds.a)
    om = fit_ols(ds.x, ds.a, ds.y)
    lit = _literal_sigma(ds.x, ds.a, ds.y, d, ps, om)
    assert sigma_hat(ds.x, ds.a, ds.y, d, ps, om) == pytest.approx(lit, rel=1e-10)
    f, _ = sigma_objective(ds.x, ds.a, ds.y, d, ps)
    assert f(om.coef) == pytest.approx(lit, rel=1e-10)
    est = ValueProblem(ds, X).evaluate(EstimatorKind.UDR, d)
    assert est.sigma_hat == pytest.approx(lit, rel=1e-10)


def test_sigma_hat_zero_for_constant_outcome(sim_data):
    ds = sim_data
    y = np.full(ds.n, 5.0)
    om = fit_ols(ds.x, ds.a, y)
    ps = fit_mle(ds.x, ds.a)
    assert sigma_hat(ds.x, ds.a, y, _rule(ds), ps, om) < 1e-12


def test_gamma_correction_matters():
    ds = make_dataset(n=500, seed=5, outcome="nonlin")
    d = _rule(ds)
    ps = fit_mle(ds.x, ds.a)
    om = fit_ols(ds.x, ds.a, ds.y)
    with_c = sigma_hat(ds.x, ds.a, ds.y, d, ps, om)
    without = sigma_hat(ds.x, ds.a, ds.y, d, ps, om, correction=False)
    assert with_c != without


def _quadratic_by_polarization(x, a, y, d, ps, k):
    """Recover sigma(beta) = beta'A beta + 2 b'beta + c from the literal formula."""
    def s(beta):
        return _literal_sigma(x, a, y, d, ps, OutcomeModel(beta))
    eye = np.eye(k)
    c = s(np.zeros(k))
    diag = np.array([s(eye[i]) for i in range(k)])
    neg = np.array([s(-eye[i]) for i in range(k)])
    amat = np.diag((diag + neg) / 2 - c)
    lin = (diag - neg) / 4
    for i in range(k):
        for j in range(i + 1, k):
            amat[i, j] = amat[j, i] = (s(eye[i] + eye[j]) - diag[i] - diag[j] + c) / 2
    return amat, lin


def test_beta_opt_matches_normal_equations():
    ds = make_dataset(n=500, seed=6, outcome="nonlin")
    d = _rule(ds)
    ps = fit_mle(ds.x, ds.a)
    init = fit_ols(ds.x, ds.a, ds.y)
    amat, lin = _quadratic_by_polarization(ds.x, ds.a, ds.y, d, ps, 6)
    oracle = np.linalg.solve(amat, -lin)
    got = beta_opt(ds.x, ds.a, ds.y, d, ps, init).coef
    assert np.max(np.abs(got - oracle)) / np.max(np.abs(oracle)) < 1e-8


def test_idr_is_stationary_and_equals_unconstrained_opt():
    ds = make_dataset(n=500, seed=7, ps="lin", outcome="nonlin")
    d = _rule(ds)
    ps = fit_mle(ds.x, ds.a)
    init = fit_ols(ds.x, ds.a, ds.y)
    idr = idr_beta(ds.x, ds.a, ds.y, d, ps, init)
    opt = beta_opt(ds.x, ds.a, ds.y, d, ps, init)
    assert np.max(np.abs(idr.coef - opt.coef)) < 1e-8
    _, grad = sigma_objective(ds.x, ds.a, ds.y, d, ps)
    assert np.max(np.abs(grad(idr.coef))) < 1e-6


def test_flat_objective_returns_init():
    init = np.array([1.0, -2.0, 3.0])
    out = _unconstrained(np.zeros(5), np.zeros((5, 3)), init)
    np.testing.assert_array_equal(out, init)


def test_sphere_mode_matches_angle_grid():
    rng = np.random.default_rng(8)
    n = 200
    cov = np.empty((n, 0))
    a = rng.choice([-1.0, 1.0], n)
    d = rng.choice([-1.0, 1.0], n)
    y = 3 + 2 * a + rng.standard_normal(n)
    ps = fit_mle(cov, a)
    init = fit_ols(cov, a, y)
    out = beta_opt(cov, a, y, d, ps, init, "sphere")
    f, _ = sigma_objective(cov, a, y, d, ps)
    theta = np.linspace(0, 2 * np.pi, 10_000, endpoint=False)
    grid = min(f(np.array([np.cos(t), np.sin(t)])) for t in theta)
    assert abs(np.linalg.norm(out.coef) - 1) < 1e-12
    assert f(out.coef) <= grid + 1e-3
    assert f(out.coef) <= f(init.coef / np.linalg.norm(init.coef)) + 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_efficiency_ordering_with_fixed_cbps_fit(seed):
    ds = make_dataset(n=500, seed=seed, ps="lin", outcome="nonlin")
    d = _rule(ds)
    init = fit_ols(ds.x, ds.a, ds.y)
    ps = fit_cbps(ds.x, ds.a, d, BalanceFunction("moments", 2), init)
    opt = beta_opt(ds.x, ds.a, ds.y, d, ps, init)
    assert sigma_hat(ds.x, ds.a, ds.y, d, ps, opt) <= sigma_hat(ds.x, ds.a, ds.y, d, ps, init) + 1e-9


def test_udr_equals_composition(sim_data):
    ds = sim_data
    d = _rule(ds)
    est = estimate("udr", ds, d)
    v = aipw_value(ds.x, ds.a, ds.y, d, fit_mle(ds.x, ds.a), fit_ols(ds.x, ds.a, ds.y))
    assert est.value == v
    assert est.variance == pytest.approx(est.sigma_hat / ds.n)


@pytest.mark.parametrize("kind", list(EstimatorKind))
@pytest.mark.parametrize("design", [X, Design("xdagger", "zero"), Design("xdagger", "median")])
def test_every_recipe_runs(kind, design):
    ds = make_dataset(n=400, seed=9)
    est = estimate(kind, ds, _rule(ds), design)
    assert np.isfinite(est.value) and est.sigma_hat > 0
    assert est.design_id == design.id


@given(shift=st.floats(-50, 50))
@settings(max_examples=15, deadline=None)
def test_sigma_hat_shift_equivariance(shift):
    ds = make_dataset(n=200, seed=10, outcome="nonlin")
    d = _rule(ds)
    ps = fit_mle(ds.x, ds.a)
    base = sigma_hat(ds.x, ds.a, ds.y, d, ps, fit_ols(ds.x, ds.a, ds.y))
    y2 = ds.y + shift
    moved = sigma_hat(ds.x, ds.a, y2, d, ps, fit_ols(ds.x, ds.a, y2))
    assert moved == pytest.approx(base, rel=1e-8)


def test_bootstrap_determinism_and_degeneracy():
    ds = make_dataset(n=200, seed=11)
    d = _rule(ds)
    b1 = bootstrap("udr", ds, d, b=8, seed=3)
    b2 = bootstrap("udr", ds, d, b=8, seed=3)
    assert (b1.ci_low, b1.ci_high, b1.variance) == (b2.ci_low, b2.ci_high, b2.variance)
    assert b1.percentile_low <= b1.percentile_high
    flat = ds.replace(y=np.full(ds.n, 2.0))
    assert bootstrap("cbdr", flat, d, b=5, seed=1).variance < 1e-10
    with pytest.raises(ValueError):
        bootstrap("udr", ds, d, b=1)


def test_options_validation():
    with pytest.raises(ValueError):
        EstimatorOptions(constraint="box")
    with pytest.raises(ValueError):
        EstimatorKind.parse("xdr")
    assert EstimatorKind.parse("CBDR*") is EstimatorKind.CBDRstar


def test_sigma_hat_with_balancing_fit_uses_its_influence():
    ds = make_dataset(n=400, seed=12, outcome="nonlin")
    d = _rule(ds)
    om = fit_ols(ds.x, ds.a, ds.y)
    ps = fit_cbps(ds.x, ds.a, d, BalanceFunction("moments", 2), om)
    v = aipw_value(ds.x, ds.a, ds.y, d, ps, om)
    phi = influence_phi_short(ds.x, ds.a, ds.y, d, ps, om, v)
    phi = phi - cbps_influence(ps) @ gamma_matrix(ds.x, ds.a, ds.y, d, ps, om)
    lit = np.mean((phi - phi.mean()) ** 2)
    assert sigma_hat(ds.x, ds.a, ds.y, d, ps, om) == pytest.approx(lit, rel=1e-10)
    est = ValueProblem(ds, X).evaluate(EstimatorKind.CBDRstar, d)
    assert est.sigma_hat == pytest.approx(lit, rel=1e-8)


def test_idr_close_to_udr_at_large_n():
    ds = make_dataset(n=10_000, seed=13)
    d = _rule(ds)
    udr = estimate("udr", ds, d)
    idr = estimate("idr", ds, d)
    assert abs(idr.value - udr.value) <= 2 * np.sqrt(udr.variance)
