"""AIPW value estimation, influence-function variance and estimator recipes.

All array-level functions take the covariate matrix of a design (``cov``), the
treatment ``a`` and outcome ``y`` in {-1, +1} coding, and rule assignments ``d``.
``q`` is the number of predictive columns in ``cov`` (0 for design X).
"""

from __future__ import annotations

import enum
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from .dataset import Dataset
from .design import Design, X, design_matrix
from .outcome import OutcomeModel, features, fit_ols
from .propensity import (
    BalanceFunction, GmmSettings, PropensityModel, cbps_influence, fit_cbps, fit_mle, with_intercept,
    _p1,
)

H_RIDGE = 1e-8
Z95 = 1.959963984540054


class EstimationError(RuntimeError):
    pass


class EstimatorKind(enum.Enum):
    UDR = ("UDR", "mle", "ols")
    IDR = ("IDR", "mle", "opt")
    CBDR = ("CBDR", "cbps", "opt")
    CBDRstar = ("CBDR*", "cbps", "ols")

    def __init__(self, label, ps_method, beta_method):
        self.label = label
        self.ps_method = ps_method
        self.beta_method = beta_method

    @classmethod
    def parse(cls, text: str) -> "EstimatorKind":
        key = text.strip().lower().replace("*", "star")
        for kind in cls:
            if kind.name.lower() == key:
                return kind
        raise ValueError(f"unknown estimator {text!r}; expected udr, idr, cbdr or cbdr*")


ALL_KINDS = tuple(EstimatorKind)


@dataclass(frozen=True)
class EstimatorOptions:
    balance: BalanceFunction = BalanceFunction("moments", 2)
    gmm: GmmSettings = GmmSettings()
    constraint: str = "unconstrained"  # or "sphere"
    sphere_restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.constraint not in ("unconstrained", "sphere"):
            raise ValueError(f"unknown constraint {self.constraint!r}")


@dataclass(frozen=True)
class BootstrapResult:
    variance: float
    ci_low: float
    ci_high: float
    b: int
    percentile_low: float
    percentile_high: float
    failures: int = 0
    values: np.ndarray = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class ValueEstimate:
    value: float
    sigma_hat: float
    n: int
    estimator_kind: EstimatorKind
    design_id: str
    bootstrap: BootstrapResult | None = None
    ps: PropensityModel | None = field(default=None, repr=False)
    om: OutcomeModel | None = field(default=None, repr=False)

    @property
    def variance(self) -> float:
        """Estimated variance of the value estimate, sigma_hat / n."""
        return self.sigma_hat / self.n

    @property
    def ci(self) -> tuple[float, float]:
        half = Z95 * np.sqrt(self.variance)
        return self.value - half, self.value + half


class _Terms:
    """Per-unit quantities shared by the value, influence and variance formulas."""

    def __init__(self, cov, a, y, d, ps: PropensityModel, q: int = 0):
        cov = np.asarray(cov, dtype=float)
        self.xt = with_intercept(cov)
        if self.xt.shape[1] != ps.dim:
            raise ValueError(f"covariate width {cov.shape[1]} does not match propensity model ({ps.dim - 1})")
        self.y = np.asarray(y, dtype=float)
        a = np.asarray(a, dtype=float)
        d = np.asarray(d, dtype=float)
        if not np.all(np.isin(d, (-1.0, 1.0))):
            raise ValueError("rule assignments must be -1 or +1")
        if not (self.y.shape == a.shape == d.shape == (cov.shape[0],)):
            raise ValueError("cov, a, y and d must have matching lengths")
        self.n = cov.shape[0]
        self.ps = ps
        self.p1 = _p1(ps.alpha, self.xt)
        self.pi_d = np.where(d > 0, self.p1, 1.0 - self.p1)
        self.ind = (a == d).astype(float)
        self.score = ((a > 0) - self.p1)[:, None] * self.xt
        self.dpi = (np.where(d > 0, 1.0, -1.0) * self.p1 * (1.0 - self.p1))[:, None] * self.xt
        self.m = features(cov, d, q)

    def q_d(self, coef):
        if self.m.shape[1] != np.size(coef):
            raise ValueError(f"outcome coefficients ({np.size(coef)}) do not match features ({self.m.shape[1]})")
        return self.m @ coef

    def value(self, coef) -> float:
        qd = self.q_d(coef)
        return float(np.mean(self.y * self.ind / self.pi_d - (self.ind - self.pi_d) / self.pi_d * qd))

    def h_matrix(self):
        return self.score.T @ self.score / self.n

    def alpha_influence(self):
        """Per-unit influence of alpha-hat: H^{-1} S_i for the MLE, the GMM sandwich
        row for a balancing fit."""
        if self.ps.fit_method == "CBPS" and "moments" in self.ps.info:
            u = cbps_influence(self.ps)
            if u.shape[0] != self.n:
                raise ValueError("propensity fit and data have different sizes")
            return u
        return _solve_h(self.h_matrix(), self.score.T).T

    def quadratic(self):
        """Affine form of the corrected influence function, phi~_i(beta) = c_i + B_i beta.

        Both parts are centred, so that sigma_hat(beta) = mean((c + B beta)**2).
        """
        w = self.ind / self.pi_d
        g0 = self.dpi.T @ (w / self.pi_d * self.y) / self.n
        g1 = self.dpi.T @ ((w / self.pi_d)[:, None] * self.m) / self.n
        u = self.alpha_influence()
        c = w * self.y - u @ g0
        b = (1.0 - w)[:, None] * self.m + u @ g1
        return c - c.mean(), b - b.mean(axis=0)


def _solve_h(h, rhs):
    try:
        chol = np.linalg.cholesky(h)
        return np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    except np.linalg.LinAlgError:
        pass
    try:
        out = np.linalg.solve(h + H_RIDGE * np.eye(h.shape[0]), rhs)
    except np.linalg.LinAlgError as exc:
        raise EstimationError("score outer-product matrix is singular even after ridge") from exc
    if not np.all(np.isfinite(out)):
        raise EstimationError("score outer-product matrix is singular even after ridge")
    return out


def aipw_value(cov, a, y, d, ps: PropensityModel, om: OutcomeModel) -> float:
    """P_n[ Y I_d / pi_d - (I_d - pi_d) / pi_d * Q(x, d) ] with I_d = I(A = d)."""
    return _Terms(cov, a, y, d, ps, om.q).value(om.coef)


def influence_phi(cov, a, y, d, ps, om, v: float) -> np.ndarray:
    t = _Terms(cov, a, y, d, ps, om.q)
    qd = t.q_d(om.coef)
    return t.y * t.ind / t.pi_d - (t.ind - t.pi_d) / t.pi_d * qd - v


def influence_phi_short(cov, a, y, d, ps, om, v: float) -> np.ndarray:
    """Rearranged influence function I_d (Y - Q) / pi_d + Q - v."""
    t = _Terms(cov, a, y, d, ps, om.q)
    qd = t.q_d(om.coef)
    return t.ind * (t.y - qd) / t.pi_d + qd - v


def gamma_matrix(cov, a, y, d, ps, om) -> np.ndarray:
    """Gamma-hat = P_n[ I_d (Y - Q) / pi_d^2 * dpi_d/dalpha ] = -P_n[d phi / d alpha]."""
    t = _Terms(cov, a, y, d, ps, om.q)
    resid = t.ind * (t.y - t.q_d(om.coef)) / t.pi_d**2
    return t.dpi.T @ resid / t.n


def h_alpha_alpha(cov, a, ps) -> np.ndarray:
    xt = with_intercept(cov)
    s = ((np.asarray(a) > 0) - _p1(ps.alpha, xt))[:, None] * xt
    return s.T @ s / xt.shape[0]


def sigma_hat(cov, a, y, d, ps, om, correction: bool = True) -> float:
    """Empirical variance of the propensity-corrected influence function.

    phi~_i = phi_i - Gamma . u_i, where u_i is the influence of alpha-hat
    (H^{-1} S_i for the MLE, the GMM sandwich row for a balancing fit),
    centred at its sample mean and averaged in square. ``correction=False``
    drops the Gamma term.
    """
    v = aipw_value(cov, a, y, d, ps, om)
    phi = influence_phi(cov, a, y, d, ps, om, v)
    if correction:
        t = _Terms(cov, a, y, d, ps, om.q)
        gamma = gamma_matrix(cov, a, y, d, ps, om)
        phi = phi - t.alpha_influence() @ gamma
    phi = phi - phi.mean()
    return float(np.mean(phi**2))


def sigma_objective(cov, a, y, d, ps, q: int = 0):
    """Return ``f(beta) -> sigma_hat`` and its gradient for fixed propensity fit."""
    c, b = _Terms(cov, a, y, d, ps, q).quadratic()

    def f(beta):
        r = c + b @ beta
        return float(r @ r) / c.size

    def grad(beta):
        return 2.0 * b.T @ (c + b @ beta) / c.size

    return f, grad


def _unconstrained(c, b, init):
    # min-norm deviation from init; returns init itself when the objective is flat
    r0 = c + b @ init
    delta = np.linalg.lstsq(b, -r0, rcond=None)[0]
    return init + delta


def beta_opt(cov, a, y, d, ps, init: OutcomeModel, constraint: str = "unconstrained",
             restarts: int = 10, seed: int = 0) -> OutcomeModel:
    """Outcome coefficients minimizing sigma_hat(alpha_hat, beta).

    The corrected influence function is affine in beta for the linear outcome
    model, so the unconstrained problem is an exact least-squares solve. The
    ``"sphere"`` option restricts to unit-norm beta and uses Nelder-Mead from
    ``init / |init|`` plus ``restarts`` random starts.
    """
    t = _Terms(cov, a, y, d, ps, init.q)
    c, b = t.quadratic()
    beta0 = np.asarray(init.coef, dtype=float)
    if constraint == "unconstrained":
        return init.with_coef(_unconstrained(c, b, beta0), "opt")
    if constraint != "sphere":
        raise ValueError(f"unknown constraint {constraint!r}")

    def f(u):
        nrm = np.linalg.norm(u)
        if nrm == 0:
            return np.inf
        r = c + b @ (u / nrm)
        return float(r @ r) / c.size

    start = beta0 / np.linalg.norm(beta0) if np.any(beta0) else np.eye(beta0.size)[0]
    rng = np.random.default_rng(seed)
    starts = [start] + [rng.standard_normal(beta0.size) for _ in range(restarts)]
    best_u, best_f = start, f(start)
    all_converged = True
    for s in starts:
        res = optimize.minimize(f, s, method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-12 * max(1.0, best_f),
                                         "maxiter": 400 * beta0.size, "maxfev": 800 * beta0.size})
        all_converged &= bool(res.success)
        if res.fun < best_f:
            best_u, best_f = res.x, float(res.fun)
    if not all_converged:
        warnings.warn("Nelder-Mead hit its iteration limit in the unit-sphere search; best iterate returned",
                      RuntimeWarning, stacklevel=2)
    return init.with_coef(best_u / np.linalg.norm(best_u), "sphere")


def idr_beta(cov, a, y, d, ps_mle: PropensityModel, init: OutcomeModel) -> OutcomeModel:
    """Stationary point of sigma_hat(alpha_mle, beta); a convex quadratic, solved exactly."""
    out = beta_opt(cov, a, y, d, ps_mle, init, "unconstrained")
    return out.with_coef(out.coef, "eq")


def rule_assignments(rule, ds: Dataset) -> np.ndarray:
    if hasattr(rule, "assign"):
        return rule.assign(ds.x)
    d = np.asarray(rule, dtype=float)
    if d.shape != (ds.n,):
        raise ValueError(f"expected {ds.n} rule assignments, got shape {d.shape}")
    return d


class ValueProblem:
    """Dataset resolved under one design, with rule-independent fits cached.

    Repeated evaluations for different rules (as in the rule search) reuse the
    covariate matrix, the MLE propensity fit and the OLS outcome fit.
    """

    def __init__(self, ds: Dataset, design: Design = X, options: EstimatorOptions = EstimatorOptions()):
        self.ds = ds
        self.design = design
        self.options = options
        self.cov, self.q = design_matrix(ds, design)
        self.a = ds.a
        self.y = ds.y
        self._mle = None
        self._ols = None

    @property
    def mle(self) -> PropensityModel:
        if self._mle is None:
            self._mle = fit_mle(self.cov, self.a, self.options.gmm, self.design.id)
        return self._mle

    @property
    def ols(self) -> OutcomeModel:
        if self._ols is None:
            self._ols = fit_ols(self.cov, self.a, self.y, self.q, self.design.id)
        return self._ols

    def nuisances(self, kind: EstimatorKind, d) -> tuple[PropensityModel, OutcomeModel]:
        opts = self.options
        if kind.ps_method == "mle":
            ps = self.mle
        else:
            ps = fit_cbps(self.cov, self.a, d, opts.balance, self.ols, opts.gmm, self.design.id, init=self.mle)
        if kind.beta_method == "ols":
            om = self.ols
        elif kind is EstimatorKind.IDR:
            om = idr_beta(self.cov, self.a, self.y, d, ps, self.ols)
        else:
            om = beta_opt(self.cov, self.a, self.y, d, ps, self.ols, opts.constraint,
                          opts.sphere_restarts, opts.seed)
        return ps, om

    def value(self, kind: EstimatorKind, d) -> float:
        ps, om = self.nuisances(kind, d)
        return aipw_value(self.cov, self.a, self.y, d, ps, om)

    def evaluate(self, kind: EstimatorKind, d, nuisances=None) -> ValueEstimate:
        """Point estimate and sigma_hat; ``nuisances`` skips refitting."""
        d = np.asarray(d, dtype=float)
        ps, om = nuisances if nuisances is not None else self.nuisances(kind, d)
        t = _Terms(self.cov, self.a, self.y, d, ps, om.q)
        v = t.value(om.coef)
        c, b = t.quadratic()
        r = c + b @ om.coef
        sig = float(r @ r) / t.n
        return ValueEstimate(v, sig, t.n, kind, self.design.id, None, ps, om)


def estimate(kind: EstimatorKind, ds: Dataset, rule, design: Design = X,
             options: EstimatorOptions = EstimatorOptions()) -> ValueEstimate:
    """Estimate V(d) for a rule (``LinearRule`` or assignment vector) with one recipe.

    UDR = (MLE, OLS); IDR = (MLE, variance-stationary beta);
    CBDR = (CBPS, variance-minimizing beta); CBDR* = (CBPS, OLS).
    """
    if isinstance(kind, str):
        kind = EstimatorKind.parse(kind)
    d = rule_assignments(rule, ds)
    return ValueProblem(ds, design, options).evaluate(kind, d)


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get("CBDR_THREADS", "1")))
    except ValueError:
        return 1


def bootstrap(kind: EstimatorKind, ds: Dataset, rule, design: Design = X, b: int = 300, seed: int = 0,
              options: EstimatorOptions = EstimatorOptions(), point: float | None = None,
              workers: int | None = None) -> BootstrapResult:
    """Nonparametric bootstrap of the whole estimation pipeline (nuisances refit each time).

    Replicate ``j`` draws rows with ``SeedSequence([seed, j, attempt])``; a failed
    replicate is retried once with a fresh resample, and more than 5% failures abort.
    """
    if b < 2:
        raise ValueError("bootstrap needs b >= 2")
    if isinstance(kind, str):
        kind = EstimatorKind.parse(kind)
    d = rule_assignments(rule, ds)
    if point is None:
        point = estimate(kind, ds, d, design, options).value

    def one(j):
        for attempt in range(2):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), j, attempt]))
            idx = rng.integers(0, ds.n, ds.n)
            try:
                return ValueProblem(ds.take(idx), design, options).value(kind, d[idx]), attempt
            except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError):
                continue
        return None, 2

    workers = workers or _default_workers()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(b)))
    else:
        results = [one(j) for j in range(b)]
    lost = sum(1 for v, _ in results if v is None)
    if lost > 0.05 * b:
        raise EstimationError(f"{lost} of {b} bootstrap replicates failed")
    values = np.array([v for v, _ in results if v is not None])
    var = float(np.var(values, ddof=1))
    half = Z95 * np.sqrt(var)
    lo, hi = np.percentile(values, [2.5, 97.5])
    retried = sum(1 for _, att in results if att >= 1)
    return BootstrapResult(var, point - half, point + half, b, float(lo), float(hi), retried, values)


def estimate_with_bootstrap(kind, ds, rule, design=X, options=EstimatorOptions(), b=300, seed=0,
                            workers=None) -> ValueEstimate:
    est = estimate(kind, ds, rule, design, options)
    boot = bootstrap(est.estimator_kind, ds, rule, design, b, seed, options, point=est.value, workers=workers)
    return replace(est, bootstrap=boot)
