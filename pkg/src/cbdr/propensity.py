"""Logistic propensity models fit by maximum likelihood or covariate-balancing GMM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .outcome import OutcomeModel, features

EPS = 1e-6  # positivity clamp applied before any inverse-probability ratio
MAX_COEF = 30.0


class PropensityError(RuntimeError):
    """Propensity fit failed (non-convergence, separation, singular weights)."""


class SeparationError(PropensityError):
    pass


@dataclass(frozen=True)
class GmmSettings:
    max_iterations: int = 200
    gradient_tolerance: float = 1e-8
    weighting: str = "twostep"  # or "identity"
    ridge: float = 1e-8

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.weighting not in ("twostep", "identity"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")


@dataclass(frozen=True)
class BalanceFunction:
    """Balancing function used in the covariate-balancing moment condition.

    ``kind="full"`` stacks the outcome-gradient and propensity-gradient blocks;
    ``kind="moments"`` balances covariate powers up to ``order``.
    """

    kind: str = "moments"
    order: int = 2

    def __post_init__(self):
        if self.kind not in ("full", "moments"):
            raise ValueError(f"unknown balance kind {self.kind!r}")
        if self.kind == "moments" and self.order not in (1, 2):
            raise ValueError("moment order must be 1 or 2")

    @classmethod
    def parse(cls, text: str) -> "BalanceFunction":
        text = text.lower()
        if text == "full":
            return cls("full")
        if text in ("m1", "m2"):
            return cls("moments", int(text[1]))
        raise ValueError(f"unknown balance {text!r}; expected full, m1 or m2")

    @property
    def label(self) -> str:
        return "full" if self.kind == "full" else f"m{self.order}"


@dataclass(frozen=True, eq=False)
class PropensityModel:
    alpha: np.ndarray
    design_id: str = "x"
    fit_method: str = "MLE"
    converged: bool = True
    n_iter: int = 0
    objective: float | None = None
    moment_norm: float | None = None
    info: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float).ravel()
        alpha.flags.writeable = False
        object.__setattr__(self, "alpha", alpha)

    @property
    def dim(self) -> int:
        return self.alpha.size

    def p1(self, cov) -> np.ndarray:
        """Clamped pr(A=1 | x) for every row of ``cov``."""
        return _p1(self.alpha, with_intercept(cov))


def with_intercept(cov) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 1:
        return np.concatenate([[1.0], cov])
    return np.hstack([np.ones((cov.shape[0], 1)), cov])


def _p1(alpha, xt):
    return np.clip(special.expit(xt @ alpha), EPS, 1.0 - EPS)


def _check_dim(model: PropensityModel, xt):
    if xt.shape[-1] != model.dim:
        raise ValueError(f"covariate length {xt.shape[-1] - 1} does not match model ({model.dim - 1})")


def pi(model: PropensityModel, x, a):
    """pr(A=a | x) under the model; ``x`` may be a row or an n-by-m matrix."""
    xt = with_intercept(x)
    _check_dim(model, xt)
    p1 = _p1(model.alpha, xt)
    return np.where(np.asarray(a) > 0, p1, 1.0 - p1)


def pi_rule(model: PropensityModel, x, d):
    """Propensity of the treatment a rule assigns: I(d=1) pi(1) + I(d=-1) pi(-1)."""
    return pi(model, x, d)


def score_alpha(model: PropensityModel, x, a):
    xt = with_intercept(x)
    _check_dim(model, xt)
    p1 = _p1(model.alpha, xt)
    resid = (np.asarray(a) > 0).astype(float) - p1
    return resid[..., None] * xt if xt.ndim == 2 else resid * xt


def dpi_dalpha(model: PropensityModel, x, d):
    """Gradient of pi(x, d; alpha) with respect to alpha."""
    xt = with_intercept(x)
    _check_dim(model, xt)
    p1 = _p1(model.alpha, xt)
    sign = np.where(np.asarray(d) > 0, 1.0, -1.0)
    g = sign * p1 * (1.0 - p1)
    return g[..., None] * xt if xt.ndim == 2 else g * xt


def _loglik(alpha, xt, a1):
    eta = xt @ alpha
    return float(np.sum(a1 * eta - np.logaddexp(0.0, eta)))


def fit_mle(cov, a, settings: GmmSettings = GmmSettings(), design_id: str = "x",
            ridge: float = 0.0) -> PropensityModel:
    """Logistic regression of I(A=1) on (1, cov) by damped Newton iterations.

    ``ridge`` adds an L2 penalty (on the mean log-likelihood scale), which is
    the remedy suggested when separation is detected.
    """
    xt = with_intercept(cov)
    a1 = (np.asarray(a) > 0).astype(float)
    n, m = xt.shape
    if a1.min() == a1.max():
        raise PropensityError("treatment is constant; propensity model is not identified")
    alpha = np.zeros(m)
    alpha[0] = special.logit(np.clip(a1.mean(), EPS, 1 - EPS))

    def penalized(al):
        return _loglik(al, xt, a1) / n - 0.5 * ridge * float(al[1:] @ al[1:])

    pen = np.full(m, ridge)
    pen[0] = 0.0
    grad_norm = np.inf
    for it in range(1, settings.max_iterations + 1):
        p = special.expit(xt @ alpha)
        grad = xt.T @ (a1 - p) / n - pen * alpha
        grad_norm = np.max(np.abs(grad))
        if grad_norm < settings.gradient_tolerance:
            return PropensityModel(alpha, design_id, "MLE", True, it - 1,
                                   info={"gradient_norm": grad_norm})
        hess = (xt * (p * (1 - p))[:, None]).T @ xt / n + np.diag(pen)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        f0 = penalized(alpha)
        t = 1.0
        while t > 1e-10 and penalized(alpha + t * step) < f0 - 1e-14 * abs(f0):
            t *= 0.5
        alpha = alpha + t * step
        if np.max(np.abs(alpha)) > MAX_COEF:
            raise SeparationError(
                f"logistic coefficients exceed {MAX_COEF:g} in magnitude (max |alpha| = "
                f"{np.max(np.abs(alpha)):.1f}); the data look separated, refit with ridge > 0")
    raise PropensityError(
        f"MLE did not converge in {settings.max_iterations} iterations "
        f"(mean score norm {grad_norm:.3g})")


def build_h(cov, d, alpha, outcome_model: OutcomeModel | None, kind: BalanceFunction):
    """Balancing-function matrix, one row per unit evaluated at rule assignment ``d``.

    Moments rows are ``x`` (order 1) or ``(x, x**2)`` (order 2, elementwise).
    Full rows stack ``(1-pi_d) dQ/dbeta``, ``(1-pi_d) Q dQ/dbeta``, ``dpi_d/dalpha``
    and ``Q dpi_d/dalpha``.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if kind.kind == "moments":
        return cov if kind.order == 1 else np.hstack([cov, cov**2])
    if outcome_model is None:
        raise ValueError("the full balancing function requires a fitted outcome model")
    d = np.asarray(d, dtype=float)
    xt = with_intercept(cov)
    p1 = _p1(np.asarray(alpha, dtype=float), xt)
    pd_ = np.where(d > 0, p1, 1.0 - p1)
    dq = features(cov, d, outcome_model.q)
    q = dq @ outcome_model.coef
    dpi = (np.where(d > 0, 1.0, -1.0) * p1 * (1 - p1))[:, None] * xt
    w = (1.0 - pd_)[:, None]
    return np.hstack([w * dq, (w * q[:, None]) * dq, dpi, q[:, None] * dpi])


class _BalanceMoments:
    """Covariate-balancing moment function g_i(alpha) = s_i(alpha) h_i(alpha).

    The sign factor ``s_i`` is I_d/pi_d - (1-I_d)/(1-pi_d), which equals
    d_i {I(A=1)/pi_1 - I(A=-1)/(1-pi_1)}.
    """

    def __init__(self, cov, a, d, kind: BalanceFunction, outcome_model):
        self.cov = np.asarray(cov, dtype=float)
        self.xt = with_intercept(self.cov)
        self.a1 = (np.asarray(a) > 0).astype(float)
        self.d = np.where(np.asarray(d) > 0, 1.0, -1.0)
        self.kind = kind
        self.om = outcome_model
        if kind.kind == "moments":
            # constant column balances the weights themselves
            h = build_h(self.cov, self.d, None, None, kind)
            h = np.hstack([np.ones((self.cov.shape[0], 1)), h])
            # binary columns repeat as their own squares; keep one copy
            seen, keep = set(), []
            for j in range(h.shape[1]):
                key = h[:, j].tobytes()
                if key not in seen:
                    seen.add(key)
                    keep.append(j)
            self.h = h[:, keep]
        else:
            if outcome_model is None:
                raise ValueError("the full balancing function requires a fitted outcome model")
            self.h = None

    @property
    def n(self):
        return self.xt.shape[0]

    def _sign(self, p1):
        return self.d * (self.a1 / p1 - (1.0 - self.a1) / (1.0 - p1))

    def gbar(self, alpha):
        if self.h is not None:
            return self.h.T @ self._sign(_p1(alpha, self.xt)) / self.n
        return self.g(alpha).mean(axis=0)

    def g(self, alpha):
        p1 = _p1(alpha, self.xt)
        h = self.h if self.h is not None else build_h(self.cov, self.d, alpha, self.om, self.kind)
        return self._sign(p1)[:, None] * h

    def gbar_jac(self, alpha):
        p1 = _p1(alpha, self.xt)
        s = self._sign(p1)
        ds = self.d * (-self.a1 * (1.0 - p1) / p1 - (1.0 - self.a1) * p1 / (1.0 - p1))
        if self.h is not None:
            gbar = self.h.T @ s / self.n
            jac = self.h.T @ (ds[:, None] * self.xt) / self.n
            return gbar, jac
        h = build_h(self.cov, self.d, alpha, self.om, self.kind)
        gbar = h.T @ s / self.n
        # d/dalpha of each block of h, weighted by s and summed over units
        dq = features(self.cov, self.d, self.om.q)
        q = dq @ self.om.coef
        v = p1 * (1.0 - p1)
        dpi = self.d * v
        d2pi = self.d * v * (1.0 - 2.0 * p1)

        def xs(wts):
            return wts[:, None] * self.xt

        jac = np.vstack([
            dq.T @ xs(-s * dpi),
            (q[:, None] * dq).T @ xs(-s * dpi),
            self.xt.T @ xs(s * d2pi),
            self.xt.T @ xs(s * q * d2pi),
        ])
        jac = (jac + h.T @ xs(ds)) / self.n
        return gbar, jac

    def curvature(self, alpha, r):
        """sum_k r_k d^2 gbar_k / d alpha^2 for fixed moments; None for the full function."""
        if self.h is None:
            return None
        p1 = _p1(alpha, self.xt)
        d2s = self.d * (self.a1 * (1.0 - p1) / p1 - (1.0 - self.a1) * p1 / (1.0 - p1))
        return self.xt.T @ ((d2s * (self.h @ r))[:, None] * self.xt) / self.n


def _gauss_newton(moments: _BalanceMoments, alpha0, weight, settings: GmmSettings):
    """Minimize gbar' W gbar by damped Newton (Gauss-Newton where the exact
    Hessian is unavailable or indefinite); BFGS fallback on stagnation."""
    alpha = np.array(alpha0, dtype=float)

    def objective(al):
        gb = moments.gbar(al)
        return float(gb @ weight @ gb)

    gbar, jac = moments.gbar_jac(alpha)
    obj = float(gbar @ weight @ gbar)
    grad = 2.0 * jac.T @ weight @ gbar
    # gradient tolerance relative to the Gauss-Newton curvature, so moments on
    # the outcome scale are judged like unit-scale ones
    tol = settings.gradient_tolerance * max(1.0, np.sqrt(np.trace(jac.T @ weight @ jac)))
    for it in range(1, settings.max_iterations + 1):
        if np.max(np.abs(grad)) < tol:
            return alpha, obj, grad, it - 1, True
        jw = jac.T @ weight
        approx = jw @ jac
        approx[np.diag_indices_from(approx)] += 1e-12 * max(1.0, np.trace(approx))
        step = None
        extra = moments.curvature(alpha, weight @ gbar)
        if extra is not None:
            try:
                chol = np.linalg.cholesky(approx + extra)
                step = -np.linalg.solve(chol.T, np.linalg.solve(chol, jw @ gbar))
            except np.linalg.LinAlgError:
                step = None
        if step is None:
            try:
                step = -np.linalg.solve(approx, jw @ gbar)
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(approx, jw @ gbar, rcond=None)[0]
        t = 1.0
        new_obj = objective(alpha + step)
        while not new_obj <= obj and t > 1e-8:
            t *= 0.5
            new_obj = objective(alpha + t * step)
        if not new_obj <= obj:
            break
        alpha = alpha + t * step
        if np.max(np.abs(alpha)) > MAX_COEF:
            raise SeparationError("covariate-balancing coefficients diverged; check overlap")
        converged_step = np.max(np.abs(t * step)) < 1e-13 * max(1.0, np.max(np.abs(alpha)))
        obj = new_obj
        gbar, jac = moments.gbar_jac(alpha)
        grad = 2.0 * jac.T @ weight @ gbar
        if converged_step:
            break
    if np.max(np.abs(grad)) < tol:
        return alpha, obj, grad, it, True

    def fg(al):
        gb, jc = moments.gbar_jac(al)
        return float(gb @ weight @ gb), 2.0 * jc.T @ weight @ gb

    res = optimize.minimize(fg, alpha, jac=True, method="BFGS",
                            options={"gtol": tol, "maxiter": settings.max_iterations})
    if res.fun <= obj:
        alpha, obj = res.x, float(res.fun)
    gbar, jac = moments.gbar_jac(alpha)
    grad = 2.0 * jac.T @ weight @ gbar
    # a quadratic form already at rounding level counts as solved
    ok = np.max(np.abs(grad)) < tol or obj < 1e-24
    return alpha, obj, grad, it + res.nit, ok


def _inverse_weight(cov_g):
    """Inverse of the moment covariance restricted to its well-conditioned subspace.

    Moment functions that are exact linear combinations of others (e.g. the
    intercept blocks of the full balancing function) make the covariance
    singular; those directions carry no information and get zero weight.
    """
    vals, vecs = np.linalg.eigh(cov_g)
    if not np.all(np.isfinite(vals)) or vals[-1] <= 0:
        raise PropensityError("moment covariance is degenerate")
    keep = vals > 1e-10 * vals[-1]
    return (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T


def fit_cbps(cov, a, d, balance: BalanceFunction = BalanceFunction(), outcome_model=None,
             settings: GmmSettings = GmmSettings(), design_id: str = "x",
             init: PropensityModel | None = None) -> PropensityModel:
    """Covariate-balancing propensity fit for rule assignments ``d``.

    Solves the balancing moment condition by GMM starting from the MLE. When
    the number of moments exceeds the number of coefficients, a first pass with
    identity weighting is followed (for ``weighting="twostep"``) by a pass with
    the inverse moment covariance as weight matrix.
    """
    moments = _BalanceMoments(cov, a, d, balance, outcome_model)
    if init is None:
        init = fit_mle(cov, a, settings, design_id)
    alpha0 = init.alpha
    m = alpha0.size
    k = moments.g(alpha0).shape[1]
    if k < m:
        raise PropensityError(f"{k} balancing moments cannot identify {m} coefficients")

    eye = np.eye(k)
    alpha1, obj1, grad1, it1, ok1 = _gauss_newton(moments, alpha0, eye, settings)
    info = {"stage1_objective": obj1, "k": k}
    if k == m or settings.weighting == "identity":
        alpha, obj, grad, iters, ok = alpha1, obj1, grad1, it1, ok1
        weight = eye
    else:
        g = moments.g(alpha1)
        gc = g - g.mean(axis=0)
        cov_g = gc.T @ gc / g.shape[0] + settings.ridge * eye
        weight = _inverse_weight(cov_g)
        gb1 = g.mean(axis=0)
        info["stage2_objective_at_stage1"] = float(gb1 @ weight @ gb1)
        alpha, obj, grad, it2, ok = _gauss_newton(moments, alpha1, weight, settings)
        iters = it1 + it2
    gbar = moments.g(alpha).mean(axis=0)
    norm = float(np.max(np.abs(gbar)))
    if k == m and norm >= 1e-6:
        ok = False
    if not ok:
        raise PropensityError(
            f"covariate-balancing GMM did not converge: |gbar|_inf={norm:.3g}, "
            f"objective={obj:.3g}, |grad|_inf={np.max(np.abs(grad)):.3g}")
    info["weight"] = weight
    info["moments"] = moments
    return PropensityModel(alpha, design_id, "CBPS", True, iters, obj, norm, info)


def cbps_influence(model: PropensityModel) -> np.ndarray:
    """Per-unit influence of a balancing fit, -(G'WG)^{-1} G'W g_i, as an (n, dim) array.

    ``G`` is the Jacobian of the mean moment and ``W`` the final weight matrix,
    both at the fitted coefficients; the mean of the rows approximates the
    estimation error of alpha.
    """
    moments = model.info.get("moments")
    if model.fit_method != "CBPS" or moments is None:
        raise ValueError("influence of the balancing fit needs a model returned by fit_cbps")
    weight = model.info["weight"]
    _, jac = moments.gbar_jac(model.alpha)
    gw = jac.T @ weight
    bread = gw @ jac
    try:
        rows = np.linalg.solve(bread, gw @ moments.g(model.alpha).T)
    except np.linalg.LinAlgError as exc:
        raise PropensityError("balancing moments do not identify the coefficients locally") from exc
    return -rows.T

