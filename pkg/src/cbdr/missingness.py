"""Single imputation of predictive covariates and the A-independent-of-R check."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy import stats

from .dataset import Dataset, DataError
from .propensity import GmmSettings, fit_mle, with_intercept, _loglik

SCHEMES = ("zero", "median", "linear", "interact")


@dataclass(frozen=True)
class ImputationScheme:
    kind: str = "median"

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown imputation scheme {self.kind!r}; expected one of {SCHEMES}")


def _basis(x: np.ndarray, kind: str) -> np.ndarray:
    cols = [np.ones(x.shape[0]), *x.T]
    if kind == "interact":
        cols += [x[:, i] * x[:, j] for i, j in combinations(range(x.shape[1]), 2)]
    return np.column_stack(cols)


def impute(ds: Dataset, scheme) -> np.ndarray:
    """Return W~ = R W + (1 - R) f(X).

    ``f`` is 0, the observed-column median, or a least-squares prediction from
    X alone (linear, or linear plus pairwise products for ``interact``), fit on
    rows where the column is observed.
    """
    kind = scheme.kind if isinstance(scheme, ImputationScheme) else ImputationScheme(scheme).kind
    w_tilde = np.array(ds.w, dtype=float, copy=True)
    if ds.q == 0:
        return w_tilde
    basis = _basis(ds.x, kind) if kind in ("linear", "interact") else None
    for j in range(ds.q):
        obs = ds.r[:, j] == 1
        miss = ~obs
        if kind == "zero":
            fill = 0.0
        elif kind == "median":
            fill = np.median(ds.w[obs, j])
        else:
            if obs.sum() < basis.shape[1] + 1:
                raise DataError(
                    f"column {ds.w_names[j]!r}: {obs.sum()} observed rows are too few for "
                    f"{kind} imputation ({basis.shape[1]} parameters)")
            coef = np.linalg.lstsq(basis[obs], ds.w[obs, j], rcond=None)[0]
            fill = basis[miss] @ coef
        w_tilde[miss, j] = fill
    return w_tilde


@dataclass(frozen=True)
class IndependenceTest:
    label: str
    statistic: float
    dof: int
    p_value: float


@dataclass(frozen=True)
class IndependenceReport:
    tests: tuple[IndependenceTest, ...]
    message: str = ""

    @property
    def joint(self) -> IndependenceTest | None:
        return self.tests[-1] if self.tests else None


def _max_loglik(cov, a, settings):
    model = fit_mle(cov, a, settings)
    a1 = (np.asarray(a) > 0).astype(float)
    return _loglik(model.alpha, with_intercept(cov), a1)


def independence_check(ds: Dataset, settings: GmmSettings = GmmSettings(max_iterations=100)) -> IndependenceReport:
    """Likelihood-ratio tests of A independent of R given X.

    Compares logistic regressions of I(A=1) on (1, X) and on (1, X, R); one test
    per missingness indicator (1 dof) followed by the joint test (q dof).
    Separation in either fit propagates as :class:`~cbdr.propensity.SeparationError`.
    """
    if ds.q == 0:
        return IndependenceReport((), "no predictive covariates; test vacuous")
    ll0 = _max_loglik(ds.x, ds.a, settings)
    tests = []
    varying = [j for j in range(ds.q) if 0 < ds.r[:, j].mean() < 1]
    for j in varying:
        ll1 = _max_loglik(np.hstack([ds.x, ds.r[:, [j]]]), ds.a, settings)
        stat = max(2.0 * (ll1 - ll0), 0.0)
        tests.append(IndependenceTest(ds.w_names[j], stat, 1, float(stats.chi2.sf(stat, 1))))
    message = ""
    if len(varying) < ds.q:
        message = "fully observed columns skipped"
    if varying:
        ll1 = _max_loglik(np.hstack([ds.x, ds.r[:, varying]]), ds.a, settings)
        stat = max(2.0 * (ll1 - ll0), 0.0)
        dof = len(varying)
        tests.append(IndependenceTest("joint", stat, dof, float(stats.chi2.sf(stat, dof))))
    else:
        message = "no missing values in predictive covariates; test vacuous"
    return IndependenceReport(tuple(tests), message)
