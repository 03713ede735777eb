"""Linear outcome working models with treatment interactions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RankDeficiencyError(ValueError):
    pass


def features(cov, a, q: int = 0) -> np.ndarray:
    """Outcome-model feature vector m(x, a).

    For ``q == 0`` the layout is ``(1, a, x, a*x)``. For an extended covariate
    matrix ``[X | W~ | R]`` with ``q`` predictive columns the layout is
    ``(1, a, X, a*X, R, a*R, W~, a*W~)``. Works on one row or on an n-by-m matrix.
    """
    cov = np.asarray(cov, dtype=float)
    a = np.asarray(a, dtype=float)
    single = cov.ndim == 1
    if single:
        cov = cov[None, :]
        a = np.atleast_1d(a)
    n, m = cov.shape
    if a.shape != (n,):
        raise ValueError(f"treatment vector of length {a.size} does not match {n} rows")
    p = m - 2 * q
    if p < 0:
        raise ValueError(f"covariate width {m} too small for q={q}")
    one = np.ones((n, 1))
    ac = a[:, None]
    x = cov[:, :p]
    blocks = [one, ac, x, ac * x]
    if q:
        wt = cov[:, p:p + q]
        r = cov[:, p + q:]
        blocks += [r, ac * r, wt, ac * wt]
    out = np.hstack(blocks)
    return out[0] if single else out


@dataclass(frozen=True, eq=False)
class OutcomeModel:
    """Coefficient vector over the :func:`features` layout."""

    coef: np.ndarray
    design_id: str = "x"
    q: int = 0
    method: str = "OLS"

    def __post_init__(self):
        coef = np.array(self.coef, dtype=float).ravel()
        coef.flags.writeable = False
        object.__setattr__(self, "coef", coef)

    def with_coef(self, coef, method: str) -> "OutcomeModel":
        return OutcomeModel(coef, self.design_id, self.q, method)


def _deficient_columns(mat: np.ndarray, tol: float = 1e-10) -> list[int]:
    """Columns that are (numerically) linear combinations of earlier ones."""
    scale = np.linalg.norm(mat, axis=0)
    scale[scale == 0] = 1.0
    z = mat / scale
    bad, kept = [], []
    for j in range(z.shape[1]):
        col = z[:, j]
        if kept:
            basis = z[:, kept]
            resid = col - basis @ np.linalg.lstsq(basis, col, rcond=None)[0]
        else:
            resid = col
        if np.linalg.norm(resid) <= tol * max(1.0, np.linalg.norm(col)) or not np.any(col):
            bad.append(j)
        else:
            kept.append(j)
    return bad


def fit_ols(cov, a, y, q: int = 0, design_id: str = "x") -> OutcomeModel:
    """Least-squares fit of ``y`` on :func:`features`; rank deficiency is an error."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2:
        raise ValueError("fit_ols expects an n-by-m covariate matrix")
    mat = features(cov, a, q)
    y = np.asarray(y, dtype=float)
    svals = np.linalg.svd(mat / np.maximum(np.linalg.norm(mat, axis=0), 1e-300), compute_uv=False)
    if mat.shape[0] < mat.shape[1] or svals[-1] <= 1e-10 * svals[0]:
        bad = _deficient_columns(mat)
        raise RankDeficiencyError(
            f"outcome feature matrix is rank deficient ({mat.shape[0]} rows, {mat.shape[1]} columns); "
            f"offending feature columns: {bad}")
    coef = np.linalg.lstsq(mat, y, rcond=None)[0]
    return OutcomeModel(coef, design_id, q, "OLS")


def predict(model: OutcomeModel, cov, a):
    m = features(cov, a, model.q)
    if m.shape[-1] != model.coef.size:
        raise ValueError(f"feature length {m.shape[-1]} does not match coefficients {model.coef.size}")
    return m @ model.coef


def dq_dbeta(cov, d, q: int = 0):
    """Gradient of Q(x, d; beta) in beta; the model is linear so this is m(x, d)."""
    return features(cov, d, q)
