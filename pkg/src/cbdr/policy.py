"""Linear treatment rules d(x) = sign(eta . (1, x)) and direct value search."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .dataset import Dataset
from .design import Design, X
from .outcome import fit_ols
from .value import EstimatorKind, EstimatorOptions, ValueProblem


class SearchError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LinearRule:
    """Unit-norm coefficients over the intercept-augmented confounders.

    ``train_value`` is the estimated value on the data the rule was searched on,
    when known.
    """

    eta: np.ndarray
    train_value: float | None = field(default=None, compare=False)

    def __post_init__(self):
        eta = np.array(self.eta, dtype=float).ravel()
        nrm = np.linalg.norm(eta)
        if not np.isfinite(nrm) or nrm == 0:
            raise ValueError("rule coefficients must be finite and not all zero")
        eta = eta / nrm
        eta.flags.writeable = False
        object.__setattr__(self, "eta", eta)

    def scores(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] + 1 != self.eta.size:
            raise ValueError(f"rule expects {self.eta.size - 1} covariates, got {x.shape[-1]}")
        return self.eta[0] + x @ self.eta[1:]

    def assign(self, x):
        """+1 where eta . (1, x) >= 0 (ties go to +1), else -1."""
        s = self.scores(x)
        return np.where(s >= 0, 1.0, -1.0)


def assign(rule: LinearRule, x):
    return rule.assign(x)


@dataclass(frozen=True)
class SearchSettings:
    restarts: int = 20
    population: int = 50
    max_evals: int = 5000
    seed: int = 0

    def __post_init__(self):
        if min(self.restarts, self.population, self.max_evals) < 1:
            raise ValueError("search settings must be positive")


def contrast_init(train: Dataset) -> np.ndarray:
    """Regression-contrast start: the treatment-interaction part of the OLS fit on X."""
    beta = fit_ols(train.x, train.a, train.y).coef
    p = train.p
    eta = np.concatenate([[beta[1]], beta[2 + p:2 + 2 * p]])
    # a contrast at rounding level (e.g. constant outcome) carries no direction
    if np.linalg.norm(eta) <= 1e-10 * max(1.0, np.linalg.norm(beta)):
        eta = np.eye(p + 1)[0]
    return eta


def optimize_rule(train: Dataset, kind: EstimatorKind = EstimatorKind.CBDR, design: Design = X,
                  settings: SearchSettings = SearchSettings(),
                  options: EstimatorOptions = EstimatorOptions()) -> LinearRule:
    """Search the linear rule class for the rule with the largest estimated value.

    The objective is piecewise constant in ``eta``, so the search is a seeded
    differential evolution over the box [-1, 1]^(p+1) (normalized to the unit
    sphere), repeated ``restarts`` times under a shared ``max_evals`` budget.
    The regression-contrast rule is always the first candidate; the best
    candidate wins with ties going to the earliest evaluated.
    """
    if isinstance(kind, str):
        kind = EstimatorKind.parse(kind)
    for arm in (-1.0, 1.0):
        if np.sum(train.a == arm) < 2:
            raise SearchError("each treatment arm needs at least two training units")
    problem = ValueProblem(train, design, options)
    dim = train.p + 1
    best = {"eta": None, "value": -np.inf}
    evals = [0]
    failures = [0]

    def value_of(eta):
        nrm = np.linalg.norm(eta)
        if nrm == 0 or not np.isfinite(nrm):
            return -np.inf
        d = LinearRule(eta).assign(train.x)
        evals[0] += 1
        try:
            v = problem.value(kind, d)
        except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError):
            failures[0] += 1
            return -np.inf
        if v > best["value"]:
            best["eta"], best["value"] = eta / nrm, v
        return v

    init = contrast_init(train)
    init = init / np.linalg.norm(init)
    init_value = value_of(init)

    popsize = max(1, int(np.ceil(settings.population / dim)))
    per_pop = popsize * dim
    budget = settings.max_evals - 1
    per_restart = budget // settings.restarts
    if per_restart >= 2 * per_pop:
        seeds = np.random.SeedSequence(settings.seed).spawn(settings.restarts)
        box_init = init / np.max(np.abs(init))
        for child in seeds:
            maxiter = per_restart // per_pop - 1
            optimize.differential_evolution(
                lambda e: -value_of(e), [(-1.0, 1.0)] * dim, maxiter=maxiter, popsize=popsize,
                tol=0.0, atol=0.0, polish=False, init="latinhypercube", x0=box_init,
                rng=np.random.default_rng(child), updating="immediate")
    if best["eta"] is None:
        raise SearchError(f"all {evals[0]} candidate evaluations failed")
    if failures[0]:
        warnings.warn(f"{failures[0]} of {evals[0]} rule evaluations failed and were skipped",
                      RuntimeWarning, stacklevel=2)
    # gains at rounding level do not displace the start
    if not best["value"] > init_value + 1e-12 * max(1.0, abs(init_value)):
        return LinearRule(init, init_value)
    return LinearRule(best["eta"], best["value"])
