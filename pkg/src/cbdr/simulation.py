"""Simulation designs, truth oracle and the Monte Carlo scenario runner."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np
from scipy import special
from scipy.stats import qmc

from .dataset import Dataset
from .design import SIMULATION_DESIGNS, Design
from .policy import LinearRule, SearchSettings, optimize_rule
from .value import ALL_KINDS, EstimatorKind, EstimatorOptions, ValueProblem

SCENARIOS = {"cc": ("lin", "lin"), "ic": ("nonlin", "lin"), "ci": ("lin", "nonlin"), "ii": ("nonlin", "nonlin")}
OPTIMAL_ETA = np.array([1.0, -2.0, 1.0])  # sign of the treatment contrast in both outcome models
# Desk-scale budget: one differential-evolution pass of 200 evaluations from the
# regression-contrast start. Each (replicate, estimator, design) searches its own rule.
SIMULATION_SEARCH = SearchSettings(restarts=1, population=15, max_evals=200)


class ReplicateFailure(RuntimeError):
    pass


def gen_covariates(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """X and W, each uniform on [-1, 1] x [-2, 2], independent."""
    if n < 1:
        raise ValueError("n must be positive")
    half_widths = np.array([1.0, 2.0])
    x = rng.uniform(-1.0, 1.0, size=(n, 2)) * half_widths
    w = rng.uniform(-1.0, 1.0, size=(n, 2)) * half_widths
    return x, w


def gen_missingness(w, omega, rng: np.random.Generator) -> np.ndarray:
    """R_ij ~ Bernoulli(expit(1 + omega_j |W_ij|)); 1 means observed."""
    w = np.asarray(w, dtype=float)
    omega = np.broadcast_to(np.asarray(omega, dtype=float), (w.shape[1],))
    prob = special.expit(1.0 + omega * np.abs(w))
    return (rng.random(w.shape) < prob).astype(float)


def treatment_probability(x, ps_truth: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if ps_truth == "lin":
        return special.expit(0.5 * x[:, 0] - 0.5 * x[:, 1])
    if ps_truth == "nonlin":
        return special.expit(-0.5 + np.abs(x[:, 0] * x[:, 1]))
    raise ValueError(f"unknown propensity truth {ps_truth!r}")


def gen_treatment(x, ps_truth: str, rng: np.random.Generator) -> np.ndarray:
    prob = treatment_probability(x, ps_truth)
    return np.where(rng.random(prob.shape) < prob, 1.0, -1.0)


def outcome_mean(x, w, a, outcome_truth: str) -> np.ndarray:
    """Noiseless outcome E(Y | X, W, A) for the linear or nonlinear model."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    a = np.asarray(a, dtype=float)
    x1, x2 = x[:, 0], x[:, 1]
    w1, w2 = w[:, 0], w[:, 1]
    contrast = 1.0 - 2.0 * x1 + x2
    if outcome_truth == "lin":
        return 10.0 * (4 * x1 - x2 + 3 * w1 - 2 * w2 + a * contrast)
    if outcome_truth == "nonlin":
        return 10.0 * (4 * x1**2 - w2**2 + w1 * x2 + 5 * w2 * x1 + a * contrast * np.abs(x2))
    raise ValueError(f"unknown outcome truth {outcome_truth!r}")


def gen_outcome(x, w, a, outcome_truth: str, rng: np.random.Generator) -> np.ndarray:
    mean = outcome_mean(x, w, a, outcome_truth)
    return mean + rng.standard_normal(mean.shape)


@dataclass(frozen=True)
class ScenarioSpec:
    ps_truth: str = "lin"
    outcome_truth: str = "lin"
    omega: tuple[float, float] = (1.0, 1.0)
    n_train: int = 1000
    n_test: int = 1000
    reps: int = 500
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "omega", tuple(float(v) for v in self.omega))
        if self.ps_truth not in ("lin", "nonlin") or self.outcome_truth not in ("lin", "nonlin"):
            raise ValueError("ps_truth and outcome_truth must be 'lin' or 'nonlin'")
        if len(self.omega) != 2:
            raise ValueError("omega needs two entries")
        if min(self.n_train, self.n_test, self.reps) < 1:
            raise ValueError("sample sizes and reps must be positive")

    @classmethod
    def from_code(cls, code: str, **kw) -> "ScenarioSpec":
        try:
            ps_truth, outcome_truth = SCENARIOS[code.lower()]
        except KeyError:
            raise ValueError(f"unknown scenario {code!r}; expected one of {sorted(SCENARIOS)}") from None
        return cls(ps_truth, outcome_truth, **kw)

    @property
    def code(self) -> str:
        return {v: k for k, v in SCENARIOS.items()}[(self.ps_truth, self.outcome_truth)].upper()


def generate(spec: ScenarioSpec, n: int, seed) -> Dataset:
    """One simulated dataset; covariates, missingness, treatment and noise use separate streams."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    cov_ss, miss_ss, trt_ss, noise_ss = ss.spawn(4)
    x, w = gen_covariates(n, np.random.default_rng(cov_ss))
    r = gen_missingness(w, spec.omega, np.random.default_rng(miss_ss))
    a = gen_treatment(x, spec.ps_truth, np.random.default_rng(trt_ss))
    y = gen_outcome(x, w, a, spec.outcome_truth, np.random.default_rng(noise_ss))
    return Dataset(x, a, y, np.where(r == 1, w, np.nan), r)


def _qmc_points(m: int, seed) -> tuple[np.ndarray, np.ndarray]:
    u = qmc.Sobol(4, scramble=True, seed=seed).random_base2(m)
    pts = 2.0 * u - 1.0
    pts[:, [1, 3]] *= 2.0
    return pts[:, :2], pts[:, 2:]


def oracle_truth(outcome_truth: str, mc_n: int = 2**20, seed: int = 20240101,
                 eta=OPTIMAL_ETA) -> tuple[float, float]:
    """Value of a linear rule (default: the optimal rule) under the noiseless outcome mean.

    Randomized quasi-Monte Carlo: 16 independently scrambled Sobol sets whose
    total size is at least ``mc_n``. Returns ``(estimate, standard_error)`` with
    the standard error taken across the 16 scrambles.
    """
    if mc_n < 10**6:
        raise ValueError("mc_n must be at least 1e6")
    return _rqmc_value(outcome_truth, int(mc_n), int(seed), tuple(np.asarray(eta, dtype=float)))


@lru_cache(maxsize=16)
def _rqmc_value(outcome_truth, mc_n, seed, eta):
    blocks = 16
    m = int(math.ceil(math.log2(mc_n / blocks)))
    rule = LinearRule(np.array(eta))
    means = []
    for child in np.random.SeedSequence(seed).spawn(blocks):
        x, w = _qmc_points(m, np.random.default_rng(child))
        means.append(outcome_mean(x, w, rule.assign(x), outcome_truth).mean())
    means = np.array(means)
    return float(means.mean()), float(means.std(ddof=1) / np.sqrt(blocks))


@lru_cache(maxsize=2)
def _rule_value_points():
    return _qmc_points(16, np.random.default_rng(7))


def rule_value(rule: LinearRule, outcome_truth: str) -> float:
    """True V(d) of a fitted rule (2**16 scrambled Sobol points)."""
    x, w = _rule_value_points()
    return float(outcome_mean(x, w, rule.assign(x), outcome_truth).mean())


@dataclass(frozen=True)
class SummaryRow:
    scenario: str
    estimator_kind: str
    design: str
    bias: float
    se: float
    rmse: float
    reps: int
    mean_sigma_hat: float = float("nan")
    sigma_hat_mcse: float = float("nan")
    mean_rule_value: float = float("nan")
    truth: float = float("nan")


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    rows: list[SummaryRow]
    raw: list[dict]
    failures: int
    truth: float
    failure_messages: list[str] = field(default_factory=list)

    def row(self, kind, design) -> SummaryRow:
        kind = kind.label if isinstance(kind, EstimatorKind) else kind
        design = design.label if isinstance(design, Design) else design
        for r in self.rows:
            if r.estimator_kind == kind and r.design == design:
                return r
        raise KeyError((kind, design))


def run_replicate(spec: ScenarioSpec, k: int, kinds, designs, search: SearchSettings,
                  options: EstimatorOptions, refit_on_test: bool = True) -> list[dict]:
    """Train rules on one simulated training set and evaluate them on an independent test set."""
    train_ss, test_ss = np.random.SeedSequence([int(spec.seed), int(k)]).spawn(2)
    train = generate(spec, spec.n_train, train_ss)
    test = generate(spec, spec.n_test, test_ss)
    out = []
    for design in designs:
        test_problem = ValueProblem(test, design, options)
        train_problem = None if refit_on_test else ValueProblem(train, design, options)
        for kind in kinds:
            rule = optimize_rule(train, kind, design, search, options)
            d_test = rule.assign(test.x)
            fixed = None
            if not refit_on_test:
                fixed = train_problem.nuisances(kind, rule.assign(train.x))
            est = test_problem.evaluate(kind, d_test, fixed)
            out.append({
                "rep": k, "scenario": spec.code, "estimator": kind.label, "design": design.label,
                "value": est.value, "sigma_hat": est.sigma_hat, "train_value": rule.train_value,
                "rule_value": rule_value(rule, spec.outcome_truth),
                **{f"eta{j}": v for j, v in enumerate(rule.eta)},
            })
    return out


def _safe_replicate(args):
    spec, k, kinds, designs, search, options, refit = args
    try:
        return k, run_replicate(spec, k, kinds, designs, search, options, refit), None
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        return k, None, f"replicate {k}: {type(exc).__name__}: {exc}"


def worker_count(workers: int | None = None) -> int:
    if workers:
        return max(1, int(workers))
    env = os.environ.get("CBDR_THREADS")
    cpus = os.cpu_count() or 1
    if env:
        try:
            return max(1, min(int(env), cpus))
        except ValueError:
            pass
    return cpus


def run_scenario(spec: ScenarioSpec, kinds=ALL_KINDS, designs=SIMULATION_DESIGNS,
                 search: SearchSettings = SIMULATION_SEARCH, options: EstimatorOptions = EstimatorOptions(),
                 workers: int | None = None, refit_on_test: bool = True,
                 max_failure_rate: float = 0.02) -> ScenarioResult:
    """Run ``spec.reps`` replicates and summarize bias, SE and RMSE per (estimator, design).

    Replicate ``k`` is seeded from ``(spec.seed, k)`` so results do not depend on
    the number of workers. Failed replicates are dropped and counted; more than
    ``max_failure_rate`` of them raises :class:`ReplicateFailure`.
    """
    kinds = tuple(EstimatorKind.parse(k) if isinstance(k, str) else k for k in kinds)
    designs = tuple(Design.parse(d) if isinstance(d, str) else d for d in designs)
    jobs = [(spec, k, kinds, designs, search, options, refit_on_test) for k in range(spec.reps)]
    n_workers = min(worker_count(workers), spec.reps)
    if n_workers > 1:
        with ProcessPoolExecutor(n_workers) as pool:
            results = list(pool.map(_safe_replicate, jobs, chunksize=max(1, spec.reps // (4 * n_workers))))
    else:
        results = [_safe_replicate(job) for job in jobs]
    results.sort(key=lambda t: t[0])
    messages = [msg for _, rows, msg in results if rows is None]
    if len(messages) > max_failure_rate * spec.reps:
        raise ReplicateFailure(f"{len(messages)} of {spec.reps} replicates failed; first: {messages[0]}")
    raw = [row for _, rows, _ in results if rows is not None for row in rows]
    truth, _ = oracle_truth(spec.outcome_truth)
    rows = summarize(raw, truth, kinds, designs, spec.code)
    return ScenarioResult(spec, rows, raw, len(messages), truth, messages)


def summarize(raw: list[dict], truth: float, kinds, designs, scenario: str) -> list[SummaryRow]:
    rows = []
    for design in designs:
        for kind in kinds:
            sel = [r for r in raw if r["estimator"] == kind.label and r["design"] == design.label]
            if not sel:
                continue
            v = np.array([r["value"] for r in sel])
            sig = np.array([r["sigma_hat"] for r in sel])
            reps = v.size
            se = float(v.std(ddof=1)) if reps > 1 else 0.0
            rows.append(SummaryRow(
                scenario, kind.label, design.label,
                bias=float(v.mean() - truth), se=se,
                rmse=float(np.sqrt(np.mean((v - truth) ** 2))), reps=reps,
                mean_sigma_hat=float(sig.mean()),
                sigma_hat_mcse=float(sig.std(ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0,
                mean_rule_value=float(np.mean([r["rule_value"] for r in sel])), truth=truth,
            ))
    return rows


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_summary_csv(rows: list[SummaryRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(SummaryRow.__dataclass_fields__))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in asdict(row).items()})


def write_summary_markdown(result: ScenarioResult, path) -> None:
    spec = result.spec
    designs = list(dict.fromkeys(r.design for r in result.rows))
    kinds = list(dict.fromkeys(r.estimator_kind for r in result.rows))
    lines = [
        f"# Scenario {spec.code}, omega = ({spec.omega[0]:g}, {spec.omega[1]:g})",
        "",
        f"Bias, SE and RMSE of the test-set value estimates (values x 100). "
        f"Truth {result.truth:.4f}; {spec.reps} replicates requested, {result.failures} failed; "
        f"n_train = {spec.n_train}, n_test = {spec.n_test}, seed = {spec.seed}.",
        "",
        "| Method | " + " | ".join(f"{d} Bias | {d} SE | {d} RMSE" for d in designs) + " |",
        "|---|" + "---|" * (3 * len(designs)),
    ]
    for kind in kinds:
        cells = []
        for d in designs:
            r = result.row(kind, d)
            cells += [f"{100 * r.bias:.0f}", f"{100 * r.se:.0f}", f"{100 * r.rmse:.0f}"]
        lines.append(f"| {kind} | " + " | ".join(cells) + " |")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_raw_csv(raw: list[dict], path) -> None:
    if not raw:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(raw[0]))
        writer.writeheader()
        for row in raw:
            writer.writerow({k: _cell(v) for k, v in row.items()})
