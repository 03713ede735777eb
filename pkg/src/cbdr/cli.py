"""Command-line front end: ``cbdr simulate | estimate | search | diagnose``.

Settings come from built-in defaults, then an optional JSON file given with
``--config``, then command-line flags, later sources overriding earlier ones.
JSON keys may be nested (``{"search": {"restarts": 5}}``) or dotted
(``{"search.restarts": 5}``); unknown keys are rejected.

Exit codes: 0 success, 2 configuration or input error, 3 too many failed
simulation replicates, 4 estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .dataset import DataError, Schema, SplitSpec, load_csv, normalize, split
from .design import Design, SIMULATION_DESIGNS
from .missingness import SCHEMES, independence_check
from .outcome import RankDeficiencyError
from .policy import SearchError, SearchSettings, optimize_rule
from .propensity import BalanceFunction, GmmSettings, PropensityError
from .simulation import (
    SCENARIOS, SIMULATION_SEARCH, ReplicateFailure, ScenarioSpec, run_scenario, write_raw_csv,
    write_summary_csv, write_summary_markdown,
)
from .value import EstimationError, EstimatorKind, EstimatorOptions, estimate_with_bootstrap

EXIT_OK, EXIT_CONFIG, EXIT_REPLICATES, EXIT_ESTIMATION = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


ESTIMATION_ERRORS = (PropensityError, EstimationError, RankDeficiencyError, SearchError,
                     ArithmeticError, np.linalg.LinAlgError)

# key -> default; None means "required by the subcommands that use it" or "derived"
DEFAULTS = {
    "seed": 0,
    "out": ".",
    "kinds": "udr,idr,cbdr,cbdr*",
    "ps.method": "any",
    "ps.balance": "m2",
    "ps.weighting": "twostep",
    "ps.max_iterations": 200,
    "om.design": "xdagger",
    "om.constraint": "unconstrained",
    "impute": "median",
    "search.restarts": 20,
    "search.population": 50,
    "search.max_evals": 5000,
    "search.seed": None,
    "bootstrap.b": 300,
    "workers": None,
    # simulate
    "scenario": None,
    "omega": "1,1",
    "reps": 500,
    "n_train": 1000,
    "n_test": 1000,
    "designs": "x,xdagger:zero,xdagger:median,xdagger:linear,xdagger:interact",
    "raw": False,
    "refit_on_test": True,
    # data
    "data": None,
    "treatment": None,
    "outcome": None,
    "confounders": None,
    "predictive": "",
    "normalize": "",
    "train_fraction": 0.5,
}

# simulation defaults differ from the library search defaults to keep replicates cheap
SIMULATE_OVERRIDES = {
    "search.restarts": SIMULATION_SEARCH.restarts,
    "search.population": SIMULATION_SEARCH.population,
    "search.max_evals": SIMULATION_SEARCH.max_evals,
}


def _flatten(obj, prefix=""):
    out = {}
    for key, value in obj.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    flat = _flatten(raw)
    unknown = sorted(set(flat) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return flat


def _split_list(value) -> list[str]:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return [str(v).strip() for v in value if str(v).strip()]
    return [v.strip() for v in str(value).split(",") if v.strip()]


def _as_int(cfg, key, minimum=None) -> int:
    try:
        value = int(cfg[key])
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be an integer, got {cfg[key]!r}") from None
    if minimum is not None and value < minimum:
        raise ConfigError(f"{key} must be at least {minimum}, got {value}")
    return value


def _as_bool(cfg, key) -> bool:
    value = cfg[key]
    if isinstance(value, bool):
        return value
    if str(value).lower() in ("1", "true", "yes"):
        return True
    if str(value).lower() in ("0", "false", "no"):
        return False
    raise ConfigError(f"{key} must be true or false, got {value!r}")


# ---------------------------------------------------------------- validation

def _kinds(cfg) -> tuple[EstimatorKind, ...]:
    try:
        kinds = tuple(EstimatorKind.parse(k) for k in _split_list(cfg["kinds"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    method = str(cfg["ps.method"]).lower()
    if method not in ("any", "mle", "cbps"):
        raise ConfigError(f"ps.method must be any, mle or cbps, got {method!r}")
    if method != "any":
        kinds = tuple(k for k in kinds if k.ps_method == method)
    if not kinds:
        raise ConfigError("no estimator selected")
    return kinds


def _options(cfg) -> EstimatorOptions:
    try:
        balance = BalanceFunction.parse(str(cfg["ps.balance"]))
        gmm = GmmSettings(max_iterations=_as_int(cfg, "ps.max_iterations", 1),
                          weighting=str(cfg["ps.weighting"]).lower())
        return EstimatorOptions(balance=balance, gmm=gmm, constraint=str(cfg["om.constraint"]).lower(),
                                seed=_as_int(cfg, "seed", 0))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _search(cfg) -> SearchSettings:
    seed = cfg["search.seed"] if cfg["search.seed"] is not None else cfg["seed"]
    try:
        return SearchSettings(restarts=_as_int(cfg, "search.restarts", 1),
                              population=_as_int(cfg, "search.population", 1),
                              max_evals=_as_int(cfg, "search.max_evals", 1), seed=int(seed))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _design(text, cfg) -> Design:
    try:
        return Design.parse(str(text), default_impute=str(cfg["impute"]).lower())
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _check_impute(cfg):
    if str(cfg["impute"]).lower() not in SCHEMES:
        raise ConfigError(f"impute must be one of {', '.join(SCHEMES)}, got {cfg['impute']!r}")


def _load(cfg):
    for key in ("data", "treatment", "outcome", "confounders"):
        if not cfg[key]:
            raise ConfigError(f"missing required setting --{key.replace('_', '-')}")
    try:
        schema = Schema(cfg["treatment"], cfg["outcome"], _split_list(cfg["confounders"]),
                        _split_list(cfg["predictive"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ds = load_csv(cfg["data"], schema)
    cols = _split_list(cfg["normalize"])
    if cols == ["all"]:
        cols = [*ds.x_names, *ds.w_names]
    if cols:
        ds = normalize(ds, cols)
    return ds


def _out_dir(cfg) -> str:
    out = str(cfg["out"])
    os.makedirs(out, exist_ok=True)
    return out


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _num(v) -> str:
    return repr(float(v))


# ---------------------------------------------------------------- subcommands

def cmd_simulate(cfg) -> int:
    if not cfg["scenario"]:
        raise ConfigError("missing required setting --scenario")
    if str(cfg["scenario"]).lower() not in SCENARIOS:
        raise ConfigError(f"unknown scenario {cfg['scenario']!r}; expected one of {', '.join(sorted(SCENARIOS))}")
    try:
        omega = tuple(float(v) for v in _split_list(cfg["omega"]))
    except ValueError:
        raise ConfigError(f"omega must be two numbers, got {cfg['omega']!r}") from None
    if len(omega) != 2:
        raise ConfigError(f"omega must be two numbers, got {cfg['omega']!r}")
    _check_impute(cfg)
    designs = tuple(_design(d, cfg) for d in _split_list(cfg["designs"])) or SIMULATION_DESIGNS
    spec = ScenarioSpec.from_code(str(cfg["scenario"]), omega=omega, n_train=_as_int(cfg, "n_train", 2),
                                  n_test=_as_int(cfg, "n_test", 2), reps=_as_int(cfg, "reps", 1),
                                  seed=_as_int(cfg, "seed", 0))
    workers = _as_int(cfg, "workers", 1) if cfg["workers"] is not None else None
    kinds, options, search = _kinds(cfg), _options(cfg), _search(cfg)
    refit = _as_bool(cfg, "refit_on_test")
    out = _out_dir(cfg)
    result = run_scenario(spec, kinds, designs, search, options, workers=workers, refit_on_test=refit)
    write_summary_csv(result.rows, os.path.join(out, "summary.csv"))
    write_summary_markdown(result, os.path.join(out, "summary.md"))
    if _as_bool(cfg, "raw"):
        write_raw_csv(result.raw, os.path.join(out, "raw_estimates.csv"))
    print(f"scenario {spec.code}: {len(result.rows)} rows, {result.failures} failed replicates; "
          f"wrote {os.path.join(out, 'summary.csv')}")
    return EXIT_OK


def _designs_for_data(cfg, ds) -> list[Design]:
    _check_impute(cfg)
    designs = [Design("x")]
    if ds.q > 0:
        designs.append(Design("xdagger", str(cfg["impute"]).lower()))
    return designs


REPORT_HEADER = [
    "covariate_set", "method", "point_estimate", "sigma_hat", "estimation_variance", "ci_low", "ci_high",
    "bootstrap_variance", "bootstrap_ci_low", "bootstrap_ci_high", "percentile_low", "percentile_high",
    "bootstrap_b", "bootstrap_failures", "train_value", "sample_mean_y", "n_train", "n_test",
]


def cmd_estimate(cfg) -> int:
    ds = _load(cfg)
    kinds, options, search = _kinds(cfg), _options(cfg), _search(cfg)
    b = _as_int(cfg, "bootstrap.b", 2)
    try:
        split_spec = SplitSpec(float(cfg["train_fraction"]), _as_int(cfg, "seed", 0))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    designs = _designs_for_data(cfg, ds)
    out = _out_dir(cfg)
    train, test = split(ds, split_spec)
    mean_y = float(np.mean(ds.y))
    print(f"sample mean of Y: {mean_y:.2f} (n = {ds.n}; train {train.n}, test {test.n})")
    rows, md = [], []
    for design in designs:
        for kind in kinds:
            rule = optimize_rule(train, kind, design, search, options)
            est = estimate_with_bootstrap(kind, test, rule, design, options, b=b, seed=split_spec.seed)
            bs = est.bootstrap
            lo, hi = est.ci
            rows.append([design.label, kind.label, _num(est.value), _num(est.sigma_hat), _num(est.variance),
                         _num(lo), _num(hi), _num(bs.variance), _num(bs.ci_low), _num(bs.ci_high),
                         _num(bs.percentile_low), _num(bs.percentile_high), bs.b, bs.failures,
                         _num(rule.train_value), _num(mean_y), train.n, test.n])
            md.append(f"| {design.label} | {kind.label} | {est.value:.2f} | {est.variance:.2f} | "
                      f"({lo:.2f}, {hi:.2f}) | {bs.variance:.2f} | ({bs.ci_low:.2f}, {bs.ci_high:.2f}) |")
    _write_rows(os.path.join(out, "value_report.csv"), REPORT_HEADER, rows)
    with open(os.path.join(out, "value_report.md"), "w", encoding="utf-8") as fh:
        fh.write(f"Sample mean of Y: {mean_y:.2f}\n\n"
                 "Estimation variance 1 is sigma_hat / n_test; estimation variance 2 is from "
                 f"{b} bootstrap replications.\n\n"
                 "| Covariate set | Method | Point estimate | Estimation variance 1 | 95% CI 1 | "
                 "Estimation variance 2 | 95% CI 2 |\n|---|---|---|---|---|---|---|\n")
        fh.write("\n".join(md) + "\n")
    print(f"wrote {os.path.join(out, 'value_report.csv')} ({len(rows)} rows)")
    return EXIT_OK


def cmd_search(cfg) -> int:
    ds = _load(cfg)
    kinds = _kinds(cfg)
    if len(kinds) != 1:
        raise ConfigError("search takes exactly one estimator (--kind)")
    _check_impute(cfg)
    design = _design(cfg["om.design"], cfg)
    options, search = _options(cfg), _search(cfg)
    out = _out_dir(cfg)
    rule = optimize_rule(ds, kinds[0], design, search, options)
    terms = ["(intercept)", *ds.x_names]
    _write_rows(os.path.join(out, "rule.csv"), ["estimator", "design", "term", "eta", "train_value"],
                [[kinds[0].label, design.label, t, _num(e), _num(rule.train_value)]
                 for t, e in zip(terms, rule.eta)])
    print(f"{kinds[0].label} on {design.label}: train value {rule.train_value:.4f}; "
          f"wrote {os.path.join(out, 'rule.csv')}")
    return EXIT_OK


def cmd_diagnose(cfg) -> int:
    ds = _load(cfg)
    out = _out_dir(cfg)
    report = independence_check(ds)
    _write_rows(os.path.join(out, "diagnose.csv"), ["column", "statistic", "dof", "p_value"],
                [[t.label, _num(t.statistic), t.dof, _num(t.p_value)] for t in report.tests])
    if report.message:
        print(report.message)
    for t in report.tests:
        print(f"{t.label}: LR = {t.statistic:.4f} on {t.dof} dof, p = {t.p_value:.4f}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "search": cmd_search, "diagnose": cmd_diagnose}


# ---------------------------------------------------------------- parser

def _add(parser, flag, key, **kw):
    parser.add_argument(flag, dest=key, default=argparse.SUPPRESS, **kw)


def _common(p):
    p.add_argument("--config", default=None, help="JSON file of settings (flags override it)")
    _add(p, "--seed", "seed", help="master seed")
    _add(p, "--out", "out", help="output directory")
    _add(p, "--kinds", "kinds", help="comma list of udr, idr, cbdr, cbdr*")
    _add(p, "--ps-method", "ps.method", help="keep only estimators using this propensity fit (mle or cbps)")
    _add(p, "--balance", "ps.balance", help="balancing function: m1, m2 or full")
    _add(p, "--weighting", "ps.weighting", help="GMM weighting: twostep or identity")
    _add(p, "--constraint", "om.constraint", help="CBDR outcome step: unconstrained or sphere")
    _add(p, "--impute", "impute", help=f"imputation scheme for the extended design ({', '.join(SCHEMES)})")
    _add(p, "--search-restarts", "search.restarts")
    _add(p, "--search-population", "search.population")
    _add(p, "--search-max-evals", "search.max_evals")
    _add(p, "--search-seed", "search.seed")


def _data(p):
    _add(p, "--data", "data", help="input CSV")
    _add(p, "--treatment", "treatment", help="treatment column ({0,1} or {-1,1})")
    _add(p, "--outcome", "outcome", help="outcome column")
    _add(p, "--confounders", "confounders", help="comma list of fully observed confounders")
    _add(p, "--predictive", "predictive", help="comma list of predictive columns that may be missing")
    _add(p, "--normalize", "normalize", help="comma list of columns to standardize, or 'all'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbdr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    _common(p)
    _add(p, "--scenario", "scenario", help="cc, ic, ci or ii")
    _add(p, "--omega", "omega", help="missingness parameters, e.g. 1,1")
    _add(p, "--reps", "reps")
    _add(p, "--n-train", "n_train")
    _add(p, "--n-test", "n_test")
    _add(p, "--designs", "designs", help="comma list of x and xdagger:<scheme>")
    _add(p, "--workers", "workers", help="worker processes (default: CBDR_THREADS or CPU count)")
    p.add_argument("--raw", dest="raw", action="store_true", default=argparse.SUPPRESS,
                   help="also write raw_estimates.csv")
    p.add_argument("--carry-nuisances", dest="refit_on_test", action="store_false", default=argparse.SUPPRESS,
                   help="evaluate with nuisance fits from the training split")

    p = sub.add_parser("estimate", help="split data, learn rules and report value estimates")
    _common(p)
    _data(p)
    _add(p, "--bootstrap", "bootstrap.b", help="bootstrap replications")
    _add(p, "--train-fraction", "train_fraction")

    p = sub.add_parser("search", help="learn a linear rule on the whole input")
    _common(p)
    _data(p)
    _add(p, "--kind", "kinds", help="estimator whose value is maximized")
    _add(p, "--design", "om.design", help="x or xdagger[:scheme]")

    p = sub.add_parser("diagnose", help="test treatment independence of missingness given X")
    p.add_argument("--config", default=None)
    _add(p, "--out", "out")
    _data(p)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.command == "simulate":
        cfg.update(SIMULATE_OVERRIDES)
    if args.command == "search":
        cfg["kinds"] = "cbdr"
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    cfg.update(flags)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ReplicateFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REPLICATES
    except ESTIMATION_ERRORS as exc:
        print(f"estimation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
