"""Command-line interface: estimate, simulate, validate.

Configuration comes from an optional JSON file plus flag overrides; the
effective config is embedded in every report so a run can be reproduced from
its output alone.  Exit codes: 0 success, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .analysis import (ALL_STRATA, AnalysisOptions, estimate as run_estimate,
                       prepare_pipeline, sweep_theta)
from .errors import (ConfigError, DomainError, NearZeroDenominator, ParseError,
                     PstratError, SchemaError, DeltaUnderflow, EmptyCell,
                     MissingOutcome)
from .io import ColumnMap, ReportFile, load_csv
from .learners import GbtParams
from .nuisance import LearnerSpec, NuisanceSpecs, fit_nuisances
from .simulation import DgpConfig, FittedTheta, SimScenario, run_scenario, summarize
from .strata import SensitivitySpec

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DATA_ERRORS = (ParseError, SchemaError, DomainError, MissingOutcome)
_NUMERIC_ERRORS = (NearZeroDenominator, DeltaUnderflow, EmptyCell)


def _learner_spec(name: str) -> LearnerSpec:
    name = name.strip().lower()
    if name in ("glm", "logistic", "ols", "gbt"):
        return LearnerSpec(kind=name)
    if name == "stacked":
        return LearnerSpec(kind="stacked",
                           members=(LearnerSpec(kind="glm"),
                                    LearnerSpec(kind="gbt", gbt=GbtParams())))
    raise ConfigError(f"unknown learner {name!r} (use glm, logistic, ols, gbt, stacked)")


def _parse_grid(text: str) -> np.ndarray:
    """Parse 'lo:hi:n' as n log-spaced points, log(theta) in [lo, hi]."""
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError as exc:
        raise ConfigError(f"bad --theta-grid {text!r}; expected lo:hi:n") from exc
    if n < 1 or hi < lo:
        raise ConfigError(f"bad --theta-grid {text!r}")
    return np.linspace(lo, hi, n)


def _sens_from_config(cfg: dict, theta_col) -> SensitivitySpec | None:
    mode = cfg.get("theta_mode", "constant")
    if mode == "independence":
        return SensitivitySpec.independence()
    if mode == "monotone":
        if not cfg.get("assume_p1_gt_p0", False):
            raise ConfigError(
                "monotone mode asserts D(1) >= D(0); pass --assume-p1-gt-p0 "
                "to confirm (a huge odds ratio alone does not imply it)")
        return SensitivitySpec.monotone()
    if mode.startswith("column:"):
        if theta_col is None:
            raise ConfigError(f"theta mode {mode!r} needs --theta-column data")
        return SensitivitySpec.per_unit(theta_col)
    if mode == "constant":
        if cfg.get("theta") is None:
            return None  # grid-only run
        return SensitivitySpec.constant(float(cfg["theta"]))
    raise ConfigError(f"unknown theta mode {mode!r}")


def _analysis_config(args) -> dict:
    cfg: dict = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
    overrides = {
        "input": args.input, "output": args.output, "stratum": args.stratum,
        "theta": args.theta, "theta_grid": args.theta_grid,
        "theta_mode": args.theta_mode, "estimator": args.estimator,
        "folds": args.folds, "bootstrap": args.bootstrap, "alpha": args.alpha,
        "seed": args.seed, "assume_p1_gt_p0": args.assume_p1_gt_p0 or None,
        "learner_propensity": args.learner_propensity,
        "learner_margin": args.learner_margin,
        "learner_outcome": args.learner_outcome,
        "y_col": args.y_col, "d_col": args.d_col, "z_col": args.z_col,
        "x_cols": args.x_cols, "theta_column": args.theta_column,
        "outcome_defined_when_d0": args.outcome_defined_when_d0 or None,
        "include_reference": args.include_reference or None,
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    cfg.setdefault("stratum", "11")
    cfg.setdefault("estimator", "dml")
    cfg.setdefault("folds", 5)
    cfg.setdefault("bootstrap", 500)
    cfg.setdefault("alpha", 0.05)
    cfg.setdefault("seed", 0)
    cfg.setdefault("theta_mode", "constant")
    if cfg.get("theta") is None and not cfg.get("theta_grid") \
            and cfg["theta_mode"] == "constant":
        cfg["theta"] = 1.0
    return cfg


def _column_map(cfg: dict) -> ColumnMap:
    return ColumnMap(
        y=cfg.get("y_col", "y"), d=cfg.get("d_col", "d"), z=cfg.get("z_col", "z"),
        x=tuple(cfg.get("x_cols", "x1,x2,x3").split(",")),
        theta=cfg.get("theta_column"),
    )


def cmd_estimate(args) -> int:
    cfg = _analysis_config(args)
    if not cfg.get("input"):
        raise ConfigError("--input is required")
    ds, theta_col = load_csv(cfg["input"], _column_map(cfg))

    estimators = tuple(e.strip() for e in str(cfg["estimator"]).split(","))
    strata = tuple(s.strip() for s in str(cfg["stratum"]).split(","))
    opts = AnalysisOptions(
        estimators=estimators, strata=strata,
        specs=NuisanceSpecs(
            propensity=_learner_spec(cfg.get("learner_propensity", "glm")),
            margin=_learner_spec(cfg.get("learner_margin", "glm")),
            outcome=_learner_spec(cfg.get("learner_outcome", "glm"))),
        k=int(cfg["folds"]), seed=int(cfg["seed"]), alpha=float(cfg["alpha"]),
        bootstrap_b=int(cfg["bootstrap"]),
        outcome_defined_when_d0=bool(cfg.get("outcome_defined_when_d0", False)),
    )

    report = ReportFile(command="estimate", config=cfg)
    include_ref = cfg.get("include_reference", "")
    sens = _sens_from_config(cfg, theta_col)

    if cfg.get("theta_grid"):
        grid = _parse_grid(cfg["theta_grid"])
        sweep = sweep_theta(ds, grid, opts,
                            include_independence="independence" in str(include_ref),
                            include_monotone="monotone" in str(include_ref))
        report.rows.extend(sweep.rows())
    if sens is not None:
        grid1 = None
        if sens.mode == "constant":
            grid1 = np.array([np.log(sens.theta)]) if np.isfinite(sens.theta) else None
        if grid1 is not None:
            sweep = sweep_theta(ds, grid1, opts)
            report.rows.extend(sweep.rows())
        else:
            from .estimators import strata_proportion
            pipeline = prepare_pipeline(ds, opts)
            for stratum in strata:
                for rep in run_estimate(ds, stratum, sens, opts, pipeline):
                    report.rows.append({"row_type": "estimate",
                                        "theta_mode": sens.mode,
                                        "theta": None, "log_theta": None,
                                        **rep.to_row()})
            for stratum in ALL_STRATA:
                fitlike = (dict(crossfit=pipeline.crossfit)
                           if pipeline.crossfit is not None
                           else dict(fit=pipeline.full_fit))
                prop, se = strata_proportion(ds, sens, stratum, **fitlike)
                report.rows.append({"row_type": "proportion",
                                    "theta_mode": sens.mode, "stratum": stratum,
                                    "proportion": prop, "se": se})
        if sens.mode == "per_unit":
            # documented companion: constant approximation at the column mean
            const = SensitivitySpec.constant(float(np.mean(theta_col)))
            grid1 = np.array([np.log(const.theta)])
            sweep = sweep_theta(ds, grid1, opts)
            for r in sweep.rows():
                r["note"] = "constant_approximation_of_theta_column"
                report.rows.append(r)
            report.notes.append(
                "per-unit theta run includes a constant-approximation "
                f"companion at theta = mean(column) = {const.theta:.6g}")

    out = cfg.get("output") or "pstrat_report"
    paths = report.write(out)
    print(f"wrote {', '.join(str(p) for p in paths)} "
          f"({len(report.rows)} rows, config {report.config_hash()})")
    return 0


def _dgp_from_config(d: dict) -> DgpConfig:
    known = {f for f in DgpConfig.__dataclass_fields__}
    bad = set(d) - known
    if bad:
        raise ConfigError(f"unknown DGP fields {sorted(bad)}")
    d = dict(d)
    for tup_key in ("margin_intercepts", "margin_slopes"):
        if tup_key in d:
            d[tup_key] = tuple(d[tup_key])
    return DgpConfig(**d)


def _scenario_from_config(d: dict) -> SimScenario:
    d = dict(d)
    dgp = _dgp_from_config(d.pop("dgp", {}))
    fitted = d.pop("fitted", {"kind": "constant", "value": 1.0})
    if not isinstance(fitted, list):
        fitted = [fitted]
    fitted = [({"kind": "constant", "value": float(f)}
               if isinstance(f, (int, float)) else f) for f in fitted]
    known = {f for f in SimScenario.__dataclass_fields__} - {"dgp", "fitted", "dml_gbt"}
    bad = set(d) - known
    if bad:
        raise ConfigError(f"unknown scenario fields {sorted(bad)}")
    for tup_key in ("estimators", "strata"):
        if tup_key in d:
            d[tup_key] = tuple(d[tup_key])
    return SimScenario(dgp=dgp, fitted=tuple(FittedTheta(**f) for f in fitted), **d)


def cmd_simulate(args) -> int:
    if not args.config:
        raise ConfigError("simulate needs --config with a scenarios list")
    try:
        cfg = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    scen_cfgs = cfg.get("scenarios")
    if not scen_cfgs:
        raise ConfigError("config must contain a non-empty 'scenarios' list")
    scenarios = [_scenario_from_config(s) for s in scen_cfgs]
    if args.jobs:
        scenarios = [SimScenario(**{**s.__dict__, "n_jobs": args.jobs})
                     for s in scenarios]
    metrics = [run_scenario(s) for s in scenarios]
    report = ReportFile(command="simulate", config=cfg)
    report.rows = summarize(metrics)
    out = args.output or cfg.get("output") or "pstrat_sim"
    paths = report.write(out)
    print(f"wrote {', '.join(str(p) for p in paths)} ({len(report.rows)} rows)")
    return 0


def cmd_validate(args) -> int:
    cfg = _analysis_config(args)
    if not cfg.get("input"):
        raise ConfigError("--input is required")
    ds, _ = load_csv(cfg["input"], _column_map(cfg))
    specs = NuisanceSpecs(
        propensity=_learner_spec(cfg.get("learner_propensity", "glm")),
        margin=_learner_spec(cfg.get("learner_margin", "glm")),
        outcome=_learner_spec(cfg.get("learner_outcome", "glm")))
    fit = fit_nuisances(ds, specs, (), seed=int(cfg["seed"]))
    gap = fit.p1 - fit.p0
    frac_neg = float(np.mean(gap <= 0))
    counts, edges = np.histogram(gap, bins=40, range=(-1.0, 1.0))
    flag = frac_neg > 0.05

    report = ReportFile(command="validate", config=cfg)
    report.rows.append({
        "row_type": "summary", "n": ds.n, "frac_negative": frac_neg,
        "monotonicity_plausible": not flag,
        "gap_mean": float(np.mean(gap)), "gap_min": float(np.min(gap)),
        "gap_max": float(np.max(gap)),
    })
    for i, c in enumerate(counts):
        report.rows.append({"row_type": "histogram", "bin_lo": float(edges[i]),
                            "bin_hi": float(edges[i + 1]), "count": int(c)})
    out = cfg.get("output") or "pstrat_validate"
    paths = report.write(out)
    print(f"wrote {', '.join(str(p) for p in paths)}; "
          f"fraction with p1_hat <= p0_hat: {frac_neg:.3f} "
          f"({'monotonicity implausible' if flag else 'no strong signal against monotonicity'})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pstrat",
        description="Odds-ratio sensitivity analysis for principal causal effects")
    sub = p.add_subparsers(dest="command", required=True)

    def common(q):
        q.add_argument("--config", help="JSON config file")
        q.add_argument("--input", help="input CSV path")
        q.add_argument("--output", help="output path (.csv/.json; both if no extension)")
        q.add_argument("--stratum", help="comma list of strata among 11,01,00,10")
        q.add_argument("--theta", type=float, help="constant odds ratio")
        q.add_argument("--theta-grid", help="log-theta grid lo:hi:n (natural log)")
        q.add_argument("--theta-mode",
                       help="constant | independence | monotone | column:NAME")
        q.add_argument("--theta-column", help="per-row theta column name")
        q.add_argument("--assume-p1-gt-p0", action="store_true",
                       help="assert p1(X) > p0(X), required for monotone mode")
        q.add_argument("--estimator", help="comma list among wt,or,cdr,dml")
        q.add_argument("--folds", type=int, help="cross-fitting folds K")
        q.add_argument("--bootstrap", type=int, help="bootstrap replicates B")
        q.add_argument("--alpha", type=float, help="CI level alpha")
        q.add_argument("--seed", type=int, help="master seed")
        q.add_argument("--learner-propensity", help="glm|logistic|gbt|stacked")
        q.add_argument("--learner-margin", help="glm|logistic|gbt|stacked")
        q.add_argument("--learner-outcome", help="glm|ols|gbt|stacked")
        q.add_argument("--y-col", help="outcome column (default y)")
        q.add_argument("--d-col", help="intermediate outcome column (default d)")
        q.add_argument("--z-col", help="treatment column (default z)")
        q.add_argument("--x-cols", help="comma list of covariate columns")
        q.add_argument("--outcome-defined-when-d0", action="store_true",
                       help="outcome exists on D=0 rows (needed for strata 00/01/10)")
        q.add_argument("--include-reference",
                       help="append reference rows: independence,monotone")

    pe = sub.add_parser("estimate", help="estimate PCEs and strata proportions")
    common(pe)
    pe.set_defaults(fn=cmd_estimate)

    ps = sub.add_parser("simulate", help="run Monte Carlo scenarios")
    ps.add_argument("--config", required=False, help="JSON config with scenarios")
    ps.add_argument("--output", help="output path")
    ps.add_argument("--jobs", type=int, help="parallel workers")
    ps.set_defaults(fn=cmd_simulate)

    pv = sub.add_parser("validate", help="margin-ordering diagnostics")
    common(pv)
    pv.set_defaults(fn=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PstratError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
