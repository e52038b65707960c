"""High-level analysis pipeline: shared nuisance fits, sweeps, reference rows.

The odds-ratio specification never enters nuisance fitting, so a theta sweep
fits nuisances (and any bootstrap refits) once and re-evaluates only the
strata algebra and scores at each grid point.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import MissingOutcome, PstratError
from .estimators import (EstimateReport, make_bootstrap_fits, mu_cdr, mu_dml,
                         mu_or, mu_wt, strata_proportion)
from .nuisance import (CrossFit, Dataset, NuisanceSpecs, crossfit_nuisances,
                       fit_nuisances, make_folds, stratum_cells)
from .strata import SensitivitySpec, parse_stratum

ALL_STRATA = ("00", "01", "10", "11")


@dataclass(frozen=True)
class AnalysisOptions:
    estimators: tuple[str, ...] = ("dml",)
    strata: tuple = ("11",)
    specs: NuisanceSpecs = field(default_factory=NuisanceSpecs.parametric)
    dml_specs: NuisanceSpecs | None = None   # defaults to ``specs``
    k: int = 5
    seed: int = 0
    alpha: float = 0.05
    bootstrap_b: int = 500
    se_wt_or: str = "bootstrap"
    se_cdr: str = "plugin"
    outcome_defined_when_d0: bool = False

    def needs_parametric(self) -> bool:
        return any(e in ("wt", "or", "cdr") for e in self.estimators)

    def needs_dml(self) -> bool:
        return "dml" in self.estimators


def _outcome_cells(strata) -> tuple:
    return tuple(sorted({c for st in strata for c in stratum_cells(st)}))


def _check_strata_outcomes(ds: Dataset, strata, opts: AnalysisOptions):
    cells = _outcome_cells(strata)
    if any(d == 0 for _, d in cells) and not opts.outcome_defined_when_d0:
        bad = [st for st in strata if 0 in parse_stratum(st)]
        raise MissingOutcome(
            f"strata {bad} read outcomes on D=0 rows; pass "
            "outcome_defined_when_d0=True if the outcome exists there")
    ds.require_outcomes(cells)
    return cells


@dataclass
class FittedPipeline:
    """Nuisance material shared across strata and theta values."""

    full_fit: object | None
    crossfit: CrossFit | None
    boot_fits: list | None
    cells: tuple


def prepare_pipeline(ds: Dataset, opts: AnalysisOptions) -> FittedPipeline:
    cells = _check_strata_outcomes(ds, opts.strata, opts)
    full_fit = None
    crossfit = None
    boot = None
    if opts.needs_parametric():
        full_fit = fit_nuisances(ds, opts.specs, cells, seed=opts.seed)
        if opts.se_wt_or == "bootstrap" and any(
                e in ("wt", "or") for e in opts.estimators):
            boot = make_bootstrap_fits(ds, opts.specs, cells, opts.bootstrap_b,
                                       opts.seed + 1)
    if opts.needs_dml():
        plan = make_folds(ds, opts.k, opts.seed + 2)
        crossfit = crossfit_nuisances(ds, plan, opts.dml_specs or opts.specs,
                                      cells, seed=opts.seed + 3)
    return FittedPipeline(full_fit=full_fit, crossfit=crossfit,
                          boot_fits=boot, cells=cells)


def estimate(ds: Dataset, stratum, sens: SensitivitySpec,
             opts: AnalysisOptions | None = None,
             pipeline: FittedPipeline | None = None) -> list[EstimateReport]:
    """Run the selected estimators for one stratum and one theta spec."""
    opts = opts or AnalysisOptions()
    if parse_stratum(stratum) not in [parse_stratum(s) for s in opts.strata]:
        opts = replace(opts, strata=(stratum,))
    if pipeline is None:
        pipeline = prepare_pipeline(ds, opts)
    out = []
    for est in opts.estimators:
        if est == "dml":
            out.append(mu_dml(ds, sens, stratum, crossfit=pipeline.crossfit,
                              alpha=opts.alpha))
        elif est == "cdr":
            out.append(mu_cdr(ds, pipeline.full_fit, sens, stratum,
                              alpha=opts.alpha, se_method=opts.se_cdr,
                              bootstrap_b=opts.bootstrap_b, seed=opts.seed + 4,
                              bootstrap_fits=pipeline.boot_fits,
                              nuisance_specs=opts.specs))
        elif est == "wt":
            out.append(mu_wt(ds, pipeline.full_fit, sens, stratum,
                             alpha=opts.alpha, se_method=opts.se_wt_or,
                             bootstrap_b=opts.bootstrap_b, seed=opts.seed + 4,
                             bootstrap_fits=pipeline.boot_fits,
                             nuisance_specs=opts.specs))
        elif est == "or":
            out.append(mu_or(ds, pipeline.full_fit, sens, stratum,
                             alpha=opts.alpha, se_method=opts.se_wt_or,
                             bootstrap_b=opts.bootstrap_b, seed=opts.seed + 4,
                             bootstrap_fits=pipeline.boot_fits,
                             nuisance_specs=opts.specs))
        else:
            raise PstratError(f"unknown estimator {est!r}")
    return out


@dataclass
class SweepResult:
    """Estimates and strata proportions across a log-theta grid."""

    log_grid: np.ndarray
    estimate_rows: list[dict] = field(default_factory=list)
    proportion_rows: list[dict] = field(default_factory=list)
    error_rows: list[dict] = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for r in self.estimate_rows:
            out.append({"row_type": "estimate", **r})
        for r in self.proportion_rows:
            out.append({"row_type": "proportion", **r})
        for r in self.error_rows:
            out.append({"row_type": "error", **r})
        return out


def _point_label(sens: SensitivitySpec) -> dict:
    d = sens.describe()
    if d["mode"] == "constant":
        return {"theta_mode": "constant", "theta": d["theta"],
                "log_theta": float(np.log(d["theta"]))}
    return {"theta_mode": d["mode"], "theta": None, "log_theta": None}


def sweep_theta(ds: Dataset, log_grid, opts: AnalysisOptions | None = None, *,
                include_independence: bool = False,
                include_monotone: bool = False) -> SweepResult:
    """Estimate along a grid of log(theta), reusing one set of nuisance fits.

    Per-point estimator failures are recorded as error rows and the sweep
    continues.  Strata proportions (all four cells, with standard errors) are
    emitted at every point; the plug-in 11-cell component is monotone in
    theta by construction.
    """
    opts = opts or AnalysisOptions()
    log_grid = np.asarray(log_grid, dtype=float)
    if log_grid.ndim != 1 or log_grid.size == 0 or not np.all(np.isfinite(log_grid)):
        raise PstratError("theta grid must be a non-empty finite vector")
    if np.any(np.diff(log_grid) <= 0):
        raise PstratError("theta grid must be strictly increasing")

    pipeline = prepare_pipeline(ds, opts)
    result = SweepResult(log_grid=log_grid)

    points = [SensitivitySpec.constant(float(np.exp(g))) for g in log_grid]
    if include_independence:
        points.append(SensitivitySpec.independence())
    if include_monotone:
        points.append(SensitivitySpec.monotone())

    prop_fit = pipeline.crossfit if pipeline.crossfit is not None else pipeline.full_fit
    for sens in points:
        label = _point_label(sens)
        for stratum in opts.strata:
            try:
                for rep in estimate(ds, stratum, sens, opts, pipeline):
                    result.estimate_rows.append({**label, **rep.to_row()})
            except PstratError as exc:
                result.error_rows.append({
                    **label, "stratum": str(stratum),
                    "error": type(exc).__name__, "message": str(exc)})
        for stratum in ALL_STRATA:
            try:
                if pipeline.crossfit is not None:
                    prop, se = strata_proportion(ds, sens, stratum,
                                                 crossfit=pipeline.crossfit)
                else:
                    prop, se = strata_proportion(ds, sens, stratum,
                                                 fit=pipeline.full_fit)
                plug = _plugin_cell_mean(prop_fit, sens, stratum)
                result.proportion_rows.append({
                    **label, "stratum": stratum, "proportion": prop,
                    "se": se, "plugin_cell_mean": plug})
            except PstratError as exc:
                result.error_rows.append({
                    **label, "stratum": stratum,
                    "error": type(exc).__name__, "message": str(exc)})
    return result


def _plugin_cell_mean(fit_like, sens, stratum) -> float:
    from .strata import MarginPair, cell_probs

    fit = fit_like.per_unit if isinstance(fit_like, CrossFit) else fit_like
    margins = MarginPair(fit.p0, fit.p1)
    return float(np.mean(cell_probs(margins, sens, validate=False).cell(stratum)))
