"""Principal-causal-effect estimators for any stratum and odds-ratio spec.

Four estimators share one identification target: the stratum (d0, d1) mean
difference mu = mu^1 - mu^0 with mu^z = E[e(X) m_{z,dz}(X)] / E[e(X)], where
e(X) is the stratum's cell probability from the margins and the odds-ratio
specification.

  * WT  -- per-arm weighted outcome means (inverse propensity and margin).
  * OR  -- plug-in regression form E[e (m1 - m0)] / E[e].
  * CDR -- solves the influence-function estimating equation with
           full-sample (typically parametric) nuisances; consistent when the
           margins are right and either the propensity or the outcome means
           are right.
  * DML -- same estimating equation with K-fold cross-fitted, possibly
           data-adaptive nuisances, plus the matching cross-fitted variance.

The per-unit score pieces are: psi-type augmented terms for any function F,
psi_{F,z} = 1(Z=z)(F - E[F|z,X])/Pr(Z=z|X) + E[F|z,X]; the proportion score
tau = e + sum_z (psi_{D,z} - p_z) de/dp_z (its mean one-step-estimates E[e]);
the outcome score omega^z = (e/q_z)(psi_{Y1(D=dz),z} - m_z psi_{1(D=dz),z})
+ tau m_z; and the centred score xi^z = omega^z - mu^z tau.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .errors import EmptyCell, NearZeroDenominator, MissingOutcome
from .nuisance import (CrossFit, Dataset, FoldPlan, NuisanceFit, NuisanceSpecs,
                       crossfit_nuisances, fit_nuisances, make_folds, stratum_cells)
from .strata import (MarginPair, SensitivitySpec, cell_partials, cell_probs,
                     parse_stratum, MODE_MONOTONE, MODE_CONSTANT)

TAU_GUARD = 1e-6  # |mean tau| below this is an empirically empty stratum


def _wmean(v: np.ndarray, w: np.ndarray | None) -> float:
    if w is None:
        return float(np.mean(v))
    return float(np.sum(v * w) / np.sum(w))


@dataclass(frozen=True)
class PsiTerms:
    """Augmented per-unit terms for one arm z and one cell value d."""

    psi_d: np.ndarray      # for F = D
    psi_ind: np.ndarray    # for F = 1(D = d)
    psi_yind: np.ndarray   # for F = Y * 1(D = d)


def psi_for_arm(ds: Dataset, fit: NuisanceFit, z: int, d: int) -> PsiTerms:
    pi_z = fit.pi if z == 1 else 1.0 - fit.pi
    p_z = fit.p1 if z == 1 else fit.p0
    q_z = p_z if d == 1 else 1.0 - p_z
    in_arm = (ds.z == z).astype(float)
    ind_d = (ds.d == d).astype(float)
    m_zd = fit.m.get((z, d))
    psi_d = in_arm * (ds.d - p_z) / pi_z + p_z
    psi_ind = in_arm * (ind_d - q_z) / pi_z + q_z
    if m_zd is None:
        psi_yind = None
    else:
        f = np.where(ds.d == d, ds.y, 0.0)  # NaN-safe off-cell outcomes
        psi_yind = in_arm * (f - m_zd * q_z) / pi_z + m_zd * q_z
    return PsiTerms(psi_d=psi_d, psi_ind=psi_ind, psi_yind=psi_yind)


def psi_terms(ds: Dataset, fit: NuisanceFit, d: int) -> dict:
    """Per-unit psi components for cell value d, keyed by arm z."""
    return {z: psi_for_arm(ds, fit, z, d) for z in (0, 1)}


@dataclass(frozen=True)
class ScoreComponents:
    """Per-unit influence-function building blocks for one stratum."""

    stratum: tuple[int, int]
    e_cell: np.ndarray
    tau: np.ndarray
    omega: tuple[np.ndarray, np.ndarray]   # (omega^0, omega^1)

    def xi(self, mu_arm: tuple[float, float]) -> np.ndarray:
        """Centred score difference xi^1 - xi^0 at fixed arm means."""
        return (self.omega[1] - mu_arm[1] * self.tau) - (
            self.omega[0] - mu_arm[0] * self.tau)


def tau_scores(ds: Dataset, fit: NuisanceFit, sens: SensitivitySpec,
               stratum) -> np.ndarray:
    """Per-unit proportion score tau for one stratum."""
    stratum = parse_stratum(stratum)
    margins = MarginPair(fit.p0, fit.p1)
    probs = cell_probs(margins, sens, validate=False)
    e_cell = probs.cell(stratum)
    g0, g1 = cell_partials(margins, sens, stratum)
    psi_d0 = psi_for_arm(ds, fit, 0, stratum[0]).psi_d
    psi_d1 = psi_for_arm(ds, fit, 1, stratum[1]).psi_d
    return e_cell + (psi_d0 - fit.p0) * g0 + (psi_d1 - fit.p1) * g1


def omega_scores(ds: Dataset, fit: NuisanceFit, sens: SensitivitySpec,
                 stratum, z: int) -> np.ndarray:
    """Per-unit outcome score omega^z for one stratum."""
    return score_components(ds, fit, sens, stratum).omega[z]


def score_components(ds: Dataset, fit: NuisanceFit, sens: SensitivitySpec,
                     stratum) -> ScoreComponents:
    stratum = parse_stratum(stratum)
    margins = MarginPair(fit.p0, fit.p1)
    probs = cell_probs(margins, sens, validate=False)
    e_cell = probs.cell(stratum)
    g0, g1 = cell_partials(margins, sens, stratum)

    psi = {z: psi_for_arm(ds, fit, z, stratum[z]) for z in (0, 1)}
    tau = e_cell + (psi[0].psi_d - fit.p0) * g0 + (psi[1].psi_d - fit.p1) * g1

    omega = []
    for z in (0, 1):
        d_z = stratum[z]
        if psi[z].psi_yind is None:
            raise MissingOutcome(
                f"outcome mean for cell (z={z}, d={d_z}) was not fitted")
        p_z = fit.p1 if z == 1 else fit.p0
        q_z = p_z if d_z == 1 else 1.0 - p_z
        m_z = fit.m[(z, d_z)]
        omega.append(e_cell / q_z * (psi[z].psi_yind - m_z * psi[z].psi_ind)
                     + tau * m_z)
    return ScoreComponents(stratum=stratum, e_cell=e_cell, tau=tau,
                           omega=(omega[0], omega[1]))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EstimateReport:
    stratum: tuple[int, int]
    estimator: str
    theta_summary: dict
    mu_hat: float
    mu_arm: tuple[float, float]      # (mu^0, mu^1)
    se: float
    ci: tuple[float, float]
    alpha: float
    n: int
    diagnostics: dict = field(default_factory=dict)

    def to_row(self) -> dict:
        row = {
            "stratum": f"{self.stratum[0]}{self.stratum[1]}",
            "estimator": self.estimator,
            "theta_mode": self.theta_summary.get("mode"),
            "theta": self.theta_summary.get("theta"),
            "estimate": self.mu_hat,
            "se": self.se,
            "ci_lo": self.ci[0],
            "ci_hi": self.ci[1],
            "mu_arm0": self.mu_arm[0],
            "mu_arm1": self.mu_arm[1],
            "n": self.n,
            "warnings": ";".join(self.diagnostics.get("warnings", [])),
        }
        return row


def _wald_ci(mu: float, se: float, alpha: float) -> tuple[float, float]:
    zq = float(ndtri(1.0 - alpha / 2.0))
    return (mu - zq * se, mu + zq * se)


def _base_diag(fit: NuisanceFit, sens: SensitivitySpec) -> dict:
    diag: dict = {"clip_frac": fit.clip_frac, "warnings": []}
    if sens.mode == MODE_MONOTONE or (
            sens.mode == MODE_CONSTANT and np.isinf(sens.theta)):
        frac = float(np.mean(fit.p1 <= fit.p0))
        diag["frac_p1_le_p0"] = frac
        if frac > 0 and sens.mode == MODE_MONOTONE:
            diag["warnings"].append("monotonicity_incompatible")
    return diag


# ---------------------------------------------------------------------------
# Weighting and regression estimators
# ---------------------------------------------------------------------------


def _wt_point(ds: Dataset, fit: NuisanceFit, sens: SensitivitySpec, stratum,
              weights=None):
    stratum = parse_stratum(stratum)
    margins = MarginPair(fit.p0, fit.p1)
    e_cell = cell_probs(margins, sens, validate=False).cell(stratum)
    mu_arm = []
    wminmax = [np.inf, -np.inf]
    for z in (0, 1):
        d_z = stratum[z]
        pi_z = fit.pi if z == 1 else 1.0 - fit.pi
        p_z = fit.p1 if z == 1 else fit.p0
        q_z = p_z if d_z == 1 else 1.0 - p_z
        sel = (ds.z == z) & (ds.d == d_z)
        if not np.any(sel):
            raise EmptyCell(f"no rows with Z={z}, D={d_z}")
        w = np.where(sel, e_cell / (pi_z * q_z), 0.0)
        yv = np.where(sel, ds.y, 0.0)
        num = _wmean(w * yv, weights)
        den = _wmean(w, weights)
        if den == 0.0:
            raise NearZeroDenominator(f"zero weight mass in arm z={z}")
        mu_arm.append(num / den)
        active = w[sel]
        wminmax = [min(wminmax[0], float(active.min())),
                   max(wminmax[1], float(active.max()))]
    return mu_arm[1] - mu_arm[0], (mu_arm[0], mu_arm[1]), tuple(wminmax)


def _or_point(ds: Dataset, fit: NuisanceFit, sens: SensitivitySpec, stratum,
              weights=None):
    stratum = parse_stratum(stratum)
    margins = MarginPair(fit.p0, fit.p1)
    e_cell = cell_probs(margins, sens, validate=False).cell(stratum)
    den = _wmean(e_cell, weights)
    if abs(den) < TAU_GUARD:
        raise NearZeroDenominator("plug-in stratum proportion is numerically zero")
    m1 = fit.m[(1, stratum[1])]
    m0 = fit.m[(0, stratum[0])]
    mu1 = _wmean(e_cell * m1, weights) / den
    mu0 = _wmean(e_cell * m0, weights) / den
    return mu1 - mu0, (mu0, mu1)


def _bootstrap_se(point_fn, ds: Dataset, B: int, seed: int) -> tuple[float, int]:
    """Nonparametric bootstrap of a point estimator; returns (se, n_failed)."""
    rng = np.random.default_rng(seed)
    vals = np.empty(B)
    failed = 0
    for b in range(B):
        idx = rng.integers(0, ds.n, size=ds.n)
        try:
            vals[b] = point_fn(idx)
        except Exception:  # noqa: BLE001 - resample-level failures are expected
            vals[b] = np.nan
            failed += 1
    good = vals[np.isfinite(vals)]
    if good.size < 2:
        return float("nan"), failed
    return float(np.std(good, ddof=1)), failed


def _take_dataset(ds: Dataset, idx: np.ndarray) -> Dataset:
    return Dataset(y=ds.y[idx], d=ds.d[idx], z=ds.z[idx], x=ds.x[idx])


def _resample_point(ds, fit, sens, stratum, specs, cells, kind, seed):
    """Build the bootstrap point-estimate closure; refits nuisances when
    learner specs are supplied, otherwise reuses the per-row fitted values."""

    def point(idx):
        ds_b = _take_dataset(ds, idx)
        if specs is not None:
            fit_b = fit_nuisances(ds_b, specs, cells, seed=seed)
        else:
            fit_b = fit.subset(idx)
        if kind == "wt":
            return _wt_point(ds_b, fit_b, sens, stratum)[0]
        return _or_point(ds_b, fit_b, sens, stratum)[0]

    return point


def make_bootstrap_fits(ds: Dataset, specs: NuisanceSpecs | None, cells,
                        b: int, seed: int, fit: NuisanceFit | None = None):
    """Precompute B bootstrap resamples with refit (or subsetted) nuisances.

    Nuisances do not depend on the odds-ratio specification, so one plan can
    be reused across a whole theta sweep.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(b):
        idx = rng.integers(0, ds.n, size=ds.n)
        ds_b = _take_dataset(ds, idx)
        if specs is not None:
            fit_b = fit_nuisances(ds_b, specs, cells, seed=seed)
        else:
            fit_b = fit.subset(idx)
        out.append((ds_b, fit_b))
    return out


def _se_from_bootstrap_fits(boot_fits, sens, stratum, kind) -> tuple[float, int]:
    vals = []
    failed = 0
    for ds_b, fit_b in boot_fits:
        try:
            if kind == "wt":
                vals.append(_wt_point(ds_b, fit_b, sens, stratum)[0])
            elif kind == "or":
                vals.append(_or_point(ds_b, fit_b, sens, stratum)[0])
            else:
                sc = score_components(ds_b, fit_b, sens, stratum)
                tb = float(np.mean(sc.tau))
                vals.append((np.mean(sc.omega[1]) - np.mean(sc.omega[0])) / tb)
        except Exception:  # noqa: BLE001
            failed += 1
    vals = np.asarray([v for v in vals if np.isfinite(v)])
    if vals.size < 2:
        return float("nan"), failed
    return float(np.std(vals, ddof=1)), failed


def mu_wt(ds: Dataset, fit: NuisanceFit, sens: SensitivitySpec, stratum, *,
          alpha: float = 0.05, weights=None, se_method: str = "bootstrap",
          bootstrap_b: int = 500, seed: int = 0,
          nuisance_specs: NuisanceSpecs | None = None,
          bootstrap_fits=None) -> EstimateReport:
    """Weighting estimator: per-arm ratio of weighted outcome sums."""
    stratum = parse_stratum(stratum)
    mu, mu_arm, wrange = _wt_point(ds, fit, sens, stratum, weights)
    diag = _base_diag(fit, sens)
    diag["min_weight"], diag["max_weight"] = wrange
    se = float("nan")
    if se_method == "bootstrap" and bootstrap_fits is not None:
        se, failed = _se_from_bootstrap_fits(bootstrap_fits, sens, stratum, "wt")
        diag["bootstrap_b"] = len(bootstrap_fits)
        diag["bootstrap_failed"] = failed
        diag["bootstrap_refit"] = True
    elif se_method == "bootstrap":
        point = _resample_point(ds, fit, sens, stratum, nuisance_specs,
                                stratum_cells(stratum), "wt", seed)
        se, failed = _bootstrap_se(point, ds, bootstrap_b, seed)
        diag["bootstrap_b"] = bootstrap_b
        diag["bootstrap_failed"] = failed
        diag["bootstrap_refit"] = nuisance_specs is not None
    elif se_method == "plugin":
        sc = score_components(ds, fit, sens, stratum)
        t_bar = _wmean(sc.tau, weights)
        xi = sc.xi(mu_arm)
        se = float(np.sqrt(_wmean(xi**2, weights) / t_bar**2 / ds.n))
    return EstimateReport(stratum=stratum, estimator="wt",
                          theta_summary=sens.describe(), mu_hat=mu,
                          mu_arm=mu_arm, se=se, ci=_wald_ci(mu, se, alpha),
                          alpha=alpha, n=ds.n, diagnostics=diag)


def mu_or(ds: Dataset, fit: NuisanceFit, sens: SensitivitySpec, stratum, *,
          alpha: float = 0.05, weights=None, se_method: str = "bootstrap",
          bootstrap_b: int = 500, seed: int = 0,
          nuisance_specs: NuisanceSpecs | None = None,
          bootstrap_fits=None) -> EstimateReport:
    """Outcome-regression estimator: E_n[e (m1 - m0)] / E_n[e]."""
    stratum = parse_stratum(stratum)
    mu, mu_arm = _or_point(ds, fit, sens, stratum, weights)
    diag = _base_diag(fit, sens)
    se = float("nan")
    if se_method == "bootstrap" and bootstrap_fits is not None:
        se, failed = _se_from_bootstrap_fits(bootstrap_fits, sens, stratum, "or")
        diag["bootstrap_b"] = len(bootstrap_fits)
        diag["bootstrap_failed"] = failed
        diag["bootstrap_refit"] = True
    elif se_method == "bootstrap":
        point = _resample_point(ds, fit, sens, stratum, nuisance_specs,
                                stratum_cells(stratum), "or", seed)
        se, failed = _bootstrap_se(point, ds, bootstrap_b, seed)
        diag["bootstrap_b"] = bootstrap_b
        diag["bootstrap_failed"] = failed
        diag["bootstrap_refit"] = nuisance_specs is not None
    elif se_method == "plugin":
        sc = score_components(ds, fit, sens, stratum)
        t_bar = _wmean(sc.tau, weights)
        xi = sc.xi(mu_arm)
        se = float(np.sqrt(_wmean(xi**2, weights) / t_bar**2 / ds.n))
    return EstimateReport(stratum=stratum, estimator="or",
                          theta_summary=sens.describe(), mu_hat=mu,
                          mu_arm=mu_arm, se=se, ci=_wald_ci(mu, se, alpha),
                          alpha=alpha, n=ds.n, diagnostics=diag)


# ---------------------------------------------------------------------------
# Influence-function estimators
# ---------------------------------------------------------------------------


def mu_cdr(ds: Dataset, fit: NuisanceFit, sens: SensitivitySpec, stratum, *,
           alpha: float = 0.05, weights=None, se_method: str = "plugin",
           bootstrap_b: int = 500, seed: int = 0,
           nuisance_specs: NuisanceSpecs | None = None,
           bootstrap_fits=None) -> EstimateReport:
    """Conditionally doubly robust estimator from full-sample nuisances.

    Solves E_n[xi^1 - xi^0] = 0, i.e. mu^z = E_n[omega^z] / E_n[tau].  The
    default standard error is the plug-in influence-function variance; a
    bootstrap flag covers partially misspecified working models.
    """
    stratum = parse_stratum(stratum)
    sc = score_components(ds, fit, sens, stratum)
    t_bar = _wmean(sc.tau, weights)
    if abs(t_bar) < TAU_GUARD:
        raise NearZeroDenominator(
            f"stratum {stratum} empirically empty: mean tau = {t_bar:.2e}")
    mu_arm = (_wmean(sc.omega[0], weights) / t_bar,
              _wmean(sc.omega[1], weights) / t_bar)
    mu = mu_arm[1] - mu_arm[0]
    diag = _base_diag(fit, sens)
    diag["mean_tau"] = t_bar
    if se_method == "bootstrap" and bootstrap_fits is not None:
        se, failed = _se_from_bootstrap_fits(bootstrap_fits, sens, stratum, "cdr")
        diag["bootstrap_b"] = len(bootstrap_fits)
        diag["bootstrap_failed"] = failed
    elif se_method == "bootstrap":
        def point(idx):
            ds_b = _take_dataset(ds, idx)
            if nuisance_specs is not None:
                fit_b = fit_nuisances(ds_b, nuisance_specs,
                                      stratum_cells(stratum), seed=seed)
            else:
                fit_b = fit.subset(idx)
            sc_b = score_components(ds_b, fit_b, sens, stratum)
            tb = float(np.mean(sc_b.tau))
            return (np.mean(sc_b.omega[1]) - np.mean(sc_b.omega[0])) / tb
        se, failed = _bootstrap_se(point, ds, bootstrap_b, seed)
        diag["bootstrap_b"] = bootstrap_b
        diag["bootstrap_failed"] = failed
    else:
        xi = sc.xi(mu_arm)
        se = float(np.sqrt(_wmean(xi**2, weights) / t_bar**2 / ds.n))
    return EstimateReport(stratum=stratum, estimator="cdr",
                          theta_summary=sens.describe(), mu_hat=mu,
                          mu_arm=mu_arm, se=se, ci=_wald_ci(mu, se, alpha),
                          alpha=alpha, n=ds.n, diagnostics=diag)


def mu_dml(ds: Dataset, sens: SensitivitySpec, stratum, *,
           plan: FoldPlan | None = None, specs: NuisanceSpecs | None = None,
           crossfit: CrossFit | None = None, k: int = 5, seed: int = 0,
           alpha: float = 0.05) -> EstimateReport:
    """Debiased machine-learning estimator with cross-fitted nuisances.

    Point estimate: sum_k n_k (omega1_k - omega0_k) / sum_k n_k tau_k over
    fold-level means of the out-of-fold scores.  The standard error comes
    from the cross-fitted variance estimator, which plugs the per-fold arm
    means mu^{z,k} = omega^{z,k} / tau^k into the centred score.
    """
    stratum = parse_stratum(stratum)
    if crossfit is None:
        if plan is None:
            plan = make_folds(ds, k, seed)
        if specs is None:
            raise ValueError("mu_dml needs either a CrossFit or NuisanceSpecs")
        crossfit = crossfit_nuisances(ds, plan, specs, stratum_cells(stratum),
                                      seed=seed)
    plan = crossfit.plan
    fit = crossfit.per_unit
    sc = score_components(ds, fit, sens, stratum)

    n = ds.n
    fold_ids = range(1, plan.k + 1)
    n_k = np.array([np.sum(plan.assignment == kk) for kk in fold_ids], dtype=float)
    tau_k = np.array([np.mean(sc.tau[plan.assignment == kk]) for kk in fold_ids])
    om0_k = np.array([np.mean(sc.omega[0][plan.assignment == kk]) for kk in fold_ids])
    om1_k = np.array([np.mean(sc.omega[1][plan.assignment == kk]) for kk in fold_ids])

    denom = float(np.sum(n_k * tau_k))
    if abs(denom / n) < TAU_GUARD:
        raise NearZeroDenominator(
            f"stratum {stratum} empirically empty: aggregated tau = {denom / n:.2e}")
    mu = float(np.sum(n_k * (om1_k - om0_k)) / denom)
    mu_arm = (float(np.sum(n_k * om0_k) / denom), float(np.sum(n_k * om1_k) / denom))

    diag = _base_diag(fit, sens)
    diag["folds"] = plan.k
    diag["fold_tau"] = tau_k.tolist()
    diag["mean_tau"] = float(denom / n)
    unstable = np.any(tau_k <= TAU_GUARD)
    if unstable:
        diag["warnings"].append("unstable_fold_denominator")

    # cross-fitted variance: per-fold arm means inside the centred score
    var_sum = 0.0
    for j, kk in enumerate(fold_ids):
        rows = plan.assignment == kk
        with np.errstate(divide="ignore", invalid="ignore"):
            mu_k = (om0_k[j] / tau_k[j], om1_k[j] / tau_k[j])
            xi = sc.xi(mu_k)[rows]
            var_sum += n_k[j] / tau_k[j] ** 2 * np.mean(xi**2)
    vhat = var_sum / n
    se = float(np.sqrt(vhat / n)) if np.isfinite(vhat) and vhat >= 0 else float("nan")
    if not np.isfinite(se):
        diag["warnings"].append("nonfinite_variance")
    return EstimateReport(stratum=stratum, estimator="dml",
                          theta_summary=sens.describe(), mu_hat=mu,
                          mu_arm=mu_arm, se=se, ci=_wald_ci(mu, se, alpha),
                          alpha=alpha, n=n, diagnostics=diag)


def strata_proportion(ds: Dataset, sens: SensitivitySpec, stratum, *,
                      crossfit: CrossFit | None = None,
                      fit: NuisanceFit | None = None,
                      plan: FoldPlan | None = None,
                      specs: NuisanceSpecs | None = None,
                      k: int = 5, seed: int = 0,
                      weights=None) -> tuple[float, float]:
    """Estimated stratum proportion E[e(X)] and its standard error.

    Cross-fitted when a CrossFit (or plan + specs) is given; otherwise uses a
    full-sample NuisanceFit.  The raw estimate is reported even if sampling
    noise pushes it slightly outside [0, 1].
    """
    stratum = parse_stratum(stratum)
    if crossfit is None and fit is None:
        if plan is None:
            plan = make_folds(ds, k, seed)
        if specs is None:
            raise ValueError("strata_proportion needs nuisances")
        crossfit = crossfit_nuisances(ds, plan, specs, (), seed=seed)
    if crossfit is not None:
        plan = crossfit.plan
        tau = tau_scores(ds, crossfit.per_unit, sens, stratum)
        n_k = np.array([np.sum(plan.assignment == kk) for kk in range(1, plan.k + 1)],
                       dtype=float)
        tau_k = np.array([np.mean(tau[plan.assignment == kk])
                          for kk in range(1, plan.k + 1)])
        est = float(np.sum(n_k * tau_k) / ds.n)
    else:
        tau = tau_scores(ds, fit, sens, stratum)
        est = _wmean(tau, weights)
    se = float(np.sqrt(_wmean((tau - est) ** 2, weights) / ds.n))
    return est, se
