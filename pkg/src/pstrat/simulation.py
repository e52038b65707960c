"""Data-generating processes and the Monte Carlo replication harness.

The DGP draws covariates X ~ N(0, I_3) and works through s = sum(X): the
propensity, the two intermediate-outcome margins and the outcome means are
all functions of s; the joint potential intermediate outcomes are drawn from
the 2x2 cells implied by the margins and the chosen cross-world odds ratio.
Outcomes depend only on (X, D(z)), which builds principal ignorability into
the process by construction.

True stratum means are approximated once per DGP from a 10^7-unit
super-population and cached on disk keyed by a hash of the DGP fields.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, PstratError
from .estimators import mu_cdr, mu_dml, mu_or, mu_wt
from .learners import GbtParams, expit
from .nuisance import (Dataset, LearnerSpec, NuisanceSpecs, crossfit_nuisances,
                       fit_nuisances, make_folds, stratum_cells)
from .strata import STRATA, MarginPair, SensitivitySpec, cell_probs, parse_stratum

SUPERPOP_N = 10_000_000
SUPERPOP_CHUNK = 1_000_000
SUPERPOP_SEED = 20240801


def _cache_dir() -> Path:
    root = os.environ.get("PSTRAT_CACHE")
    if root:
        return Path(root)
    return Path.home() / ".cache" / "pstrat"


@dataclass(frozen=True)
class DgpConfig:
    """Simulation data-generating process.

    theta_mode: 'constant' (theta_value), 'infinity' (monotone world,
    requires shared margin slopes and ordered intercepts so p1 > p0
    everywhere), or 'covariate' (theta(X) = |sum X| + theta_offset).
    """

    n: int = 500
    theta_mode: str = "constant"
    theta_value: float = 2.0
    theta_offset: float = 0.1
    propensity_slope: float = 0.25
    margin_intercepts: tuple[float, float] = (-0.3, 0.3)
    margin_slopes: tuple[float, float] = (0.5, 0.5)
    outcome_base: float = 1.0
    outcome_z: float = 1.0
    outcome_x: float = 0.5
    # calibrated so that wrongly assuming monotonicity is visibly harmful at
    # n=500 while mild theta misspecification stays mild; see tests
    outcome_zx: float = 0.65
    outcome_d: float = 2.0
    noise_sd: float = 1.0
    p_dim: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.theta_mode not in ("constant", "infinity", "covariate"):
            raise ConfigError(f"unknown theta_mode {self.theta_mode!r}")
        if self.theta_mode == "constant" and not self.theta_value > 0:
            raise ConfigError("theta_value must be > 0")
        if self.noise_sd <= 0:
            raise ConfigError("noise_sd must be > 0")
        if self.theta_mode == "infinity":
            a0, a1 = self.margin_intercepts
            if self.margin_slopes[0] != self.margin_slopes[1] or not a1 > a0:
                raise ConfigError(
                    "infinity mode needs shared margin slopes and ordered "
                    "intercepts so that p1(X) > p0(X) everywhere")
        self._check_margin_range()

    def _check_margin_range(self):
        # margins should stay inside (0.05, 0.95) for >= 99% of draws
        rng = np.random.default_rng(12345)
        s = rng.normal(size=100_000) * np.sqrt(self.p_dim)
        for z in (0, 1):
            p = self.margin(z, s)
            frac = np.mean((p > 0.05) & (p < 0.95))
            if frac < 0.99:
                raise ConfigError(
                    f"margin p{z} outside (0.05, 0.95) for {100 * (1 - frac):.1f}% "
                    "of draws; rescale the margin coefficients")

    # -- component functions of s = sum(x) ---------------------------------

    def propensity(self, s):
        return expit(self.propensity_slope * s)

    def margin(self, z, s):
        return expit(self.margin_intercepts[z] + self.margin_slopes[z] * s)

    def outcome_mean(self, z, d, s):
        return (self.outcome_base + self.outcome_z * z + self.outcome_x * s
                + self.outcome_zx * z * s + self.outcome_d * d)

    def theta_fn(self, s):
        if self.theta_mode == "constant":
            return np.full_like(s, self.theta_value, dtype=float)
        if self.theta_mode == "infinity":
            return np.full_like(s, np.inf, dtype=float)
        return np.abs(s) + self.theta_offset

    def sens_true(self, s=None) -> SensitivitySpec:
        """The sensitivity spec matching this DGP (per-unit in covariate mode)."""
        if self.theta_mode == "constant":
            return SensitivitySpec.constant(self.theta_value)
        if self.theta_mode == "infinity":
            return SensitivitySpec.monotone()
        if s is None:
            raise ConfigError("covariate mode needs the realised covariates")
        return SensitivitySpec.per_unit(self.theta_fn(s))

    def truth_hash(self) -> str:
        fields = {k: v for k, v in self.__dict__.items() if k not in ("n", "seed")}
        blob = json.dumps(fields, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class GroundTruth:
    """Per-unit true nuisances and the sampled potential intermediates."""

    pi: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    m: dict
    theta: np.ndarray
    d_pot: tuple[np.ndarray, np.ndarray]
    cfg: DgpConfig

    def specs(self) -> NuisanceSpecs:
        """Oracle learner specs returning the true functions (test hook)."""
        cfg = self.cfg
        m_fns = {(z, d): (lambda x, z=z, d=d: cfg.outcome_mean(z, d, x.sum(axis=1)))
                 for z in (0, 1) for d in (0, 1)}
        return NuisanceSpecs.from_truth(
            pi_fn=lambda x: cfg.propensity(x.sum(axis=1)),
            p0_fn=lambda x: cfg.margin(0, x.sum(axis=1)),
            p1_fn=lambda x: cfg.margin(1, x.sum(axis=1)),
            m_fns=m_fns,
        )


def _sample_strata(rng, cells) -> tuple[np.ndarray, np.ndarray]:
    u = rng.uniform(size=cells.e00.shape)
    c1 = cells.e00
    c2 = c1 + cells.e01
    c3 = c2 + cells.e10
    idx = (u > c1).astype(np.int64) + (u > c2) + (u > c3)
    lab = np.array(STRATA)  # (00, 01, 10, 11)
    return lab[idx, 0], lab[idx, 1]


def gen_dataset(cfg: DgpConfig) -> tuple[Dataset, GroundTruth]:
    """Draw one dataset plus its unit-level ground truth."""
    rng = np.random.default_rng(cfg.seed)
    x = rng.normal(size=(cfg.n, cfg.p_dim))
    s = x.sum(axis=1)
    pi = cfg.propensity(s)
    p0 = cfg.margin(0, s)
    p1 = cfg.margin(1, s)
    theta = cfg.theta_fn(s)

    margins = MarginPair(p0, p1)
    if cfg.theta_mode == "infinity":
        cells = cell_probs(margins, SensitivitySpec.monotone(), validate=False)
    elif cfg.theta_mode == "constant":
        cells = cell_probs(margins, SensitivitySpec.constant(cfg.theta_value),
                           validate=False)
    else:
        cells = cell_probs(margins, SensitivitySpec.per_unit(theta), validate=False)

    d0, d1 = _sample_strata(rng, cells)
    z = (rng.uniform(size=cfg.n) < pi).astype(np.int8)
    y_pot = {zz: cfg.outcome_mean(zz, (d1 if zz else d0), s)
             + rng.normal(size=cfg.n) * cfg.noise_sd for zz in (0, 1)}
    d = np.where(z == 1, d1, d0).astype(np.int8)
    y = np.where(z == 1, y_pot[1], y_pot[0])

    m = {(zz, dd): cfg.outcome_mean(zz, dd, s) for zz in (0, 1) for dd in (0, 1)}
    truth = GroundTruth(pi=pi, p0=p0, p1=p1, m=m, theta=theta,
                        d_pot=(d0, d1), cfg=cfg)
    return Dataset(y=y, d=d, z=z, x=x), truth


# ---------------------------------------------------------------------------
# Super-population truth
# ---------------------------------------------------------------------------


def superpop_truth(cfg: DgpConfig, *, n_units: int = SUPERPOP_N) -> dict:
    """True stratum means and proportions from a large simulated population.

    Conditional on X the potential-outcome difference has mean
    outcome_z + outcome_zx * s + outcome_d * (d1 - d0), so only the
    cell-weighted moments of s are accumulated; no outcome noise is needed.
    Cached on disk keyed by the DGP hash (n and seed excluded).
    """
    cache = _cache_dir() / f"superpop_{cfg.truth_hash()}_{n_units}.json"
    if cache.exists():
        return json.loads(cache.read_text())

    sums = {st: np.zeros(2) for st in STRATA}  # [sum e, sum e*s]
    theta_sum = 0.0
    rng = np.random.default_rng(SUPERPOP_SEED)
    done = 0
    while done < n_units:
        m_chunk = min(SUPERPOP_CHUNK, n_units - done)
        s = rng.normal(size=m_chunk) * np.sqrt(cfg.p_dim)
        margins = MarginPair(cfg.margin(0, s), cfg.margin(1, s))
        if cfg.theta_mode == "infinity":
            cells = cell_probs(margins, SensitivitySpec.monotone(), validate=False)
        else:
            cells = cell_probs(margins, SensitivitySpec.per_unit(cfg.theta_fn(s)),
                               validate=False)
        for st in STRATA:
            e = cells.cell(st)
            sums[st] += (e.sum(), (e * s).sum())
        theta_sum += float(np.sum(cfg.theta_fn(s))) if cfg.theta_mode != "infinity" else 0.0
        done += m_chunk

    out = {"n_units": n_units, "theta_mean": theta_sum / n_units}
    for st in STRATA:
        tot, s_tot = sums[st]
        key = f"{st[0]}{st[1]}"
        out[f"prop_{key}"] = tot / n_units
        if tot > 0:
            s_bar = s_tot / tot
            out[f"mu_{key}"] = (cfg.outcome_z + cfg.outcome_zx * s_bar
                                + cfg.outcome_d * (st[1] - st[0]))
        else:
            out[f"mu_{key}"] = float("nan")
    cache.parent.mkdir(parents=True, exist_ok=True)
    tmp = cache.with_suffix(f".tmp{os.getpid()}")
    tmp.write_text(json.dumps(out, sort_keys=True))
    tmp.replace(cache)  # atomic: concurrent builders converge on one file
    return out


def true_mu(cfg: DgpConfig, stratum) -> float:
    d0, d1 = parse_stratum(stratum)
    return float(superpop_truth(cfg)[f"mu_{d0}{d1}"])


# ---------------------------------------------------------------------------
# Scenario runner
# ---------------------------------------------------------------------------

DESIGN_SPECS = {
    "a": (),
    "b": ("outcome",),
    "c": ("propensity",),
    "d": ("margin",),
    "e": ("propensity", "margin", "outcome"),
}


def design_parametric(letter: str) -> NuisanceSpecs:
    """Parametric working models with the design-matrix misspecification
    pattern of one scenario letter."""
    if letter not in DESIGN_SPECS:
        raise ConfigError(f"unknown design spec {letter!r}; use a-e")
    t = DESIGN_SPECS[letter]
    return NuisanceSpecs.parametric(
        propensity_design="transformed" if "propensity" in t else "raw",
        margin_design="transformed" if "margin" in t else "raw",
        outcome_design="transformed" if "outcome" in t else "raw",
    )


DML_GBT = GbtParams(trees=150, depth=1, shrinkage=0.1, min_leaf=20,
                    leaf_l2=1.0, bins=32)


def design_ml(letter: str, gbt: GbtParams | None = None, *,
              kind: str = "stacked", stack_folds: int = 3) -> NuisanceSpecs:
    """Data-adaptive nuisances under a design letter.

    kind='stacked' stacks a GLM with boosted trees (the GLM member carries
    smooth truths, the trees carry transformed designs); kind='gbt' uses the
    trees alone.
    """
    if letter not in DESIGN_SPECS:
        raise ConfigError(f"unknown design spec {letter!r}; use a-e")
    t = DESIGN_SPECS[letter]
    gbt = gbt or DML_GBT

    def spec(slot):
        design = "transformed" if slot in t else "raw"
        if kind == "gbt":
            return LearnerSpec(kind="gbt", design=design, gbt=gbt)
        return LearnerSpec(
            kind="stacked", design=design, stack_folds=stack_folds,
            members=(LearnerSpec(kind="glm"), LearnerSpec(kind="gbt", gbt=gbt)),
        )

    return NuisanceSpecs(propensity=spec("propensity"), margin=spec("margin"),
                         outcome=spec("outcome"))


@dataclass(frozen=True)
class FittedTheta:
    """How the analyst specifies the odds ratio when fitting.

    kind: 'constant' (value), 'independence', 'monotone', 'true' (the DGP's
    own theta, per-unit in covariate mode) or 'mean_true' (constant at the
    super-population mean of theta(X)).
    """

    kind: str = "constant"
    value: float = 1.0

    def resolve(self, cfg: DgpConfig, x: np.ndarray) -> SensitivitySpec:
        if self.kind == "constant":
            return SensitivitySpec.constant(self.value)
        if self.kind == "independence":
            return SensitivitySpec.independence()
        if self.kind == "monotone":
            return SensitivitySpec.monotone()
        if self.kind == "true":
            if cfg.theta_mode == "covariate":
                return SensitivitySpec.per_unit(cfg.theta_fn(x.sum(axis=1)))
            if cfg.theta_mode == "infinity":
                return SensitivitySpec.monotone()
            return SensitivitySpec.constant(cfg.theta_value)
        if self.kind == "mean_true":
            return SensitivitySpec.constant(superpop_truth(cfg)["theta_mean"])
        raise ConfigError(f"unknown fitted theta kind {self.kind!r}")

    def label(self) -> str:
        if self.kind == "constant":
            return f"{self.value:g}"
        return self.kind


@dataclass(frozen=True)
class SimScenario:
    """One DGP evaluated under one design letter, possibly under several
    fitted odds-ratio specifications (nuisances are shared across them)."""

    dgp: DgpConfig
    fitted: tuple[FittedTheta, ...] | FittedTheta
    design_spec: str = "a"
    estimators: tuple[str, ...] = ("cdr",)
    strata: tuple = ("11",)
    reps: int = 1000
    k: int = 5
    master_seed: int = 0
    dml_learner: str = "stacked"  # or "gbt"
    dml_gbt: GbtParams = field(default_factory=lambda: DML_GBT)
    dml_stack_folds: int = 5
    n_jobs: int = 1
    alpha: float = 0.05

    def __post_init__(self):
        if isinstance(self.fitted, FittedTheta):
            object.__setattr__(self, "fitted", (self.fitted,))
        else:
            object.__setattr__(self, "fitted", tuple(self.fitted))
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if self.design_spec not in DESIGN_SPECS:
            raise ConfigError(f"unknown design spec {self.design_spec!r}")
        labels = [f.label() for f in self.fitted]
        if len(set(labels)) != len(labels):
            raise ConfigError("fitted theta labels must be distinct")
        for e in self.estimators:
            if e not in ("wt", "or", "cdr", "dml"):
                raise ConfigError(f"unknown estimator {e!r}")


def _replicate_seed(master_seed: int, r: int) -> int:
    child = np.random.SeedSequence(master_seed).spawn(r + 1)[r]
    return int(child.generate_state(1, dtype=np.uint64)[0] % (2**63))


def run_replicate(sc: SimScenario, r: int) -> dict:
    """One simulation replicate: generate once, fit shared nuisances once,
    evaluate every (fitted theta, estimator, stratum) combination."""
    cfg = replace(sc.dgp, seed=_replicate_seed(sc.master_seed, r))
    ds, truth = gen_dataset(cfg)
    strata = [parse_stratum(st) for st in sc.strata]
    cells = sorted({c for st in strata for c in stratum_cells(st)})

    out: dict = {}
    par_fit = None
    crossfit = None
    for fitted in sc.fitted:
        sens = fitted.resolve(cfg, ds.x)
        for est in sc.estimators:
            for st in strata:
                key = (fitted.label(), f"{st[0]}{st[1]}", est)
                try:
                    if est == "dml":
                        if crossfit is None:
                            plan = make_folds(ds, sc.k, cfg.seed + 1)
                            crossfit = crossfit_nuisances(
                                ds, plan,
                                design_ml(sc.design_spec, sc.dml_gbt,
                                          kind=sc.dml_learner,
                                          stack_folds=sc.dml_stack_folds),
                                cells, seed=cfg.seed + 2)
                        rep = mu_dml(ds, sens, st, crossfit=crossfit,
                                     alpha=sc.alpha)
                    else:
                        if par_fit is None:
                            par_fit = fit_nuisances(
                                ds, design_parametric(sc.design_spec), cells,
                                seed=cfg.seed + 3)
                        fn = {"wt": mu_wt, "or": mu_or, "cdr": mu_cdr}[est]
                        rep = fn(ds, par_fit, sens, st, alpha=sc.alpha,
                                 se_method="plugin")
                    out[key] = {
                        "est": rep.mu_hat, "se": rep.se, "ci": rep.ci,
                        "warnings": rep.diagnostics.get("warnings", []),
                        "fold_tau_min": min(rep.diagnostics.get("fold_tau", [np.inf])),
                        "mean_tau": rep.diagnostics.get("mean_tau", np.nan),
                        "error": None,
                    }
                except PstratError as exc:
                    out[key] = {"est": np.nan, "se": np.nan,
                                "ci": (np.nan, np.nan), "warnings": [],
                                "fold_tau_min": np.nan, "mean_tau": np.nan,
                                "error": type(exc).__name__}
    return out


@dataclass
class SimMetrics:
    """Aggregated performance metrics for one scenario."""

    scenario: SimScenario
    true_values: dict
    table: dict  # (stratum, estimator) -> metrics dict

    def rows(self) -> list[dict]:
        cfg = self.scenario.dgp
        out = []
        for (fit_label, stratum, est), m in sorted(self.table.items()):
            row = {
                "theta_true": (cfg.theta_value if cfg.theta_mode == "constant"
                               else cfg.theta_mode),
                "theta_fit": fit_label,
                "design_spec": self.scenario.design_spec,
                "stratum": stratum,
                "estimator": est,
                "n": cfg.n,
                "reps": self.scenario.reps,
                "true_mu": self.true_values[stratum],
            }
            row.update(m)
            out.append(row)
        return out


def run_scenario(sc: SimScenario) -> SimMetrics:
    """Run all replicates (optionally in parallel) and aggregate metrics.

    Replicates that error or return non-finite estimates are excluded from
    the bias/SD/AESE averages, counted as non-covering for CP, and reported
    in the failure columns.
    """
    # resolve the super-population truth before any workers spawn so the
    # disk cache is warm (FittedTheta 'mean_true' also reads it per replicate)
    true_values = {f"{parse_stratum(st)[0]}{parse_stratum(st)[1]}":
                   true_mu(sc.dgp, st) for st in sc.strata}

    if sc.n_jobs > 1:
        with ProcessPoolExecutor(max_workers=sc.n_jobs) as pool:
            results = list(pool.map(_run_replicate_star,
                                    [(sc, r) for r in range(sc.reps)],
                                    chunksize=max(1, sc.reps // (8 * sc.n_jobs))))
    else:
        results = [run_replicate(sc, r) for r in range(sc.reps)]
    table = {}
    for key in results[0]:
        _, stratum, est = key
        truth = true_values[stratum]
        ests = np.array([r[key]["est"] for r in results])
        ses = np.array([r[key]["se"] for r in results])
        ci_lo = np.array([r[key]["ci"][0] for r in results])
        ci_hi = np.array([r[key]["ci"][1] for r in results])
        errors = [r[key]["error"] for r in results]
        unstable = np.array([
            (r[key]["error"] is not None)
            or not np.isfinite(r[key]["est"]) or not np.isfinite(r[key]["se"])
            or ("unstable_fold_denominator" in r[key]["warnings"])
            or (np.isfinite(r[key]["mean_tau"]) and r[key]["mean_tau"] <= 1e-6)
            for r in results])
        good = np.isfinite(ests) & np.isfinite(ses)
        n_good = int(good.sum())
        covered = np.zeros(len(results), dtype=bool)
        covered[good] = (ci_lo[good] <= truth) & (truth <= ci_hi[good])
        reps = len(results)
        bias = float(np.mean(ests[good]) - truth) if n_good else float("nan")
        sd = float(np.std(ests[good], ddof=1)) if n_good > 1 else float("nan")
        aese = float(np.mean(ses[good])) if n_good else float("nan")
        cp = float(np.mean(covered))
        table[key] = {
            "bias": bias,
            "sd": sd,
            "aese": aese,
            "cp": cp,
            "mcse_bias": sd / np.sqrt(n_good) if n_good > 1 else float("nan"),
            "mcse_cp": float(np.sqrt(cp * (1 - cp) / reps)),
            "n_failed": int(sum(e is not None for e in errors)),
            "n_unstable": int(unstable.sum()),
        }
    return SimMetrics(scenario=sc, true_values=true_values, table=table)


def _run_replicate_star(args):
    return run_replicate(*args)


SUMMARY_COLUMNS = (
    "theta_true", "theta_fit", "design_spec", "stratum", "estimator", "n",
    "reps", "true_mu", "bias", "sd", "aese", "cp", "mcse_bias", "mcse_cp",
    "n_failed", "n_unstable",
)


def summarize(metrics: list[SimMetrics]) -> list[dict]:
    """Flatten scenario metrics into stable, sorted report rows."""
    rows = []
    for m in metrics:
        rows.extend(m.rows())
    rows.sort(key=lambda r: (str(r["theta_true"]), str(r["theta_fit"]),
                             r["design_spec"], r["stratum"], r["estimator"]))
    return [{c: r.get(c) for c in SUMMARY_COLUMNS} for r in rows]
