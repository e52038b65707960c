"""Nuisance-function fitting and K-fold cross-fitting.

The estimators need five conditional functions of the covariates: the
propensity score pi(X) = Pr(Z=1|X), the two intermediate-outcome margins
p_z(X) = Pr(D=1|Z=z,X), and the outcome means m_{zd}(X) = E[Y|Z=z,D=d,X]
for whichever (z, d) cells the target stratum reads.  Probability fits are
clipped into [eps, 1-eps] to keep the influence-function weights bounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError, MissingOutcome, SparseCell
from . import learners
from .transforms import transform_covariates

EPS_CLIP = 0.01

LEARNER_KINDS = ("logistic", "ols", "glm", "gbt", "stacked", "fixed")


@dataclass(frozen=True)
class Dataset:
    """Observed data: outcome y (NaN allowed where truncated), intermediate
    outcome d, treatment z, covariate matrix x."""

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        d = np.asarray(self.d)
        z = np.asarray(self.z)
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        n = y.size
        if d.size != n or z.size != n or x.shape[0] != n:
            raise DomainError("y, d, z, x must have matching lengths")
        for name, v in (("d", d), ("z", z)):
            vals = np.unique(v)
            if not np.all(np.isin(vals, (0, 1))):
                raise DomainError(f"{name} must be binary 0/1, found {vals.tolist()}")
        if not np.all(np.isfinite(x)):
            raise DomainError("x contains non-finite values")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d.astype(np.int8).ravel())
        object.__setattr__(self, "z", z.astype(np.int8).ravel())
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.size

    def require_outcomes(self, cells) -> None:
        """Check y is defined on every (z, d) cell the analysis will read."""
        for (z, d) in cells:
            rows = (self.z == z) & (self.d == d)
            bad = rows & ~np.isfinite(self.y)
            if np.any(bad):
                raise MissingOutcome(
                    f"outcome undefined on {int(bad.sum())} rows of cell (z={z}, d={d})"
                )


@dataclass(frozen=True)
class LearnerSpec:
    """How one nuisance function is fit.

    ``kind`` is one of: 'logistic' (IRLS), 'ols', 'glm' (logistic for binary
    targets, OLS for continuous), 'gbt', 'stacked', or 'fixed' (a supplied
    function of the covariates, used for oracle analyses and tests).
    ``design`` selects the matrix the learner sees: 'raw' or 'transformed'
    (the fixed smooth invertible remap of a 3-column design).
    """

    kind: str = "glm"
    design: str = "raw"
    gbt: learners.GbtParams = field(default_factory=learners.GbtParams)
    members: tuple = ()
    stack_folds: int = 5
    fixed_fn: Callable | None = None

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise DomainError(f"unknown learner kind {self.kind!r}")
        if self.design not in ("raw", "transformed"):
            raise DomainError(f"unknown design {self.design!r}")
        if self.kind == "stacked" and len(self.members) < 2:
            raise DomainError("stacked learner needs >= 2 members")
        if self.kind == "fixed" and self.fixed_fn is None:
            raise DomainError("fixed learner needs fixed_fn")

    def design_matrix(self, x: np.ndarray) -> np.ndarray:
        return transform_covariates(x) if self.design == "transformed" else x


@dataclass(frozen=True)
class NuisanceSpecs:
    """Learner choice per nuisance slot (margins share one spec, outcome
    means share one spec)."""

    propensity: LearnerSpec = field(default_factory=LearnerSpec)
    margin: LearnerSpec = field(default_factory=LearnerSpec)
    outcome: LearnerSpec = field(default_factory=LearnerSpec)

    @classmethod
    def parametric(cls, *, propensity_design="raw", margin_design="raw",
                   outcome_design="raw") -> "NuisanceSpecs":
        return cls(
            propensity=LearnerSpec(kind="logistic", design=propensity_design),
            margin=LearnerSpec(kind="logistic", design=margin_design),
            outcome=LearnerSpec(kind="ols", design=outcome_design),
        )

    @classmethod
    def from_truth(cls, pi_fn, p0_fn, p1_fn, m_fns) -> "NuisanceSpecs":
        """Oracle specs returning known true functions (test hook).

        ``m_fns`` maps (z, d) -> callable(x).
        """
        margin = LearnerSpec(kind="fixed", fixed_fn=("margin", p0_fn, p1_fn))
        outcome = LearnerSpec(kind="fixed", fixed_fn=("outcome", m_fns))
        return cls(
            propensity=LearnerSpec(kind="fixed", fixed_fn=("propensity", pi_fn)),
            margin=margin,
            outcome=outcome,
        )


@dataclass(frozen=True)
class NuisanceFit:
    """Fitted nuisances evaluated on a row set.

    ``m`` maps (z, d) cells to fitted outcome means; only the cells that were
    requested are present.  ``rows`` are the evaluation rows (indices into the
    parent dataset), ``trained_rows`` the rows the learners saw.
    """

    pi: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    m: dict
    rows: np.ndarray
    trained_rows: np.ndarray
    meta: dict
    clip_frac: float

    def subset(self, idx: np.ndarray) -> "NuisanceFit":
        return NuisanceFit(
            pi=self.pi[idx], p0=self.p0[idx], p1=self.p1[idx],
            m={k: v[idx] for k, v in self.m.items()},
            rows=self.rows[idx], trained_rows=self.trained_rows,
            meta=self.meta, clip_frac=self.clip_frac,
        )


@dataclass(frozen=True)
class FoldPlan:
    """Cross-fitting assignment, stratified on (Z, D) cells."""

    k: int
    assignment: np.ndarray  # fold ids in {1..K}

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        object.__setattr__(self, "assignment", a)

    @property
    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k + 1)[1:]


def make_folds(ds: Dataset, k: int, seed: int) -> FoldPlan:
    """Assign every row to one of K folds, balanced within each (Z, D) cell.

    Within a cell the shuffled members are dealt round-robin starting from a
    rotating offset, so per-cell fold sizes differ by at most one and no fold
    is empty.  Deterministic given the seed.
    """
    if k < 2:
        raise DomainError("K must be >= 2")
    rng = np.random.default_rng(seed)
    assignment = np.zeros(ds.n, dtype=np.int64)
    offset = 0
    for z in (0, 1):
        for d in (0, 1):
            idx = np.flatnonzero((ds.z == z) & (ds.d == d))
            if idx.size < k:
                raise SparseCell(
                    f"cell (z={z}, d={d}) has {idx.size} rows; needs >= K={k}"
                )
            perm = rng.permutation(idx)
            assignment[perm] = (np.arange(idx.size) + offset) % k + 1
            offset += idx.size % k
    return FoldPlan(k=k, assignment=assignment)


def _binary_fitter(spec: LearnerSpec, seed: int):
    if spec.kind in ("logistic", "glm"):
        return lambda x, y, s: learners.fit_logistic(x, y)
    if spec.kind == "gbt":
        return lambda x, y, s: learners.fit_gbt(x, y, spec.gbt, binary=True, seed=s)
    if spec.kind == "stacked":
        fitters = [_binary_fitter(m, seed) for m in spec.members]
        return lambda x, y, s: learners.fit_stacked(
            x, y, fitters, binary=True, folds=spec.stack_folds, seed=s)
    raise DomainError(f"learner kind {spec.kind!r} cannot fit a binary target")


def _continuous_fitter(spec: LearnerSpec, seed: int):
    if spec.kind in ("ols", "glm"):
        return lambda x, y, s: learners.fit_ols(x, y)
    if spec.kind == "gbt":
        return lambda x, y, s: learners.fit_gbt(x, y, spec.gbt, binary=False, seed=s)
    if spec.kind == "stacked":
        fitters = [_continuous_fitter(m, seed) for m in spec.members]
        return lambda x, y, s: learners.fit_stacked(
            x, y, fitters, binary=False, folds=spec.stack_folds, seed=s)
    raise DomainError(f"learner kind {spec.kind!r} cannot fit a continuous target")


def _flags(model) -> dict:
    out = {}
    if getattr(model, "ridge_fallback", False):
        out["ridge_fallback"] = True
    if getattr(model, "member_errors", ()):
        out["member_errors"] = list(model.member_errors)
    return out


def fit_nuisances(ds: Dataset, specs: NuisanceSpecs, cells, *,
                  train_rows: np.ndarray | None = None,
                  eval_rows: np.ndarray | None = None,
                  seed: int = 0, eps_clip: float = EPS_CLIP) -> NuisanceFit:
    """Fit all nuisances on ``train_rows`` and evaluate them on ``eval_rows``
    (both default to every row).  ``cells`` lists the (z, d) outcome cells to
    fit; m_{z0} models are only fit when a requested stratum needs them.
    """
    train = np.arange(ds.n) if train_rows is None else np.asarray(train_rows)
    evaln = np.arange(ds.n) if eval_rows is None else np.asarray(eval_rows)
    meta: dict = {"eps_clip": eps_clip}
    clipped = 0
    total = 0

    def clip(p):
        nonlocal clipped, total
        clipped += int(np.sum((p < eps_clip) | (p > 1.0 - eps_clip)))
        total += p.size
        return np.clip(p, eps_clip, 1.0 - eps_clip)

    # propensity
    if specs.propensity.kind == "fixed":
        tag, pi_fn = specs.propensity.fixed_fn
        pi = np.asarray(pi_fn(ds.x[evaln]), dtype=float)
        meta["propensity"] = {"kind": "fixed"}
    else:
        xmat = specs.propensity.design_matrix(ds.x)
        model = _binary_fitter(specs.propensity, seed)(xmat[train], ds.z[train], seed)
        pi = model.predict(xmat[evaln])
        meta["propensity"] = {"kind": specs.propensity.kind,
                              "design": specs.propensity.design, **_flags(model)}
    pi = clip(pi)

    # margins p_z, fit on the Z=z training rows
    if specs.margin.kind == "fixed":
        tag, p0_fn, p1_fn = specs.margin.fixed_fn
        p0 = np.asarray(p0_fn(ds.x[evaln]), dtype=float)
        p1 = np.asarray(p1_fn(ds.x[evaln]), dtype=float)
        meta["margin"] = {"kind": "fixed"}
    else:
        xmat = specs.margin.design_matrix(ds.x)
        ps = {}
        meta["margin"] = {"kind": specs.margin.kind, "design": specs.margin.design}
        for z in (0, 1):
            rows = train[ds.z[train] == z]
            model = _binary_fitter(specs.margin, seed)(xmat[rows], ds.d[rows], seed + z)
            ps[z] = model.predict(xmat[evaln])
            meta["margin"].update({f"p{z}_flags": _flags(model)} if _flags(model) else {})
        p0, p1 = ps[0], ps[1]
    p0 = clip(p0)
    p1 = clip(p1)

    # outcome means on the requested (z, d) cells
    m: dict = {}
    meta["outcome"] = {"kind": specs.outcome.kind, "design": specs.outcome.design}
    for cell in sorted(set((int(z), int(d)) for z, d in cells)):
        z, d = cell
        if specs.outcome.kind == "fixed":
            tag, m_fns = specs.outcome.fixed_fn
            m[cell] = np.asarray(m_fns[cell](ds.x[evaln]), dtype=float)
            continue
        xmat = specs.outcome.design_matrix(ds.x)
        rows = train[(ds.z[train] == z) & (ds.d[train] == d)]
        if rows.size == 0:
            raise SparseCell(f"no training rows in outcome cell (z={z}, d={d})")
        yy = ds.y[rows]
        if not np.all(np.isfinite(yy)):
            raise MissingOutcome(
                f"outcome undefined on training rows of cell (z={z}, d={d})")
        model = _continuous_fitter(specs.outcome, seed)(xmat[rows], yy, seed + 10 + 2 * z + d)
        m[cell] = np.asarray(model.predict(xmat[evaln]), dtype=float)

    return NuisanceFit(
        pi=pi, p0=p0, p1=p1, m=m, rows=evaln, trained_rows=train,
        meta=meta, clip_frac=(clipped / total if total else 0.0),
    )


@dataclass(frozen=True)
class CrossFit:
    """Per-unit out-of-fold nuisance predictions plus fold bookkeeping."""

    plan: FoldPlan
    per_unit: NuisanceFit       # rows ordered 0..n-1, each predicted out-of-fold
    fold_fits: tuple            # NuisanceFit per fold (evaluation = that fold)

    def fold_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.plan.assignment == k)


def crossfit_nuisances(ds: Dataset, plan: FoldPlan, specs: NuisanceSpecs,
                       cells, *, seed: int = 0,
                       eps_clip: float = EPS_CLIP) -> CrossFit:
    """Fit nuisances per fold on the complementary training folds and stitch
    the out-of-fold predictions into per-unit vectors."""
    n = ds.n
    pi = np.empty(n)
    p0 = np.empty(n)
    p1 = np.empty(n)
    cells = sorted(set((int(z), int(d)) for z, d in cells))
    m = {cell: np.empty(n) for cell in cells}
    fold_fits = []
    for k in range(1, plan.k + 1):
        val = np.flatnonzero(plan.assignment == k)
        tr = np.flatnonzero(plan.assignment != k)
        fit = fit_nuisances(ds, specs, cells, train_rows=tr, eval_rows=val,
                            seed=seed + 97 * k, eps_clip=eps_clip)
        fold_fits.append(fit)
        pi[val] = fit.pi
        p0[val] = fit.p0
        p1[val] = fit.p1
        for cell in cells:
            m[cell][val] = fit.m[cell]
    clip_frac = float(np.mean([f.clip_frac for f in fold_fits]))
    per_unit = NuisanceFit(
        pi=pi, p0=p0, p1=p1, m=m, rows=np.arange(n),
        trained_rows=np.arange(n), meta={"crossfit": True, "K": plan.k},
        clip_frac=clip_frac,
    )
    return CrossFit(plan=plan, per_unit=per_unit, fold_fits=tuple(fold_fits))


def stratum_cells(stratum) -> tuple[tuple[int, int], tuple[int, int]]:
    """The two (z, d) outcome cells a stratum's estimators read:
    (1, d1) for the treated arm and (0, d0) for the control arm."""
    from .strata import parse_stratum

    d0, d1 = parse_stratum(stratum)
    return ((1, d1), (0, d0))
