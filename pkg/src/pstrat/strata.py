"""Closed-form 2x2 principal-stratum algebra.

A binary intermediate outcome under two treatment arms defines four latent
strata with cell probabilities ``e00, e01, e10, e11`` (cell ``e_{d0 d1}`` is
the probability that the potential intermediate outcome is ``d0`` under
control and ``d1`` under treatment).  Given the two margins

    p0 = e10 + e11,      p1 = e01 + e11,

and the cross-world odds ratio ``theta = (e11 * e00) / (e10 * e01)``, the
joint table is uniquely determined.  The odds ratio is margin-free: any value
in (0, inf) is compatible with any non-degenerate margins, which is what
makes it usable as a sensitivity parameter.

For finite theta != 1 the 11-cell solves a quadratic:

    delta = (1 + (theta - 1) * (p0 + p1))**2 - 4 * theta * (theta - 1) * p0 * p1
    e11   = (1 + (theta - 1) * (p0 + p1) - sqrt(delta)) / (2 * (theta - 1))

with removable limits ``e11 -> p0 * p1`` as theta -> 1 and
``e11 -> min(p0, p1)`` as theta -> inf.  The remaining cells follow from the
margins.  All functions are pure and vectorised over unit-level inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import DegenerateMargin, DeltaUnderflow, InvalidTheta, ThetaOne

# |theta - 1| below this tolerance is evaluated on the product branch; the
# quadratic formula is 0/0 at theta = 1 even though the limit exists.
THETA_ONE_TOL = 1e-9

# delta below this guard raises DeltaUnderflow in derivative code instead of
# returning a huge or infinite gradient.
DELTA_GUARD = 1e-12

STRATA: tuple[tuple[int, int], ...] = ((0, 0), (0, 1), (1, 0), (1, 1))

MODE_CONSTANT = "constant"
MODE_INDEPENDENCE = "independence"
MODE_MONOTONE = "monotone"
MODE_PER_UNIT = "per_unit"


def parse_stratum(stratum) -> tuple[int, int]:
    """Normalise a stratum label like '01' or (0, 1) to an int pair."""
    if isinstance(stratum, str):
        if len(stratum) != 2 or any(c not in "01" for c in stratum):
            raise ValueError(f"bad stratum label {stratum!r}")
        return int(stratum[0]), int(stratum[1])
    d0, d1 = stratum
    if d0 not in (0, 1) or d1 not in (0, 1):
        raise ValueError(f"bad stratum {stratum!r}")
    return int(d0), int(d1)


@dataclass(frozen=True)
class SensitivitySpec:
    """How the cross-world odds ratio is specified for an analysis.

    Modes:
      * ``constant``      -- one theta in (0, inf], shared by all units.
      * ``independence``  -- exact product branch e11 = p0 * p1 (the
        recommended direct specification rather than theta ~ 1).
      * ``monotone``      -- treatment never decreases the intermediate
        outcome.  This is the only mode allowed to claim D(1) >= D(0); a
        diverging odds ratio alone does not imply it, so the caller must
        assert the margin ordering explicitly via ``assume_p1_gt_p0``.
      * ``per_unit``      -- a finite positive theta per observation.
    """

    mode: str
    theta: float | None = None
    values: np.ndarray | None = field(default=None, repr=False)
    assume_p1_gt_p0: bool = False

    def __post_init__(self):
        if self.mode not in (MODE_CONSTANT, MODE_INDEPENDENCE, MODE_MONOTONE, MODE_PER_UNIT):
            raise InvalidTheta(f"unknown sensitivity mode {self.mode!r}")
        if self.mode == MODE_CONSTANT:
            t = self.theta
            if t is None or np.isnan(t) or t <= 0.0:
                raise InvalidTheta(f"constant theta must be in (0, inf], got {t!r}")
        if self.mode == MODE_PER_UNIT:
            v = np.asarray(self.values, dtype=float)
            if v.ndim != 1 or v.size == 0:
                raise InvalidTheta("per-unit theta must be a non-empty 1-d vector")
            if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
                raise InvalidTheta("per-unit theta values must be finite and > 0")
            object.__setattr__(self, "values", v)
        if self.mode == MODE_MONOTONE and not self.assume_p1_gt_p0:
            raise InvalidTheta(
                "monotone mode requires assume_p1_gt_p0=True: a diverging "
                "odds ratio alone does not order the potential outcomes"
            )

    # -- constructors -----------------------------------------------------

    @classmethod
    def constant(cls, theta: float) -> "SensitivitySpec":
        return cls(mode=MODE_CONSTANT, theta=float(theta))

    @classmethod
    def independence(cls) -> "SensitivitySpec":
        return cls(mode=MODE_INDEPENDENCE)

    @classmethod
    def monotone(cls, *, assume_p1_gt_p0: bool = True) -> "SensitivitySpec":
        return cls(mode=MODE_MONOTONE, assume_p1_gt_p0=assume_p1_gt_p0)

    @classmethod
    def per_unit(cls, values: Iterable[float]) -> "SensitivitySpec":
        return cls(mode=MODE_PER_UNIT, values=np.asarray(list(values), dtype=float))

    # -- helpers ----------------------------------------------------------

    def theta_broadcast(self, n: int) -> np.ndarray:
        """Theta as a float vector of length n (inf for the monotone limit)."""
        if self.mode == MODE_CONSTANT:
            return np.full(n, self.theta, dtype=float)
        if self.mode == MODE_INDEPENDENCE:
            return np.ones(n, dtype=float)
        if self.mode == MODE_MONOTONE:
            return np.full(n, np.inf)
        if len(self.values) != n:
            raise InvalidTheta(f"per-unit theta has length {len(self.values)}, expected {n}")
        return self.values

    def describe(self) -> dict:
        out = {"mode": self.mode}
        if self.mode == MODE_CONSTANT:
            out["theta"] = self.theta
        if self.mode == MODE_PER_UNIT:
            v = self.values
            out["theta_min"] = float(v.min())
            out["theta_max"] = float(v.max())
            out["theta_mean"] = float(v.mean())
        return out


@dataclass(frozen=True)
class MarginPair:
    """Arm-wise intermediate-outcome probabilities p0, p1 (vectorised)."""

    p0: np.ndarray
    p1: np.ndarray
    allow_boundary: bool = False

    def __post_init__(self):
        p0 = np.asarray(self.p0, dtype=float)
        p1 = np.asarray(self.p1, dtype=float)
        if p0.shape != p1.shape:
            raise DegenerateMargin("p0 and p1 must have the same shape")
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "p1", p1)
        for name, p in (("p0", p0), ("p1", p1)):
            flat = np.ravel(p)
            if not np.all(np.isfinite(flat)):
                raise DegenerateMargin(f"{name} contains non-finite values")
            if self.allow_boundary:
                bad = (flat < 0.0) | (flat > 1.0)
            else:
                bad = (flat <= 0.0) | (flat >= 1.0)
            if np.any(bad):
                raise DegenerateMargin(
                    f"{name} outside {'[0,1]' if self.allow_boundary else '(0,1)'}: "
                    f"offending value {float(flat[np.argmax(bad)]):g}"
                )

    @property
    def n(self) -> int:
        return int(np.size(self.p0))


@dataclass(frozen=True)
class StrataProbs:
    """The four cell probabilities plus the discriminant delta."""

    e00: np.ndarray
    e01: np.ndarray
    e10: np.ndarray
    e11: np.ndarray
    delta: np.ndarray

    def cell(self, stratum) -> np.ndarray:
        d0, d1 = parse_stratum(stratum)
        return {(0, 0): self.e00, (0, 1): self.e01, (1, 0): self.e10, (1, 1): self.e11}[(d0, d1)]

    def validate(self, margins: MarginPair, theta=None, *, atol: float = 1e-12,
                 or_rtol: float = 1e-8) -> None:
        """Check cell range, sum-to-one, margin reconstruction and, when all
        four cells are positive and theta is finite, the odds-ratio identity.
        """
        e00, e01, e10, e11 = map(np.ravel, (self.e00, self.e01, self.e10, self.e11))
        p0, p1 = np.ravel(margins.p0), np.ravel(margins.p1)
        for c in (e00, e01, e10, e11):
            if np.any(c < -atol) or np.any(c > 1.0 + atol):
                raise AssertionError("cell probability outside [0,1]")
        if np.any(np.abs(e00 + e01 + e10 + e11 - 1.0) > atol):
            raise AssertionError("cells do not sum to 1")
        if np.any(np.abs(e01 + e11 - p1) > atol):
            raise AssertionError("p1 margin not reconstructed")
        if np.any(np.abs(e10 + e11 - p0) > atol):
            raise AssertionError("p0 margin not reconstructed")
        lo = np.maximum(0.0, p0 + p1 - 1.0)
        hi = np.minimum(p0, p1)
        if np.any(e11 < lo - atol) or np.any(e11 > hi + atol):
            raise AssertionError("e11 violates the Frechet bounds")
        if theta is not None:
            th = np.broadcast_to(np.asarray(theta, dtype=float).ravel(), e11.shape)
            pos = (e00 > 0) & (e01 > 0) & (e10 > 0) & (e11 > 0) & np.isfinite(th)
            if np.any(pos):
                ratio = (e11 * e00)[pos] / ((e10 * e01)[pos])
                tgt = th[pos]
                if np.any(np.abs(ratio - tgt) > or_rtol * np.abs(tgt)):
                    raise AssertionError("odds ratio not reconstructed from cells")


def compute_delta(m: MarginPair, theta) -> np.ndarray:
    """Discriminant delta of the 11-cell quadratic for finite theta != 1.

    Clamps tiny negative rounding residue (>= -1e-12) to zero.
    """
    theta = np.asarray(theta, dtype=float)
    if np.any(theta == 1.0):
        raise ThetaOne("delta is requested on the quadratic branch; use the product branch at theta=1")
    if np.any(~np.isfinite(theta)) or np.any(theta <= 0.0):
        raise InvalidTheta("theta must be finite and > 0 on the quadratic branch")
    d = _delta_raw(m.p0, m.p1, theta)
    if np.any(d < -1e-12):
        raise AssertionError("delta fell materially below zero; margins/theta inconsistent")
    return np.maximum(d, 0.0)


def _delta_raw(p0, p1, theta):
    b = 1.0 + (theta - 1.0) * (p0 + p1)
    return b * b - 4.0 * theta * (theta - 1.0) * p0 * p1


def _e11_quadratic(p0, p1, theta):
    """Smaller-root 11-cell for finite theta != 1, cancellation-free.

    For b >= 0 the rationalised form 2*theta*p0*p1 / (b + sqrt(delta)) avoids
    subtracting nearly equal quantities; b < 0 can only occur for theta < 1,
    where the direct form has two negative terms and is stable.
    """
    b = 1.0 + (theta - 1.0) * (p0 + p1)
    delta = np.maximum(_delta_raw(p0, p1, theta), 0.0)
    sq = np.sqrt(delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        rational = 2.0 * theta * p0 * p1 / (b + sq)
        direct = (b - sq) / (2.0 * (theta - 1.0))
    e11 = np.where(b >= 0.0, rational, direct)
    return e11, delta


def _e11_by_mode(m: MarginPair, spec: SensitivitySpec):
    """Elementwise e11 and delta with per-mode branches.

    Returns (e11, delta, theta_vec) as flat vectors of length m.n; delta is 1
    on the product branch and inf on the monotone-limit branch, matching the
    formula's limits.
    """
    p0 = np.ravel(m.p0)
    p1 = np.ravel(m.p1)
    n = p0.size
    if spec.mode == MODE_INDEPENDENCE:
        return p0 * p1, np.ones(n), np.ones(n)
    if spec.mode == MODE_MONOTONE:
        return np.minimum(p0, p1), np.full(n, np.inf), np.full(n, np.inf)

    theta = spec.theta_broadcast(n)
    e11 = np.empty(n)
    delta = np.empty(n)

    inf_mask = np.isinf(theta)
    one_mask = ~inf_mask & (np.abs(theta - 1.0) < THETA_ONE_TOL)
    quad_mask = ~inf_mask & ~one_mask

    if np.any(inf_mask):
        e11[inf_mask] = np.minimum(p0, p1)[inf_mask]
        delta[inf_mask] = np.inf
    if np.any(one_mask):
        e11[one_mask] = (p0 * p1)[one_mask]
        delta[one_mask] = 1.0
    if np.any(quad_mask):
        e, d = _e11_quadratic(p0[quad_mask], p1[quad_mask], theta[quad_mask])
        e11[quad_mask], delta[quad_mask] = e, d
    return e11, delta, theta


def cell_probs(m: MarginPair, spec: SensitivitySpec, *, validate: bool = True) -> StrataProbs:
    """Map margins and an odds-ratio specification to the four cells.

    Algebraically the off cells follow from e11 by the margin identities
    e01 = p1 - e11 and so on, but those subtractions lose all relative
    precision when a cell is tiny (extreme theta).  Each cell is therefore
    computed by its own stable quadratic: flipping one potential outcome
    turns cell e_{d0 d1} into the 11-cell of a table with complemented
    margins and odds ratio theta (both flipped) or 1/theta (one flipped).
    """
    shape = np.shape(m.p0)
    e11, delta, theta = _e11_by_mode(m, spec)
    p0 = np.ravel(m.p0)
    p1 = np.ravel(m.p1)
    n = p0.size

    if spec.mode == MODE_INDEPENDENCE:
        e00, e01, e10 = (1 - p0) * (1 - p1), (1 - p0) * p1, p0 * (1 - p1)
    elif spec.mode == MODE_MONOTONE:
        e01 = p1 - e11
        e10 = p0 - e11
        e00 = 1.0 - np.maximum(p0, p1)
    else:
        e00 = np.empty(n)
        e01 = np.empty(n)
        e10 = np.empty(n)
        inf_mask = np.isinf(theta)
        one_mask = ~inf_mask & (np.abs(theta - 1.0) < THETA_ONE_TOL)
        quad_mask = ~inf_mask & ~one_mask
        if np.any(inf_mask):
            i = inf_mask
            e01[i] = (p1 - e11)[i]
            e10[i] = (p0 - e11)[i]
            e00[i] = (1.0 - np.maximum(p0, p1))[i]
        if np.any(one_mask):
            i = one_mask
            e00[i] = ((1 - p0) * (1 - p1))[i]
            e01[i] = ((1 - p0) * p1)[i]
            e10[i] = (p0 * (1 - p1))[i]
        if np.any(quad_mask):
            i = quad_mask
            th = theta[i]
            e00[i] = _e11_quadratic(1 - p0[i], 1 - p1[i], th)[0]
            e01[i] = _e11_quadratic(1 - p0[i], p1[i], 1.0 / th)[0]
            e10[i] = _e11_quadratic(p0[i], 1 - p1[i], 1.0 / th)[0]

    probs = StrataProbs(
        e00=np.asarray(e00).reshape(shape),
        e01=np.asarray(e01).reshape(shape),
        e10=np.asarray(e10).reshape(shape),
        e11=e11.reshape(shape),
        delta=delta.reshape(shape),
    )
    if validate and not m.allow_boundary:
        probs.validate(m, theta=theta.reshape(shape))
    return probs


def d_e11_dp(m: MarginPair, spec, arm: int) -> np.ndarray:
    """Partial derivative of the 11-cell w.r.t. the margin of one arm.

    On the quadratic branch this is (theta * p_other - (theta - 1) * e11) /
    sqrt(delta); the product branch gives p_other and the monotone limit the
    indicator 1{p_arm < p_other} (0.5 at ties).
    """
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    if not isinstance(spec, SensitivitySpec):
        spec = SensitivitySpec.constant(float(spec))
    shape = np.shape(m.p0)
    p_own = np.ravel(m.p0 if arm == 0 else m.p1)
    p_other = np.ravel(m.p1 if arm == 0 else m.p0)

    if spec.mode == MODE_INDEPENDENCE:
        return np.array(p_other, copy=True).reshape(shape)
    if spec.mode == MODE_MONOTONE:
        ind = np.where(p_own < p_other, 1.0, np.where(p_own > p_other, 0.0, 0.5))
        return ind.reshape(shape)

    e11, delta, theta = _e11_by_mode(m, spec)
    grad = np.empty(p_own.size)
    inf_mask = np.isinf(theta)
    one_mask = ~inf_mask & (np.abs(theta - 1.0) < THETA_ONE_TOL)
    quad_mask = ~inf_mask & ~one_mask

    if np.any(quad_mask):
        d = delta[quad_mask]
        if np.any(d < DELTA_GUARD):
            raise DeltaUnderflow(
                f"delta below guard {DELTA_GUARD:g}; derivative is unstable "
                "(degenerate margins/theta combination)"
            )
        grad[quad_mask] = (
            theta[quad_mask] * p_other[quad_mask]
            - (theta[quad_mask] - 1.0) * e11[quad_mask]
        ) / np.sqrt(d)
    if np.any(one_mask):
        grad[one_mask] = p_other[one_mask]
    if np.any(inf_mask):
        ind = np.where(p_own < p_other, 1.0, np.where(p_own > p_other, 0.0, 0.5))
        grad[inf_mask] = ind[inf_mask]
    return grad.reshape(shape)


def cell_partials(m: MarginPair, spec, stratum) -> tuple[np.ndarray, np.ndarray]:
    """(d e_cell / d p0, d e_cell / d p1) for any stratum, by chain rule.

    The off-diagonal and 00 cells are affine in (p0, p1, e11), so their
    partials follow directly from the 11-cell gradient.
    """
    d0, d1 = parse_stratum(stratum)
    g0 = d_e11_dp(m, spec, arm=0)
    g1 = d_e11_dp(m, spec, arm=1)
    if (d0, d1) == (1, 1):
        return g0, g1
    if (d0, d1) == (0, 1):
        return -g0, 1.0 - g1
    if (d0, d1) == (1, 0):
        return 1.0 - g0, -g1
    return g0 - 1.0, g1 - 1.0
