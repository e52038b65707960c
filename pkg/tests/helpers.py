"""Shared test oracles.

The discrete instance enumerates a tiny finite world (binary covariate,
three-point outcome) so that every expectation is an exact finite sum.  Its
11-cell solver is an independent bisection, not the library's closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pstrat.nuisance import Dataset, NuisanceFit
from pstrat.strata import SensitivitySpec, parse_stratum

Y_SUPPORT = np.array([0.0, 1.0, 2.0])


def solve_e11_bisect(p0: float, p1: float, theta: float, tol: float = 1e-14) -> float:
    """Independent oracle: bisection for the 11-cell on the Frechet interval.

    The odds ratio e11*e00/(e10*e01) is strictly increasing in e11, from 0 at
    the lower Frechet bound to +inf at the upper bound.
    """
    lo = max(0.0, p0 + p1 - 1.0)
    hi = min(p0, p1)
    if np.isinf(theta):
        return hi
    a, b = lo, hi
    for _ in range(200):
        mid = 0.5 * (a + b)
        num = mid * (1.0 - p0 - p1 + mid)
        den = (p0 - mid) * (p1 - mid)
        if den <= 0 or num / den > theta:
            b = mid
        else:
            a = mid
        if b - a < tol:
            break
    return 0.5 * (a + b)


@dataclass
class DiscreteInstance:
    """Exhaustively enumerable world with known nuisances.

    Atoms are tuples (x, z, d0, d1, y) with exact probabilities; the observed
    data view keeps (y, d, z, x).
    """

    x_levels: np.ndarray
    px: np.ndarray
    pi: dict
    p0: dict
    p1: dict
    y_pmf: dict  # (z, d, x) -> probs over Y_SUPPORT

    @classmethod
    def default(cls) -> "DiscreteInstance":
        # outcome pmfs depend on (z, d, x) only -> principal ignorability holds
        y_pmf = {}
        rng = np.random.default_rng(1234)
        for z in (0, 1):
            for d in (0, 1):
                for x in (0, 1):
                    w = rng.uniform(0.2, 1.0, size=3)
                    y_pmf[(z, d, x)] = w / w.sum()
        return cls(
            x_levels=np.array([0, 1]),
            px=np.array([0.6, 0.4]),
            pi={0: 0.4, 1: 0.6},
            p0={0: 0.35, 1: 0.45},
            p1={0: 0.55, 1: 0.70},
            y_pmf=y_pmf,
        )

    def m(self, z: int, d: int, x: int) -> float:
        return float(np.dot(self.y_pmf[(z, d, x)], Y_SUPPORT))

    def cells(self, x: int, sens: SensitivitySpec) -> dict:
        p0, p1 = self.p0[x], self.p1[x]
        if sens.mode == "independence":
            e11 = p0 * p1
        elif sens.mode == "monotone":
            e11 = min(p0, p1)
        else:
            e11 = solve_e11_bisect(p0, p1, float(sens.theta))
        return {(1, 1): e11, (0, 1): p1 - e11, (1, 0): p0 - e11,
                (0, 0): 1 - p0 - p1 + e11}

    def atoms(self, sens: SensitivitySpec):
        """All (prob, x, z, d0, d1, y) with prob > 0."""
        out = []
        for ix, x in enumerate(self.x_levels):
            cells = self.cells(x, sens)
            for z in (0, 1):
                pz = self.pi[x] if z == 1 else 1 - self.pi[x]
                for (d0, d1), e in cells.items():
                    if e <= 0:
                        continue
                    d_obs = d1 if z == 1 else d0
                    for iy, y in enumerate(Y_SUPPORT):
                        pr = self.px[ix] * pz * e * self.y_pmf[(z, d_obs, x)][iy]
                        if pr > 0:
                            out.append((pr, x, z, d0, d1, y))
        return out

    def dataset(self, sens: SensitivitySpec):
        """Atom-level Dataset, probability weights and the true NuisanceFit."""
        atoms = self.atoms(sens)
        pr = np.array([a[0] for a in atoms])
        x = np.array([a[1] for a in atoms], dtype=float).reshape(-1, 1)
        z = np.array([a[2] for a in atoms])
        d0 = np.array([a[3] for a in atoms])
        d1 = np.array([a[4] for a in atoms])
        y = np.array([a[5] for a in atoms])
        d = np.where(z == 1, d1, d0)
        ds = Dataset(y=y, d=d, z=z, x=x)
        xi = x[:, 0].astype(int)
        fit = NuisanceFit(
            pi=np.array([self.pi[v] for v in xi]),
            p0=np.array([self.p0[v] for v in xi]),
            p1=np.array([self.p1[v] for v in xi]),
            m={(zz, dd): np.array([self.m(zz, dd, v) for v in xi])
               for zz in (0, 1) for dd in (0, 1)},
            rows=np.arange(len(xi)), trained_rows=np.arange(len(xi)),
            meta={"oracle": True}, clip_frac=0.0,
        )
        return ds, pr / pr.sum(), fit

    def identification(self, sens: SensitivitySpec, stratum) -> float:
        """mu_{d0 d1} by direct potential-outcome enumeration."""
        d0s, d1s = parse_stratum(stratum)
        num = 0.0
        den = 0.0
        for ix, x in enumerate(self.x_levels):
            e = self.cells(x, sens)[(d0s, d1s)]
            num += self.px[ix] * e * (self.m(1, d1s, x) - self.m(0, d0s, x))
            den += self.px[ix] * e
        if den == 0:
            return float("nan")
        return num / den

    def stratum_proportion(self, sens: SensitivitySpec, stratum) -> float:
        d0s, d1s = parse_stratum(stratum)
        return float(sum(self.px[ix] * self.cells(x, sens)[(d0s, d1s)]
                         for ix, x in enumerate(self.x_levels)))
