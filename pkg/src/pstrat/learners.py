"""Nuisance learners: IRLS logistic regression, OLS, boosted trees, stacking.

Every fitter returns an immutable predictor object with a ``predict(X)``
method mapping a raw covariate matrix to fitted values (probabilities for
binary targets, means for continuous ones).  Fits are deterministic given
their seed and safe to share across threads once constructed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import RankDeficient, SeparationDetected, StackedFitFailed

PROB_CLIP = 0.01  # default probability clipping, see nuisance module
COEF_DIVERGENCE = 30.0  # |standardised coef| beyond this flags separation
RIDGE_FALLBACK = 1e-4


def expit(t):
    out = np.empty_like(t, dtype=float)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _with_intercept(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.column_stack([np.ones(x.shape[0]), x])


def _check_rank(design: np.ndarray, what: str) -> None:
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise RankDeficient(f"{what}: design matrix is rank deficient")


@dataclass(frozen=True)
class LogisticFit:
    """Logistic regression fit; ``coef`` is on the raw scale, intercept first."""

    coef: np.ndarray
    converged: bool
    ridge_fallback: bool
    n_iter: int
    max_grad: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        return expit(_with_intercept(x) @ self.coef)


def fit_logistic(x: np.ndarray, y: np.ndarray, *, max_iter: int = 100,
                 tol: float = 1e-8, ridge: float = 0.0) -> LogisticFit:
    """Binomial MLE by iteratively reweighted least squares (Newton steps).

    The fit runs on an internally standardised design for conditioning; a
    divergence check (|coef| > 30 on that scale, or a singular Hessian)
    triggers a ridge-stabilised refit (lambda = 1e-4) flagged on the result.
    A constant response has no finite MLE and takes the same fallback path.
    """
    y = np.asarray(y, dtype=float).ravel()
    design = _with_intercept(x)
    _check_rank(design, "fit_logistic")

    # standardise non-intercept columns; coefficients are mapped back below
    mu = design[:, 1:].mean(axis=0)
    sd = design[:, 1:].std(axis=0)
    sd[sd == 0.0] = 1.0
    std_design = design.copy()
    std_design[:, 1:] = (design[:, 1:] - mu) / sd

    beta, ok, n_iter = _irls(std_design, y, ridge=ridge, max_iter=max_iter, tol=tol)
    fallback = False
    if not ok:
        beta, ok, n_iter = _irls(std_design, y, ridge=RIDGE_FALLBACK,
                                 max_iter=max_iter, tol=tol)
        fallback = True
        if not ok:
            raise SeparationDetected("logistic fit diverged even with ridge fallback")

    p = expit(std_design @ beta)
    grad = std_design.T @ (y - p)
    raw = np.empty_like(beta)
    raw[1:] = beta[1:] / sd
    raw[0] = beta[0] - np.dot(mu, raw[1:])
    return LogisticFit(coef=raw, converged=ok, ridge_fallback=fallback,
                       n_iter=n_iter, max_grad=float(np.max(np.abs(grad))))


def _irls(design, y, *, ridge, max_iter, tol):
    n, p = design.shape
    beta = np.zeros(p)
    ybar = min(max(y.mean(), 1e-6), 1 - 1e-6)
    beta[0] = np.log(ybar / (1 - ybar))
    penalty = ridge * n * np.eye(p)
    penalty[0, 0] = 0.0  # intercept unpenalised
    for it in range(1, max_iter + 1):
        eta = design @ beta
        mu = expit(eta)
        w = mu * (1.0 - mu)
        grad = design.T @ (y - mu) - (penalty @ beta)
        hess = (design * w[:, None]).T @ design + penalty
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return beta, False, it
        beta = beta + step
        if np.max(np.abs(beta)) > COEF_DIVERGENCE:
            return beta, False, it
        if np.max(np.abs(step)) < tol:
            return beta, True, it
    return beta, False, max_iter


@dataclass(frozen=True)
class LinearFit:
    """Least-squares fit; ``coef`` includes the intercept first."""

    coef: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        return _with_intercept(x) @ self.coef


def fit_ols(x: np.ndarray, y: np.ndarray) -> LinearFit:
    """Ordinary least squares through a QR factorisation."""
    y = np.asarray(y, dtype=float).ravel()
    design = _with_intercept(x)
    q, r = np.linalg.qr(design)
    if np.min(np.abs(np.diag(r))) < 1e-10 * max(1.0, np.max(np.abs(np.diag(r)))):
        raise RankDeficient("fit_ols: design matrix is rank deficient")
    coef = np.linalg.solve(r, q.T @ y)
    return LinearFit(coef=coef)


# ---------------------------------------------------------------------------
# Gradient boosted trees (histogram-based, depth-limited)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GbtParams:
    trees: int = 300
    depth: int = 2
    shrinkage: float = 0.1
    min_leaf: int = 10
    subsample: float = 0.8
    bins: int = 64
    leaf_l2: float = 1.0  # ridge on leaf values; damps near-pure leaves

    def __post_init__(self):
        if self.trees < 0 or self.depth < 1 or self.shrinkage <= 0 or self.min_leaf < 1:
            raise ValueError("invalid GBT hyperparameters")
        if not (0.0 < self.subsample <= 1.0) or self.bins < 2 or self.leaf_l2 < 0:
            raise ValueError("invalid GBT hyperparameters")


_LEAF = -1  # sentinel feature id for leaf nodes
_HESS_EPS = 1e-9


@dataclass(frozen=True)
class GbtFit:
    """Boosted ensemble; trees are flat arrays (feature, threshold-bin,
    children, leaf value) over the quantile binning learned at fit time."""

    bin_edges: tuple[np.ndarray, ...]
    base_score: float
    trees: tuple[tuple[np.ndarray, ...], ...]
    shrinkage: float
    binary: bool
    clip: float = PROB_CLIP

    def _raw(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        codes = _bin_codes(x, self.bin_edges)
        score = np.full(x.shape[0], self.base_score)
        for feat, thr, left, right, value in self.trees:
            node = np.zeros(x.shape[0], dtype=np.int64)
            for _ in range(len(feat)):  # at most the node count
                f = feat[node]
                active = f != _LEAF
                if not np.any(active):
                    break
                go_left = codes[np.arange(x.shape[0]), np.maximum(f, 0)] <= thr[node]
                node = np.where(active, np.where(go_left, left[node], right[node]), node)
            score += self.shrinkage * value[node]
        return score

    def predict(self, x: np.ndarray) -> np.ndarray:
        raw = self._raw(x)
        if self.binary:
            return np.clip(expit(raw), self.clip, 1.0 - self.clip)
        return raw


def _bin_codes(x: np.ndarray, edges: tuple[np.ndarray, ...]) -> np.ndarray:
    codes = np.empty(x.shape, dtype=np.int64)
    for j, e in enumerate(edges):
        codes[:, j] = np.searchsorted(e, x[:, j], side="right")
    return codes


def fit_gbt(x: np.ndarray, y: np.ndarray, params: GbtParams = GbtParams(), *,
            binary: bool, seed: int = 0, clip: float = PROB_CLIP) -> GbtFit:
    """Gradient boosting on quantile-binned features.

    Binary targets use log-loss gradients on the logit scale, continuous
    targets squared loss; leaf values are Newton steps.  Deterministic for a
    fixed seed (the only randomness is the per-tree row subsample).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, p = x.shape
    rng = np.random.default_rng(seed)

    edges = []
    for j in range(p):
        qs = np.quantile(x[:, j], np.linspace(0, 1, params.bins + 1)[1:-1])
        edges.append(np.unique(qs))
    edges = tuple(edges)
    codes = _bin_codes(x, edges)

    if binary:
        ybar = min(max(y.mean(), 1e-6), 1 - 1e-6)
        base = float(np.log(ybar / (1 - ybar)))
    else:
        base = float(y.mean())

    score = np.full(n, base)
    trees = []
    m = max(1, int(round(params.subsample * n)))
    for _ in range(params.trees):
        if binary:
            prob = expit(score)
            grad = prob - y
            hess = np.maximum(prob * (1.0 - prob), _HESS_EPS)
        else:
            grad = score - y
            hess = np.ones(n)
        rows = rng.choice(n, size=m, replace=False) if m < n else np.arange(n)
        tree = _grow_tree(codes, grad, hess, rows, params, edges)
        trees.append(tree)
        score += params.shrinkage * _tree_values(tree, codes)

    return GbtFit(bin_edges=edges, base_score=base, trees=tuple(trees),
                  shrinkage=params.shrinkage, binary=binary, clip=clip)


def _tree_values(tree, codes):
    feat, thr, left, right, value = tree
    node = np.zeros(codes.shape[0], dtype=np.int64)
    for _ in range(len(feat)):
        f = feat[node]
        active = f != _LEAF
        if not np.any(active):
            break
        go_left = codes[np.arange(codes.shape[0]), np.maximum(f, 0)] <= thr[node]
        node = np.where(active, np.where(go_left, left[node], right[node]), node)
    return value[node]


def _grow_tree(codes, grad, hess, rows, params: GbtParams, edges):
    """Grow one depth-limited tree over binned features; returns flat arrays."""
    n_bins = [len(e) + 1 for e in edges]
    feat, thr, left, right, value = [], [], [], [], []

    def new_node():
        feat.append(_LEAF)
        thr.append(0)
        left.append(0)
        right.append(0)
        value.append(0.0)
        return len(feat) - 1

    lam = params.leaf_l2

    def build(node_rows, depth, node_id):
        g_sum = grad[node_rows].sum()
        h_sum = hess[node_rows].sum()
        value[node_id] = -g_sum / (h_sum + lam + _HESS_EPS)
        if depth >= params.depth or node_rows.size < 2 * params.min_leaf:
            return
        best = None  # (gain, feature, bin)
        parent_obj = g_sum * g_sum / (h_sum + lam + _HESS_EPS)
        for j in range(codes.shape[1]):
            nb = n_bins[j]
            if nb < 2:
                continue
            c = codes[node_rows, j]
            cnt = np.bincount(c, minlength=nb)
            gs = np.bincount(c, weights=grad[node_rows], minlength=nb)
            hs = np.bincount(c, weights=hess[node_rows], minlength=nb)
            cnt_l = np.cumsum(cnt)[:-1]
            g_l = np.cumsum(gs)[:-1]
            h_l = np.cumsum(hs)[:-1]
            cnt_r = node_rows.size - cnt_l
            g_r = g_sum - g_l
            h_r = h_sum - h_l
            ok = (cnt_l >= params.min_leaf) & (cnt_r >= params.min_leaf)
            if not np.any(ok):
                continue
            gain = np.where(
                ok,
                g_l * g_l / (h_l + lam + _HESS_EPS)
                + g_r * g_r / (h_r + lam + _HESS_EPS) - parent_obj,
                -np.inf,
            )
            b = int(np.argmax(gain))
            if gain[b] > 1e-12 and (best is None or gain[b] > best[0]):
                best = (float(gain[b]), j, b)
        if best is None:
            return
        _, j, b = best
        go_left = codes[node_rows, j] <= b
        lid, rid = new_node(), new_node()
        feat[node_id], thr[node_id] = j, b
        left[node_id], right[node_id] = lid, rid
        build(node_rows[go_left], depth + 1, lid)
        build(node_rows[~go_left], depth + 1, rid)

    root = new_node()
    build(np.asarray(rows), 0, root)
    return (np.asarray(feat, dtype=np.int64), np.asarray(thr, dtype=np.int64),
            np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
            np.asarray(value, dtype=float))


# ---------------------------------------------------------------------------
# Stacking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StackedFit:
    members: tuple
    weights: np.ndarray
    binary: bool
    clip: float = PROB_CLIP
    member_errors: tuple[str, ...] = ()

    def predict(self, x: np.ndarray) -> np.ndarray:
        preds = np.column_stack([m.predict(x) for m in self.members])
        out = preds @ self.weights
        if self.binary:
            return np.clip(out, self.clip, 1.0 - self.clip)
        return out


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(v) + 1)
    cond = u - css / idx > 0
    rho = idx[cond][-1]
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0)


def _simplex_lstsq(pred: np.ndarray, y: np.ndarray) -> np.ndarray:
    """min ||y - P w||^2 subject to w >= 0, sum w = 1 (projected gradient)."""
    m = pred.shape[1]
    w = np.full(m, 1.0 / m)
    gram = pred.T @ pred
    lip = np.linalg.eigvalsh(gram)[-1]
    if lip <= 0:
        return w
    py = pred.T @ y
    step = 1.0 / lip
    for _ in range(2000):
        g = gram @ w - py
        w_new = _project_simplex(w - step * g)
        if np.max(np.abs(w_new - w)) < 1e-12:
            w = w_new
            break
        w = w_new
    return w


def fit_stacked(x: np.ndarray, y: np.ndarray, fitters: Sequence[Callable], *,
                binary: bool, folds: int = 5, seed: int = 0,
                clip: float = PROB_CLIP) -> StackedFit:
    """Stack member learners with convex weights chosen on out-of-fold
    predictions by simplex-constrained least squares.

    ``fitters`` are callables (x, y, seed) -> predictor.  Members that fail
    during cross-validation are dropped with a recorded error; if every
    member fails the stack fails.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n = x.shape[0]
    if len(fitters) < 1:
        raise StackedFitFailed("stacked learner needs at least one member")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % min(folds, n)
    n_folds = int(fold_of.max()) + 1

    cv_pred = np.full((n, len(fitters)), np.nan)
    errors: list[str] = []
    alive = []
    for j, fitter in enumerate(fitters):
        try:
            for k in range(n_folds):
                tr = fold_of != k
                model = fitter(x[tr], y[tr], seed + 1000 * j + k)
                cv_pred[~tr, j] = model.predict(x[~tr])
            alive.append(j)
        except Exception as exc:  # noqa: BLE001 - member failure is data-driven
            errors.append(f"member {j}: {exc}")
    if not alive:
        raise StackedFitFailed("; ".join(errors))

    if len(alive) == 1:
        weights = np.array([1.0])
    else:
        weights = _simplex_lstsq(cv_pred[:, alive], y)
    members = tuple(fitters[j](x, y, seed + 7777 * (j + 1)) for j in alive)
    return StackedFit(members=members, weights=weights, binary=binary,
                      clip=clip, member_errors=tuple(errors))
