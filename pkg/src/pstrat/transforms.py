"""Fixed smooth covariate remap used to misspecify working design matrices.

The map is one-to-one on the sampled support, so a flexible learner fed the
transformed columns can still recover the truth while a linear working model
cannot.
"""

from __future__ import annotations

import numpy as np


def transform_covariates(x: np.ndarray) -> np.ndarray:
    """Invertible nonlinear remap of a 3-column covariate matrix."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != 3:
        raise ValueError("transform_covariates expects exactly 3 columns")
    out = np.empty_like(x)
    out[:, 0] = np.exp(x[:, 0] / 2.0)
    out[:, 1] = x[:, 1] / (1.0 + np.exp(x[:, 0])) + 10.0
    out[:, 2] = (x[:, 0] * x[:, 2] / 25.0 + 0.6) ** 3
    return out


def invert_transform(xt: np.ndarray) -> np.ndarray:
    """Numeric inverse of :func:`transform_covariates` (column by column)."""
    xt = np.atleast_2d(np.asarray(xt, dtype=float))
    x0 = 2.0 * np.log(xt[:, 0])
    x1 = (xt[:, 1] - 10.0) * (1.0 + np.exp(x0))
    x2 = (np.cbrt(xt[:, 2]) - 0.6) * 25.0 / x0
    return np.column_stack([x0, x1, x2])
