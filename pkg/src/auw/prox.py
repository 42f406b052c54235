"""Projections onto the two constraint sets of the unmixing problem.

Abundance columns live on the probability simplex; endmembers live on the
nonnegative orthant. Both projections are exact (sort-and-threshold for the
simplex, elementwise clamp for the orthant).
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError


def project_simplex_columns(v: np.ndarray) -> np.ndarray:
    """Project every column of an R x N matrix onto {x >= 0, sum(x) = 1}.

    Sort-and-threshold algorithm, O(R log R) per column. Coordinates landing
    exactly on the threshold map to zero.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2:
        raise DimensionError(f"expected 2-D input, got ndim={v.ndim}")
    if v.size == 0:
        raise DimensionError("cannot project an empty matrix")
    if not np.all(np.isfinite(v)):
        raise NumericError("cannot project non-finite values")
    r = v.shape[0]
    u = -np.sort(-v, axis=0)  # descending per column
    css = np.cumsum(u, axis=0)
    j = np.arange(1, r + 1, dtype=np.float64)[:, None]
    # largest prefix where the sorted value stays strictly above the threshold
    above = u > (css - 1.0) / j
    rho = r - 1 - np.argmax(above[::-1, :], axis=0)
    cols = np.arange(v.shape[1])
    theta = (css[rho, cols] - 1.0) / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def project_simplex_column(v: np.ndarray) -> np.ndarray:
    """Project a single length-R vector onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a vector, got ndim={v.ndim}")
    return project_simplex_columns(v[:, None])[:, 0]


def project_nonneg(m: np.ndarray) -> np.ndarray:
    """Elementwise max(., 0)."""
    return np.maximum(np.asarray(m, dtype=np.float64), 0.0)
