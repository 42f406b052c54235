"""The unmixing objective: block data-fit terms, gradients, step constants.

Data blocks Y (bands x pixels) are approximated by E @ A where E holds one
spectral signature per column (bands x signatures) and each column of A is a
mixing-fraction vector on the probability simplex. The overall objective is
the sum of the per-block quadratic fits plus indicator terms for the
constraint sets, so it is finite exactly on feasible iterates.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError
from .matcore import top_eigenvalue_psd
from .prox import project_simplex_columns

FEAS_TOL = 1e-9             # simplex column-sum tolerance for indicator terms
LIPSCHITZ_FLOOR = 1e-12     # keeps step sizes finite at degenerate iterates


def _check_shapes(y, a, m):
    if m.shape[0] != y.shape[0]:
        raise DimensionError(f"band mismatch: data {y.shape} vs endmembers {m.shape}")
    if m.shape[1] != a.shape[0]:
        raise DimensionError(f"endmember count mismatch: {m.shape} vs abundances {a.shape}")
    if a.shape[1] != y.shape[1]:
        raise DimensionError(f"pixel mismatch: abundances {a.shape} vs data {y.shape}")


def simplex_feasible(a: np.ndarray, tol: float = FEAS_TOL) -> bool:
    """True when every column is nonnegative and sums to one within `tol`."""
    if a.size == 0:
        return False
    if np.min(a) < -tol:
        return False
    return bool(np.max(np.abs(a.sum(axis=0) - 1.0)) <= tol)


def nonneg_feasible(m: np.ndarray) -> bool:
    return bool(np.min(m) >= 0.0) if m.size else False


def fit_block(y: np.ndarray, a: np.ndarray, m: np.ndarray) -> float:
    """Half the squared Frobenius norm of the block residual Y - E A."""
    _check_shapes(y, a, m)
    residual = y - m @ a
    return 0.5 * float(np.vdot(residual, residual))


def objective(y_blocks, a_blocks, m, tol: float = FEAS_TOL) -> tuple[float, bool]:
    """Total objective over all blocks.

    Returns ``(value, feasible)``. Infeasible iterates (a simplex violation
    beyond `tol`, or a negative endmember entry) report ``(inf, False)``,
    mirroring the indicator terms of the constrained problem.
    """
    if len(y_blocks) != len(a_blocks):
        raise DimensionError("block count mismatch between data and abundances")
    if not nonneg_feasible(m):
        return float("inf"), False
    for a in a_blocks:
        if not simplex_feasible(a, tol):
            return float("inf"), False
    return sum(fit_block(y, a, m) for y, a in zip(y_blocks, a_blocks)), True


def grad_abundance(y: np.ndarray, a: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Gradient of the block fit with respect to the abundance block."""
    _check_shapes(y, a, m)
    g = m.T @ (m @ a - y)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite abundance gradient")
    return g


def grad_endmember(y_blocks, a_blocks, m) -> np.ndarray:
    """Gradient of the summed fit with respect to the endmember matrix."""
    if len(y_blocks) != len(a_blocks):
        raise DimensionError("block count mismatch between data and abundances")
    g = np.zeros_like(m)
    for y, a in zip(y_blocks, a_blocks):
        _check_shapes(y, a, m)
        g += (m @ a - y) @ a.T
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite endmember gradient")
    return g


def lipschitz_abundance(m: np.ndarray) -> float:
    """Gradient Lipschitz constant of the abundance step: top eigenvalue of EᵀE."""
    return max(top_eigenvalue_psd(m.T @ m), LIPSCHITZ_FLOOR)


def lipschitz_endmember(a_blocks) -> float:
    """Gradient Lipschitz constant of the endmember step: top eigenvalue of sum A Aᵀ."""
    r = a_blocks[0].shape[0]
    s = np.zeros((r, r))
    for a in a_blocks:
        s += a @ a.T
    return max(top_eigenvalue_psd(s), LIPSCHITZ_FLOOR)


def prox_gradient_abundance(y, a, m) -> tuple[np.ndarray, float]:
    """One projected gradient step on an abundance block.

    Returns the updated block together with the step constant used, so callers
    can trace the constant without recomputing it.
    """
    c = lipschitz_abundance(m)
    a_hat = project_simplex_columns(a - grad_abundance(y, a, m) / c)
    return a_hat, c
