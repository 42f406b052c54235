"""Estimation quality metrics: spectral angles, abundance MSE, reconstruction error.

Factorizations are identifiable only up to a permutation of the endmember
index, so estimated factors are matched to the truth by minimum mean spectral
angle before angle/MSE comparisons.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DimensionError, NumericError

_EXHAUSTIVE_LIMIT = 8


@dataclass(frozen=True)
class Alignment:
    """Bijection from estimated endmember index to true index, with per-pair angles."""

    permutation: tuple[int, ...]   # permutation[j] = true index matched to estimate j
    angles_deg: tuple[float, ...]

    @property
    def mean_angle_deg(self) -> float:
        return float(np.mean(self.angles_deg))


def _column_angles_deg(m_true: np.ndarray, m_est: np.ndarray) -> np.ndarray:
    """Pairwise angle matrix, cost[i, j] = angle(true column i, estimated column j)."""
    tn = np.linalg.norm(m_true, axis=0)
    en = np.linalg.norm(m_est, axis=0)
    if np.any(tn == 0.0) or np.any(en == 0.0):
        raise NumericError("zero-norm column has no defined angle")
    cosine = (m_true.T @ m_est) / np.outer(tn, en)
    return np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0)))


def align(m_true: np.ndarray, m_est: np.ndarray) -> Alignment:
    """Match estimated endmembers to true ones, minimizing the mean angle.

    Exhaustive search up to 8 columns, Hungarian assignment above.
    """
    if m_true.shape != m_est.shape:
        raise DimensionError(f"shape mismatch: {m_true.shape} vs {m_est.shape}")
    cost = _column_angles_deg(m_true, m_est)
    r = cost.shape[0]
    if r <= _EXHAUSTIVE_LIMIT:
        best, best_perm = math.inf, None
        for perm in itertools.permutations(range(r)):
            total = sum(cost[perm[j], j] for j in range(r))
            if total < best:
                best, best_perm = total, perm
        perm = best_perm
    else:
        rows, cols = linear_sum_assignment(cost)
        mapping = dict(zip(cols, rows))
        perm = tuple(int(mapping[j]) for j in range(r))
    angles = tuple(float(cost[perm[j], j]) for j in range(r))
    return Alignment(tuple(int(p) for p in perm), angles)


def apply_alignment_rows(a_est: np.ndarray, alignment: Alignment) -> np.ndarray:
    """Reorder abundance rows so row i corresponds to true endmember i."""
    out = np.empty_like(a_est)
    for j, i in enumerate(alignment.permutation):
        out[i, :] = a_est[j, :]
    return out


def asam_endmembers(m_true: np.ndarray, m_est: np.ndarray, alignment: Alignment) -> float:
    """Mean spectral angle between matched endmember pairs, in degrees."""
    cost = _column_angles_deg(m_true, m_est)
    r = m_true.shape[1]
    return float(np.mean([cost[alignment.permutation[j], j] for j in range(r)]))


def asam_reconstruction(y_blocks, m_est: np.ndarray, a_blocks) -> float:
    """Mean per-pixel angle between observations and their reconstructions, degrees."""
    total, count = 0.0, 0
    for y, a in zip(y_blocks, a_blocks):
        recon = m_est @ a
        yn = np.linalg.norm(y, axis=0)
        rn = np.linalg.norm(recon, axis=0)
        if np.any(yn == 0.0) or np.any(rn == 0.0):
            raise NumericError("zero-norm pixel has no defined angle")
        cosine = np.clip(np.sum(y * recon, axis=0) / (yn * rn), -1.0, 1.0)
        total += float(np.sum(np.degrees(np.arccos(cosine))))
        count += y.shape[1]
    return total / count


def abundance_gmse(a_true_blocks, a_est_blocks, alignment: Alignment) -> float:
    """Mean squared abundance error over all blocks, rows aligned to the truth."""
    num, count = 0.0, 0
    for a_true, a_est in zip(a_true_blocks, a_est_blocks):
        diff = a_true - apply_alignment_rows(a_est, alignment)
        num += float(np.vdot(diff, diff))
        count += a_true.size
    return num / count


def reconstruction_error(y_blocks, m_est: np.ndarray, a_blocks) -> float:
    """Mean squared reconstruction residual per observation entry."""
    num, count = 0.0, 0
    for y, a in zip(y_blocks, a_blocks):
        diff = y - m_est @ a
        num += float(np.vdot(diff, diff))
        count += y.size
    return num / count
