"""Dense matrix foundation: column partitioning, spectral norms, matrix files.

All matrices are 2-D float64 numpy arrays in row-major (C) order. Values read
from files are validated to be finite. The FMAT container is bit-exact:

    bytes 0-3   ASCII "FMAT"
    bytes 4-7   little-endian u32 version (= 1)
    bytes 8-15  little-endian u64 rows
    bytes 16-23 little-endian u64 cols
    then rows*cols little-endian IEEE-754 f64, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError, PartitionError

FMAT_MAGIC = b"FMAT"
FMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")

SPECTRAL_TOL = 1e-10
SPECTRAL_MAX_ITER = 1000


class FmatError(Exception):
    """Base class for matrix-file format errors."""


class FmatBadMagic(FmatError):
    pass


class FmatBadVersion(FmatError):
    pass


class FmatTruncated(FmatError):
    """Payload shorter or longer than the header promises."""


class FmatNonFinite(FmatError):
    pass


def ensure_matrix(values, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 C-contiguous array, rejecting non-finite entries."""
    m = np.ascontiguousarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got ndim={m.ndim}")
    if m.size and not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous, disjoint column ranges covering [0, total)."""

    omega_count: int
    column_ranges: tuple[tuple[int, int], ...]  # (start, length) per worker

    @property
    def total(self) -> int:
        return sum(length for _, length in self.column_ranges)


def partition_columns(total: int, omega: int, lengths=None) -> BlockPartition:
    """Split `total` columns into `omega` contiguous groups.

    With `lengths=None` the split is even (sizes differ by at most one, larger
    groups first, lexicographic column order). An explicit `lengths` sequence
    is echoed back after validation.
    """
    if omega < 1:
        raise PartitionError(f"need at least one group, got omega={omega}")
    if omega > total:
        raise PartitionError(f"cannot split {total} columns into {omega} nonempty groups")
    if lengths is None:
        base, extra = divmod(total, omega)
        sizes = [base + 1] * extra + [base] * (omega - extra)
    else:
        sizes = [int(n) for n in lengths]
        if len(sizes) != omega:
            raise PartitionError(f"expected {omega} lengths, got {len(sizes)}")
        if any(n < 1 for n in sizes):
            raise PartitionError("explicit group lengths must be positive")
        if sum(sizes) != total:
            raise PartitionError(f"lengths sum to {sum(sizes)}, expected {total}")
    ranges = []
    start = 0
    for n in sizes:
        ranges.append((start, n))
        start += n
    return BlockPartition(omega, tuple(ranges))


def top_eigenvalue_psd(g: np.ndarray, tol: float = SPECTRAL_TOL,
                       max_iter: int = SPECTRAL_MAX_ITER) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Deterministic all-ones start vector so repeated runs are reproducible.
    """
    n = g.shape[0]
    if n == 0:
        raise DimensionError("empty matrix has no spectrum")
    v = np.full(n, 1.0 / np.sqrt(n))
    lam = 0.0
    for _ in range(max_iter):
        w = g @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        lam_new = float(v @ (g @ v))
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300):
            return lam_new
        lam = lam_new
    return lam


def spectral_norm(m: np.ndarray, tol: float = SPECTRAL_TOL,
                  max_iter: int = SPECTRAL_MAX_ITER) -> float:
    """Largest singular value of `m`, via power iteration on the Gram matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DimensionError(f"need a nonempty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix contains non-finite entries")
    return float(np.sqrt(top_eigenvalue_psd(m.T @ m, tol, max_iter)))


def write_fmat(path, m: np.ndarray) -> None:
    """Write a matrix in the FMAT container (bit-exact round trip)."""
    m = np.ascontiguousarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"FMAT stores 2-D matrices, got ndim={m.ndim}")
    if m.size and not np.all(np.isfinite(m)):
        raise FmatNonFinite("refusing to write non-finite entries")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FMAT_MAGIC, FMAT_VERSION, m.shape[0], m.shape[1]))
        fh.write(m.tobytes(order="C"))


def read_fmat(path) -> np.ndarray:
    """Read a matrix written by :func:`write_fmat`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FmatTruncated(f"file shorter than the {_HEADER.size}-byte header")
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != FMAT_MAGIC:
        raise FmatBadMagic(f"bad magic {magic!r}")
    if version != FMAT_VERSION:
        raise FmatBadVersion(f"unsupported version {version}")
    expected = rows * cols * 8
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise FmatTruncated(f"payload is {len(payload)} bytes, header promises {expected}")
    m = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()
    if m.size and not np.all(np.isfinite(m)):
        raise FmatNonFinite("file contains non-finite entries")
    return m


def write_csv_matrix(path, m: np.ndarray) -> None:
    """Comma-separated export with '.' decimals, one row per line."""
    m = ensure_matrix(m)
    with open(path, "w", encoding="ascii") as fh:
        for row in m:
            fh.write(",".join(format(x, ".17g") for x in row))
            fh.write("\n")


def read_csv_matrix(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(tok) for tok in line.split(",")])
    if not rows:
        return np.zeros((0, 0))
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise DimensionError("ragged CSV rows")
    return ensure_matrix(np.array(rows), "CSV matrix")
