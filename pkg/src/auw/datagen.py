"""Synthetic dataset generation for the linear mixing model.

Produces ground-truth endmember spectra (smooth positive bump mixtures),
per-block simplex abundance fields with a smooth block-to-block modulation,
and white Gaussian noise calibrated to a target SNR. Everything is
deterministic under the seed, down to the output bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import matcore
from .errors import DataError
from .manifest import read_kv, write_kv

MIN_PAIRWISE_ANGLE_DEG = 5.0
_MAX_DRAWS = 1000


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape and noise parameters of one generated dataset."""

    bands: int = 50
    endmembers: int = 3
    pixels_per_block: int = 400
    blocks: int = 3
    snr_db: float = 30.0
    smoothness: float = 0.2   # block-to-block abundance modulation amplitude
    seed: int = 0

    def __post_init__(self):
        if self.endmembers < 2:
            raise DataError("need at least 2 endmembers")
        if self.bands < self.endmembers:
            raise DataError("need at least as many bands as endmembers")
        if self.pixels_per_block < 1 or self.blocks < 1:
            raise DataError("need at least one pixel and one block")
        if not (0.0 <= self.smoothness < 1.0):
            raise DataError("smoothness must lie in [0, 1)")
        if math.isnan(self.snr_db):
            raise DataError("snr_db must be finite or inf")


@dataclass
class Dataset:
    spec: SyntheticSpec
    endmembers: np.ndarray          # bands x R ground truth
    abundances: list[np.ndarray]    # R x N per block, ground truth
    noise: list[np.ndarray]         # bands x N per block
    observations: list[np.ndarray]  # bands x N per block
    sigma2: float
    realized_snr_db: float


def _angle_deg(u, v):
    c = float(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def _bump_spectrum(bands, rng):
    grid = np.arange(bands, dtype=np.float64)
    s = np.full(bands, 0.05)
    for _ in range(int(rng.integers(2, 5))):
        center = rng.uniform(0, bands)
        width = rng.uniform(bands / 20.0, bands / 5.0)
        amp = rng.uniform(0.3, 1.0)
        s += amp * np.exp(-0.5 * ((grid - center) / width) ** 2)
    return s / s.max()  # peak 1, strictly positive everywhere


def gen_endmembers(bands: int, count: int, seed) -> np.ndarray:
    """Smooth positive spectra in (0, 1], pairwise separated by >= 5 degrees.

    Separation is enforced by redrawing columns; a dataset asking for more
    spectra than the angle floor permits fails after 1000 draws.
    """
    rng = np.random.default_rng(seed)
    cols: list[np.ndarray] = []
    draws = 0
    while len(cols) < count:
        if draws >= _MAX_DRAWS:
            raise DataError(
                f"could not place {count} spectra with a "
                f"{MIN_PAIRWISE_ANGLE_DEG} degree floor after {_MAX_DRAWS} draws")
        draws += 1
        candidate = _bump_spectrum(bands, rng)
        if all(_angle_deg(candidate, c) >= MIN_PAIRWISE_ANGLE_DEG for c in cols):
            cols.append(candidate)
    return np.column_stack(cols)


def gen_abundances(spec: SyntheticSpec) -> list[np.ndarray]:
    """Per-block simplex abundance fields varying smoothly across blocks.

    A reference field is drawn once (flat Dirichlet per pixel); block w gets
    the reference scaled by ``1 + smoothness * sin(2*pi*w/blocks + phase)``
    with per-entry phases, then renormalized column-wise. With smoothness 0
    every block equals the reference.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    r, n = spec.endmembers, spec.pixels_per_block
    reference = rng.dirichlet(np.ones(r), size=n).T  # R x N
    phases = rng.uniform(0.0, 2.0 * math.pi, size=(r, n))
    blocks = []
    for w in range(1, spec.blocks + 1):
        factor = 1.0 + spec.smoothness * np.sin(2.0 * math.pi * w / spec.blocks + phases)
        a = reference * factor
        blocks.append(a / a.sum(axis=0, keepdims=True))
    return blocks


def noise_variance(clean_blocks, snr_db: float) -> float:
    """Per-entry noise variance giving the requested dataset-wide SNR."""
    if math.isinf(snr_db):
        return 0.0
    signal = sum(float(np.vdot(y, y)) for y in clean_blocks)
    count = sum(y.size for y in clean_blocks)
    return signal / (count * 10.0 ** (snr_db / 10.0))


def add_noise(clean_blocks, snr_db: float, seed) -> tuple[list[np.ndarray], list[np.ndarray], float]:
    """Add white Gaussian noise at the target SNR.

    Returns ``(noisy_blocks, noise_blocks, sigma2)``. An infinite SNR is a
    no-op (zero noise, outputs bitwise equal to inputs).
    """
    sigma2 = noise_variance(clean_blocks, snr_db)
    if sigma2 == 0.0:
        return [y.copy() for y in clean_blocks], [np.zeros_like(y) for y in clean_blocks], 0.0
    rng = np.random.default_rng(seed)
    noise = [rng.normal(0.0, math.sqrt(sigma2), size=y.shape) for y in clean_blocks]
    return [y + b for y, b in zip(clean_blocks, noise)], noise, sigma2


def generate(spec: SyntheticSpec) -> Dataset:
    """Build a full dataset: truth factors, noise, observations, bookkeeping."""
    seeds = np.random.SeedSequence(spec.seed).spawn(2)
    m = gen_endmembers(spec.bands, spec.endmembers, seeds[0])
    a_blocks = gen_abundances(spec)
    clean = [m @ a for a in a_blocks]
    y_blocks, b_blocks, sigma2 = add_noise(clean, spec.snr_db, seeds[1])
    noise_power = sum(float(np.vdot(b, b)) for b in b_blocks)
    if noise_power > 0.0:
        signal_power = sum(float(np.vdot(y, y)) for y in clean)
        realized = 10.0 * math.log10(signal_power / noise_power)
    else:
        realized = float("inf")
    return Dataset(spec, m, a_blocks, b_blocks, y_blocks, sigma2, realized)


def save_dataset(ds: Dataset, out_dir) -> None:
    """Write observation, truth and noise matrices plus the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    matcore.write_fmat(out / "M_true.fmat", ds.endmembers)
    for i, (y, a, b) in enumerate(zip(ds.observations, ds.abundances, ds.noise), start=1):
        matcore.write_fmat(out / f"Y_{i}.fmat", y)
        matcore.write_fmat(out / f"A_{i}.fmat", a)
        matcore.write_fmat(out / f"B_{i}.fmat", b)
    write_kv(out / "manifest.txt", {
        "bands": ds.spec.bands,
        "endmembers": ds.spec.endmembers,
        "pixels_per_block": ds.spec.pixels_per_block,
        "blocks": ds.spec.blocks,
        "snr_db": ds.spec.snr_db,
        "smoothness": ds.spec.smoothness,
        "seed": ds.spec.seed,
        "sigma2": format(ds.sigma2, ".17g"),
        "realized_snr_db": format(ds.realized_snr_db, ".17g"),
    })


def load_observations(dataset_dir) -> list[np.ndarray]:
    """Load the observation blocks Y_1..Y_n in index order."""
    root = Path(dataset_dir)
    blocks = []
    i = 1
    while (root / f"Y_{i}.fmat").exists():
        blocks.append(matcore.read_fmat(root / f"Y_{i}.fmat"))
        i += 1
    if not blocks:
        raise DataError(f"no Y_*.fmat blocks found in {root}")
    return blocks


def load_truth(dataset_dir) -> tuple[np.ndarray, list[np.ndarray]]:
    """Load ground-truth endmembers and abundance blocks if present."""
    root = Path(dataset_dir)
    m_path = root / "M_true.fmat"
    if not m_path.exists():
        raise DataError(f"no ground truth (M_true.fmat) in {root}")
    m = matcore.read_fmat(m_path)
    blocks = []
    i = 1
    while (root / f"A_{i}.fmat").exists():
        blocks.append(matcore.read_fmat(root / f"A_{i}.fmat"))
        i += 1
    if not blocks:
        raise DataError(f"no A_*.fmat blocks in {root}")
    return m, blocks


def load_manifest(dataset_dir) -> dict[str, str]:
    path = Path(dataset_dir) / "manifest.txt"
    if not path.exists():
        raise DataError(f"missing manifest: {path}")
    return read_kv(path)
