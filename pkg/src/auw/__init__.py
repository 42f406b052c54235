"""Distributed constrained matrix factorization for spectral unmixing.

A master/worker solver for the simplex-constrained linear mixing model,
runnable synchronously or with bounded-staleness asynchronous updates,
plus data generation, evaluation metrics and convergence diagnostics.
"""

from .runtime import SolverConfig, RunResult, run
from .datagen import SyntheticSpec, generate

__version__ = "0.1.0"

__all__ = ["SolverConfig", "RunResult", "run", "SyntheticSpec", "generate", "__version__"]
