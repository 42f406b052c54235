"""Convergence instrumentation: tracked step constants, the delay-adjusted
objective, per-iteration decrease checks, and trace export.

Asynchrony lets the plain objective rise a little between iterations; adding a
weighted window of recent endmember moves gives a surrogate that should be
monotone once the relaxation has decayed enough. The constants entering the
check are empirical running bounds, so the check is a monitor, not a
certificate: violations are reported, not fatal.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import AuwError
from .model import grad_abundance

TRACE_HEADER = ["k", "wall_clock_ms", "objective", "gamma", "worker", "delay", "phi"]


@dataclass
class LipschitzTracker:
    """Running min/max of the step constants seen during a run."""

    omega: int
    abundance_min: dict = field(default_factory=dict)   # per worker
    abundance_max: dict = field(default_factory=dict)
    endmember_min: float = math.inf
    endmember_max: float = 0.0
    cross_min: float = math.inf
    cross_max: float = 0.0
    cross_samples: int = 0

    def observe_abundance_constant(self, worker_id: int, value: float) -> None:
        self.abundance_min[worker_id] = min(self.abundance_min.get(worker_id, math.inf), value)
        self.abundance_max[worker_id] = max(self.abundance_max.get(worker_id, 0.0), value)

    def observe_endmember_constant(self, value: float) -> None:
        self.endmember_min = min(self.endmember_min, value)
        self.endmember_max = max(self.endmember_max, value)

    def observe_cross_constant(self, value: float) -> None:
        self.cross_min = min(self.cross_min, value)
        self.cross_max = max(self.cross_max, value)
        self.cross_samples += 1

    @property
    def abundance_plus(self) -> float:
        """Largest abundance-step constant seen across all workers."""
        return max(self.abundance_max.values(), default=0.0)

    @property
    def abundance_minus(self) -> float:
        return min(self.abundance_min.values(), default=math.inf)

    def summary(self) -> dict:
        return {
            "lipschitz_a_min": self.abundance_minus,
            "lipschitz_a_max": self.abundance_plus,
            "lipschitz_m_min": self.endmember_min,
            "lipschitz_m_max": self.endmember_max,
            "lipschitz_am_max": self.cross_max if self.cross_samples else 0.0,
            "lipschitz_am_samples": self.cross_samples,
        }


def cross_lipschitz_sample(m1: np.ndarray, m2: np.ndarray, a: np.ndarray,
                           y: np.ndarray) -> float | None:
    """Empirical sensitivity of the abundance gradient to the shared factor.

    Ratio of gradient change to factor change for one sampled pair; ``None``
    when the pair coincides (zero denominator).
    """
    dm = float(np.linalg.norm(m1 - m2))
    if dm == 0.0:
        return None
    dg = grad_abundance(y, a, m1) - grad_abundance(y, a, m2)
    return float(np.linalg.norm(dg)) / dm


@dataclass
class DelayPenaltyWindow:
    """Streaming evaluator of the delay-adjusted objective.

    Keeps the last ``tau + 1`` endmember iterates; the adjusted value is the
    plain objective plus ``beta/2`` times a triangular-weighted sum of squared
    consecutive differences over that window (newest difference weighted
    ``tau``). The buffer is primed with the initial iterate, matching the
    convention that pre-history iterates equal the start point.
    """

    tau: int
    beta: float
    window: deque = None

    def __post_init__(self):
        if self.tau < 0:
            raise AuwError("tau must be nonnegative")
        if self.beta < 0:
            raise AuwError("beta must be nonnegative")
        if self.window is None:
            self.window = deque(maxlen=self.tau + 1)

    def prime(self, m0: np.ndarray) -> None:
        self.window.clear()
        for _ in range(self.tau + 1):
            self.window.append(np.array(m0, dtype=np.float64))

    def push(self, m_new: np.ndarray) -> None:
        if not self.window:
            raise AuwError("window not primed")
        self.window.append(np.array(m_new, dtype=np.float64))


def delay_adjusted_objective(state: DelayPenaltyWindow, objective_value: float) -> float:
    """Objective plus the weighted staleness penalty over the iterate window."""
    if not state.window:
        raise AuwError("window not primed")
    iterates = list(state.window)
    penalty = 0.0
    # weight tau on the newest difference, decaying to 1 on the oldest
    for j in range(1, len(iterates)):
        diff = iterates[j] - iterates[j - 1]
        weight = state.tau - (len(iterates) - 1 - j)
        penalty += weight * float(np.vdot(diff, diff))
    return objective_value + 0.5 * state.beta * penalty


def attach_delay_objective(trace, initial_objective: float,
                           tau: int | None = None, beta: float | None = None,
                           tracker: LipschitzTracker | None = None) -> list[float]:
    """Fill the `phi` field of every trace record; returns the full sequence
    including the pre-run value.

    `tau` defaults to the largest observed delay in the trace; `beta` defaults
    to ``tau`` times the tracked cross constant.
    """
    if tau is None:
        tau = max((r.observed_delay for r in trace), default=0)
    if beta is None:
        cross = tracker.cross_max if tracker and tracker.cross_samples else 0.0
        beta = tau * cross
    moves = [r.move_norm_m for r in trace]
    values = [initial_objective]
    for i, rec in enumerate(trace):
        k = i + 1
        penalty = 0.0
        for q in range(max(1, k - tau + 1), k + 1):
            penalty += (q - k + tau) * moves[q - 1] ** 2
        rec.phi = rec.objective + 0.5 * beta * penalty
        values.append(rec.phi)
    return values


@dataclass(frozen=True)
class DecreaseConstants:
    """Empirical bounds entering the per-iteration decrease inequality."""

    abundance_plus: float
    endmember_plus: float
    cross_plus: float
    tau: int

    @classmethod
    def from_tracker(cls, tracker: LipschitzTracker, tau: int) -> "DecreaseConstants":
        cross = tracker.cross_max if tracker.cross_samples else 0.0
        return cls(tracker.abundance_plus, tracker.endmember_max, cross, tau)


def decrease_coefficients(rec, constants: DecreaseConstants) -> tuple[float, float]:
    """Step-size coefficients of the decrease inequality at one iteration."""
    coeff_a = rec.lipschitz_a - rec.gamma * (constants.abundance_plus + constants.cross_plus)
    coeff_m = rec.lipschitz_m - rec.gamma * (
        constants.endmember_plus + constants.tau ** 2 * constants.cross_plus)
    return coeff_a, coeff_m


def check_sufficient_decrease(phi_prev: float, rec, constants: DecreaseConstants,
                              slack: float = 1e-9) -> tuple[bool, float]:
    """Check one iteration of the surrogate decrease inequality.

    Compares the delay-adjusted objective after the iteration against the
    previous value minus the two step-norm penalty terms. Returns
    ``(holds, margin)`` with a nonnegative margin meaning the inequality holds
    (up to a relative floating-point slack).
    """
    if math.isnan(rec.phi):
        raise AuwError("trace has no delay-adjusted objective attached")
    coeff_a, coeff_m = decrease_coefficients(rec, constants)
    bound = (phi_prev
             - 0.5 * rec.gamma * coeff_a * rec.step_norm_a ** 2
             - 0.5 * rec.gamma * coeff_m * rec.step_norm_m ** 2)
    margin = bound - rec.phi
    scale = max(abs(phi_prev), abs(rec.phi), 1.0)
    return margin >= -slack * scale, margin


def analyze_decrease(trace, initial_objective: float, constants: DecreaseConstants,
                     slack: float = 1e-9) -> dict:
    """Run the decrease check over a whole trace.

    Reports how often the inequality holds, plus the first iteration index at
    which both step-size coefficients are nonnegative (None if never) and
    whether the adjusted objective is monotone from that point on.
    """
    phis = [initial_objective] + [r.phi for r in trace]
    holds = 0
    first_nonneg = None
    for i, rec in enumerate(trace):
        ok, _ = check_sufficient_decrease(phis[i], rec, constants, slack)
        holds += ok
        ca, cm = decrease_coefficients(rec, constants)
        if first_nonneg is None and ca >= 0.0 and cm >= 0.0:
            first_nonneg = i
    monotone_after = None
    if first_nonneg is not None:
        monotone_after = True
        for i in range(first_nonneg, len(trace)):
            scale = max(abs(phis[i]), abs(phis[i + 1]), 1.0)
            if phis[i + 1] > phis[i] + slack * scale:
                monotone_after = False
                break
    return {
        "iterations": len(trace),
        "holds": holds,
        "first_nonneg_coeff_iter": first_nonneg,
        "monotone_after_crossing": monotone_after,
    }


def export_trace(trace, path) -> None:
    """Write the trace as CSV: k,wall_clock_ms,objective,gamma,worker,delay,phi."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for r in trace:
            writer.writerow([
                r.k,
                format(r.wall_clock_ms, ".17g"),
                format(r.objective, ".17g"),
                format(r.gamma, ".17g"),
                r.reporting_worker,
                r.observed_delay,
                format(r.phi, ".17g"),
            ])


def load_trace(path) -> list[dict]:
    """Read a trace CSV back into a list of per-iteration dicts."""
    rows = []
    with open(path, "r", newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_HEADER:
            raise AuwError(f"unexpected trace header {header!r}")
        for row in reader:
            rows.append({
                "k": int(row[0]),
                "wall_clock_ms": float(row[1]),
                "objective": float(row[2]),
                "gamma": float(row[3]),
                "worker": int(row[4]),
                "delay": int(row[5]),
                "phi": float(row[6]),
            })
    return rows
