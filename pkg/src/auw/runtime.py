"""Master and worker state machines for the distributed factorization solver.

The master owns the shared endmember matrix, all abundance blocks, the
relaxation schedule and the iteration trace. Workers each own one data block
and a possibly delayed snapshot of the endmembers. One master iteration:
collect at least `k_threshold` worker results (applying the relaxed abundance
update per result), then take one projected gradient step on the endmembers,
relax, decay the step, and hand fresh snapshots back to the workers that
reported.

Synchronous mode is the same loop with `k_threshold` pinned to the worker
count and a constant unit relaxation; it enjoys per-iteration descent.
Asynchronous mode tolerates bounded snapshot staleness, optionally enforced
by discarding over-stale results.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import model
from .diagnostics import LipschitzTracker, cross_lipschitz_sample
from .errors import AuwError, DataError
from .prox import project_nonneg, project_simplex_columns
from .transport import TaskMsg, ThreadTransport, VirtualTransport, WorkerCrashError

log = logging.getLogger(__name__)

DEFAULT_MAX_ITER_SYNC = 100
DEFAULT_MAX_ITER_ASYNC = 500

EXIT_TOLERANCE = "tolerance"
EXIT_MAX_ITER = "max_iter"
EXIT_ABORTED = "aborted"


class ProtocolError(AuwError):
    """A state-machine contract was violated (bad worker id, infeasible result, ...)."""


class InfeasibleInitError(DataError):
    """Initial iterates violate the constraint sets."""


@dataclass(frozen=True)
class SolverConfig:
    """Solver tunables.

    `mode="sync"` overrides `k_threshold` to the worker count and pins the
    relaxation to 1 (equivalently `mu=0`); the remaining fields are used as
    given. `max_iter=None` resolves to 100 (sync) or 500 (async).
    `worker_delays_ms` entries are either fixed milliseconds or `(lo, hi)`
    ranges sampled per task from a seeded stream.
    """

    mode: str = "sync"
    k_threshold: int = 1
    gamma0: float = 1.0
    mu: float = 1e-6
    max_iter: int | None = None
    rel_tol: float = 1e-5
    tau_limit: int | None = None
    seed: int = 0
    worker_delays_ms: tuple | None = None
    extrapolate_m: bool = False
    feas_tol: float = model.FEAS_TOL
    scheduler: str = "threads"   # used only when run() builds its own transport
    virtual_base_ms: float = 1.0

    def __post_init__(self):
        if self.mode not in ("sync", "async"):
            raise AuwError(f"mode must be 'sync' or 'async', got {self.mode!r}")
        if not (0.0 < self.gamma0 <= 1.0):
            raise AuwError(f"gamma0 must lie in (0, 1], got {self.gamma0}")
        if not (0.0 <= self.mu < 1.0):
            raise AuwError(f"mu must lie in [0, 1), got {self.mu}")
        if self.k_threshold < 1:
            raise AuwError("k_threshold must be at least 1")
        if self.max_iter is not None and self.max_iter < 1:
            raise AuwError("max_iter must be at least 1")
        if self.rel_tol < 0.0:
            raise AuwError("rel_tol must be nonnegative")
        if self.tau_limit is not None and self.tau_limit < 0:
            raise AuwError("tau_limit must be nonnegative")
        if self.scheduler not in ("threads", "virtual"):
            raise AuwError(f"scheduler must be 'threads' or 'virtual', got {self.scheduler!r}")

    def resolve(self, omega: int) -> "SolverConfig":
        """Apply mode forcing and defaults for a concrete worker count."""
        if omega < 1:
            raise AuwError("need at least one worker")
        if self.mode == "sync":
            forced = replace(
                self, k_threshold=omega, gamma0=1.0, mu=0.0,
                max_iter=self.max_iter or DEFAULT_MAX_ITER_SYNC)
        else:
            if self.k_threshold > omega:
                raise AuwError(f"k_threshold {self.k_threshold} exceeds worker count {omega}")
            forced = replace(self, max_iter=self.max_iter or DEFAULT_MAX_ITER_ASYNC)
        return forced


@dataclass
class WorkerState:
    """A worker's view: its data block, its abundance block, a stamped snapshot."""

    worker_id: int
    y: np.ndarray
    a_local: np.ndarray
    m_values: np.ndarray
    m_version: int


def worker_step(w: WorkerState) -> np.ndarray:
    """One projected gradient step against the worker's current snapshot."""
    a_hat, _ = model.prox_gradient_abundance(w.y, w.a_local, w.m_values)
    return a_hat


@dataclass
class IterationRecord:
    """One master iteration of the trace."""

    k: int
    objective: float
    gamma: float
    reporting_worker: int
    observed_delay: int
    wall_clock_ms: float
    lipschitz_a: float
    lipschitz_m: float
    step_norm_a: float = 0.0     # aggregated pre-relaxation abundance step norm
    step_norm_m: float = 0.0     # pre-relaxation endmember step norm
    move_norm_m: float = 0.0     # applied endmember move norm
    phi: float = float("nan")    # delay-adjusted objective, attached post-run


@dataclass
class MasterState:
    """Everything the master owns; mutated in place by the update operations."""

    y_blocks: list
    a_blocks: list
    endmembers: np.ndarray
    version: int
    gamma: float
    mu: float
    k_threshold: int
    feas_tol: float
    extrapolate_m: bool = False
    delays: np.ndarray = None
    received: set = field(default_factory=set)
    trace: list = field(default_factory=list)
    lipschitz_by_version: dict = field(default_factory=dict)
    tracker: LipschitzTracker | None = None
    # scratch for the open aggregation window
    pending_delays: dict = field(default_factory=dict)
    pending_step_sq: float = 0.0
    last_worker: int = -1
    last_a_hat: np.ndarray | None = None
    last_lipschitz_a: float = 0.0

    def __post_init__(self):
        if self.delays is None:
            self.delays = np.zeros(len(self.y_blocks), dtype=np.int64)
        self.lipschitz_by_version.setdefault(
            self.version, model.lipschitz_abundance(self.endmembers))

    @property
    def omega(self) -> int:
        return len(self.y_blocks)


def master_receive(state: MasterState, worker_id: int, a_hat: np.ndarray,
                   stamp: int | None = None) -> MasterState:
    """Fold one worker result into the master state (relaxed abundance update)."""
    if not (0 <= worker_id < state.omega):
        raise ProtocolError(f"unknown worker id {worker_id}")
    if worker_id in state.received:
        raise ProtocolError(f"worker {worker_id} reported twice in one aggregation window")
    if a_hat.shape != state.a_blocks[worker_id].shape:
        raise ProtocolError(
            f"result shape {a_hat.shape} does not match block "
            f"{state.a_blocks[worker_id].shape}")
    if not model.simplex_feasible(a_hat, state.feas_tol):
        raise ProtocolError(f"worker {worker_id} sent an infeasible abundance block")
    stamp = state.version if stamp is None else stamp
    gamma = state.gamma
    current = state.a_blocks[worker_id]
    state.pending_step_sq += float(np.vdot(a_hat - current, a_hat - current))
    # convex combination keeps columns on the simplex for any gamma in (0, 1]
    state.a_blocks[worker_id] = (1.0 - gamma) * current + gamma * a_hat
    state.received.add(worker_id)
    state.pending_delays[worker_id] = state.version - stamp
    state.last_worker = worker_id
    state.last_a_hat = a_hat
    state.last_lipschitz_a = state.lipschitz_by_version.get(stamp, float("nan"))
    if state.tracker is not None and not np.isnan(state.last_lipschitz_a):
        state.tracker.observe_abundance_constant(worker_id, state.last_lipschitz_a)
    return state


def master_update_m(state: MasterState, now_ms: float = 0.0) -> MasterState:
    """Close the aggregation window: endmember prox step, relaxation, decay."""
    if len(state.received) < state.k_threshold:
        raise ProtocolError(
            f"endmember update with {len(state.received)} results, "
            f"need {state.k_threshold}")
    gamma = state.gamma
    m_prev = state.endmembers
    c_m = model.lipschitz_endmember(state.a_blocks)
    grad = model.grad_endmember(state.y_blocks, state.a_blocks, m_prev)
    m_hat = project_nonneg(m_prev - grad / c_m)
    step_norm_m = float(np.linalg.norm(m_hat - m_prev))
    if state.extrapolate_m:
        m_new = m_hat + gamma * (m_hat - m_prev)
    else:
        m_new = (1.0 - gamma) * m_prev + gamma * m_hat
    move_norm_m = float(np.linalg.norm(m_new - m_prev))

    in_window = sorted(state.received)
    state.delays += 1
    state.delays[in_window] = 0
    state.endmembers = m_new
    state.version += 1
    state.lipschitz_by_version[state.version] = model.lipschitz_abundance(m_new)
    state.gamma = gamma * (1.0 - state.mu * gamma)

    value, feasible = model.objective(
        state.y_blocks, state.a_blocks, m_new, state.feas_tol)
    if not feasible:
        if state.extrapolate_m:
            # experimental extrapolation can leave the orthant; report fit only
            value = sum(model.fit_block(y, a, m_new)
                        for y, a in zip(state.y_blocks, state.a_blocks))
        else:
            raise ProtocolError(f"iterate infeasible after iteration {state.version}")

    if state.tracker is not None:
        state.tracker.observe_endmember_constant(c_m)
        if state.last_a_hat is not None:
            sample = cross_lipschitz_sample(
                m_prev, m_new, state.last_a_hat, state.y_blocks[state.last_worker])
            if sample is not None:
                state.tracker.observe_cross_constant(sample)

    state.trace.append(IterationRecord(
        k=state.version,
        objective=value,
        gamma=gamma,
        reporting_worker=state.last_worker,
        observed_delay=max(state.pending_delays.values(), default=0),
        wall_clock_ms=now_ms,
        lipschitz_a=state.last_lipschitz_a,
        lipschitz_m=c_m,
        step_norm_a=float(np.sqrt(state.pending_step_sq)),
        step_norm_m=step_norm_m,
        move_norm_m=move_norm_m,
    ))
    state.received = set()
    state.pending_delays = {}
    state.pending_step_sq = 0.0
    return state


@dataclass
class RunResult:
    endmembers: np.ndarray
    a_blocks: list
    trace: list
    exit_reason: str
    initial_objective: float
    final_objective: float
    elapsed_ms: float
    tracker: LipschitzTracker
    effective_config: SolverConfig
    delay_histogram: Counter
    discarded_results: int = 0
    results_received: int = 0
    observed_tau: int = 0
    error: str | None = None

    @property
    def iterations(self) -> int:
        return len(self.trace)


def _make_compute(y_blocks):
    def compute(worker_id: int, task: TaskMsg) -> np.ndarray:
        a_hat, _ = model.prox_gradient_abundance(
            y_blocks[worker_id], task.abundances, task.endmembers)
        return a_hat
    return compute


def _build_transport(cfg: SolverConfig, y_blocks):
    compute = _make_compute(y_blocks)
    if cfg.scheduler == "virtual":
        return VirtualTransport(compute, len(y_blocks), cfg.worker_delays_ms,
                                cfg.seed, cfg.virtual_base_ms)
    return ThreadTransport(compute, len(y_blocks), cfg.worker_delays_ms, cfg.seed)


def run(y_blocks, a0_blocks, m0, cfg: SolverConfig, transport=None) -> RunResult:
    """Drive the solver to its stopping rule over the given transport.

    Stops when the relative objective decrease falls below `rel_tol` on an
    iteration by which every worker has reported since the last significant
    change, or at `max_iter`. A worker crash aborts the run; the partial trace
    is returned with `exit_reason="aborted"`.
    """
    omega = len(y_blocks)
    if len(a0_blocks) != omega:
        raise DataError(f"{omega} data blocks but {len(a0_blocks)} abundance blocks")
    eff = cfg.resolve(omega)
    for i, a0 in enumerate(a0_blocks):
        if not model.simplex_feasible(a0, eff.feas_tol):
            raise InfeasibleInitError(f"initial abundance block {i} is infeasible")
    if not model.nonneg_feasible(m0):
        raise InfeasibleInitError("initial endmembers have negative entries")

    if transport is None:
        transport = _build_transport(eff, y_blocks)

    state = MasterState(
        y_blocks=[np.asarray(y, dtype=np.float64) for y in y_blocks],
        a_blocks=[np.array(a, dtype=np.float64) for a in a0_blocks],
        endmembers=np.array(m0, dtype=np.float64),
        version=0,
        gamma=eff.gamma0,
        mu=eff.mu,
        k_threshold=eff.k_threshold,
        feas_tol=eff.feas_tol,
        extrapolate_m=eff.extrapolate_m,
        tracker=LipschitzTracker(omega),
    )
    initial_objective, feasible = model.objective(
        state.y_blocks, state.a_blocks, state.endmembers, eff.feas_tol)
    assert feasible

    histogram: Counter = Counter()
    discards = 0
    received_total = 0
    observed_tau = 0
    discard_streak = 0
    exit_reason = EXIT_MAX_ITER
    error = None

    psi_prev = initial_objective
    last_report = [0] * omega
    last_violation = 0

    def assign(worker_id: int) -> None:
        transport.assign(worker_id, TaskMsg(
            state.endmembers.copy(), state.version,
            state.a_blocks[worker_id].copy()))

    try:
        for w in range(omega):
            assign(w)
        while state.version < eff.max_iter:
            res = transport.recv()
            delay = state.version - res.version
            if eff.tau_limit is not None and delay > eff.tau_limit:
                discards += 1
                discard_streak += 1
                if discard_streak > 1000 * omega:
                    raise ProtocolError(
                        "no acceptable worker result in "
                        f"{discard_streak} attempts (tau_limit={eff.tau_limit})")
                log.debug("discarding stale result from worker %d (delay %d)",
                          res.worker_id, delay)
                assign(res.worker_id)
                continue
            discard_streak = 0
            received_total += 1
            observed_tau = max(observed_tau, delay)
            histogram[(res.worker_id, delay)] += 1
            master_receive(state, res.worker_id, res.abundances, stamp=res.version)
            if len(state.received) < state.k_threshold:
                continue
            closed = sorted(state.received)
            master_update_m(state, now_ms=transport.now_ms())
            rec = state.trace[-1]
            rel = abs(rec.objective - psi_prev) / max(abs(psi_prev), 1e-300)
            if rel >= eff.rel_tol:
                last_violation = rec.k
            psi_prev = rec.objective
            for w in closed:
                last_report[w] = rec.k
                assign(w)
            if rel < eff.rel_tol and all(r > last_violation for r in last_report):
                exit_reason = EXIT_TOLERANCE
                break
    except WorkerCrashError as exc:
        log.error("aborting run: %s", exc)
        exit_reason = EXIT_ABORTED
        error = str(exc)
    finally:
        elapsed = transport.now_ms()
        transport.shutdown()

    final = state.trace[-1].objective if state.trace else initial_objective
    return RunResult(
        endmembers=state.endmembers,
        a_blocks=state.a_blocks,
        trace=state.trace,
        exit_reason=exit_reason,
        initial_objective=initial_objective,
        final_objective=final,
        elapsed_ms=elapsed,
        tracker=state.tracker,
        effective_config=eff,
        delay_histogram=histogram,
        discarded_results=discards,
        results_received=received_total,
        observed_tau=observed_tau,
        error=error,
    )


def init_uniform(y_blocks, r: int) -> list:
    """Uniform 1/r abundance blocks matching the data block widths."""
    return [np.full((r, y.shape[1]), 1.0 / r) for y in y_blocks]


def init_from_data(y_blocks, r: int, seed: int = 0):
    """Endmembers from r random data columns, uniform abundances."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1217]))
    stacked = np.concatenate([y for y in y_blocks], axis=1)
    idx = rng.choice(stacked.shape[1], size=r, replace=False)
    m0 = project_nonneg(stacked[:, idx])
    return m0, init_uniform(y_blocks, r)


def init_perturbed(m_true, a_true_blocks, rel_noise: float = 0.05, seed: int = 0):
    """Ground truth with multiplicative noise, projected back to feasibility."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E27]))
    m0 = project_nonneg(m_true * (1.0 + rel_noise * rng.standard_normal(m_true.shape)))
    a0 = [project_simplex_columns(a * (1.0 + rel_noise * rng.standard_normal(a.shape)))
          for a in a_true_blocks]
    return m0, a0
