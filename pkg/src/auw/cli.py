"""Command-line pipeline: generate data, solve, score, plot, serve.

Subcommands: gen, unmix, metrics, plot, master, worker. Exit codes: 0 ok,
2 usage, 3 data error, 4 runtime abort. The AUW_LOG environment variable
(error|info|debug) controls logging verbosity.
"""

from __future__ import annotations

import argparse
import datetime
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import datagen, diagnostics, matcore, metrics, runtime, svgplot, transport
from .errors import AuwError, DataError
from .manifest import file_sha256, read_kv, write_kv

log = logging.getLogger("auw")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_ABORT = 4

_GEN_KEYS = {
    "bands": int, "endmembers": int, "pixels_per_block": int, "blocks": int,
    "snr_db": float, "smoothness": float, "seed": int,
}
_SOLVER_KEYS = {
    "mode": str, "k_threshold": int, "gamma0": float, "mu": float,
    "max_iter": int, "rel_tol": float, "tau_limit": int, "seed": int,
    "scheduler": str,
}


def _parse_delays(text: str):
    """Parse "0,50,100" or "0,10:20,100" into per-worker delay entries."""
    entries = []
    for tok in text.split(","):
        tok = tok.strip()
        if ":" in tok:
            lo, hi = tok.split(":", 1)
            entries.append((float(lo), float(hi)))
        else:
            entries.append(float(tok))
    return tuple(entries)


def _parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise DataError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _merged(args, config_path, keys) -> dict:
    """flag > config file > caller default (None means unset)."""
    config = read_kv(config_path) if config_path else {}
    out = {}
    for key, cast in keys.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in config:
            out[key] = cast(config[key])
    return out


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def cmd_gen(args) -> int:
    opts = _merged(args, args.config, _GEN_KEYS)
    spec = datagen.SyntheticSpec(**opts)
    ds = datagen.generate(spec)
    datagen.save_dataset(ds, args.out)
    log.info("dataset written to %s (realized SNR %.3f dB)", args.out, ds.realized_snr_db)
    print(f"gen: {args.out} blocks={spec.blocks} bands={spec.bands} "
          f"endmembers={spec.endmembers} pixels_per_block={spec.pixels_per_block}")
    return EXIT_OK


def _load_blocks_for_run(args):
    y_blocks = datagen.load_observations(args.dataset)
    omega = args.workers or len(y_blocks)
    truth = None
    if args.init == "perturbed" or (args.init == "files" and False):
        truth = datagen.load_truth(args.dataset)
    if omega != len(y_blocks):
        stacked = np.concatenate(y_blocks, axis=1)
        part = matcore.partition_columns(stacked.shape[1], omega)
        y_blocks = [stacked[:, s:s + n].copy() for s, n in part.column_ranges]
        if truth is not None:
            m_true, a_true = truth
            a_stacked = np.concatenate(a_true, axis=1)
            truth = (m_true, [a_stacked[:, s:s + n].copy() for s, n in part.column_ranges])
    lo, hi = min(float(y.min()) for y in y_blocks), max(float(y.max()) for y in y_blocks)
    if lo < 0.0 or hi > 1.0:
        log.warning("observations outside [0, 1] (range %.3g..%.3g); "
                    "reflectance-like data expected", lo, hi)
    return y_blocks, truth


def _initial_factors(args, y_blocks, truth):
    if args.init == "random":
        r = args.endmembers
        if r is None:
            raise DataError("--endmembers is required with --init random")
        return runtime.init_from_data(y_blocks, r, args.seed or 0)
    if args.init == "perturbed":
        m_true, a_true = truth
        return runtime.init_perturbed(m_true, a_true, args.init_noise, args.seed or 0)
    if args.init == "files":
        if not args.init_m or not args.init_a:
            raise DataError("--init files requires --init-m and --init-a")
        paths = args.init_a.split(",")
        if len(paths) != len(y_blocks):
            raise DataError(f"need {len(y_blocks)} abundance files, got {len(paths)}")
        return matcore.read_fmat(args.init_m), [matcore.read_fmat(p) for p in paths]
    raise DataError(f"unknown init mode {args.init!r}")


def _build_config(args, extra=None) -> runtime.SolverConfig:
    opts = _merged(args, getattr(args, "config", None), _SOLVER_KEYS)
    if getattr(args, "delay_ms", None):
        opts["worker_delays_ms"] = _parse_delays(args.delay_ms)
    if getattr(args, "extrapolate_m", False):
        opts["extrapolate_m"] = True
    if extra:
        opts.update(extra)
    return runtime.SolverConfig(**opts)


def _save_run(args, result: runtime.RunResult, started: str, y_blocks) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    matcore.write_fmat(out / "M_est.fmat", result.endmembers)
    for i, a in enumerate(result.a_blocks, start=1):
        matcore.write_fmat(out / f"A_est_{i}.fmat", a)
    diagnostics.attach_delay_objective(
        result.trace, result.initial_objective,
        tau=result.effective_config.tau_limit or result.observed_tau,
        tracker=result.tracker)
    diagnostics.export_trace(result.trace, out / "trace.csv")

    eff = result.effective_config
    entries = {
        "mode": eff.mode,
        "scheduler": eff.scheduler,
        "k_threshold": eff.k_threshold,
        "gamma0": eff.gamma0,
        "mu": eff.mu,
        "max_iter": eff.max_iter,
        "rel_tol": eff.rel_tol,
        "tau_limit": "" if eff.tau_limit is None else eff.tau_limit,
        "seed": eff.seed,
        "worker_delays_ms": "" if eff.worker_delays_ms is None else
                            ",".join(str(d) for d in eff.worker_delays_ms),
        "workers": len(result.a_blocks),
        "dataset": args.dataset,
        "init": args.init,
        "started_utc": started,
        "finished_utc": _utcnow(),
        "initial_objective": format(result.initial_objective, ".17g"),
        "final_objective": format(result.final_objective, ".17g"),
        "iterations": result.iterations,
        "exit_reason": result.exit_reason,
        "elapsed_ms": format(result.elapsed_ms, ".6g"),
        "results_received": result.results_received,
        "discarded_results": result.discarded_results,
        "observed_tau": result.observed_tau,
    }
    if result.error:
        entries["error"] = result.error
    for key, value in result.tracker.summary().items():
        entries[key] = format(value, ".17g") if isinstance(value, float) else value
    tau = eff.tau_limit if eff.tau_limit is not None else result.observed_tau
    if result.trace:
        analysis = diagnostics.analyze_decrease(
            result.trace, result.initial_objective,
            diagnostics.DecreaseConstants.from_tracker(result.tracker, tau))
        entries["decrease_holds"] = analysis["holds"]
        entries["decrease_first_nonneg_iter"] = analysis["first_nonneg_coeff_iter"]
        entries["decrease_monotone_after"] = analysis["monotone_after_crossing"]
    for i in range(1, len(y_blocks) + 1):
        path = Path(args.dataset) / f"Y_{i}.fmat"
        if path.exists():
            entries[f"hash_Y_{i}"] = file_sha256(path)
    write_kv(out / "manifest.txt", entries)


def cmd_unmix(args) -> int:
    started = _utcnow()
    y_blocks, truth = _load_blocks_for_run(args)
    m0, a0 = _initial_factors(args, y_blocks, truth)
    cfg = _build_config(args)
    result = runtime.run(y_blocks, a0, m0, cfg)
    _save_run(args, result, started, y_blocks)
    print(f"unmix: {result.exit_reason} after {result.iterations} iterations, "
          f"objective {result.final_objective:.6g}, {result.elapsed_ms:.1f} ms")
    if result.exit_reason == runtime.EXIT_ABORTED:
        return EXIT_ABORT
    return EXIT_OK


def cmd_metrics(args) -> int:
    results = Path(args.results)
    truth_dir = Path(args.truth)
    m_est = matcore.read_fmat(results / "M_est.fmat")
    a_est = []
    i = 1
    while (results / f"A_est_{i}.fmat").exists():
        a_est.append(matcore.read_fmat(results / f"A_est_{i}.fmat"))
        i += 1
    if not a_est:
        raise DataError(f"no A_est_*.fmat in {results}")
    m_true, a_true = datagen.load_truth(truth_dir)
    y_blocks = datagen.load_observations(truth_dir)
    if sum(a.shape[1] for a in a_true) != sum(a.shape[1] for a in a_est):
        raise DataError("estimate and truth cover different pixel counts")
    if len(a_true) != len(a_est):  # repartitioned run: compare on stacked pixels
        a_true = [np.concatenate(a_true, axis=1)]
        a_est = [np.concatenate(a_est, axis=1)]
        y_blocks = [np.concatenate(y_blocks, axis=1)]

    alignment = metrics.align(m_true, m_est)
    asam_m = metrics.asam_endmembers(m_true, m_est, alignment)
    asam_y = metrics.asam_reconstruction(y_blocks, m_est, a_est)
    gmse = metrics.abundance_gmse(a_true, a_est, alignment)
    re = metrics.reconstruction_error(y_blocks, m_est, a_est)

    report = {
        "asam_m_deg": format(asam_m, ".12g"),
        "asam_y_deg": format(asam_y, ".12g"),
        "gmse": format(gmse, ".12g"),
        "gmse_x1e3": format(gmse * 1e3, ".12g"),
        "re": format(re, ".12g"),
        "re_x1e4": format(re * 1e4, ".12g"),
        "alignment": ",".join(str(p) for p in alignment.permutation),
    }
    report_path = Path(args.report) if args.report else results / "report.txt"
    write_kv(report_path, report)
    csv_path = Path(args.csv) if args.csv else results / "metrics.csv"
    header = "asam_m_deg,asam_y_deg,gmse,gmse_x1e3,re,re_x1e4\n"
    row = (f"{asam_m:.12g},{asam_y:.12g},{gmse:.12g},{gmse * 1e3:.12g},"
           f"{re:.12g},{re * 1e4:.12g}\n")
    new_file = not csv_path.exists()
    with open(csv_path, "a", encoding="ascii") as fh:
        if new_file:
            fh.write(header)
        fh.write(row)
    for key, value in sorted(report.items()):
        print(f"{key}={value}")
    return EXIT_OK


def cmd_plot(args) -> int:
    series = []
    labels = args.labels.split(",") if args.labels else []
    for i, path in enumerate(args.traces):
        rows = diagnostics.load_trace(path)
        if not rows:
            raise DataError(f"trace {path} has no iterations to plot")
        label = labels[i] if i < len(labels) else Path(path).stem
        series.append(svgplot.series_from_trace_rows(label, rows))
    svgplot.render_objective_plot(series, args.out)
    print(f"plot: {args.out} ({len(series)} series)")
    return EXIT_OK


def cmd_master(args) -> int:
    started = _utcnow()
    y_blocks, truth = _load_blocks_for_run(args)
    m0, a0 = _initial_factors(args, y_blocks, truth)
    cfg = _build_config(args)
    tcp = transport.TcpMasterTransport(
        _parse_addr(args.bind), len(y_blocks),
        handshake_timeout=args.handshake_timeout)
    print(f"master: listening on {tcp.address[0]}:{tcp.address[1]} "
          f"for {len(y_blocks)} workers")
    tcp.wait_for_workers()
    result = runtime.run(y_blocks, a0, m0, cfg, transport=tcp)
    _save_run(args, result, started, y_blocks)
    print(f"master: {result.exit_reason} after {result.iterations} iterations, "
          f"objective {result.final_objective:.6g}")
    if result.exit_reason == runtime.EXIT_ABORTED:
        return EXIT_ABORT
    return EXIT_OK


def cmd_worker(args) -> int:
    y = matcore.read_fmat(args.data)
    done = transport.run_worker(
        _parse_addr(args.connect), y, args.worker_id,
        delay_ms=args.delay_ms_worker,
        handshake_timeout=args.handshake_timeout)
    print(f"worker {args.worker_id}: {done} tasks")
    return EXIT_OK


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["sync", "async"], default=None)
    p.add_argument("--workers", type=int, default=None,
                   help="repartition the data across this many workers")
    p.add_argument("--k-threshold", dest="k_threshold", type=int, default=None)
    p.add_argument("--gamma0", type=float, default=None)
    p.add_argument("--mu", type=float, default=None)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    p.add_argument("--rel-tol", dest="rel_tol", type=float, default=None)
    p.add_argument("--tau-limit", dest="tau_limit", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--extrapolate-m", dest="extrapolate_m", action="store_true",
                   help="experimental extrapolated endmember relaxation")
    p.add_argument("--init", choices=["random", "perturbed", "files"], default="random")
    p.add_argument("--init-noise", dest="init_noise", type=float, default=0.05)
    p.add_argument("--init-m", dest="init_m", default=None)
    p.add_argument("--init-a", dest="init_a", default=None,
                   help="comma-separated abundance block files")
    p.add_argument("--endmembers", type=int, default=None,
                   help="endmember count for --init random")
    p.add_argument("--config", default=None, help="key=value config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auw", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--bands", type=int, default=None)
    p.add_argument("--endmembers", type=int, default=None)
    p.add_argument("--pixels-per-block", dest="pixels_per_block", type=int, default=None)
    p.add_argument("--blocks", type=int, default=None)
    p.add_argument("--snr-db", dest="snr_db", type=float, default=None)
    p.add_argument("--smoothness", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("unmix", help="run the solver in-process")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    _add_solver_flags(p)
    p.add_argument("--scheduler", choices=["threads", "virtual"], default=None)
    p.add_argument("--delay-ms", dest="delay_ms", default=None,
                   help="per-worker artificial delays, e.g. 0,50,100 or 0,10:20,100")
    p.set_defaults(func=cmd_unmix)

    p = sub.add_parser("metrics", help="score an estimate against ground truth")
    p.add_argument("results")
    p.add_argument("truth")
    p.add_argument("--report", default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("plot", help="render objective traces to SVG")
    p.add_argument("traces", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", default=None)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("master", help="serve a run over TCP")
    p.add_argument("dataset")
    p.add_argument("--bind", required=True, help="HOST:PORT")
    p.add_argument("--out", required=True)
    p.add_argument("--handshake-timeout", dest="handshake_timeout",
                   type=float, default=transport.DEFAULT_HANDSHAKE_TIMEOUT)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_master, scheduler=None, delay_ms=None)

    p = sub.add_parser("worker", help="serve one data block to a TCP master")
    p.add_argument("--connect", required=True, help="HOST:PORT")
    p.add_argument("--worker-id", dest="worker_id", type=int, required=True)
    p.add_argument("--data", required=True, help="FMAT file with this worker's block")
    p.add_argument("--delay-ms", dest="delay_ms_worker", type=float, default=0.0)
    p.add_argument("--handshake-timeout", dest="handshake_timeout",
                   type=float, default=transport.DEFAULT_HANDSHAKE_TIMEOUT)
    p.set_defaults(func=cmd_worker)

    return parser


def main(argv=None) -> int:
    level = os.environ.get("AUW_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, matcore.FmatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (transport.WorkerCrashError, transport.HandshakeError,
            runtime.ProtocolError, ConnectionError) as exc:
        print(f"abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except AuwError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
