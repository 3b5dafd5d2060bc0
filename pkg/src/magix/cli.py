"""Command line interface: ``magix {simulate,fit,forecast,evaluate}``.

File formats (comma separated, one header line):

* ``truth.csv``: ``time,x1,...,xD``
* ``obs.csv``: ``component,time,value`` with 1-based components
* ``grid.csv``: ``time``
* ``trace.csv``: ``iteration,objective``
* ``inferred.csv`` / ``reconstructed.csv``: ``time,x1,...,xD,diverged``

Exit codes: 0 success, 1 usage or input error, 2 numerical failure,
3 the only failure is a divergent trajectory.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import checkpoint
from .benchmarks import (
    ExperimentSpec,
    EvalReport,
    fit_grid,
    generate_dataset,
    inferred_trajectory,
    is_divergent,
    reconstructed_trajectory,
    rmse,
    run_experiment,
    ReplicateRecord,
)
from .gp import DegenerateDataError, FactorizationError
from .inference import MagixConfig, NumericalDivergence, ObservationSet, fit, resume, standardize_time
from .integrate import TimeGrid, Trajectory

log = logging.getLogger("magix")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_DIVERGED = 0, 1, 2, 3
NUMERIC_ERRORS = (NumericalDivergence, FactorizationError, DegenerateDataError, np.linalg.LinAlgError)
PAPER_REPLICATES = 100


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(v):
    return repr(float(v))


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_trajectory(path, traj: Trajectory, diverged=None):
    D = traj.values.shape[1]
    header = ["time"] + [f"x{d + 1}" for d in range(D)]
    if diverged is not None:
        header.append("diverged")
    rows = []
    for t, row in zip(traj.times, traj.values):
        r = [_fmt(t)] + [_fmt(v) for v in row]
        if diverged is not None:
            r.append(int(diverged))
        rows.append(r)
    write_rows(path, header, rows)


def read_table(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise UsageError(f"{path} is empty")
    return rows[0], rows[1:]


def read_trajectory(path):
    header, rows = read_table(path)
    if not header or header[0] != "time":
        raise UsageError(f"{path}: first column must be 'time'")
    cols = [i for i, h in enumerate(header) if h.startswith("x")]
    data = np.array([[float(r[0])] + [float(r[i]) for i in cols] for r in rows])
    return Trajectory(TimeGrid(data[:, 0]), data[:, 1:])


def read_times(path):
    header, rows = read_table(path)
    if not header or header[0] != "time":
        raise UsageError(f"{path}: first column must be 'time'")
    return np.array([float(r[0]) for r in rows])


def write_observations(path, obs: ObservationSet):
    rows = []
    for d, (t, y) in enumerate(zip(obs.tau, obs.y)):
        rows.extend([d + 1, _fmt(a), _fmt(b)] for a, b in zip(t, y))
    write_rows(path, ["component", "time", "value"], rows)


def read_observations(path):
    header, rows = read_table(path)
    if header != ["component", "time", "value"]:
        raise UsageError(f"{path}: expected header component,time,value")
    try:
        comp = np.array([int(r[0]) for r in rows])
        t = np.array([float(r[1]) for r in rows])
        y = np.array([float(r[2]) for r in rows])
    except (ValueError, IndexError) as exc:
        raise UsageError(f"{path}: malformed row ({exc})") from exc
    if comp.size == 0:
        raise UsageError(f"{path}: no observations")
    D = int(comp.max())
    tau, vals = [], []
    for d in range(1, D + 1):
        sel = comp == d
        order = np.argsort(t[sel], kind="stable")
        tau.append(t[sel][order])
        vals.append(y[sel][order])
    try:
        return ObservationSet(tau, vals)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _hidden(text):
    try:
        widths = tuple(int(w) for w in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer widths {text!r}")
    if not widths or min(widths) < 1:
        raise argparse.ArgumentTypeError("layer widths must be positive")
    return widths


def _seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")


def _system(text):
    from .dynamics import get_system
    try:
        get_system(text, seed=0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))
    return text


def default_iterations(system):
    return 5000 if system.startswith("hamiltonian") else 2500


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def _magix_config(args, base=None, system=None):
    d = dict(base or {})
    if args.iters is not None:
        d["n_iter"] = args.iters
    elif "n_iter" not in d and system is not None:
        d["n_iter"] = default_iterations(system)
    if args.hidden is not None:
        d["hidden"] = args.hidden
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    try:
        return MagixConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _outdir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {path}: {exc}") from exc
    return path


def cmd_simulate(args):
    file_cfg = _load_config(args.config)
    spec = ExperimentSpec(
        system=args.system or file_cfg.get("system", "fn"),
        pattern=args.pattern or file_cfg.get("pattern", "full"),
        noise=file_cfg.get("noise", 0.1) if args.noise is None else args.noise,
        seed=args.seed if args.seed is not None else file_cfg.get("seed", 0),
        replicates=1,
    )
    out = _outdir(args.out)
    truth, obs = generate_dataset(spec, spec.seed)
    write_trajectory(os.path.join(out, "truth.csv"), truth)
    write_observations(os.path.join(out, "obs.csv"), obs)
    grid = fit_grid(truth.times, MagixConfig().refine)
    write_rows(os.path.join(out, "grid.csv"), ["time"], [[_fmt(t)] for t in grid])
    with open(os.path.join(out, "spec.json"), "w") as fh:
        json.dump(spec.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    log.info("wrote %d truth rows and %s observations to %s", len(truth.grid), obs.counts, out)
    return EXIT_OK


def _write_trace(path, result, start=0):
    rows = [[start + i, _fmt(v)] for i, v in enumerate(result.trace)]
    write_rows(path, ["iteration", "objective"], rows)


def cmd_fit(args):
    out = _outdir(args.out)
    ckpt_path = os.path.join(out, "checkpoint.json")
    progress = None
    if args.verbose:
        every = max(1, (args.iters or 2500) // 10)
        progress = lambda l, v: l % every == 0 and log.info("iteration %d objective %.6g", l, v)
    if args.resume:
        if args.iters is None:
            raise UsageError("--resume needs --iters (number of further iterations)")
        try:
            result = checkpoint.load(args.resume)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot load checkpoint {args.resume}: {exc}") from exc
        result.config = replace(result.config, n_iter=result.config.n_iter + args.iters)
        try:
            resume(result, args.iters, progress)
        finally:
            checkpoint.save(result, ckpt_path)
            _write_trace(os.path.join(out, "trace.csv"), result)
        return EXIT_OK
    if not args.obs:
        raise UsageError("fit needs --obs or --resume")
    obs = read_observations(args.obs)
    file_cfg = _load_config(args.config)
    cfg = _magix_config(args, file_cfg.get("config", file_cfg), system=file_cfg.get("system", "fn"))
    if args.grid:
        raw = read_times(args.grid)
    else:
        from .inference import refine_grid
        raw = refine_grid(obs.all_times(), cfg.refine)
    grid, scale = standardize_time(raw, cfg.spacing)
    try:
        result = fit(obs.scaled(scale), cfg, grid=grid, scale=scale, callback=progress)
    except NUMERIC_ERRORS:
        raise
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    checkpoint.save(result, ckpt_path)
    _write_trace(os.path.join(out, "trace.csv"), result)
    log.info("final objective %.6g after %d iterations", result.objective, result.state.iteration)
    return EXIT_OK


def _load_checkpoint(path):
    try:
        return checkpoint.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc


def _forecast_times(result, args):
    grid = result.grid / result.scale
    if args.times:
        times = read_times(args.times)
    else:
        times = grid.copy()
    if args.horizon:
        step = grid[1] - grid[0] if grid.size > 1 else 1.0
        last = max(times[-1], grid[-1])
        times = np.concatenate([times, last + step * np.arange(1, args.horizon + 1)])
    end = grid[-1] * (1 + 1e-12)
    return times[times <= end], times[times > end]


def cmd_forecast(args):
    result = _load_checkpoint(args.checkpoint)
    out = _outdir(args.out)
    fit_times, horizon = _forecast_times(result, args)
    try:
        inf, div_inf = inferred_trajectory(result, fit_times, horizon, args.substeps)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rec, div_rec = reconstructed_trajectory(result, np.concatenate([fit_times, horizon]), args.substeps)
    write_trajectory(os.path.join(out, "inferred.csv"), inf, div_inf)
    write_trajectory(os.path.join(out, "reconstructed.csv"), rec, div_rec)
    if div_inf or div_rec:
        log.warning("forecast diverged (inferred=%s, reconstructed=%s)", div_inf, div_rec)
        return EXIT_DIVERGED
    return EXIT_OK


def _single_report(result, truth, substeps):
    times = truth.times
    end = result.grid[-1] / result.scale * (1 + 1e-12)
    fit_mask = times <= end
    inf, _ = inferred_trajectory(result, times[fit_mask], times[~fit_mask], substeps)
    rec_traj, _ = reconstructed_trajectory(result, times, substeps)
    rec = ReplicateRecord(seed=int(result.config.seed))
    rec.inferred_fit = [float(v) for v in rmse(inf, truth, fit_mask)]
    rec.reconstructed_fit = [float(v) for v in rmse(rec_traj, truth, fit_mask)]
    if (~fit_mask).any():
        rec.inferred_forecast = [float(v) for v in rmse(inf, truth, ~fit_mask)]
        rec.reconstructed_forecast = [float(v) for v in rmse(rec_traj, truth, ~fit_mask)]
        rec.divergent = is_divergent(rec.inferred_forecast)
    else:
        D = truth.values.shape[1]
        rec.inferred_forecast = rec.reconstructed_forecast = [float("nan")] * D
    return rec


def _write_report(out, report: EvalReport):
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report.to_dict(timings=False), fh, sort_keys=True, indent=1)
        fh.write("\n")
    rows = report.table_rows(timings=False)
    write_rows(os.path.join(out, "replicates.csv"), rows[0], rows[1:])
    write_rows(os.path.join(out, "runtime.csv"), ["seed", "seconds"],
               [[r.seed, _fmt(r.seconds)] for r in report.records])


def cmd_evaluate(args):
    out = _outdir(args.out)
    if args.checkpoint or args.truth:
        if not (args.checkpoint and args.truth):
            raise UsageError("single-run evaluation needs both --checkpoint and --truth")
        result = _load_checkpoint(args.checkpoint)
        truth = read_trajectory(args.truth)
        try:
            rec = _single_report(result, truth, args.substeps)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        report = EvalReport(ExperimentSpec(config=result.config), [rec])
        _write_report(out, report)
        return EXIT_DIVERGED if rec.divergent else EXIT_OK

    file_cfg = _load_config(args.config)
    system = args.system or file_cfg.get("system", "fn")
    replicates = args.replicates if args.replicates is not None else file_cfg.get("replicates", 10)
    if args.paper_scale:
        replicates = PAPER_REPLICATES
    seeds = args.seeds
    if seeds is not None:
        replicates = len(seeds)
    if replicates < 1:
        raise UsageError("no replicates to evaluate")
    cfg = _magix_config(args, file_cfg.get("config"), system=system)
    spec = ExperimentSpec(
        system=system,
        pattern=args.pattern or file_cfg.get("pattern", "full"),
        noise=file_cfg.get("noise", 0.1) if args.noise is None else args.noise,
        replicates=replicates,
        seed=args.seed if args.seed is not None else file_cfg.get("seed", 0),
        config=cfg,
    )
    report = run_experiment(spec, workers=args.threads, seeds=seeds,
                            progress=lambda r: log.info("seed %d done in %.1fs", r.seed, r.seconds))
    _write_report(out, report)
    usable = sum(r.ok for r in report.records)
    log.info("%d usable, %d divergent, %d failed", usable, report.divergent, report.failed)
    if usable:
        return EXIT_OK
    return EXIT_NUMERIC if report.failed else EXIT_DIVERGED


def build_parser():
    p = _Parser(prog="magix", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, system=True):
        if system:
            sp.add_argument("--system", type=_system, help="fn, lv, hes1 or hamiltonian:D")
            sp.add_argument("--pattern", choices=["full", "partial"])
            sp.add_argument("--noise", type=float, help="observation noise sd (default 0.1)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--config", help="JSON file with defaults; flags override it")
        sp.add_argument("--threads", type=int, default=1,
                        help="replicate worker processes (BLAS always runs single-threaded)")
        sp.add_argument("--out", required=True, help="output directory")

    def model(sp):
        sp.add_argument("--iters", type=int, help="iterations (default 2500, 5000 for hamiltonian)")
        sp.add_argument("--hidden", type=_hidden, help="comma separated widths, default 512")

    sp = sub.add_parser("simulate", help="generate ground truth and noisy observations")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit to an observation file")
    common(sp, system=False)
    model(sp)
    sp.add_argument("--obs", help="observations in long format")
    sp.add_argument("--grid", help="discretization grid (default: 4x refinement)")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("forecast", help="inferred and reconstructed trajectories")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--times", help="CSV whose first column holds output times")
    sp.add_argument("--horizon", type=int, default=0, help="extra points past the grid")
    sp.add_argument("--substeps", type=int, default=10)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_forecast)

    sp = sub.add_parser("evaluate", help="RMSE report for a checkpoint or a replicate suite")
    common(sp)
    model(sp)
    sp.add_argument("--seeds", type=_seeds, help="explicit comma separated seeds")
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--paper-scale", action="store_true", help="100 replicates")
    sp.add_argument("--checkpoint")
    sp.add_argument("--truth")
    sp.add_argument("--substeps", type=int, default=10)
    sp.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    from threadpoolctl import threadpool_limits
    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
