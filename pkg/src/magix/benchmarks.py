"""Simulation protocols, trajectory reconstruction and RMSE reporting.

Datasets follow the benchmark layout: 321 equally spaced time points, of
which the first 161 form the fitting phase and the remaining 160 the
forecasting phase. Observations are taken on the fitting phase only.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dynamics import OdeSystem, get_system, mlp_forward
from .gp import DegenerateDataError, FactorizationError
from .inference import FitResult, MagixConfig, NumericalDivergence, ObservationSet, fit, standardize_time
from .integrate import DivergenceError, TimeGrid, Trajectory, integrate

__all__ = [
    "ExperimentSpec",
    "EvalReport",
    "ReplicateRecord",
    "DIVERGENCE_THRESHOLD",
    "observation_indices",
    "generate_dataset",
    "fit_dataset",
    "inferred_trajectory",
    "reconstructed_trajectory",
    "rmse",
    "is_divergent",
    "run_replicate",
    "run_experiment",
]

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 5.0
N_POINTS = 321
N_FIT = 161
OBS_STEP = 4


@dataclass
class ExperimentSpec:
    """One benchmark configuration.

    Parameters
    ----------
    system : str
        ``"fn"``, ``"lv"``, ``"hes1"`` or ``"hamiltonian:D"``.
    pattern : str
        ``"full"`` (every fourth fitting point for every component) or
        ``"partial"`` (components observed at interleaved times).
    noise : float
        Standard deviation of the additive Gaussian noise.
    replicates : int
        Number of replicates; replicate ``r`` uses seed ``seed + r``.
    """

    system: str = "fn"
    pattern: str = "full"
    noise: float = 0.1
    replicates: int = 10
    seed: int = 0
    substeps: int = 10
    config: MagixConfig = field(default_factory=MagixConfig)

    def __post_init__(self):
        if isinstance(self.config, dict):
            self.config = MagixConfig.from_dict(self.config)
        if self.pattern not in ("full", "partial"):
            raise ValueError("pattern must be 'full' or 'partial'")
        if not self.noise >= 0.0:
            raise ValueError("noise must be non-negative")
        if self.replicates < 1:
            raise ValueError("need at least one replicate")
        get_system(self.system, seed=0)  # validates the name

    @property
    def seeds(self):
        return [self.seed + r for r in range(self.replicates)]

    def to_dict(self):
        d = asdict(self)
        d["config"] = self.config.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def observation_indices(system: str, pattern: str, dim: int):
    """Zero-based grid indices observed for each component."""
    full = np.arange(0, N_FIT, OBS_STEP)
    if pattern == "full":
        return [full.copy() for _ in range(dim)]
    name = system.split(":")[0]
    if name in ("fn", "lv"):
        # first component at t1, t5, ..., second at t3, t7, ...
        return [full.copy(), np.arange(2, N_FIT - 1, OBS_STEP)]
    if name == "hes1":
        # each component misses every third point of the one-in-four grid
        phase = np.arange(full.size) % 3
        return [full[phase != 0], full[phase != 1], full[phase != 2]]
    raise ValueError(f"no partial pattern defined for {system!r}")


def _system(spec: ExperimentSpec, seed) -> OdeSystem:
    return get_system(spec.system, seed=seed)


def generate_dataset(spec: ExperimentSpec, seed):
    """Simulate ground truth on 321 points and draw noisy observations.

    Returns
    -------
    truth : Trajectory
        Raw-time ground truth on the full grid.
    obs : ObservationSet
        Raw-time observations on the fitting phase.
    """
    sys = _system(spec, seed)
    grid = TimeGrid.linspace(0.0, sys.t_end, N_POINTS)
    truth = integrate(sys.f, sys.x0, grid, substeps=spec.substeps)
    rng = np.random.default_rng(seed)
    tau, y = [], []
    for d, idx in enumerate(observation_indices(spec.system, spec.pattern, sys.dim)):
        tau.append(grid.times[idx])
        y.append(truth.values[idx, d] + spec.noise * rng.standard_normal(idx.size))
    return truth, ObservationSet(tau, y)


def fit_grid(truth_times, refine=4):
    """Raw discretization grid over the fitting phase.

    With ``refine=4`` this is exactly the 161 fitting points.
    """
    t_end = truth_times[N_FIT - 1]
    n_obs = (N_FIT - 1) // OBS_STEP
    return np.linspace(truth_times[0], t_end, n_obs * refine + 1)


def fit_dataset(obs: ObservationSet, truth_times, cfg: MagixConfig):
    """Standardize time and run the fit on the fitting-phase grid."""
    raw = fit_grid(truth_times, cfg.refine)
    grid, scale = standardize_time(raw, cfg.spacing)
    return fit(obs.scaled(scale), cfg, grid=grid, scale=scale)


def _vector_field(result: FitResult):
    mlp = result.state.mlp
    return lambda x, t: mlp_forward(mlp, x)


def _on_times(result: FitResult, raw_times):
    """Rows of the inferred x(T) at raw times lying on the discretization grid."""
    grid = result.grid / result.scale
    pos = np.clip(np.searchsorted(grid, raw_times), 1, grid.size - 1)
    pos = np.where(np.abs(grid[pos - 1] - raw_times) < np.abs(grid[pos] - raw_times), pos - 1, pos)
    if np.any(~np.isclose(grid[pos], raw_times, rtol=1e-9, atol=1e-9)):
        raise ValueError("requested times are not on the discretization grid")
    return result.x[pos]


def _forecast(result, x0, std_times, substeps):
    """Integrate the learned field; pad with NaN after a blow-up."""
    f = _vector_field(result)
    out = np.full((std_times.size, x0.size), np.nan)
    try:
        out[:] = integrate(f, x0, std_times, substeps=substeps).values
        return out, False
    except DivergenceError as exc:
        k = len(exc.partial.grid)
        out[:k] = exc.partial.values
        return out, True


def inferred_trajectory(result: FitResult, fit_times, horizon=(), substeps=10):
    """x(T) on the fitting times followed by a forecast from the last point.

    Parameters
    ----------
    fit_times : array_like
        Raw times inside the discretization grid.
    horizon : array_like
        Raw times after the end of the grid. May be empty.

    Returns
    -------
    traj : Trajectory
        Raw-time trajectory over ``fit_times`` then ``horizon``.
    diverged : bool
        Whether the forecast blew up; diverged rows are NaN.
    """
    fit_times = np.asarray(fit_times, dtype=float)
    horizon = np.asarray(horizon, dtype=float)
    inferred = _on_times(result, fit_times)
    if horizon.size == 0:
        return Trajectory(TimeGrid(fit_times), inferred), False
    last = result.x[-1]
    start = result.grid[-1]
    std = np.concatenate([[start], horizon * result.scale])
    values, diverged = _forecast(result, last, std, substeps)
    times = np.concatenate([fit_times, horizon])
    return Trajectory(TimeGrid(times), np.vstack([inferred, values[1:]])), diverged


def reconstructed_trajectory(result: FitResult, times, substeps=10):
    """Integrate the learned field from the inferred x at the first grid point."""
    times = np.asarray(times, dtype=float)
    start = result.grid[0] / result.scale
    if not np.isclose(times[0], start, rtol=1e-9, atol=1e-9):
        raise ValueError("reconstruction must start at the first grid point")
    values, diverged = _forecast(result, result.x[0], times * result.scale, substeps)
    return Trajectory(TimeGrid(times), values), diverged


def rmse(traj: Trajectory, truth: Trajectory, mask=None):
    """Per-component root mean squared error over the masked grid points."""
    if len(traj.grid) != len(truth.grid) or not np.allclose(
            traj.times, truth.times, rtol=1e-9, atol=1e-9):
        raise ValueError("trajectories are on different grids")
    if traj.values.shape != truth.values.shape:
        raise ValueError("trajectories have different dimensions")
    err = traj.values - truth.values
    if mask is not None:
        err = err[np.asarray(mask)]
    return np.sqrt(np.mean(err ** 2, axis=0))


def is_divergent(forecast_rmse, threshold=DIVERGENCE_THRESHOLD):
    """True when any forecasting RMSE exceeds ``threshold`` or is not finite."""
    r = np.asarray(forecast_rmse, dtype=float)
    return bool(np.any(~(r <= threshold)))


@dataclass
class ReplicateRecord:
    seed: int
    seconds: float = np.nan
    inferred_fit: list = None
    inferred_forecast: list = None
    reconstructed_fit: list = None
    reconstructed_forecast: list = None
    divergent: bool = False
    error: str = ""

    @property
    def ok(self):
        return not self.error and not self.divergent


def _as_list(a):
    return [float(v) for v in a]


def run_replicate(spec: ExperimentSpec, seed, keep_result=False):
    """Generate, fit and score one replicate.

    Numerical failures are recorded in ``error`` rather than raised.
    """
    cfg = replace(spec.config, seed=int(seed))
    truth, obs = generate_dataset(spec, seed)
    rec = ReplicateRecord(seed=int(seed))
    t0 = time.perf_counter()
    try:
        result = fit_dataset(obs, truth.times, cfg)
    except (NumericalDivergence, FactorizationError, DegenerateDataError, np.linalg.LinAlgError) as exc:
        rec.seconds = time.perf_counter() - t0
        rec.error = f"{type(exc).__name__}: {exc}"
        return (rec, None) if keep_result else rec
    rec.seconds = time.perf_counter() - t0
    times = truth.times
    fit_mask = np.arange(N_POINTS) < N_FIT
    inf, _ = inferred_trajectory(result, times[:N_FIT], times[N_FIT:], spec.substeps)
    rec_traj, _ = reconstructed_trajectory(result, times, spec.substeps)
    rec.inferred_fit = _as_list(rmse(inf, truth, fit_mask))
    rec.inferred_forecast = _as_list(rmse(inf, truth, ~fit_mask))
    rec.reconstructed_fit = _as_list(rmse(rec_traj, truth, fit_mask))
    rec.reconstructed_forecast = _as_list(rmse(rec_traj, truth, ~fit_mask))
    rec.divergent = is_divergent(rec.inferred_forecast)
    return (rec, result) if keep_result else rec


CELLS = ("inferred_fit", "inferred_forecast", "reconstructed_fit", "reconstructed_forecast")


@dataclass
class EvalReport:
    """Aggregated RMSEs over replicates.

    Divergent and failed replicates are excluded from the RMSE aggregates and
    counted separately.
    """

    spec: ExperimentSpec
    records: list

    @property
    def divergent(self):
        return sum(r.divergent for r in self.records)

    @property
    def failed(self):
        return sum(bool(r.error) for r in self.records)

    def _good(self):
        return [r for r in self.records if r.ok]

    def mean(self, cell):
        rows = [getattr(r, cell) for r in self._good()]
        return np.mean(rows, axis=0) if rows else None

    def sd(self, cell):
        rows = [getattr(r, cell) for r in self._good()]
        return np.std(rows, axis=0, ddof=1) if len(rows) > 1 else None

    def seconds(self):
        s = np.array([r.seconds for r in self.records if not r.error])
        return (float(s.mean()), float(s.std(ddof=1)) if s.size > 1 else 0.0) if s.size else (np.nan, np.nan)

    def summary(self):
        out = dict(system=self.spec.system, pattern=self.spec.pattern,
                   replicates=len(self.records), divergent=self.divergent, failed=self.failed)
        cells = {}
        for cell in CELLS:
            kind, phase = cell.split("_")
            mean, sd = self.mean(cell), self.sd(cell)
            cells.setdefault(phase, {})[kind] = dict(
                mean=None if mean is None else _as_list(mean),
                sd=None if sd is None else _as_list(sd))
        out["rmse"] = cells
        mean_s, sd_s = self.seconds()
        out["seconds"] = dict(mean=mean_s, sd=sd_s)
        return out

    def to_dict(self, timings=True):
        d = dict(spec=self.spec.to_dict(), summary=self.summary(),
                 records=[asdict(r) for r in self.records])
        if not timings:
            d["summary"].pop("seconds")
            for r in d["records"]:
                r.pop("seconds")
        return d

    def table_rows(self, timings=True):
        """Flat per-replicate rows: seed, cell, component, rmse (plus status)."""
        header = ["seed", "phase", "type", "component", "rmse", "divergent", "error"]
        if timings:
            header.append("seconds")
        rows = [header]
        for r in sorted(self.records, key=lambda r: r.seed):
            for cell in CELLS:
                kind, phase = cell.split("_")
                vals = getattr(r, cell) or []
                for d, v in enumerate(vals):
                    row = [r.seed, phase, kind, d + 1, repr(v), int(r.divergent), r.error]
                    if timings:
                        row.append(repr(r.seconds))
                    rows.append(row)
            if r.error:
                row = [r.seed, "", "", "", "", 0, r.error]
                if timings:
                    row.append(repr(r.seconds))
                rows.append(row)
        return rows


def _worker(args):
    spec, seed = args
    return run_replicate(spec, seed)


def run_experiment(spec: ExperimentSpec, workers=1, progress=None, seeds=None):
    """Run every replicate of ``spec``.

    ``seeds`` overrides the default ``spec.seed + r`` sequence. With
    ``workers > 1`` replicates run in separate processes; records are always
    returned in seed order, so the report does not depend on it.
    """
    seeds = spec.seeds if seeds is None else [int(s) for s in seeds]
    if not seeds:
        raise ValueError("no replicates to run")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_worker, [(spec, s) for s in seeds]))
    else:
        records = []
        for s in seeds:
            records.append(run_replicate(spec, s))
            if progress is not None:
                progress(records[-1])
    records.sort(key=lambda r: r.seed)
    return EvalReport(spec, records)
