"""Tempered MAP objective and block coordinate ascent over (theta, x(T), sigma2).

The trajectory is optimised in whitened coordinates ``u_d = L_{C_d}^{-1}(x_d - c_d)``
so that the GP prior term is simply ``-|u|^2 / 2``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import linalg

from .dynamics import MlpDynamics, mlp_forward, mlp_grads, mlp_init
from .gp import (
    SIGMA2_FLOOR_FRACTION,
    GpComponentModel,
    build_component_model,
    fit_empirical_bayes,
    predictive_mean,
)

__all__ = [
    "ObservationSet",
    "MagixConfig",
    "MagixState",
    "FitResult",
    "NumericalDivergence",
    "standardize_time",
    "refine_grid",
    "log_posterior",
    "grad_log_posterior",
    "update_sigma2",
    "initialize",
    "fit",
    "fit_restarts",
]

log = logging.getLogger(__name__)
_LOG_2PI = np.log(2.0 * np.pi)


class NumericalDivergence(ArithmeticError):
    """The objective became non-finite during optimisation."""


@dataclass
class ObservationSet:
    """Noisy observations of each component at its own times.

    ``tau[d]`` and ``y[d]`` hold the times and values for component ``d``.
    """

    tau: list
    y: list

    def __post_init__(self):
        self.tau = [np.asarray(t, dtype=float).ravel() for t in self.tau]
        self.y = [np.asarray(v, dtype=float).ravel() for v in self.y]
        if len(self.tau) != len(self.y):
            raise ValueError("tau and y must list the same number of components")
        for d, (t, v) in enumerate(zip(self.tau, self.y)):
            if t.size == 0:
                raise ValueError(f"component {d} has no observations")
            if t.size != v.size:
                raise ValueError(f"component {d}: {t.size} times but {v.size} values")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"component {d} has non-finite observations")

    @property
    def D(self):
        return len(self.tau)

    @property
    def counts(self):
        return [t.size for t in self.tau]

    @classmethod
    def from_matrix(cls, t, Y):
        """Build from a time vector and an ``(n, D)`` matrix; NaN marks missing."""
        t = np.asarray(t, dtype=float).ravel()
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.shape[0] != t.size:
            raise ValueError("Y must have one row per time point")
        keep = [~np.isnan(Y[:, d]) for d in range(Y.shape[1])]
        return cls([t[k] for k in keep], [Y[k, d] for d, k in enumerate(keep)])

    def scaled(self, factor):
        return ObservationSet([t * factor for t in self.tau], [v.copy() for v in self.y])

    def all_times(self):
        return np.unique(np.concatenate(self.tau))

    def index_on(self, grid, rtol=1e-6):
        """Positions of each component's times on ``grid``.

        Raises ``ValueError`` if an observation time is not a grid point.
        """
        grid = np.asarray(getattr(grid, "times", grid), dtype=float)
        tol = rtol * max(float(np.ptp(grid)), 1.0) if grid.size > 1 else rtol
        out = []
        for d, t in enumerate(self.tau):
            pos = np.clip(np.searchsorted(grid, t), 0, grid.size - 1)
            left = np.clip(pos - 1, 0, grid.size - 1)
            pos = np.where(np.abs(grid[left] - t) < np.abs(grid[pos] - t), left, pos)
            if np.any(np.abs(grid[pos] - t) > tol):
                raise ValueError(f"component {d}: observation times are not on the grid")
            out.append(pos)
        return out


@dataclass
class MagixConfig:
    """Settings for initialisation and the main optimisation loop.

    Learning rates follow ``a * (b + l) ** -gamma`` at iteration ``l``.
    ``update_order`` is ``"theta-x"`` (theta step, then trajectory step) or
    ``"x-theta"``. ``init_gain`` shrinks the He-uniform bound of the initial
    weights. The data constrain the field only near the observed trajectory,
    so elsewhere it stays close to its initial value; a small gain keeps it
    small there. ``normalize`` turns on fixed input/output scaling of the
    network (off by default).

    With ``safeguard`` on, an iteration that lowers the objective (or produces
    non-finite values) is undone, optimizer moments included, and the step
    scale is halved; each accepted iteration lets the scale grow back by 10%
    up to 1. The objective trace is then non-decreasing.
    """

    n_iter: int = 2500
    refine: int = 4
    spacing: float = 0.05
    hidden: tuple = (512,)
    theta_lr: tuple = (0.005, 0.0, 0.6)
    x_lr: tuple = (0.05, 500.0, 0.6)
    pretrain_iter: int = 1000
    pretrain_lr: tuple = None
    optimizer: str = "adam"
    update_order: str = "theta-x"
    tempered: bool = True
    normalize: bool = False
    init_gain: float = 0.2
    safeguard: bool = True
    seed: int = 0
    nu: float = 2.01
    gp_budget: int = 200

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.theta_lr = tuple(float(v) for v in self.theta_lr)
        self.x_lr = tuple(float(v) for v in self.x_lr)
        if self.pretrain_lr is None:
            self.pretrain_lr = self.theta_lr
        self.pretrain_lr = tuple(float(v) for v in self.pretrain_lr)
        if self.refine < 1:
            raise ValueError("refine must be >= 1")
        for a, b, g in (self.theta_lr, self.x_lr):
            if not 0.5 < g <= 1.0:
                raise ValueError("decay exponent must lie in (0.5, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.update_order not in ("theta-x", "x-theta"):
            raise ValueError("update_order must be 'theta-x' or 'x-theta'")
        self.init_gain = float(self.init_gain)
        if not self.init_gain > 0.0:
            raise ValueError("init_gain must be positive")
        if self.n_iter < 0 or self.pretrain_iter < 0:
            raise ValueError("iteration counts must be non-negative")

    def to_dict(self):
        d = asdict(self)
        for k in ("hidden", "theta_lr", "x_lr", "pretrain_lr"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class MagixState:
    u: np.ndarray           # (n, D) whitened trajectory
    mlp: MlpDynamics
    sigma2: np.ndarray      # (D,)
    iteration: int = 0
    step_scale: float = 1.0  # multiplies both step schedules (see ``safeguard``)

    def copy(self):
        return MagixState(self.u.copy(), self.mlp.copy(), self.sigma2.copy(), self.iteration,
                          self.step_scale)


def standardize_time(grid, spacing=0.05):
    """Rescale a grid so that neighbouring points are ``spacing`` apart.

    Returns the standardized times and the multiplicative scale factor.
    """
    t = np.asarray(getattr(grid, "times", grid), dtype=float)
    if t.size < 2:
        return t.copy(), 1.0
    scale = spacing / ((t[-1] - t[0]) / (t.size - 1))
    if np.isclose(scale, 1.0, rtol=1e-12, atol=0.0):
        return t.copy(), 1.0
    return t * scale, float(scale)


def refine_grid(times, factor):
    """Equally spaced grid over the span of ``times``, ``factor`` times denser.

    The spacing is the smallest gap between consecutive observation times
    divided by ``factor``.
    """
    t = np.unique(np.asarray(times, dtype=float))
    if t.size < 2:
        return t
    gap = np.min(np.diff(t)) / factor
    num = int(round((t[-1] - t[0]) / gap)) + 1
    return np.linspace(t[0], t[-1], num)


def _positive(v):
    v = np.asarray(v, dtype=float)
    return np.where(v > 0.0, v, 1.0)


def _obs_weights(obs, n, tempered):
    return np.array([n / c if tempered else 1.0 for c in obs.counts])


def _trajectory(state, models):
    return np.column_stack([mdl.to_x(state.u[:, d]) for d, mdl in enumerate(models)])


def _bmv(mats, vecs):
    """Batched matrix-vector product: ``(D, n, n) x (D, n) -> (D, n)``."""
    return np.matmul(mats, vecs[:, :, None])[:, :, 0]


class _Problem:
    """Objective and gradients with every component's matrices stacked.

    The conditional derivative covariance is well conditioned, so its
    inverse is formed once and applied by matrix products.
    """

    def __init__(self, models, obs, cfg):
        self.models = models
        self.idx = obs.index_on(models[0].grid)
        self.y = obs.y
        self.counts = np.array(obs.counts)
        self.weights = _obs_weights(obs, models[0].n, cfg.tempered)
        n = models[0].n
        eye = np.eye(n)
        self.L_C = np.stack([m.L_C for m in models])
        self.L_CT = np.ascontiguousarray(self.L_C.transpose(0, 2, 1))
        self.M = np.stack([m.m for m in models])
        self.MT = np.ascontiguousarray(self.M.transpose(0, 2, 1))
        kinv = np.stack([linalg.cho_solve((m.L_K, True), eye) for m in models])
        self.K_inv = 0.5 * (kinv + kinv.transpose(0, 2, 1))
        self.c = np.array([m.hyper.mean_c for m in models])
        self.const = sum(-0.5 * (m.logdet_C + m.logdet_K + 2 * n * _LOG_2PI) for m in models)

    def evaluate(self, state, want_u=True, want_theta=True):
        ut = state.u.T
        z = _bmv(self.L_C, np.ascontiguousarray(ut))
        x = (z + self.c[:, None]).T
        f = mlp_forward(state.mlp, x)
        r = f.T - _bmv(self.M, z)
        w = _bmv(self.K_inv, r)
        total = self.const - 0.5 * float(np.sum(ut * ut)) - 0.5 * float(np.sum(r * w))
        resid = []
        for d in range(len(self.models)):
            e = self.y[d] - z[d, self.idx[d]] - self.c[d]
            s2 = state.sigma2[d]
            nd = self.counts[d]
            total += -0.5 * self.weights[d] * (nd * np.log(s2) + e @ e / s2 + nd * _LOG_2PI)
            resid.append(e)
        grad_u = grad_theta = None
        if want_u or want_theta:
            gx_f, grad_theta = mlp_grads(state.mlp, x, -w.T)
            if want_u:
                g = _bmv(self.MT, w) + gx_f.T
                for d, e in enumerate(resid):
                    np.add.at(g[d], self.idx[d], self.weights[d] * e / state.sigma2[d])
                grad_u = (_bmv(self.L_CT, g) - ut).T
        return total, grad_u, grad_theta


def log_posterior(state: MagixState, models: Sequence[GpComponentModel],
                  obs: ObservationSet, cfg: MagixConfig) -> float:
    """Tempered log posterior of (x(T), theta, sigma2), Gaussian constants included.

    Per component: GP prior of x_d(T), observation likelihood multiplied by
    ``|T| / N_d`` when ``cfg.tempered``, and the Gaussian density of the MLP
    derivative under the conditional derivative GP.
    """
    return _Problem(models, obs, cfg).evaluate(state, False, False)[0]


def grad_log_posterior(state, models, obs, cfg):
    """Gradients of :func:`log_posterior` in ``u`` and ``theta``."""
    _, gu, gt = _Problem(models, obs, cfg).evaluate(state)
    return gu, gt


def update_sigma2(state, models, obs, floors=None):
    """Closed-form maximiser of the objective in each noise variance.

    The tempering weight scales both the log-determinant and the residual
    term, so the maximiser is the plain mean squared residual.
    """
    idx = obs.index_on(models[0].grid)
    out = np.empty(obs.D)
    for d, mdl in enumerate(models):
        x = mdl.to_x(state.u[:, d])
        r = obs.y[d] - x[idx[d]]
        out[d] = r @ r / r.size
    if floors is not None:
        out = np.maximum(out, floors)
    return out


def sigma2_floors(obs):
    return np.array([max(SIGMA2_FLOOR_FRACTION * float(np.var(v)), 1e-12) for v in obs.y])


class _Adam:
    """Adam moments for one parameter block; the step size is supplied per call."""

    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, grad, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        return lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return dict(m=self.m, v=self.v, t=self.t)

    def load(self, d):
        self.m = np.asarray(d["m"], dtype=float).reshape(self.m.shape)
        self.v = np.asarray(d["v"], dtype=float).reshape(self.v.shape)
        self.t = int(d["t"])


def _check_finite(state, l):
    if not (np.all(np.isfinite(state.u)) and np.all(np.isfinite(state.mlp.theta))):
        raise NumericalDivergence(f"non-finite state at iteration {l}")


def _lr(schedule, l):
    a, b, g = schedule
    return a * (b + l) ** (-g)


def _stepper(cfg, shape):
    if cfg.optimizer == "adam":
        return _Adam(shape)
    return None


def _ascend(stepper, grad, lr):
    if stepper is None:
        return lr * grad
    return stepper.step(grad, lr)


@dataclass
class FitResult:
    """Everything produced by a fit, in standardized time."""

    state: MagixState
    models: list
    obs: ObservationSet       # standardized times
    config: MagixConfig
    scale: float
    trace: list = field(default_factory=list)
    optimizer_state: dict = field(default_factory=dict)

    @property
    def x(self):
        """Inferred trajectory on the grid, shape ``(n, D)``."""
        return _trajectory(self.state, self.models)

    @property
    def grid(self):
        return self.models[0].grid

    @property
    def objective(self):
        return self.trace[-1] if self.trace else np.nan


def initialize(obs: ObservationSet, cfg: MagixConfig, grid=None):
    """GP initialisation and theta pre-training.

    ``obs`` and ``grid`` must already be in standardized time. When ``grid`` is
    omitted it is built with :func:`refine_grid`.

    Returns
    -------
    state : MagixState
    models : list of GpComponentModel
    pretrain_trace : list of float
        Objective before and after pre-training.
    """
    if grid is None:
        grid = refine_grid(obs.all_times(), cfg.refine)
    grid = np.asarray(getattr(grid, "times", grid), dtype=float)
    models, cols, s2 = [], [], []
    for d in range(obs.D):
        hyper = fit_empirical_bayes(obs.tau[d], obs.y[d], budget=cfg.gp_budget, nu=cfg.nu)
        mdl = build_component_model(hyper, grid)
        x = predictive_mean(hyper, obs.tau[d], obs.y[d], grid)
        models.append(mdl)
        cols.append(mdl.to_u(x))
        s2.append(hyper.sigma2)
    D = obs.D
    mlp = mlp_init((D,) + tuple(cfg.hidden) + (D,), seed=cfg.seed, gain=cfg.init_gain)
    x = np.column_stack([mdl.to_x(u) for mdl, u in zip(models, cols)])
    if cfg.normalize:
        dx = np.column_stack([mdl.derivative_mean(x[:, d]) for d, mdl in enumerate(models)])
        # one input scale for all components keeps the geometry of the state
        # space; per-component input scales inflate low-variance directions
        spread = np.full(D, np.sqrt(np.mean(x.var(axis=0))))
        mlp.set_normalization(x.mean(axis=0), _positive(spread), _positive(dx.std(axis=0)))
    floors = sigma2_floors(obs)
    state = MagixState(np.column_stack(cols), mlp, np.maximum(np.array(s2), floors), 0)
    prob = _Problem(models, obs, cfg)
    stepper = _stepper(cfg, mlp.theta.shape)
    before = prob.evaluate(state, want_u=False)[0]
    for l in range(1, cfg.pretrain_iter + 1):
        _, _, gt = prob.evaluate(state, want_u=False)
        state.mlp.theta += _ascend(stepper, gt, _lr(cfg.pretrain_lr, l))
        _check_finite(state, 0)
    after = prob.evaluate(state, False, False)[0]
    return state, models, [before, after]


def _snapshot(state, steppers):
    moments = [None if st is None else (st.m.copy(), st.v.copy(), st.t) for st in steppers]
    return state.u.copy(), state.mlp.theta.copy(), state.sigma2.copy(), moments


def _restore(state, steppers, snap):
    u, theta, sigma2, moments = snap
    state.u[:] = u
    state.mlp.theta[:] = theta
    state.sigma2 = sigma2
    for st, mom in zip(steppers, moments):
        if st is not None:
            st.m, st.v, st.t = mom


def _iterate(state, prob, result, floors, st_theta, st_u, l):
    cfg = result.config
    for block in (("theta", "u") if cfg.update_order == "theta-x" else ("u", "theta")):
        if block == "theta":
            _, _, gt = prob.evaluate(state, want_u=False)
            state.mlp.theta += _ascend(st_theta, gt, state.step_scale * _lr(cfg.theta_lr, l))
        else:
            _, gu, _ = prob.evaluate(state, want_theta=False)
            state.u += _ascend(st_u, gu, state.step_scale * _lr(cfg.x_lr, l))
        _check_finite(state, l)
    state.sigma2 = update_sigma2(state, result.models, result.obs, floors)
    return prob.evaluate(state, False, False)[0]


def _run(result: FitResult, n_iter, callback=None):
    cfg = result.config
    state = result.state
    prob = _Problem(result.models, result.obs, cfg)
    floors = sigma2_floors(result.obs)
    st_theta = _stepper(cfg, state.mlp.theta.shape)
    st_u = _stepper(cfg, state.u.shape)
    if cfg.optimizer == "adam" and result.optimizer_state:
        st_theta.load(result.optimizer_state["theta"])
        st_u.load(result.optimizer_state["u"])
    if not result.trace:
        result.trace.append(prob.evaluate(state, False, False)[0])
    for _ in range(n_iter):
        l = state.iteration + 1
        prev = result.trace[-1]
        snap = _snapshot(state, (st_theta, st_u)) if cfg.safeguard else None
        try:
            value = _iterate(state, prob, result, floors, st_theta, st_u, l)
        except NumericalDivergence:
            if not cfg.safeguard:
                raise
            value = np.nan
        if cfg.safeguard:
            if value >= prev:
                state.step_scale = min(1.0, 1.1 * state.step_scale)
            else:
                _restore(state, (st_theta, st_u), snap)
                state.step_scale *= 0.5
                value = prev
        state.iteration = l
        result.trace.append(value)
        if not np.isfinite(value):
            raise NumericalDivergence(f"objective is {value} at iteration {l}")
        if callback is not None:
            callback(l, value)
    if cfg.optimizer == "adam":
        result.optimizer_state = dict(theta=st_theta.state_dict(), u=st_u.state_dict())
    return result


def fit(obs: ObservationSet, cfg: MagixConfig, grid=None, scale=1.0, callback=None):
    """Initialise and run ``cfg.n_iter`` block ascent iterations.

    ``obs`` and ``grid`` are in standardized time; ``scale`` is only recorded.
    """
    state, models, _ = initialize(obs, cfg, grid)
    result = FitResult(state, models, obs, cfg, scale)
    return _run(result, cfg.n_iter, callback)


def resume(result: FitResult, n_iter, callback=None):
    """Continue a fit for ``n_iter`` more iterations, keeping the numbering."""
    return _run(result, n_iter, callback)


def fit_restarts(obs, cfg, seeds, grid=None, scale=1.0):
    """Fit once per seed and keep the run with the highest final objective."""
    best = None
    for s in seeds:
        try:
            res = fit(obs, replace(cfg, seed=int(s)), grid, scale)
        except NumericalDivergence as exc:
            log.warning("seed %s diverged: %s", s, exc)
            continue
        if best is None or res.objective > best.objective:
            best = res
    if best is None:
        raise NumericalDivergence("every restart diverged")
    return best
