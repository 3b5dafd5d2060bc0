"""scikit-learn style front end."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dynamics import mlp_forward
from .inference import MagixConfig, ObservationSet, fit, refine_grid, resume, standardize_time
from .integrate import DivergenceError, integrate

__all__ = ["MagixODE"]


class MagixODE(BaseEstimator):
    """Learn an ODE vector field from noisy, possibly sparse trajectories.

    The vector field is a ReLU network; the trajectory on a dense grid and the
    noise levels are estimated jointly by MAP block coordinate ascent under
    a GP prior constrained to agree with the network.

    Parameters
    ----------
    hidden : tuple of int
        Hidden layer widths.
    n_iter : int
        Main-loop iterations.
    refine : int
        Grid points per gap between the closest observation times.
    spacing : float
        Neighbouring grid points are this far apart after standardizing time.
    theta_lr, x_lr : tuple
        ``(a, b, gamma)`` step schedules ``a * (b + l) ** -gamma``.
    pretrain_iter : int
        Network-only ascent steps after the GP initialisation.
    optimizer : {"adam", "sgd"}
    update_order : {"theta-x", "x-theta"}
    tempered : bool
        Weight each observation block by grid size over observation count.
    normalize : bool
        Fixed input/output scaling of the network set at initialisation.
    init_gain : float
        Multiplier on the He-uniform bound of the initial weights.
    safeguard : bool
        Undo iterations that lower the objective and shrink the step.
    seed : int
    substeps : int
        RK4 steps per output interval in :meth:`predict` and :meth:`reconstruct`.

    Attributes
    ----------
    result_ : FitResult
    grid_ : ndarray
        Discretization grid in the caller's time units.
    x_ : ndarray of shape (n_grid, D)
        Inferred trajectory on ``grid_``.
    sigma2_ : ndarray of shape (D,)
    scale_ : float
        Standardized time per unit of caller time.
    trace_ : list of float
        Objective after initialisation and after every iteration.

    Examples
    --------
    >>> t = np.linspace(0, 5, 21)
    >>> Y = np.column_stack([np.sin(t), np.cos(t)])
    >>> est = MagixODE(hidden=(16,), n_iter=10, pretrain_iter=10).fit(t, Y)
    >>> est.x_.shape
    (81, 2)
    """

    def __init__(self, hidden=(512,), n_iter=2500, refine=4, spacing=0.05,
                 theta_lr=(0.005, 0.0, 0.6), x_lr=(0.05, 500.0, 0.6), pretrain_iter=1000,
                 optimizer="adam", update_order="theta-x", tempered=True, normalize=False,
                 init_gain=0.2, safeguard=True, seed=0, substeps=10):
        self.hidden = hidden
        self.n_iter = n_iter
        self.refine = refine
        self.spacing = spacing
        self.theta_lr = theta_lr
        self.x_lr = x_lr
        self.pretrain_iter = pretrain_iter
        self.optimizer = optimizer
        self.update_order = update_order
        self.tempered = tempered
        self.normalize = normalize
        self.init_gain = init_gain
        self.safeguard = safeguard
        self.seed = seed
        self.substeps = substeps

    def _config(self):
        return MagixConfig(
            n_iter=self.n_iter, refine=self.refine, spacing=self.spacing, hidden=self.hidden,
            theta_lr=self.theta_lr, x_lr=self.x_lr, pretrain_iter=self.pretrain_iter,
            optimizer=self.optimizer, update_order=self.update_order, tempered=self.tempered,
            normalize=self.normalize, init_gain=self.init_gain,
            safeguard=self.safeguard, seed=self.seed)

    def fit(self, t, Y, grid=None):
        """Fit to observations ``Y[i, d]`` at times ``t[i]``; NaN marks missing.

        Parameters
        ----------
        t : array_like of shape (n,)
        Y : array_like of shape (n, D)
        grid : array_like, optional
            Discretization grid containing every observation time. Defaults
            to a ``refine``-times denser grid over the observation span.
        """
        t = np.asarray(t, dtype=float).ravel()
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.shape[0] != t.size:
            raise ValueError(f"t has {t.size} entries but Y has {Y.shape[0]} rows")
        if not np.all(np.isfinite(t)):
            raise ValueError("t must be finite")
        if np.any(np.isinf(Y)):
            raise ValueError("Y must be finite or NaN")
        order = np.argsort(t, kind="stable")
        obs = ObservationSet.from_matrix(t[order], Y[order])
        cfg = self._config()
        raw = refine_grid(obs.all_times(), cfg.refine) if grid is None else np.asarray(grid, float)
        std, scale = standardize_time(raw, cfg.spacing)
        self.result_ = fit(obs.scaled(scale), cfg, grid=std, scale=scale)
        self.n_features_in_ = Y.shape[1]
        self._sync()
        return self

    def partial_fit(self, n_iter):
        """Run ``n_iter`` more iterations on the current fit."""
        check_is_fitted(self, "result_")
        resume(self.result_, n_iter)
        self._sync()
        return self

    def _sync(self):
        r = self.result_
        self.scale_ = r.scale
        self.grid_ = r.grid / r.scale
        self.x_ = r.x
        self.sigma2_ = r.state.sigma2.copy()
        self.trace_ = list(r.trace)

    def vector_field(self, X):
        """Learned derivative in the caller's time units at states ``X``."""
        check_is_fitted(self, "result_")
        return mlp_forward(self.result_.state.mlp, np.asarray(X, dtype=float)) * self.scale_

    def _integrate(self, x0, start, times):
        mlp = self.result_.state.mlp
        std = np.concatenate([[start], np.asarray(times, dtype=float)]) * self.scale_
        keep = np.concatenate([[True], np.diff(std) > 0])
        out = np.full((std.size, x0.size), np.nan)
        try:
            vals = integrate(lambda x, s: mlp_forward(mlp, x), x0, std[keep], self.substeps).values
            out[keep] = vals
        except DivergenceError as exc:
            k = len(exc.partial.grid)
            out[np.flatnonzero(keep)[:k]] = exc.partial.values
        # repeated times copy the previous row
        for i in np.flatnonzero(~keep):
            out[i] = out[i - 1]
        return out[1:]

    def predict(self, t):
        """Inferred trajectory at ``t``; times past the grid are forecast.

        Inside the grid the inferred values are linearly interpolated. Rows of
        a forecast that blew up are NaN.
        """
        check_is_fitted(self, "result_")
        t = np.asarray(t, dtype=float).ravel()
        if np.any(t < self.grid_[0] - 1e-12 * max(1.0, abs(self.grid_[0]))):
            raise ValueError("cannot predict before the start of the grid")
        out = np.empty((t.size, self.x_.shape[1]))
        inside = t <= self.grid_[-1]
        for d in range(out.shape[1]):
            out[inside, d] = np.interp(t[inside], self.grid_, self.x_[:, d])
        if (~inside).any():
            order = np.argsort(t[~inside], kind="stable")
            ahead = t[~inside][order]
            vals = self._integrate(self.x_[-1], self.grid_[-1], ahead)
            idx = np.flatnonzero(~inside)[order]
            out[idx] = vals
        return out

    def reconstruct(self, t):
        """Integrate the learned field from the inferred initial state.

        ``t`` must be increasing and start at or after the first grid time.
        """
        check_is_fitted(self, "result_")
        t = np.asarray(t, dtype=float).ravel()
        if t.size and (np.any(np.diff(t) < 0) or t[0] < self.grid_[0]):
            raise ValueError("t must be increasing and not precede the grid")
        return self._integrate(self.x_[0], self.grid_[0], t)

    def score(self, t, Y):
        """Negative RMSE of :meth:`predict` over the non-missing entries."""
        pred = self.predict(t)
        Y = np.asarray(Y, dtype=float).reshape(pred.shape)
        mask = ~np.isnan(Y)
        return -float(np.sqrt(np.mean((pred[mask] - Y[mask]) ** 2)))
