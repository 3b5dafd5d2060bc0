"""Per-component Gaussian process machinery.

Constant prior mean, Matérn covariance, Gaussian noise. Besides ordinary GP
regression this builds the conditional law of the derivative process given
the function values on a grid, which is what the manifold constraint needs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .kernels import MaternParams, kernel, kernel_d1, kernel_d1d2

__all__ = [
    "GpHyper",
    "GpComponentModel",
    "FactorizationError",
    "DegenerateDataError",
    "jittered_cholesky",
    "marginal_log_likelihood",
    "fit_empirical_bayes",
    "predictive_mean",
    "build_component_model",
    "SIGMA2_FLOOR_FRACTION",
]

log = logging.getLogger(__name__)

SIGMA2_FLOOR_FRACTION = 1e-6
JITTER_LEVELS = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
_LOG_2PI = np.log(2.0 * np.pi)


class FactorizationError(np.linalg.LinAlgError):
    """Cholesky failed even at the largest jitter level."""


class DegenerateDataError(ValueError):
    """Observations carry no information for hyperparameter fitting."""


@dataclass(frozen=True)
class GpHyper:
    matern: MaternParams
    mean_c: float = 0.0
    sigma2: float = 1e-2

    def __post_init__(self):
        if not self.sigma2 > 0.0:
            raise ValueError("sigma2 must be positive")


def jittered_cholesky(a, levels=JITTER_LEVELS):
    """Lower Cholesky factor of ``a + lam * mean(diag(a)) * I``.

    ``lam`` runs through ``levels`` until the factorization succeeds.

    Returns
    -------
    L : ndarray
    jitter : float
        The absolute amount added to the diagonal.
    """
    a = np.asarray(a, dtype=float)
    scale = float(np.mean(np.diag(a)))
    if not scale > 0.0 or not np.all(np.isfinite(a)):
        raise FactorizationError("matrix has non-positive or non-finite diagonal")
    eye = np.eye(a.shape[0])
    for lam in levels:
        jitter = lam * scale
        try:
            return linalg.cholesky(a + jitter * eye, lower=True), jitter
        except linalg.LinAlgError:
            continue
    raise FactorizationError(f"Cholesky failed with jitter up to {levels[-1]:g}*mean(diag)")


def _obs_cov(hyper: GpHyper, tau):
    tau = np.asarray(tau, dtype=float)
    cov = kernel(hyper.matern, tau[:, None], tau[None, :])
    cov[np.diag_indices_from(cov)] += hyper.sigma2
    return cov


def marginal_log_likelihood(hyper: GpHyper, tau, y):
    """``log N(y; c 1, K(tau, tau) + sigma2 I)``."""
    y = np.asarray(y, dtype=float)
    if y.size < 2 or y.size != np.size(tau):
        raise ValueError("need matching tau and y with at least two points")
    L, _ = jittered_cholesky(_obs_cov(hyper, tau))
    alpha = linalg.solve_triangular(L, y - hyper.mean_c, lower=True)
    return float(-0.5 * alpha @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * y.size * _LOG_2PI)


def _unpack(z, nu):
    return GpHyper(MaternParams(omega2=float(np.exp(z[0])), rho=float(np.exp(z[1])), nu=nu),
                   mean_c=float(z[3]), sigma2=float(np.exp(z[2])))


def fit_empirical_bayes(tau, y, init: GpHyper | None = None, budget=200, nu=2.01,
                        n_starts=3):
    """Maximise the marginal likelihood over (log omega2, log rho, log sigma2, c).

    Local L-BFGS-B runs are started from ``init`` (when given) and from
    ``n_starts`` lengthscales spread log-uniformly over
    ``[span/20, span]``; the best run wins. The noise variance is bounded
    below by ``1e-6 * var(y)``.

    Raises
    ------
    DegenerateDataError
        If ``y`` is constant.
    """
    tau = np.asarray(tau, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.size < 3 or y.size != tau.size:
        raise ValueError("need at least three observations with matching times")
    var = float(np.var(y))
    if not var > 0.0:
        raise DegenerateDataError("observations are constant")
    if init is not None:
        nu = init.matern.nu
    span = float(tau.max() - tau.min())
    floor = SIGMA2_FLOOR_FRACTION * var
    bounds = [
        (np.log(1e-4 * var), np.log(1e4 * var)),
        (np.log(1e-3 * span), np.log(1e2 * span)),
        (np.log(floor), np.log(1e2 * var)),
        (float(y.min() - 10.0 * np.sqrt(var)), float(y.max() + 10.0 * np.sqrt(var))),
    ]

    def negll(z):
        try:
            return -marginal_log_likelihood(_unpack(z, nu), tau, y)
        except (np.linalg.LinAlgError, ValueError):
            return 1e300

    starts = []
    if init is not None:
        z0 = np.array([np.log(init.matern.omega2), np.log(init.matern.rho),
                       np.log(max(init.sigma2, floor)), init.mean_c])
        starts.append(np.clip(z0, [b[0] for b in bounds], [b[1] for b in bounds]))
    for rho in np.geomspace(span / 20.0, span, n_starts):
        starts.append(np.array([np.log(var), np.log(rho), np.log(0.1 * var), float(y.mean())]))

    best_z, best_f = None, np.inf
    for z0 in starts:
        res = optimize.minimize(negll, z0, method="L-BFGS-B", bounds=bounds,
                                options=dict(maxiter=budget))
        z, fz = (res.x, res.fun) if res.fun <= negll(z0) else (z0, negll(z0))
        if fz < best_f:
            best_z, best_f = z, fz
    if init is not None and -best_f < marginal_log_likelihood(init, tau, y):
        return init
    hyper = _unpack(best_z, nu)
    log.debug("empirical Bayes: %s (loglik %.4f)", hyper, -best_f)
    return hyper


def predictive_mean(hyper: GpHyper, tau, y, grid):
    """Posterior mean of the latent function at ``grid``."""
    tau = np.asarray(tau, dtype=float)
    y = np.asarray(y, dtype=float)
    grid = np.asarray(getattr(grid, "times", grid), dtype=float)
    L, _ = jittered_cholesky(_obs_cov(hyper, tau))
    alpha = linalg.cho_solve((L, True), y - hyper.mean_c)
    cross = kernel(hyper.matern, grid[:, None], tau[None, :])
    return hyper.mean_c + cross @ alpha


@dataclass(frozen=True)
class GpComponentModel:
    """GP prior of one component on the discretisation grid, precomputed.

    Attributes
    ----------
    C, L_C : prior covariance of x(T) and the Cholesky factor of ``C + jitter_C I``.
    m : ``K'(T,T) C^{-1}``; maps centred values to the conditional derivative mean.
    K, L_K : conditional covariance of x'(T) given x(T) and the factor of
        ``K + jitter_K I``.
    """

    hyper: GpHyper
    grid: np.ndarray
    C: np.ndarray
    L_C: np.ndarray
    jitter_C: float
    m: np.ndarray
    K: np.ndarray
    L_K: np.ndarray
    jitter_K: float

    @property
    def n(self):
        return self.grid.size

    @property
    def logdet_C(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.L_C))))

    @property
    def logdet_K(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.L_K))))

    def to_x(self, u):
        """Map whitened coordinates to function values."""
        return self.hyper.mean_c + self.L_C @ u

    def to_u(self, x):
        return linalg.solve_triangular(self.L_C, np.asarray(x, dtype=float) - self.hyper.mean_c,
                                       lower=True)

    def derivative_mean(self, x):
        """Conditional mean of x'(T) given x(T) = x."""
        return self.m @ (np.asarray(x, dtype=float) - self.hyper.mean_c)


def build_component_model(hyper: GpHyper, grid) -> GpComponentModel:
    grid = np.asarray(getattr(grid, "times", grid), dtype=float)
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    s, t = grid[:, None], grid[None, :]
    p = hyper.matern
    C = kernel(p, s, t)
    dC = kernel_d1(p, s, t)      # cov(x'(s), x(t))
    ddC = kernel_d1d2(p, s, t)   # cov(x'(s), x'(t))
    L_C, jit_c = jittered_cholesky(C)
    m = linalg.cho_solve((L_C, True), dC.T).T
    K = ddC - m @ dC.T
    K = 0.5 * (K + K.T)
    L_K, jit_k = jittered_cholesky(K)
    for a in (C, L_C, m, K, L_K):
        a.setflags(write=False)
    return GpComponentModel(hyper, grid, C, L_C, jit_c, m, K, L_K, jit_k)
