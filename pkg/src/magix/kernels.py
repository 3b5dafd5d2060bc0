"""Matérn covariance with fractional smoothness and its time derivatives.

The modified Bessel function of the second kind is evaluated with Temme's
series for small arguments and Steed's continued fraction for large ones,
followed by upward recurrence in the order. Everything is vectorised over
the argument so that covariance matrices can be built in one pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MaternParams",
    "bessel_k",
    "bessel_k_orders",
    "kernel",
    "kernel_d1",
    "kernel_d2",
    "kernel_d1d2",
    "joint_covariance",
]

_EPS = 1e-16
_MAX_ITER = 10000
_EULER = 0.5772156649015329
# Taylor coefficients of 1/Gamma(z) (z^3 ... z^7)
_RG = (-0.6558780715202538, -0.0420026350340952, 0.1665386113822915,
       -0.0421977345555443, -0.0096219715278770)
# K_nu(x) * x^nu is ~Gamma(nu) 2^(nu-1) near 0; beyond this x the value underflows
_X_UNDERFLOW = 700.0


@dataclass(frozen=True)
class MaternParams:
    """Hyperparameters of a one-dimensional Matérn kernel.

    Parameters
    ----------
    omega2 : float
        Marginal variance.
    rho : float
        Lengthscale, in (standardized) time units.
    nu : float
        Smoothness. 2.01 keeps sample paths only just twice differentiable.
    """

    omega2: float = 1.0
    rho: float = 1.0
    nu: float = 2.01

    def __post_init__(self):
        if not self.nu > 1.0:
            raise ValueError(f"nu must exceed 1, got {self.nu}")
        if not self.omega2 > 0.0:
            raise ValueError(f"omega2 must be positive, got {self.omega2}")
        if not self.rho > 0.0:
            raise ValueError(f"rho must be positive, got {self.rho}")


def _gamma_terms(mu):
    """Return (gam1, gam2, 1/Gamma(1+mu), 1/Gamma(1-mu)) for |mu| <= 1/2."""
    if abs(mu) < 1e-3:
        m2 = mu * mu
        gam1 = -(_EULER + _RG[1] * m2 + _RG[3] * m2 * m2)
        gam2 = 1.0 + _RG[0] * m2 + _RG[2] * m2 * m2 + _RG[4] * m2 * m2 * m2
    else:
        gam1 = (1.0 / math.gamma(1.0 - mu) - 1.0 / math.gamma(1.0 + mu)) / (2.0 * mu)
        gam2 = (1.0 / math.gamma(1.0 - mu) + 1.0 / math.gamma(1.0 + mu)) / 2.0
    gampl = gam2 - mu * gam1
    gammi = gam2 + mu * gam1
    return gam1, gam2, gampl, gammi


def _temme(mu, x):
    """K_mu and K_{mu+1} for x < 2 via Temme's series, |mu| <= 1/2."""
    gam1, gam2, gampl, gammi = _gamma_terms(mu)
    x2 = 0.5 * x
    pimu = math.pi * mu
    fact = 1.0 if abs(pimu) < _EPS else pimu / math.sin(pimu)
    d = -np.log(x2)
    e = mu * d
    small = np.abs(e) < _EPS
    fact2 = np.where(small, 1.0, np.sinh(e) / np.where(small, 1.0, e))
    ff = fact * (gam1 * np.cosh(e) + gam2 * fact2 * d)
    total = ff.copy()
    e = np.exp(e)
    p = 0.5 * e / gampl
    q = 0.5 / (e * gammi)
    c = np.ones_like(x)
    d = x2 * x2
    total1 = p.copy()
    active = np.ones(x.shape, dtype=bool)
    for i in range(1, _MAX_ITER):
        ff = (i * ff + p + q) / (i * i - mu * mu)
        c = c * d / i
        p = p / (i - mu)
        q = q / (i + mu)
        delta = c * ff
        total = np.where(active, total + delta, total)
        total1 = np.where(active, total1 + c * (p - i * ff), total1)
        active &= np.abs(delta) >= np.abs(total) * _EPS
        if not active.any():
            break
    else:  # pragma: no cover
        raise ArithmeticError("Temme series failed to converge")
    return total, total1 * 2.0 / x


def _steed(mu, x):
    """K_mu and K_{mu+1} for x >= 2 via Steed's continued fraction CF2."""
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = d.copy()
    delh = d.copy()
    q1 = np.zeros_like(x)
    q2 = np.ones_like(x)
    a1 = 0.25 - mu * mu
    q = np.full_like(x, a1)
    c = a1
    a = -a1
    s = 1.0 + q * delh
    active = np.ones(x.shape, dtype=bool)
    for i in range(2, _MAX_ITER):
        a -= 2 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1 = q2
        q2 = qnew
        q = q + c * qnew
        b = b + 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        dels = q * delh
        h = np.where(active, h + delh, h)
        s = np.where(active, s + dels, s)
        active &= np.abs(dels) >= np.abs(s) * _EPS
        if not active.any():
            break
    else:  # pragma: no cover
        raise ArithmeticError("continued fraction failed to converge")
    h = a1 * h
    kmu = np.sqrt(np.pi / (2.0 * x)) * np.exp(-x) / s
    kmu1 = kmu * (mu + x + 0.5 - h) / x
    return kmu, kmu1


def bessel_k_orders(nu, x, count=1):
    """Evaluate K_{nu}, K_{nu+1}, ..., K_{nu+count-1} at ``x``.

    Parameters
    ----------
    nu : float
        Lowest order, ``0 <= nu < 10``.
    x : array_like
        Positive arguments.
    count : int
        Number of consecutive orders to return.

    Returns
    -------
    ndarray, shape ``(count,) + x.shape``
    """
    nu = float(nu)
    if not 0.0 <= nu < 10.0:
        raise ValueError(f"order {nu} outside supported range [0, 10)")
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0.0)):
        raise ValueError("bessel_k requires x > 0")
    shape = x.shape
    x = x.ravel()
    nl = int(nu + 0.5)
    mu = nu - nl
    kmu = np.empty_like(x)
    kmu1 = np.empty_like(x)
    lo = x < 2.0
    mid = ~lo & (x <= _X_UNDERFLOW)
    if lo.any():
        kmu[lo], kmu1[lo] = _temme(mu, x[lo])
    if mid.any():
        kmu[mid], kmu1[mid] = _steed(mu, x[mid])
    hi = x > _X_UNDERFLOW
    kmu[hi] = 0.0
    kmu1[hi] = 0.0
    out = np.empty((nl + count + 1, x.size))
    out[0], out[1] = kmu, kmu1
    xi2 = np.where(hi, 0.0, 2.0 / x)
    for i in range(1, nl + count):
        out[i + 1] = (mu + i) * xi2 * out[i] + out[i - 1]
    return out[nl:nl + count].reshape((count,) + shape)


def bessel_k(nu, x):
    """Modified Bessel function of the second kind K_nu(x).

    >>> round(float(bessel_k(0.5, 1.0)), 12)
    0.461068504447
    """
    out = bessel_k_orders(nu, x, 1)[0]
    return out if out.ndim else float(out)


def _radial(p: MaternParams, d):
    """Return r, k(r), dk/dr and d2k/dr2 for distances ``d > 0``.

    Uses d/dr[r^nu K_nu] = -r^nu K_{nu-1} which avoids the cancellation in the
    product-rule form.
    """
    nu = p.nu
    scale = math.sqrt(2.0 * nu) / p.rho
    r = scale * d
    # orders nu-2, nu-1, nu; K_{-a} = K_a
    if nu >= 2.0:
        k_m2, k_m1, k_0 = bessel_k_orders(nu - 2.0, r, 3)
    else:
        k_m2 = bessel_k_orders(2.0 - nu, r, 1)[0]
        k_m1, k_0 = bessel_k_orders(nu - 1.0, r, 2)
    coef = p.omega2 * 2.0 ** (1.0 - nu) / math.gamma(nu)
    with np.errstate(over="ignore", invalid="ignore"):
        rnu1 = r ** (nu - 1.0)
        k = coef * rnu1 * r * k_0
        dk = -coef * rnu1 * r * k_m1
        d2k = -coef * rnu1 * (k_m1 - r * k_m2)
    far = r > _X_UNDERFLOW
    if far.any():
        k[far] = dk[far] = d2k[far] = 0.0
    return scale, k, dk, d2k


def _prepare(t1, t2):
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    diff = t1 - t2
    return diff, np.abs(diff)


def _apply(p, t1, t2, which):
    diff, d = _prepare(t1, t2)
    out = np.empty(d.shape)
    flat = d.ravel()
    res = out.reshape(-1)
    # below this the series terms under/overflow; the limit value is exact to double precision
    zero = flat * (math.sqrt(2.0 * p.nu) / p.rho) < 1e-100
    if which == 0:
        res[zero] = p.omega2
    elif which == 1:
        res[zero] = 0.0
    else:
        res[zero] = p.omega2 * (2.0 * p.nu / p.rho ** 2) / (2.0 * (p.nu - 1.0))
    nz = ~zero
    if nz.any():
        uniq, inv = np.unique(flat[nz], return_inverse=True)
        scale, k, dk, d2k = _radial(p, uniq)
        if which == 0:
            vals = k[inv]
        elif which == 1:
            vals = (dk * scale)[inv] * np.sign(diff.ravel()[nz])
        else:
            vals = -(d2k * scale * scale)[inv]
        res[nz] = vals
    return out if out.ndim else float(out)


def kernel(p: MaternParams, t1, t2):
    """Covariance between times ``t1`` and ``t2`` (broadcast)."""
    return _apply(p, t1, t2, 0)


def kernel_d1(p: MaternParams, t1, t2):
    """Partial derivative of the covariance in its first time argument."""
    return _apply(p, t1, t2, 1)


def kernel_d2(p: MaternParams, t1, t2):
    """Partial derivative in the second time argument; equals ``-kernel_d1``."""
    out = _apply(p, t1, t2, 1)
    return -out


def kernel_d1d2(p: MaternParams, t1, t2):
    """Mixed second derivative in both time arguments."""
    return _apply(p, t1, t2, 2)


def joint_covariance(p: MaternParams, times):
    """Joint covariance of (X(T), X'(T)) as a ``2n x 2n`` matrix."""
    t = np.asarray(times, dtype=float)
    s, u = t[:, None], t[None, :]
    c = kernel(p, s, u)
    dc = kernel_d1(p, s, u)  # cov(X'(s), X(u))
    ddc = kernel_d1d2(p, s, u)
    return np.block([[c, dc.T], [dc, ddc]])
