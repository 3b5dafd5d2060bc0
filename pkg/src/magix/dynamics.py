"""Derivative functions: benchmark ODE systems and the trainable MLP."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "OdeSystem",
    "fitzhugh_nagumo",
    "lotka_volterra",
    "hes1",
    "hamiltonian",
    "get_system",
    "eval_system",
    "MlpDynamics",
    "mlp_init",
    "mlp_forward",
    "mlp_grads",
]


@dataclass(frozen=True)
class OdeSystem:
    """A known autonomous ODE used to generate benchmark data.

    ``f`` maps a state (last axis of length ``dim``) and a time to the
    derivative. For log-transformed systems both the state and ``x0`` are in
    log coordinates and ``f`` is the pushforward ``d log x / dt``.
    """

    name: str
    dim: int
    f: Callable[[np.ndarray, float], np.ndarray]
    x0: np.ndarray
    t_end: float
    log_transformed: bool = False
    params: dict = field(default_factory=dict)


def fitzhugh_nagumo(a=0.2, b=0.2, c=3.0):
    def f(x, t=0.0):
        x = np.asarray(x, dtype=float)
        v, r = x[..., 0], x[..., 1]
        return np.stack([c * (v - v ** 3 / 3.0 + r), -(v - a + b * r) / c], axis=-1)

    return OdeSystem("fn", 2, f, np.array([-1.0, 1.0]), 40.0,
                     params=dict(a=a, b=b, c=c))


def lotka_volterra(a=1.5, b=1.0, c=1.0, d=3.0):
    def f(z, t=0.0):
        x = np.exp(np.asarray(z, dtype=float))
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([a - b * x2, c * x1 - d], axis=-1)

    x0 = np.log([5.0, 0.2])
    return OdeSystem("lv", 2, f, x0, 12.0, log_transformed=True,
                     params=dict(a=a, b=b, c=c, d=d))


def hes1(a=0.022, b=0.3, c=0.031, d=0.028, e=0.5, f_=20.0, g=0.3):
    def f(z, t=0.0):
        x = np.exp(np.asarray(z, dtype=float))
        p, m, h = x[..., 0], x[..., 1], x[..., 2]
        hill = 1.0 / (1.0 + p * p)
        return np.stack([
            (-a * p * h + b * m - c * p) / p,
            (-d * m + e * hill) / m,
            (-a * p * h + f_ * hill - g * h) / h,
        ], axis=-1)

    x0 = np.log([1.438575, 2.037488, 17.90385])
    return OdeSystem("hes1", 3, f, x0, 480.0, log_transformed=True,
                     params=dict(a=a, b=b, c=c, d=d, e=e, f=f_, g=g))


def hamiltonian(dim, x0=None, t_end=16.0):
    """H(q, p) = p.p/2 + q.q with state ordered as (p, q)."""
    if dim % 2:
        raise ValueError("Hamiltonian system needs an even dimension")
    n = dim // 2

    def f(x, t=0.0):
        x = np.asarray(x, dtype=float)
        p, q = x[..., :n], x[..., n:]
        return np.concatenate([-2.0 * q, p], axis=-1)

    if x0 is None:
        x0 = np.zeros(dim)
    return OdeSystem(f"hamiltonian:{dim}", dim, f, np.asarray(x0, dtype=float), t_end)


def hamiltonian_energy(x):
    x = np.asarray(x, dtype=float)
    n = x.shape[-1] // 2
    p, q = x[..., :n], x[..., n:]
    return 0.5 * np.sum(p * p, axis=-1) + np.sum(q * q, axis=-1)


def get_system(name, seed=None):
    """Look up a benchmark by name: ``fn``, ``lv``, ``hes1`` or ``hamiltonian:D``.

    The Hamiltonian initial state is drawn from a standard normal with
    ``seed``.
    """
    name = name.lower()
    if name == "fn":
        return fitzhugh_nagumo()
    if name == "lv":
        return lotka_volterra()
    if name == "hes1":
        return hes1()
    if name.startswith("hamiltonian"):
        _, _, dim = name.partition(":")
        dim = int(dim or 10)
        x0 = np.random.default_rng(seed).standard_normal(dim)
        return hamiltonian(dim, x0)
    raise ValueError(f"unknown system {name!r}")


def eval_system(sys: OdeSystem, x, t=0.0):
    """Evaluate the derivative of ``sys`` at state ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != sys.dim:
        raise ValueError(f"state has {x.shape[-1]} components, system has {sys.dim}")
    return sys.f(x, t)


@dataclass
class MlpDynamics:
    """Fully connected ReLU network ``f: R^D -> R^D``.

    ``theta`` is the flat parameter vector; ``weights`` and ``biases`` are views
    into it, so in-place updates of ``theta`` are seen by the layers.

    ``in_shift``, ``in_scale`` and ``out_scale`` are fixed (untrained)
    normalisations: the network sees ``(x - in_shift) / in_scale`` and its raw
    output is multiplied by ``out_scale``. They default to the identity.
    """

    widths: tuple
    theta: np.ndarray
    in_shift: np.ndarray = None
    in_scale: np.ndarray = None
    out_scale: np.ndarray = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2:
            raise ValueError("need at least input and output widths")
        if self.widths[0] != self.widths[-1]:
            raise ValueError("input and output widths must both equal D")
        self.theta = np.ascontiguousarray(self.theta, dtype=float)
        if self.theta.shape != (self.n_params,):
            raise ValueError(f"theta has {self.theta.size} entries, expected {self.n_params}")
        D = self.widths[0]
        self.in_shift = np.zeros(D) if self.in_shift is None else np.asarray(self.in_shift, float)
        self.in_scale = np.ones(D) if self.in_scale is None else np.asarray(self.in_scale, float)
        self.out_scale = np.ones(D) if self.out_scale is None else np.asarray(self.out_scale, float)
        self._bind()

    @property
    def n_params(self):
        w = self.widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    def _bind(self):
        self.weights, self.biases = [], []
        pos = 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            self.weights.append(self.theta[pos:pos + a * b].reshape(a, b))
            pos += a * b
            self.biases.append(self.theta[pos:pos + b])
            pos += b

    def copy(self):
        return MlpDynamics(self.widths, self.theta.copy(), self.in_shift.copy(),
                           self.in_scale.copy(), self.out_scale.copy())

    def set_normalization(self, in_shift, in_scale, out_scale):
        self.in_shift = np.asarray(in_shift, dtype=float).copy()
        self.in_scale = np.asarray(in_scale, dtype=float).copy()
        self.out_scale = np.asarray(out_scale, dtype=float).copy()

    def __call__(self, x):
        return mlp_forward(self, x)


def mlp_init(widths: Sequence[int], seed=None, gain=1.0) -> MlpDynamics:
    """He-uniform weights, bound ``gain * sqrt(6 / fan_in)``, and zero biases."""
    rng = np.random.default_rng(seed)
    widths = tuple(int(w) for w in widths)
    parts = []
    for a, b in zip(widths[:-1], widths[1:]):
        bound = gain * np.sqrt(6.0 / a)
        parts.append(rng.uniform(-bound, bound, size=a * b))
        parts.append(np.zeros(b))
    return MlpDynamics(widths, np.concatenate(parts))


def _forward(m: MlpDynamics, x):
    h = (x - m.in_shift) / m.in_scale
    acts = [h]
    pre = []
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = h @ w + b
        if i < last:
            pre.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return h * m.out_scale, acts, pre


def mlp_forward(m: MlpDynamics, x):
    """Evaluate the network on one state or a batch of states (rows)."""
    x = np.asarray(x, dtype=float)
    return _forward(m, x)[0]


def mlp_grads(m: MlpDynamics, x, upstream):
    """Vector-Jacobian products of the network output.

    Parameters
    ----------
    m : MlpDynamics
    x : ndarray, shape (D,) or (n, D)
    upstream : ndarray, same shape as the output
        Cotangent ``v``.

    Returns
    -------
    grad_x : ndarray, shape of ``x``
        ``v^T df/dx`` for every row.
    grad_theta : ndarray, shape (n_params,)
        ``sum over rows of v^T df/dtheta``.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(upstream, dtype=float)
    single = x.ndim == 1
    if single:
        x, v = x[None, :], v[None, :]
    _, acts, pre = _forward(m, x)
    gw, gb = [], []
    g = v * m.out_scale
    for i in range(len(m.weights) - 1, -1, -1):
        gw.append(acts[i].T @ g)
        gb.append(g.sum(axis=0))
        g = g @ m.weights[i].T
        if i > 0:
            g = g * (pre[i - 1] > 0.0)
    parts = []
    for w, b in zip(reversed(gw), reversed(gb)):
        parts.append(w.ravel())
        parts.append(b)
    grad_theta = np.concatenate(parts)
    g = g / m.in_scale
    return (g[0] if single else g), grad_theta
