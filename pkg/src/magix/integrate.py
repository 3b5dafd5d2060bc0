"""Fixed-step RK4 integration for data generation and forecasting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["TimeGrid", "Trajectory", "DivergenceError", "integrate", "DIVERGENCE_BOUND"]

DIVERGENCE_BOUND = 1e8


class DivergenceError(ArithmeticError):
    """A state left the bounded region during integration."""

    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "times", t)

    def __len__(self):
        return self.times.size

    @property
    def spacing(self):
        """Mean spacing between neighbouring points."""
        if self.times.size < 2:
            return 0.0
        return float((self.times[-1] - self.times[0]) / (self.times.size - 1))

    @classmethod
    def linspace(cls, start, stop, num):
        return cls(np.linspace(start, stop, num))


@dataclass(frozen=True)
class Trajectory:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != len(self.grid):
            raise ValueError("trajectory rows must match the grid length")
        object.__setattr__(self, "values", v)

    @property
    def times(self):
        return self.grid.times


def integrate(f, x0, grid, substeps=10, bound=DIVERGENCE_BOUND):
    """Integrate ``x' = f(x, t)`` with classical RK4 onto ``grid``.

    Each grid interval is split into ``substeps`` equal RK4 steps. Raises
    :class:`DivergenceError` once any component exceeds ``bound`` in magnitude
    or becomes non-finite; the rows computed so far are attached as
    ``partial``.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if not isinstance(grid, TimeGrid):
        grid = TimeGrid(grid)
    t = grid.times
    x = np.array(x0, dtype=float).ravel()
    out = np.empty((t.size, x.size))
    out[0] = x
    for i in range(1, t.size):
        h = (t[i] - t[i - 1]) / substeps
        s = t[i - 1]
        for _ in range(substeps):
            k1 = f(x, s)
            k2 = f(x + 0.5 * h * k1, s + 0.5 * h)
            k3 = f(x + 0.5 * h * k2, s + 0.5 * h)
            k4 = f(x + h * k3, s + h)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            s = s + h
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > bound:
            raise DivergenceError(
                f"state exceeded {bound:g} at t={t[i]:g}",
                partial=Trajectory(TimeGrid(t[:i]), out[:i]),
            )
        out[i] = x
    return Trajectory(grid, out)
