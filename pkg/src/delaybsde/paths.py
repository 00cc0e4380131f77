"""Uniform time grids and discretely sampled paths.

A continuous path on ``[t0, T]`` is represented by its values on a uniform grid,
with piecewise-linear interpolation for off-grid queries. Delayed windows of a
path are integer shifts on that grid, and times before ``t0`` read the
constant value at ``t0``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError

_GRID_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition ``t_i = t0 + i*dt`` of ``[t0, T]`` into ``N`` steps."""

    t0: float
    T: float
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise DomainError(f"N must be a positive integer, got {self.N}")
        if not (math.isfinite(self.t0) and math.isfinite(self.T)):
            raise DomainError("grid end points must be finite")
        if self.t0 < 0:
            raise DomainError(f"t0 must be >= 0, got {self.t0}")
        if self.T <= self.t0:
            raise DomainError(f"T={self.T} must exceed t0={self.t0}")
        object.__setattr__(self, "N", int(self.N))

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.N

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.N + 1)

    def time(self, i: int) -> float:
        return self.t0 + i * self.dt

    def index(self, t: float, snap: bool = True) -> int:
        """Grid index of ``t``; off-grid times snap to the nearest node with a warning."""
        if t < self.t0 - _GRID_TOL * max(1.0, abs(self.t0)) or t > self.T + _GRID_TOL * max(
            1.0, abs(self.T)
        ):
            raise DomainError(f"time {t} outside grid range [{self.t0}, {self.T}]")
        x = (t - self.t0) / self.dt
        i = int(round(x))
        if abs(x - i) > _GRID_TOL * max(1.0, abs(x)):
            if not snap:
                raise DomainError(f"time {t} is not a grid point")
            warnings.warn(f"time {t} is off-grid; snapped to {self.time(i)}", stacklevel=2)
        return min(max(i, 0), self.N)

    def steps_for(self, delta: float) -> int:
        """Number of grid steps spanned by a delay ``delta`` (must be a grid multiple)."""
        if delta <= 0:
            raise DomainError(f"delay must be positive, got {delta}")
        x = delta / self.dt
        k = int(round(x))
        if k < 1 or abs(x - k) > _GRID_TOL * max(1.0, x):
            raise ConfigurationError(
                f"delay {delta} is not an integer multiple of the time step {self.dt}"
            )
        return k


@dataclass(frozen=True, eq=False)
class DiscretePath:
    """Grid samples of a ``d``-dimensional path; ``values`` has shape ``(N+1, d)``."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.N + 1:
            raise DomainError(
                f"path values must have shape (N+1, d) = ({self.grid.N + 1}, d), got {v.shape}"
            )
        if v.shape[1] < 1:
            raise DomainError("path dimension must be >= 1")
        if not np.all(np.isfinite(v)):
            raise DomainError("path values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "DiscretePath":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(value, (grid.N + 1, 1)))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn) -> "DiscretePath":
        vals = [np.atleast_1d(np.asarray(fn(t), dtype=float)) for t in grid.times]
        return cls(grid, np.stack(vals))

    def at(self, t: float) -> np.ndarray:
        """Linearly interpolated value at ``t``; constant outside ``[t0, T]``."""
        times = self.grid.times
        return np.array([np.interp(t, times, self.values[:, j]) for j in range(self.d)])

    def with_values(self, values) -> "DiscretePath":
        return DiscretePath(self.grid, values)

    def __sub__(self, other: "DiscretePath") -> "DiscretePath":
        _check_same_grid(self, other)
        return DiscretePath(self.grid, self.values - other.values)

    def __add__(self, other: "DiscretePath") -> "DiscretePath":
        _check_same_grid(self, other)
        return DiscretePath(self.grid, self.values + other.values)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{j + 1}" for j in range(self.d)])
            for t, row in zip(self.grid.times, self.values):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path) -> "DiscretePath":
        with open(Path(path), newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if not header or header[0] != "t" or len(header) < 2:
            raise DomainError(f"{path}: expected header 't,x1,...,xd'")
        data = np.array([[float(x) for x in r] for r in body if r])
        times = data[:, 0]
        grid = TimeGrid(float(times[0]), float(times[-1]), len(times) - 1)
        if not np.allclose(times, grid.times, rtol=0, atol=1e-9 * max(1.0, grid.T)):
            raise DomainError(f"{path}: time column is not a uniform grid")
        return cls(grid, data[:, 1:])


@dataclass(frozen=True, eq=False)
class PathSegment:
    """Samples of a path on the window ``t + theta``, ``theta`` in ``[-delta, 0]``."""

    delta: float
    theta: np.ndarray
    samples: np.ndarray

    def __post_init__(self):
        if self.delta <= 0:
            raise DomainError("segment length must be positive")
        if not np.isclose(self.theta[0], -self.delta) or not np.isclose(self.theta[-1], 0.0):
            raise DomainError("segment sub-grid must span [-delta, 0]")
        if not np.all(np.isfinite(self.samples)):
            raise DomainError("segment samples must be finite")


def _check_same_grid(a: DiscretePath, b: DiscretePath) -> None:
    if a.grid != b.grid or a.d != b.d:
        raise DomainError("paths live on different grids or dimensions")


def stop_path(phi: DiscretePath, t: float) -> DiscretePath:
    """The path frozen at its time-``t`` value, ``phi(. ∧ t)``."""
    i = phi.grid.index(t)
    v = np.array(phi.values)
    v[i + 1 :] = v[i]
    return DiscretePath(phi.grid, v)


def delayed_segment(y: DiscretePath, t: float, delta: float) -> PathSegment:
    """Window ``(y(t+theta))`` for ``theta`` in ``[-delta, 0]`` on the grid sub-lattice."""
    k = y.grid.steps_for(delta)
    i = y.grid.index(t)
    idx = np.clip(np.arange(i - k, i + 1), 0, None)
    theta = -delta + y.grid.dt * np.arange(k + 1)
    theta[-1] = 0.0
    return PathSegment(delta, theta, y.values[idx])


def sup_norm(phi: DiscretePath) -> float:
    """Largest Euclidean norm over the grid values."""
    return float(np.max(np.hypot.reduce(phi.values, axis=1)))


def pseudometric(t: float, phi: DiscretePath, t_prime: float, phi_prime: DiscretePath) -> float:
    """``|t - t'| + max_r |phi(r ∧ t) - phi'(r ∧ t')|`` evaluated on grid nodes."""
    _check_same_grid(phi, phi_prime)
    r = phi.grid.times
    a = np.stack([np.interp(np.minimum(r, t), r, phi.values[:, j]) for j in range(phi.d)], 1)
    b = np.stack(
        [np.interp(np.minimum(r, t_prime), r, phi_prime.values[:, j]) for j in range(phi.d)], 1
    )
    return abs(t - t_prime) + float(np.max(np.hypot.reduce(a - b, axis=1)))
