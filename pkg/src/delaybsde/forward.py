"""Euler-Maruyama simulation of path-dependent forward SDEs.

Coefficient functionals are called as ``b(t, hist, dt)`` and
``sigma(t, hist, dt)`` where ``hist`` has shape ``(M, i+1, d)`` and holds the
simulated values on grid nodes ``0..i`` only. Handing over the history up to
the evaluation step is what makes every bundled model non-anticipative.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DomainError, SimulationError
from .paths import DiscretePath, TimeGrid, sup_norm
from .rng import BrownianEnsemble, map_chunks

Functional = Callable[[float, np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class ForwardModel:
    """Drift ``b -> (M, d)`` and diffusion ``sigma -> (M, d, d')`` functionals."""

    b: Functional
    sigma: Functional
    ell: float
    d: int = 1
    d_noise: int = 1
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def drift_at(self, t: float, phi: DiscretePath) -> np.ndarray:
        i = phi.grid.index(t)
        return np.asarray(self.b(t, phi.values[None, : i + 1], phi.grid.dt))[0]

    def diffusion_at(self, t: float, phi: DiscretePath) -> np.ndarray:
        i = phi.grid.index(t)
        return np.asarray(self.sigma(t, phi.values[None, : i + 1], phi.grid.dt))[0]


@dataclass(frozen=True, eq=False)
class ForwardEnsemble:
    """Simulated paths ``X^{t,phi}``: ``paths`` has shape ``(M, N+1, d)``."""

    paths: np.ndarray
    start_step: int
    phi: DiscretePath
    model: ForwardModel
    bm: BrownianEnsemble

    @property
    def grid(self) -> TimeGrid:
        return self.phi.grid

    @property
    def M(self) -> int:
        return self.paths.shape[0]

    @property
    def start_time(self) -> float:
        return self.grid.time(self.start_step)

    def path(self, j: int) -> DiscretePath:
        return DiscretePath(self.grid, self.paths[j])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            d = self.paths.shape[2]
            w.writerow(["sample", "t"] + [f"x{j + 1}" for j in range(d)])
            times = self.grid.times
            for s in range(self.M):
                for i, t in enumerate(times):
                    w.writerow([s, repr(float(t))] + [repr(float(x)) for x in self.paths[s, i]])


def simulate_forward(
    t: float, phi: DiscretePath, model: ForwardModel, bm: BrownianEnsemble, workers: int = 1
) -> ForwardEnsemble:
    """Euler-Maruyama paths equal to ``phi`` on ``[t0, t]`` and driven by ``bm`` afterwards."""
    grid = phi.grid
    if bm.grid != grid:
        raise DomainError("Brownian ensemble and initial path use different grids")
    if phi.d != model.d:
        raise DomainError(f"path dimension {phi.d} != model dimension {model.d}")
    if bm.dim != model.d_noise:
        raise DomainError(f"noise dimension {bm.dim} != model noise dimension {model.d_noise}")
    s0 = grid.index(t)
    dt = grid.dt
    times = grid.times

    def block(a, b):
        X = np.empty((b - a, grid.N + 1, model.d))
        X[:, : s0 + 1] = phi.values[: s0 + 1]
        dW = bm.increments[a:b]
        for i in range(s0, grid.N):
            hist = X[:, : i + 1]
            drift = np.broadcast_to(model.b(times[i], hist, dt), (b - a, model.d))
            vol = np.broadcast_to(
                model.sigma(times[i], hist, dt), (b - a, model.d, model.d_noise)
            )
            X[:, i + 1] = X[:, i] + drift * dt + np.einsum("mij,mj->mi", vol, dW[:, i])
            bad = ~np.isfinite(X[:, i + 1]).all(axis=1)
            if bad.any():
                raise SimulationError(
                    f"non-finite state at step {i + 1} for sample {a + int(np.argmax(bad))}"
                )
        return X

    X = np.concatenate(map_chunks(block, bm.M, workers), axis=0)
    X.setflags(write=False)
    return ForwardEnsemble(X, s0, phi, model, bm)


def lipschitz_probe(
    model: ForwardModel, phi: DiscretePath, phi_prime: DiscretePath, bm: BrownianEnsemble,
    t: float = None,
) -> float:
    """``E[sup |X^{t,phi} - X^{t,phi'}|^2] / ||phi - phi'||^2`` with common random numbers."""
    diff = sup_norm(phi - phi_prime)
    if diff == 0.0:
        raise DomainError("paths coincide; the stability ratio is undefined")
    t = phi.grid.t0 if t is None else t
    a = simulate_forward(t, phi, model, bm).paths
    b = simulate_forward(t, phi_prime, model, bm).paths
    sup2 = np.max(np.sum((a - b) ** 2, axis=2), axis=1)
    return float(np.mean(sup2) / diff**2)


# --- bundled models ---------------------------------------------------------


def _lag_index(hist: np.ndarray, delta: float, dt: float) -> np.ndarray:
    k = int(round(delta / dt))
    if k < 1 or abs(delta / dt - k) > 1e-9 * max(1.0, k):
        raise ConfigurationError(f"lag {delta} is not a multiple of the step {dt}")
    return hist[:, max(hist.shape[1] - 1 - k, 0)]


def brownian(d: int = 1) -> ForwardModel:
    eye = np.eye(d)
    return ForwardModel(
        b=lambda t, h, dt: np.zeros((h.shape[0], d)),
        sigma=lambda t, h, dt: np.broadcast_to(eye, (h.shape[0], d, d)),
        ell=0.0, d=d, d_noise=d, name="brownian", params={"d": d},
    )


def constant(drift: float = 0.0, vol: float = 0.0) -> ForwardModel:
    """Arithmetic dynamics ``dX = drift dt + vol dW`` (``vol=0`` gives a deterministic path)."""
    return ForwardModel(
        b=lambda t, h, dt: np.full((h.shape[0], 1), float(drift)),
        sigma=lambda t, h, dt: np.full((h.shape[0], 1, 1), float(vol)),
        ell=0.0, name="constant", params={"drift": drift, "vol": vol},
    )


def linear(a: float = 1.0, vol: float = 0.0) -> ForwardModel:
    return ForwardModel(
        b=lambda t, h, dt: a * h[:, -1],
        sigma=lambda t, h, dt: np.full((h.shape[0], 1, 1), float(vol)),
        ell=abs(a), name="linear", params={"a": a, "vol": vol},
    )


def gbm(mu: float = 0.0, vol: float = 0.2) -> ForwardModel:
    return ForwardModel(
        b=lambda t, h, dt: mu * h[:, -1],
        sigma=lambda t, h, dt: (vol * h[:, -1])[:, :, None],
        ell=abs(mu) + abs(vol), name="gbm", params={"mu": mu, "vol": vol},
    )


def lagged_gbm(mu: float = 0.0, vol: float = 0.2, kappa: float = 0.1, delta: float = 0.1):
    """Drift ``mu x(t) + kappa (x(t-delta) - x(t))``: the state is pulled toward its lagged value."""

    def b(t, h, dt):
        x = h[:, -1]
        return mu * x + kappa * (_lag_index(h, delta, dt) - x)

    return ForwardModel(
        b=b,
        sigma=lambda t, h, dt: (vol * h[:, -1])[:, :, None],
        ell=abs(mu) + 2 * abs(kappa) + abs(vol), name="lagged_gbm",
        params={"mu": mu, "vol": vol, "kappa": kappa, "delta": delta},
    )


def running_average(kappa: float = 1.0, vol: float = 0.2) -> ForwardModel:
    """Mean reversion toward the running average of the path so far."""

    def b(t, h, dt):
        return kappa * (h.mean(axis=1) - h[:, -1])

    return ForwardModel(
        b=b,
        sigma=lambda t, h, dt: np.full((h.shape[0], 1, 1), float(vol)),
        ell=2 * abs(kappa), name="running_average", params={"kappa": kappa, "vol": vol},
    )


def ornstein_uhlenbeck(theta: float = 1.0, mean: float = 0.0, vol: float = 0.2):
    return ForwardModel(
        b=lambda t, h, dt: theta * (mean - h[:, -1]),
        sigma=lambda t, h, dt: np.full((h.shape[0], 1, 1), float(vol)),
        ell=abs(theta), name="ou", params={"theta": theta, "mean": mean, "vol": vol},
    )


MODELS = {
    "brownian": brownian,
    "constant": constant,
    "linear": linear,
    "gbm": gbm,
    "lagged_gbm": lagged_gbm,
    "running_average": running_average,
    "ou": ornstein_uhlenbeck,
}


def make_model(name: str, /, **params) -> ForwardModel:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ConfigurationError(f"unknown forward model {name!r}") from None
    return factory(**params)
