"""Delayed BSDE generators and the delay-smallness condition.

A generator is evaluated as ``eval(t, x_hist, y, z, y_hat)`` with batched
arrays: ``y`` is ``(M, m)``, ``z`` is ``(M, m, d')`` and ``y_hat`` is
``(M, k+1, m)``, holding the solution on the sub-grid
``theta_j = -delta + j*delta/k``. Segment integrals use the quadrature weights
of the generator's delay measure on that sub-grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DomainError

CONTRACTION_THRESHOLD = 1.0 / 290.0
GAMMA_GRID = np.round(np.arange(1, 1000) * 1e-3, 3)


@dataclass(frozen=True)
class DelayMeasure:
    """Probability measure on ``[-delta, 0]`` discretised on the segment sub-grid."""

    kind: str = "uniform"
    weights: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "dirac", "discrete"):
            raise DomainError(f"unknown delay measure kind {self.kind!r}")
        if self.kind == "discrete":
            w = np.asarray(self.weights, dtype=float)
            if w.ndim != 1 or w.size < 2 or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise DomainError("discrete weights must be nonnegative and sum to 1")
            object.__setattr__(self, "weights", tuple(float(x) for x in w))

    def weights_for(self, k: int) -> np.ndarray:
        """Quadrature weights on the ``k+1`` sub-grid nodes (trapezoid for ``uniform``)."""
        if self.kind == "uniform":
            w = np.full(k + 1, 1.0 / k)
            w[[0, -1]] = 0.5 / k
            return w
        if self.kind == "dirac":
            w = np.zeros(k + 1)
            w[0] = 1.0
            return w
        w = np.asarray(self.weights)
        if w.size != k + 1:
            raise ConfigurationError(f"measure has {w.size} weights but the segment has {k + 1} nodes")
        return w


def _as_array(t):
    return np.asarray(t, dtype=float)


@dataclass(frozen=True)
class GeneratorSpec:
    """Delayed driver ``F(t, x, y, z, y_hat)`` with its assumption constants.

    ``L`` bounds the Lipschitz constant in ``(y, z)``, ``K`` the squared
    Lipschitz constant in the delayed argument against ``alpha``; ``M`` and
    ``p`` are the polynomial growth constants. ``delta == 0`` marks a
    generator that ignores the past.
    """

    func: Callable
    L: float
    K: float
    M: float = 0.0
    p: float = 1.0
    delta: float = 0.0
    alpha: DelayMeasure = field(default_factory=DelayMeasure)
    m: int = 1
    name: str = "custom"
    params: dict = field(default_factory=dict)
    uses_z_delay: bool = False

    @property
    def delayed(self) -> bool:
        return self.delta > 0

    def eval(self, t, x_hist, y, z, y_hat=None, z_hat=None):
        y = _as_array(y)
        if self.uses_z_delay:
            out = self.func(t, x_hist, y, _as_array(z), y_hat, z_hat)
        else:
            out = self.func(t, x_hist, y, _as_array(z), y_hat)
        return np.broadcast_to(out, y.shape)

    def evaluate(self, t, x_path, y, z, segment=None):
        """Single-sample convenience wrapper taking a stopped path and a :class:`PathSegment`."""
        i = x_path.grid.index(t)
        hist = x_path.values[None, : i + 1]
        y = np.atleast_1d(_as_array(y))[None]
        z = np.asarray(z, dtype=float).reshape(1, y.shape[1], -1)
        y_hat = None if segment is None else np.asarray(segment.samples, float).reshape(
            1, len(segment.theta), -1
        )
        return self.eval(t, hist, y, z, y_hat)[0]


def _weighted(y_hat, w):
    return np.einsum("...jm,j->...m", y_hat, w)


def make_moving_average(beta: float, delta: float) -> GeneratorSpec:
    """``(beta/delta) * int_{-delta}^0 y_hat(theta) dtheta`` (trapezoid on the sub-grid)."""
    if delta <= 0:
        raise DomainError("delay must be positive")
    alpha = DelayMeasure("uniform")

    def f(t, x, y, z, y_hat):
        k = y_hat.shape[-2] - 1
        return beta * _weighted(y_hat, alpha.weights_for(k))

    return GeneratorSpec(
        f, L=0.0, K=beta**2, M=0.0, p=1.0, delta=delta, alpha=alpha,
        name="moving_average", params={"beta": beta, "delta": delta},
    )


def make_lagged(kappa: float, delta: float) -> GeneratorSpec:
    """``kappa * y(t - delta)``."""
    if delta <= 0:
        raise DomainError("delay must be positive")

    def f(t, x, y, z, y_hat):
        return kappa * y_hat[..., 0, :]

    return GeneratorSpec(
        f, L=0.0, K=kappa**2, delta=delta, alpha=DelayMeasure("dirac"),
        name="lagged", params={"kappa": kappa, "delta": delta},
    )


def make_weighted_linear(g, alpha: DelayMeasure, delta: float, g_bound: float = None,
                         horizon: float = 1.0) -> GeneratorSpec:
    """``int g(t+theta) y_hat(theta) alpha(dtheta)`` with ``g`` set to zero at negative times.

    ``K = sup|g|^2``; when ``g_bound`` is omitted the supremum is sampled on
    ``[0, horizon]``.
    """
    if delta <= 0:
        raise DomainError("delay must be positive")
    if g_bound is None:
        g_bound = float(np.max(np.abs([g(s) for s in np.linspace(0.0, horizon, 2001)])))

    def f(t, x, y, z, y_hat):
        k = y_hat.shape[-2] - 1
        s = float(t) - delta + (delta / k) * np.arange(k + 1)
        gs = np.array([g(v) if v >= -1e-12 else 0.0 for v in s])
        return _weighted(y_hat, alpha.weights_for(k) * gs)

    return GeneratorSpec(
        f, L=0.0, K=g_bound**2, delta=delta, alpha=alpha,
        name="weighted_linear", params={"delta": delta, "g_bound": g_bound},
    )


def make_markovian(f, L: float, M: float = 0.0, p: float = 1.0, name: str = "markovian",
                   params: dict = None) -> GeneratorSpec:
    """Wrap ``f(t, x_hist, y, z)`` as a generator that ignores the past of ``Y``."""

    def g(t, x, y, z, y_hat):
        return f(t, x, y, z)

    return GeneratorSpec(g, L=L, K=0.0, M=M, p=p, delta=0.0, name=name, params=params or {})


# --- bundled Markovian drivers ----------------------------------------------


def zero() -> GeneratorSpec:
    return make_markovian(lambda t, x, y, z: np.zeros_like(y), L=0.0, name="zero")


def discount(r: float) -> GeneratorSpec:
    """``-r y``: the BSDE value is the discounted terminal expectation."""
    return make_markovian(lambda t, x, y, z: -r * y, L=abs(r), name="discount", params={"r": r})


def linear_driver(a: float = 0.0, b: float = 0.0, c: float = 0.0) -> GeneratorSpec:
    """``a y + b sum(z) + c``."""
    return make_markovian(
        lambda t, x, y, z: a * y + b * z.sum(axis=-1) + c,
        L=max(abs(a), abs(b)), M=abs(c), name="linear", params={"a": a, "b": b, "c": c},
    )


MARKOVIAN = {"zero": zero, "discount": discount, "linear": linear_driver}

G_FUNCTIONS = {
    "one": (lambda s: 1.0, 1.0),
    "identity": (lambda s: s, None),
    "exp_decay": (lambda s: math.exp(-s), 1.0),
}


def make_generator(name: str, /, **params) -> GeneratorSpec:
    """Registry lookup: ``moving_average``, ``lagged``, ``weighted_linear``, ``markovian``."""
    if name == "moving_average":
        return make_moving_average(float(params["beta"]), float(params["delta"]))
    if name == "lagged":
        return make_lagged(float(params["kappa"]), float(params["delta"]))
    if name == "weighted_linear":
        gname = params.get("g", "one")
        if gname not in G_FUNCTIONS:
            raise ConfigurationError(f"unknown weight function {gname!r}")
        g, bound = G_FUNCTIONS[gname]
        scale = float(params.get("scale", 1.0))
        bound = None if bound is None else abs(scale) * bound
        alpha = DelayMeasure(params.get("measure", "uniform"))
        return make_weighted_linear(lambda s: scale * g(s), alpha, float(params["delta"]),
                                    g_bound=bound, horizon=float(params.get("horizon", 1.0)))
    if name == "markovian":
        inner = params.get("name", "zero")
        if inner not in MARKOVIAN:
            raise ConfigurationError(f"unknown Markovian driver {inner!r}")
        return MARKOVIAN[inner](**params.get("params", {}))
    if name in MARKOVIAN:
        return MARKOVIAN[name](**params)
    raise ConfigurationError(f"unknown generator {name!r}")


# --- contraction condition --------------------------------------------------


@dataclass(frozen=True)
class ContractionReport:
    lhs: float
    threshold: float
    gamma_star: float
    satisfied: bool
    margin: float
    L: float = float("nan")


def contraction_lhs(K: float, L: float, delta: float, T: float, gamma) -> np.ndarray:
    """``K gamma exp((gamma + 6L^2/gamma) delta) / ((1-gamma) L^2) * max(1, T)``."""
    gamma = np.asarray(gamma, dtype=float)
    if K == 0:
        return np.zeros_like(gamma)
    # log space keeps the product finite when the exponential alone would overflow
    log_val = (math.log(K) + np.log(gamma) + (gamma + 6.0 * L * L / gamma) * delta
               - np.log1p(-gamma) - 2.0 * math.log(L) + math.log(max(1.0, T)))
    with np.errstate(over="ignore"):
        return np.exp(log_val)


def _report(values, gammas, L) -> ContractionReport:
    j = int(np.argmin(values))
    lhs = float(values[j])
    return ContractionReport(
        lhs=lhs, threshold=CONTRACTION_THRESHOLD, gamma_star=float(gammas[j]),
        satisfied=lhs < CONTRACTION_THRESHOLD, margin=CONTRACTION_THRESHOLD - lhs,
        L=float(np.atleast_1d(L)[j] if np.ndim(L) else L),
    )


def check_contraction(K: float, L: float, delta: float, T: float, gamma: float = None):
    """Evaluate the delay-smallness condition, minimising over ``gamma`` when it is omitted."""
    if K < 0:
        raise DomainError("K must be nonnegative")
    if L <= 0:
        raise DomainError("L must be positive")
    if gamma is not None:
        if not 0.0 < gamma < 1.0:
            raise DomainError(f"gamma must lie in (0, 1), got {gamma}")
        gammas = np.array([float(gamma)])
    else:
        gammas = GAMMA_GRID
    return _report(contraction_lhs(K, L, delta, T, gammas), gammas, L)


def contraction_for_generator(gen: GeneratorSpec, T: float) -> ContractionReport:
    """Condition for ``gen`` with ``L`` treated as a free parameter no smaller than ``gen.L``.

    Any ``L' >= gen.L`` is a valid Lipschitz constant; for each ``gamma`` the
    best one is ``max(gen.L, sqrt(gamma / (6 delta)))``.
    """
    if gen.K == 0 or gen.delta == 0:
        return ContractionReport(0.0, CONTRACTION_THRESHOLD, float(GAMMA_GRID[0]), True,
                                 CONTRACTION_THRESHOLD, max(gen.L, 0.0))
    Ls = np.maximum(gen.L, np.sqrt(GAMMA_GRID / (6.0 * gen.delta)))
    vals = np.array([contraction_lhs(gen.K, l, gen.delta, T, g) for l, g in zip(Ls, GAMMA_GRID)])
    return _report(vals, GAMMA_GRID, Ls)


# --- empirical Lipschitz probes ---------------------------------------------


def probe_lipschitz(gen: GeneratorSpec, t: float, x_hist: np.ndarray, k: int, d_noise: int = 1,
                    n: int = 2000, scale: float = 1.0, seed: int = 0):
    """Largest observed ratios ``|dF| / (|dy| + |dz|)`` and ``|dF|^2 / int |dy_hat|^2 dalpha``.

    Probes are random two-point pairs plus coordinate-aligned perturbations,
    so linear drivers attain their exact constants.
    """
    rng = np.random.default_rng(seed)
    m = gen.m
    x = np.broadcast_to(x_hist, (n,) + x_hist.shape[1:])
    w = gen.alpha.weights_for(k) if gen.delayed else np.ones(1)
    kk = k if gen.delayed else 0

    def draw():
        return (scale * rng.standard_normal((n, m)), scale * rng.standard_normal((n, m, d_noise)),
                scale * rng.standard_normal((n, kk + 1, m)))

    y, z, yh = draw()
    y2, z2, yh2 = draw()
    # axis-aligned probes in the first third of the batch
    third = n // 3
    y2[:third] = y[:third]
    z2[third : 2 * third] = z[third : 2 * third]
    yh_arg = yh if gen.delayed else None
    f1 = gen.eval(t, x, y, z, yh_arg)
    f2 = gen.eval(t, x, y2, z2, yh_arg)
    dyz = np.linalg.norm(y - y2, axis=1) + np.linalg.norm((z - z2).reshape(n, -1), axis=1)
    l_ratio = float(np.max(np.linalg.norm(f1 - f2, axis=1) / dyz))
    k_ratio = 0.0
    if gen.delayed:
        f3 = gen.eval(t, x, y, z, yh2)
        num = np.sum((f1 - f3) ** 2, axis=1)
        den = np.einsum("njm,j->n", (yh - yh2) ** 2, w)
        k_ratio = float(np.max(num / den))
    return l_ratio, k_ratio
