"""Large-investor claim pricing and memory-aware dynamic risk measures.

Large investor: wealth ``X`` with hedge ``pi`` (amount in the stock) obeys

    dX = [(X - pi) r + pi mu] dt + pi sigma dW,

where ``r``, ``mu`` may depend on ``(t, X(t), pi(t), X_t)`` and ``sigma`` on
``(t, X(t), X_t)``. Writing ``Z = pi sigma`` turns this into a delayed BSDE
driven by ``W`` alone with driver

    F(t, y, z, y_hat) = -(y - z/sigma) r - (z/sigma) mu.

The risk measure is the ``Y``-component of a moving-average delayed BSDE
with terminal value ``h(S)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .bsde import BsdeSolution, PicardTrace, SolverConfig, solve_delayed_bsde
from .errors import ConfigurationError, DomainError, SingularVolatilityError
from .forward import ForwardModel, brownian
from .generators import GeneratorSpec, make_moving_average, probe_lipschitz
from .paths import DiscretePath, TimeGrid
from .rng import BrownianEnsemble


def _const(v):
    return lambda t, y, pi, y_hat: np.full(y.shape, float(v))


@dataclass
class LargeInvestorMarket:
    """Coefficients as batched functionals.

    ``r(t, y, pi, y_hat)`` and ``mu(t, y, pi, y_hat)`` return ``(M, 1)``;
    ``sigma(t, y, y_hat)`` returns ``(M, 1)``. ``y_hat`` is the wealth window
    ``(M, k+1, 1)`` when ``delta > 0`` and ``None`` otherwise. ``L`` and ``K``
    are probed when left as ``None``.
    """

    r: Callable
    mu: Callable
    sigma: Callable
    s0: float = 100.0
    sigma_floor: float = 1e-8
    delta: float = 0.0
    L: float = None
    K: float = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.s0 <= 0:
            raise DomainError("initial stock price must be positive")
        if self.sigma_floor <= 0:
            raise DomainError("volatility floor must be positive")


def constant_market(r: float = 0.0, mu: float = 0.0, sigma: float = 0.2, s0: float = 100.0) -> LargeInvestorMarket:
    """Small-investor benchmark: constant rate, drift and volatility."""
    if sigma <= 0:
        raise DomainError("volatility must be positive")
    return LargeInvestorMarket(
        r=_const(r), mu=_const(mu), sigma=lambda t, y, y_hat: np.full(y.shape, float(sigma)),
        s0=s0, L=max(abs(r), abs(mu - r) / sigma), K=0.0,
        name="constant", params={"r": r, "mu": mu, "sigma": sigma, "s0": s0},
    )


def impact_market(r: float = 0.02, mu: float = 0.05, sigma: float = 0.2, s0: float = 100.0,
                  impact: float = 0.01, memory: float = 0.001, delta: float = 0.1) -> LargeInvestorMarket:
    """Borrowing/lending spread driven by the hedge and a memory term in past wealth.

    ``r = r0 + impact * tanh(pi / s0) + memory * tanh(mean(y_hat) / s0)``,
    bounded so the driver stays Lipschitz.
    """

    def rate(t, y, pi, y_hat):
        out = r + impact * np.tanh(pi / s0)
        if y_hat is not None:
            out = out + memory * np.tanh(y_hat.mean(axis=-2) / s0)
        return out

    return LargeInvestorMarket(
        r=rate, mu=_const(mu), sigma=lambda t, y, y_hat: np.full(y.shape, float(sigma)),
        s0=s0, delta=delta, name="impact",
        params={"r": r, "mu": mu, "sigma": sigma, "s0": s0, "impact": impact,
                "memory": memory, "delta": delta},
    )


MARKETS = {"constant": constant_market, "impact": impact_market}


def make_market(name: str, /, **params) -> LargeInvestorMarket:
    try:
        return MARKETS[name](**params)
    except KeyError:
        raise ConfigurationError(f"unknown market {name!r}") from None


def _hedge(market, t, y, z, y_hat):
    sig = np.asarray(market.sigma(t, y, y_hat), dtype=float)
    if np.any(sig < market.sigma_floor):
        raise SingularVolatilityError(
            f"volatility {float(np.min(sig)):.3g} below floor {market.sigma_floor:g} at t={float(t):g}"
        )
    return z[..., 0] / sig, sig


def large_investor_generator(market: LargeInvestorMarket, grid: TimeGrid, seed: int = 0) -> GeneratorSpec:
    """Wealth driver ``-(y - pi) r - pi mu`` with ``pi = z / sigma``."""

    def f(t, x, y, z, y_hat=None):
        pi, _ = _hedge(market, t, y, z, y_hat)
        return -(y - pi) * market.r(t, y, pi, y_hat) - pi * market.mu(t, y, pi, y_hat)

    spec = GeneratorSpec(f, L=0.0, K=0.0, delta=market.delta, name=f"large_investor:{market.name}",
                         params=dict(market.params))
    L, K = market.L, market.K
    if L is None or K is None:
        k = grid.steps_for(market.delta) if market.delta > 0 else 0
        hist = np.zeros((1, 1, 1))
        pl, pk = probe_lipschitz(spec, 0.0, hist, k, scale=market.s0, seed=seed)
        L = pl if L is None else L
        K = pk if K is None else K
    return GeneratorSpec(f, L=float(L), K=float(K), delta=market.delta,
                         name=spec.name, params=spec.params)


def stock_paths(market: LargeInvestorMarket, W: np.ndarray, grid: TimeGrid,
                wealth: np.ndarray = None, hedge: np.ndarray = None) -> np.ndarray:
    """Log-Euler stock prices ``(M, N+1, 1)`` from Brownian paths.

    Coefficients are frozen at the left endpoint. Without ``wealth``/``hedge``
    they are evaluated at zero wealth and zero hedge, which is exact for
    coefficients that ignore the investor.
    """
    M, N, dt = W.shape[0], grid.N, grid.dt
    S = np.empty((M, N + 1, 1))
    S[:, 0] = market.s0
    zeros = np.zeros((M, 1))
    k = grid.steps_for(market.delta) if market.delta > 0 else 0
    for i in range(N):
        t = grid.time(i)
        y = zeros if wealth is None else wealth[:, i]
        pi = zeros if hedge is None else hedge[:, i]
        y_hat = None
        if market.delta > 0:
            y_hat = (np.zeros((M, k + 1, 1)) if wealth is None
                     else wealth[:, np.clip(np.arange(i - k, i + 1), 0, None)])
        mu = market.mu(t, y, pi, y_hat)
        sig = np.asarray(market.sigma(t, y, y_hat), dtype=float)
        if np.any(sig < market.sigma_floor):
            raise SingularVolatilityError(f"volatility below floor at step {i}")
        S[:, i + 1] = S[:, i] * np.exp((mu - 0.5 * sig**2) * dt + sig * (W[:, i + 1] - W[:, i]))
    return S


@dataclass
class LargeInvestorResult:
    x0: float
    std_error: float
    hedge_mean: np.ndarray
    hedge_std: np.ndarray
    replication_residual: float
    replication_std: float
    replication_se: float
    solution: BsdeSolution
    trace: PicardTrace
    terminal_iterations: int = 0

    def hedge_to_csv(self, path) -> None:
        grid = self.solution.grid
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t", "mean_pi", "std_pi"])
            for i in range(grid.N):
                w.writerow([i, repr(float(grid.time(i))), repr(float(self.hedge_mean[i])),
                            repr(float(self.hedge_std[i]))])


def replay_wealth(market: LargeInvestorMarket, x0: float, pi: np.ndarray, S: np.ndarray,
                  Y: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Self-financing wealth ``V`` with stock amount ``pi``; ``Y`` feeds the rate's wealth arguments."""
    M, N, dt = S.shape[0], grid.N, grid.dt
    k = grid.steps_for(market.delta) if market.delta > 0 else 0
    V = np.empty((M, N + 1, 1))
    V[:, 0] = x0
    for i in range(N):
        y_hat = Y[:, np.clip(np.arange(i - k, i + 1), 0, None)] if market.delta > 0 else None
        r = market.r(grid.time(i), Y[:, i], pi[:, i], y_hat)
        V[:, i + 1] = (V[:, i] + pi[:, i] * (S[:, i + 1] / S[:, i] - 1.0)
                       + (V[:, i] - pi[:, i]) * r * dt)
    return V


def price_large_investor(market: LargeInvestorMarket, payoff: Callable, cfg: SolverConfig = None,
                         bm: BrownianEnsemble = None, terminal_payoff: Callable = None,
                         terminal_tol: float = 1e-6, terminal_max_iter: int = 20) -> LargeInvestorResult:
    """Initial wealth needed to replicate ``payoff(S)`` and the hedge statistics.

    ``payoff`` maps stock paths ``(M, N+1, 1)`` to ``(M, 1)``. When
    ``terminal_payoff(W, S, Y, Z)`` is given the terminal value may depend on
    the solution itself; it is resolved by an outer fixed-point loop that
    starts from ``payoff(S)``.
    """
    cfg = cfg or SolverConfig()
    if bm is None:
        raise ConfigurationError("a Brownian ensemble is required")
    grid = bm.grid
    gen = large_investor_generator(market, grid)
    phi = DiscretePath.constant(grid, [0.0])
    model: ForwardModel = brownian(1)
    W = bm.paths()
    S = stock_paths(market, W, grid)
    xi = np.asarray(payoff(S), dtype=float).reshape(bm.M, 1)
    term = lambda X, xi=xi: xi
    sol, trace = solve_delayed_bsde(0.0, phi, model, gen, term, cfg, bm)
    n_outer = 0
    if terminal_payoff is not None:
        for n_outer in range(1, terminal_max_iter + 1):
            new_xi = np.asarray(terminal_payoff(W, S, sol.Y, sol.Z), dtype=float).reshape(bm.M, 1)
            change = float(np.max(np.abs(new_xi - xi)))
            xi = new_xi
            term = lambda X, xi=xi: xi
            sol, trace = solve_delayed_bsde(0.0, phi, model, gen, term, cfg, bm, fwd=sol.forward)
            if change < terminal_tol * max(1.0, float(np.max(np.abs(xi)))):
                break
    times = grid.times
    pi = np.empty((bm.M, grid.N, 1))
    k = grid.steps_for(market.delta) if market.delta > 0 else 0
    for i in range(grid.N):
        y_hat = sol.Y[:, np.clip(np.arange(i - k, i + 1), 0, None)] if market.delta > 0 else None
        pi[:, i], _ = _hedge(market, times[i], sol.Y[:, i], sol.Z[:, i], y_hat)
    V = replay_wealth(market, float(sol.u0[0]), pi, S, sol.Y, grid)
    resid = V[:, -1, 0] - xi[:, 0]
    return LargeInvestorResult(
        x0=float(sol.u0[0]), std_error=float(sol.std_error[0]),
        hedge_mean=pi[:, :, 0].mean(axis=0), hedge_std=pi[:, :, 0].std(axis=0),
        replication_residual=float(resid.mean()), replication_std=float(resid.std()),
        replication_se=float(bm.std_error(resid)),
        solution=sol, trace=trace, terminal_iterations=n_outer,
    )


# --- risk measures ----------------------------------------------------------


@dataclass
class RiskMeasureSpec:
    """Moving-average risk measure: disappointment weight ``beta`` over window ``delta``."""

    beta: float
    delta: float
    payoff: Callable
    M: float = 0.0
    p: float = 1.0

    def __post_init__(self):
        if self.delta <= 0:
            raise DomainError("memory window must be positive")

    def generator(self) -> GeneratorSpec:
        return make_moving_average(self.beta, self.delta)


@dataclass
class RiskResult:
    rho0: float
    std_error: float
    solution: BsdeSolution
    trace: PicardTrace


def risk_measure(spec: RiskMeasureSpec, asset: ForwardModel, cfg: SolverConfig,
                 bm: BrownianEnsemble, phi: DiscretePath, sign: int = 1) -> RiskResult:
    """``rho_0 = Y(0)`` for terminal value ``sign * h(S)``.

    ``sign=+1`` gives ``rho_T(xi) = xi``; ``sign=-1`` the convention
    ``rho_T(xi) = -xi``.
    """
    if sign not in (1, -1):
        raise DomainError("sign must be +1 or -1")
    h = spec.payoff if sign == 1 else (lambda X: -np.asarray(spec.payoff(X), dtype=float))
    sol, trace = solve_delayed_bsde(phi.grid.t0, phi, asset, spec.generator(), h, cfg, bm)
    return RiskResult(float(sol.u0[0]), float(sol.std_error[0]), sol, trace)


def plain_expectation(payoff: Callable, asset: ForwardModel, bm: BrownianEnsemble, phi: DiscretePath):
    """Direct Monte Carlo mean and standard error of ``payoff`` on the same paths."""
    from .forward import simulate_forward

    X = simulate_forward(phi.grid.t0, phi, asset, bm).paths
    v = np.asarray(payoff(X), dtype=float).reshape(-1)
    return float(v.mean()), float(bm.std_error(v))
