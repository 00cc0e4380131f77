"""Independent reference solutions for validating the Monte Carlo pipeline.

Three oracles, each computed without regression:

* Black-Scholes closed forms (zero-delay, constant-coefficient benchmark);
* a deterministic delay integral equation solved by trapezoid quadrature,
  which is what the BSDE reduces to when the terminal value is deterministic;
* exact backward induction on a non-recombining binary tree, where every
  conditional expectation is a two-term average.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ResourceError, StepSizeError
from .forward import ForwardModel
from .generators import GeneratorSpec
from .paths import DiscretePath, TimeGrid

MAX_TREE_DEPTH = 14


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def black_scholes_call(s0: float, strike: float, r: float, vol: float, T: float) -> float:
    if vol <= 0 or T <= 0:
        raise DomainError("volatility and maturity must be positive")
    if strike <= 0:
        return s0 - strike * math.exp(-r * T)
    sq = vol * math.sqrt(T)
    d1 = (math.log(s0 / strike) + (r + 0.5 * vol * vol) * T) / sq
    d2 = d1 - sq
    return s0 * norm_cdf(d1) - strike * math.exp(-r * T) * norm_cdf(d2)


def black_scholes_put(s0: float, strike: float, r: float, vol: float, T: float) -> float:
    if vol <= 0 or T <= 0:
        raise DomainError("volatility and maturity must be positive")
    if strike <= 0:
        return 0.0
    sq = vol * math.sqrt(T)
    d1 = (math.log(s0 / strike) + (r + 0.5 * vol * vol) * T) / sq
    d2 = d1 - sq
    return strike * math.exp(-r * T) * norm_cdf(-d2) - s0 * norm_cdf(-d1)


# --- deterministic delay equation --------------------------------------------


@dataclass
class DelayOdeSolution:
    grid: TimeGrid
    y: np.ndarray
    sweeps: int

    @property
    def y0(self) -> np.ndarray:
        return self.y[0]


def delay_ode_backward(c, gen: GeneratorSpec, grid: TimeGrid, tol: float = 1e-13,
                       max_sweeps: int = 1000, sub_iterations: int = 20,
                       sub_tol: float = 1e-12) -> DelayOdeSolution:
    """Solve ``y(t) = c + int_t^T f(s, y(s), 0, y_s) ds`` by the trapezoid rule.

    The delayed window looks into the past, which a backward march has not
    reached yet, so the march is repeated: each sweep reads the window from
    the previous sweep (prolonged by ``y(t0)`` before ``t0``) and solves the
    trapezoid step implicitly in the current value. Sweeps stop when the
    largest change drops below ``tol``.
    """
    c = np.atleast_1d(np.asarray(c, dtype=float))
    m = c.size
    N, dt, times = grid.N, grid.dt, grid.times
    k = grid.steps_for(gen.delta) if gen.delayed else 0
    x_hist = np.zeros((1, 1, 1))
    z = np.zeros((1, m, 1))

    def f(i, yi, ref):
        y_hat = None
        if gen.delayed:
            idx = np.clip(np.arange(i - k, i + 1), 0, None)
            win = ref[idx].copy()
            win[-1] = yi
            y_hat = win[None]
        return gen.eval(times[i], x_hist, yi[None], z, y_hat)[0]

    y = np.tile(c, (N + 1, 1))
    for sweep in range(1, max_sweeps + 1):
        ref = y.copy()
        new = np.empty_like(y)
        new[N] = c
        f_next = f(N, c, ref)
        for i in range(N - 1, -1, -1):
            yi = ref[i].copy()
            for _ in range(sub_iterations):
                f_i = f(i, yi, ref)
                y_new = new[i + 1] + 0.5 * dt * (f_i + f_next)
                if np.max(np.abs(y_new - yi)) <= sub_tol * max(1.0, np.max(np.abs(y_new))):
                    yi = y_new
                    break
                yi = y_new
            else:
                raise StepSizeError(f"trapezoid step {i} did not settle in {sub_iterations} sub-iterations")
            new[i] = yi
            f_next = f(i, yi, ref)
        change = np.max(np.abs(new - y))
        y = new
        if change < tol:
            return DelayOdeSolution(grid, y, sweep)
    raise StepSizeError(f"delay quadrature did not converge in {max_sweeps} sweeps")


def delay_ode_halving(c, gen: GeneratorSpec, T: float, Ns=(50, 100, 200, 400), ref_N: int = None):
    """Errors at ``t=0`` against a fine reference and the successive error ratios."""
    ref_N = ref_N or 16 * Ns[-1]
    ref = delay_ode_backward(c, gen, TimeGrid(0.0, T, ref_N)).y0
    errors = [float(np.max(np.abs(delay_ode_backward(c, gen, TimeGrid(0.0, T, n)).y0 - ref)))
              for n in Ns]
    ratios = [a / b for a, b in zip(errors[:-1], errors[1:])]
    return errors, ratios


# --- exact tree enumeration --------------------------------------------------


@dataclass
class ScenarioTree:
    """Non-recombining tree with Bernoulli increments ``±sqrt(dt)``.

    Level ``i`` holds ``2**i`` nodes; node ``j`` has children ``2j`` (down)
    and ``2j+1`` (up), and its ancestor ``l`` levels up is ``j >> l``.
    ``states[i]`` has shape ``(2**i, d)``.
    """

    grid: TimeGrid
    states: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        return self.grid.N

    @property
    def probabilities(self):
        return [np.full(2**i, 0.5**i) for i in range(self.depth + 1)]

    def history(self, i: int) -> np.ndarray:
        """State histories ``(2**i, i+1, d)`` of every level-``i`` node."""
        j = np.arange(2**i)
        return np.stack([self.states[l][j >> (i - l)] for l in range(i + 1)], axis=1)

    def leaf_paths(self) -> np.ndarray:
        return self.history(self.depth)

    def increments(self) -> np.ndarray:
        """Brownian increments of each leaf path, ``(2**N, N, 1)``, in leaf order."""
        N = self.depth
        leaves = np.arange(2**N)
        bits = (leaves[:, None] >> (N - 1 - np.arange(N))[None, :]) & 1
        return (np.where(bits == 1, 1.0, -1.0) * math.sqrt(self.grid.dt))[:, :, None]


def build_tree(phi: DiscretePath, model: ForwardModel, depth: int = None) -> ScenarioTree:
    """Euler recursion of ``model`` on the binary tree, started from ``phi(t0)`` at time ``t0``."""
    grid = phi.grid
    depth = grid.N if depth is None else depth
    if depth > MAX_TREE_DEPTH:
        raise ResourceError(f"tree depth {depth} exceeds the enumeration limit {MAX_TREE_DEPTH}")
    if depth != grid.N:
        raise DomainError("tree depth must equal the number of grid steps")
    if model.d_noise != 1:
        raise DomainError("binary trees support one-dimensional noise only")
    tree = ScenarioTree(grid, [phi.values[:1].copy()])
    sq = math.sqrt(grid.dt)
    for i in range(depth):
        hist = tree.history(i)
        drift = np.broadcast_to(model.b(grid.time(i), hist, grid.dt), (2**i, model.d))
        vol = np.broadcast_to(model.sigma(grid.time(i), hist, grid.dt), (2**i, model.d, 1))[:, :, 0]
        base = tree.states[i] + drift * grid.dt
        nxt = np.empty((2 ** (i + 1), model.d))
        nxt[0::2] = base - vol * sq
        nxt[1::2] = base + vol * sq
        tree.states.append(nxt)
    return tree


@dataclass
class TreeSolution:
    y0: np.ndarray
    Y: list
    Z: list
    residuals: list
    iterations: int


def tree_backward_induction(tree: ScenarioTree, terminal: np.ndarray, gen: GeneratorSpec,
                            prev_Y: list = None, sub_iterations: int = 5):
    """One backward pass with the delayed window frozen at ``prev_Y`` (levels of node values)."""
    grid = tree.grid
    N, dt, sq = tree.depth, grid.dt, math.sqrt(grid.dt)
    terminal = np.asarray(terminal, dtype=float).reshape(2**N, -1)
    m = terminal.shape[1]
    k = grid.steps_for(gen.delta) if gen.delayed else 0
    Y = [None] * (N + 1)
    Z = [None] * N
    Y[N] = terminal
    for i in range(N - 1, -1, -1):
        down, up = Y[i + 1][0::2], Y[i + 1][1::2]
        cond = 0.5 * (down + up)
        z = ((up - down) / (2.0 * sq))[:, :, None]
        y_hat = None
        if gen.delayed:
            j = np.arange(2**i)
            cols = []
            for l in range(i - k, i + 1):
                lev = max(l, 0)
                cols.append(prev_Y[lev][j >> (i - lev)])
            y_hat = np.stack(cols, axis=1)
        hist = tree.history(i)
        n_sub = sub_iterations if gen.L > 0 else 1
        y = cond
        for _ in range(n_sub):
            y_new = cond + dt * np.asarray(gen.eval(grid.time(i), hist, y, z, y_hat), dtype=float)
            done = np.array_equal(y_new, y)
            y = y_new
            if done:
                break
        Y[i] = y
        Z[i] = z
    return Y, Z


def tree_bsde_exact(tree: ScenarioTree, terminal: np.ndarray, gen: GeneratorSpec,
                    tol: float = 1e-13, max_iter: int = 500, sub_iterations: int = 5) -> TreeSolution:
    """Picard loop over exact tree backward inductions, starting from ``Y = 0``."""
    N = tree.depth
    terminal = np.asarray(terminal, dtype=float).reshape(2**N, -1)
    m = terminal.shape[1]
    prev = [np.zeros((2**i, m)) for i in range(N + 1)]
    residuals = []
    for n in range(1, max_iter + 1):
        Y, Z = tree_backward_induction(tree, terminal, gen, prev, sub_iterations)
        r = max(float(np.max(np.abs(a - b))) for a, b in zip(Y, prev))
        residuals.append(r)
        prev = Y
        if n >= 2 and r < tol:
            return TreeSolution(Y[0][0].copy(), Y, Z, residuals, n)
    raise StepSizeError(f"tree Picard loop did not reach {tol:g} in {max_iter} iterations")
