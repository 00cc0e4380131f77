"""Regression Monte Carlo for BSDEs with time-delayed generators.

``solve_standard_bsde`` runs one backward induction for a driver whose
delayed argument has been frozen. ``solve_delayed_bsde`` wraps it in the
Picard loop: each pass freezes the delayed window at the previous iterate
(pathwise samples on ``[t, T]``, the supplied past values of ``u`` on
``[0, t)``, and the value at time zero before that), starting from
``Y = 0, Z = 0``.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    ConfigurationError,
    ContractionError,
    DomainError,
    NonConvergenceError,
    StateError,
    StepSizeError,
)
from .forward import ForwardEnsemble, ForwardModel, simulate_forward
from .generators import GeneratorSpec, contraction_for_generator
from .paths import DiscretePath
from .regression import MeanRegressor, PolynomialBasis
from .rng import BrownianEnsemble

logger = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    picard_tol: float = 1e-6
    picard_max_iter: int = 50
    beta_weight: float = 0.0
    contraction_policy: str = "warn"
    basis: object = field(default_factory=lambda: PolynomialBasis(3))
    sub_iterations: int = 5
    min_iterations: int = 2
    workers: int = 1

    def __post_init__(self):
        if self.picard_tol <= 0:
            raise ConfigurationError("picard_tol must be positive")
        if self.picard_max_iter < 1 or self.sub_iterations < 1:
            raise ConfigurationError("iteration caps must be positive")
        if self.beta_weight < 0:
            raise ConfigurationError("beta_weight must be nonnegative")
        if self.contraction_policy not in ("warn", "abort"):
            raise ConfigurationError("contraction_policy must be 'warn' or 'abort'")


@dataclass
class PicardTrace:
    """Relative iterate-to-iterate distances of the Picard loop."""

    tol: float
    residuals: list = field(default_factory=list)
    absolute: list = field(default_factory=list)
    converged: bool = False
    contraction: object = None

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual", "absolute_residual"])
            for n, (r, a) in enumerate(zip(self.residuals, self.absolute), start=1):
                w.writerow([n, repr(float(r)), repr(float(a))])


@dataclass(eq=False)
class BsdeSolution:
    """Sampled ``(Y, Z)`` on a forward ensemble.

    ``Y`` has shape ``(M, N+1, m)`` and ``Z`` shape ``(M, N, m, d')``. Steps
    before ``start_step`` hold the prescribed past (``Z`` is zero there).
    ``regressors[s]``/``reg_coeffs[s]`` give the regression surrogate of
    ``u(s, .)`` once :func:`fit_surrogates` has run.
    """

    Y: np.ndarray
    Z: np.ndarray
    u0: np.ndarray
    start_step: int
    forward: ForwardEnsemble
    std_error: np.ndarray
    regression_residual: np.ndarray
    regressors: list = field(default_factory=list)
    reg_coeffs: list = field(default_factory=list)

    @property
    def grid(self):
        return self.forward.grid

    def surrogate(self, s: int, fwd: ForwardEnsemble) -> np.ndarray:
        """Evaluate the fitted ``u(s, .)`` on the paths of ``fwd``."""
        if not self.reg_coeffs or self.reg_coeffs[s] is None:
            raise StateError(f"no regression surrogate available at step {s}")
        return self.regressors[s].predict(self.reg_coeffs[s], fwd, s)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "t", "mean_Y", "std_Y", "mean_abs_Z"])
            times = self.grid.times
            for i in range(self.start_step, self.grid.N + 1):
                y = self.Y[:, i, 0]
                z = (float(np.mean(np.linalg.norm(self.Z[:, i].reshape(len(y), -1), axis=1)))
                     if i < self.grid.N else float("nan"))
                w.writerow([i, repr(float(times[i])), repr(float(y.mean())),
                            repr(float(y.std())), repr(z)])


def solve_standard_bsde(
    terminal: np.ndarray,
    gen_frozen: Callable,
    fwd: ForwardEnsemble,
    basis,
    lipschitz: float = 0.0,
    sub_iterations: int = 5,
    cache: dict = None,
) -> BsdeSolution:
    """Backward induction for ``Y = terminal + int f dr - int Z dW`` on ``fwd``.

    ``gen_frozen(i, hist, y, z)`` returns the driver at step ``i``. Each step
    projects ``Y_{i+1}`` on the step-``i`` basis, takes
    ``Z_i = E[(Y_{i+1} - E[Y_{i+1}|F_i]) dW_i] / dt`` and solves
    ``Y_i = E[Y_{i+1}|F_i] + dt f(Y_i, Z_i)`` by fixed-point sub-iteration.
    At the start step the conditioning is trivial (plain ensemble mean).
    """
    grid = fwd.grid
    M, N, dt = fwd.M, grid.N, grid.dt
    s0 = fwd.start_step
    if lipschitz * dt >= 1.0:
        raise StepSizeError(f"L*dt = {lipschitz * dt:.3g} >= 1; refine the grid")
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape[0] != M:
        raise DomainError(f"terminal has {terminal.shape[0]} samples, ensemble has {M}")
    terminal = terminal.reshape(M, -1)
    m = terminal.shape[1]
    dW = fwd.bm.increments
    dn = dW.shape[2]
    cache = {} if cache is None else cache
    times = grid.times

    Y = np.empty((M, N + 1, m))
    Y[:, N] = terminal
    Z = np.zeros((M, N, m, dn))
    resid = np.full(N, np.nan)
    acc = np.zeros((M, m))
    n_sub = sub_iterations if lipschitz > 0 else 1
    for i in range(N - 1, s0 - 1, -1):
        reg = cache.get(i)
        if reg is None:
            reg = MeanRegressor() if i == s0 else basis.fit_step(i, fwd)
            cache[i] = reg
        A = reg.design_matrix()
        nxt = Y[:, i + 1]
        cond, _ = reg.project(nxt, A)
        resid[i] = np.sqrt(np.mean(np.sum((nxt - cond) ** 2, axis=1)))
        z, _ = reg.project((nxt - cond)[:, :, None] * (dW[:, i, None, :] / dt), A)
        hist = fwd.paths[:, : i + 1]
        y = cond
        for _ in range(n_sub):
            f = np.asarray(gen_frozen(i, hist, y, z), dtype=float)
            y_new = cond + dt * f
            done = np.array_equal(y_new, y)
            y = y_new
            if done:
                break
        Y[:, i] = y
        Z[:, i] = z
        acc += dt * f
    if s0 == N:
        u0 = terminal[0].copy()
        se = np.zeros(m)
    else:
        u0 = Y[0, s0].copy()
        se = fwd.bm.std_error(terminal + acc)
    Y[:, :s0] = u0
    return BsdeSolution(Y, Z, u0, s0, fwd, se, resid)


def fit_surrogates(sol: BsdeSolution, basis, cache: dict = None) -> BsdeSolution:
    """Attach per-step regressions of ``Y_s`` on the step-``s`` basis (``s > start_step``)."""
    cache = {} if cache is None else cache
    N, s0 = sol.grid.N, sol.start_step
    regs, coeffs = [None] * (N + 1), [None] * (N + 1)
    regs[s0], coeffs[s0] = MeanRegressor(), sol.u0.copy()
    for s in range(s0 + 1, N + 1):
        reg = cache.get(s)
        if reg is None or isinstance(reg, MeanRegressor):
            reg = basis.fit_step(s, sol.forward)
        _, c = reg.project(sol.Y[:, s])
        regs[s], coeffs[s] = reg, c
    sol.regressors, sol.reg_coeffs = regs, coeffs
    return sol


def _residual(dY, dZ, times, s0, dt, beta_weight):
    w = np.exp(beta_weight * times)
    y_part = np.max(w[s0:] * np.mean(np.sum(dY[:, s0:] ** 2, axis=2), axis=0))
    if dZ.shape[1] > s0:
        z2 = np.sum(dZ[:, s0:].reshape(dZ.shape[0], dZ.shape[1] - s0, -1) ** 2, axis=2)
        z_part = dt * np.sum(w[s0:-1] * np.mean(z2, axis=0))
    else:
        z_part = 0.0
    return float(np.sqrt(y_part + z_part))


def picard_residual(prev: BsdeSolution, nxt: BsdeSolution, beta_weight: float = 0.0) -> float:
    """``sqrt(max_s mean e^{beta s}|dY|^2 + dt * sum_s mean e^{beta s}|dZ|^2)`` from the start step."""
    if prev.Y.shape != nxt.Y.shape or prev.Z.shape != nxt.Z.shape:
        raise DomainError("solutions are not aligned")
    if prev.grid != nxt.grid:
        raise DomainError("solutions live on different grids")
    s0 = max(prev.start_step, nxt.start_step)
    return _residual(nxt.Y - prev.Y, nxt.Z - prev.Z, nxt.grid.times, s0, nxt.grid.dt, beta_weight)


def apply_contraction_policy(gen: GeneratorSpec, T: float, policy: str):
    report = contraction_for_generator(gen, T)
    if not report.satisfied:
        if policy == "abort":
            raise ContractionError(report)
        msg = (f"delay condition not met for {gen.name}: lhs={report.lhs:.4g} >= "
               f"{report.threshold:.4g}; Picard convergence is not guaranteed")
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return report


def _past_values(past_u, grid, s0, m):
    out = np.empty((s0, m))
    for i in range(s0):
        out[i] = np.broadcast_to(np.asarray(past_u(grid.time(i)), dtype=float), (m,))
    return out


def solve_delayed_bsde(
    t: float,
    phi: DiscretePath,
    model: ForwardModel,
    gen: GeneratorSpec,
    payoff: Callable,
    cfg: SolverConfig = None,
    bm: BrownianEnsemble = None,
    past_u: Callable = None,
    fwd: ForwardEnsemble = None,
):
    """Picard iteration for the delayed BSDE started at ``(t, phi)``.

    ``payoff`` maps the forward paths ``(M, N+1, d)`` to terminal values.
    ``past_u(s)`` supplies ``u(s, phi)`` for ``s < t``; it is required when
    the delay window reaches before ``t``. Returns ``(solution, trace)``.
    """
    cfg = cfg or SolverConfig()
    grid = phi.grid
    report = apply_contraction_policy(gen, grid.T, cfg.contraction_policy)
    if fwd is None:
        if bm is None:
            raise ConfigurationError("either a Brownian ensemble or a forward ensemble is required")
        fwd = simulate_forward(t, phi, model, bm, workers=cfg.workers)
    terminal = np.asarray(payoff(fwd.paths), dtype=float).reshape(fwd.M, -1)
    M, N, m = fwd.M, grid.N, terminal.shape[1]
    s0 = fwd.start_step
    k = grid.steps_for(gen.delta) if gen.delayed else 0
    times = grid.times

    if s0 > 0 and gen.delayed and past_u is None:
        raise ConfigurationError("past values of u are required when starting after t0")
    past = _past_values(past_u, grid, s0, m) if (s0 > 0 and past_u is not None) else None

    prev_Y = np.zeros((M, N + 1, m))
    prev_Z = np.zeros((M, N, m, fwd.bm.dim))
    if past is not None:
        prev_Y[:, :s0] = past

    def frozen(i, hist, y, z):
        if not gen.delayed:
            return gen.eval(times[i], hist, y, z)
        idx = np.clip(np.arange(i - k, i + 1), 0, None)
        return gen.eval(times[i], hist, y, z, prev_Y[:, idx])

    trace = PicardTrace(tol=cfg.picard_tol, contraction=report)
    cache = {}
    sol = None
    for n in range(1, cfg.picard_max_iter + 1):
        sol = solve_standard_bsde(terminal, frozen, fwd, cfg.basis, gen.L, cfg.sub_iterations, cache)
        if past is not None:
            sol.Y[:, :s0] = past
        r_abs = _residual(sol.Y - prev_Y, sol.Z - prev_Z, times, s0, grid.dt, cfg.beta_weight)
        scale = _residual(sol.Y, sol.Z, times, s0, grid.dt, cfg.beta_weight)
        rel = r_abs / scale if scale > 0 else r_abs
        trace.absolute.append(r_abs)
        trace.residuals.append(rel)
        prev_Y, prev_Z = sol.Y, sol.Z
        logger.debug("picard iteration %d: residual %.3e", n, rel)
        if n >= cfg.min_iterations and rel < cfg.picard_tol:
            trace.converged = True
            break
    if not trace.converged:
        raise NonConvergenceError(
            f"Picard loop did not reach {cfg.picard_tol:g} in {cfg.picard_max_iter} iterations "
            f"(last residual {trace.residuals[-1]:.3e})", trace,
        )
    fit_surrogates(sol, cfg.basis, cache)
    return sol, trace
