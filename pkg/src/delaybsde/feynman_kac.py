"""The value functional ``u(t, phi) = Y^{t,phi}(t)`` and its probabilistic checks.

``u_surface`` sweeps initial times upward. The solve at ``t_i`` needs
``u(s, phi)`` for ``s`` in the delay window before ``t_i``; those values are
already on the surface, so one pass suffices (before ``t0`` the window is
prolonged by ``u(t0, phi)``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .bsde import BsdeSolution, SolverConfig, solve_delayed_bsde
from .errors import DelayBsdeError, DomainError, StateError
from .forward import ForwardModel, simulate_forward
from .generators import GeneratorSpec
from .paths import DiscretePath
from .rng import BrownianEnsemble


@dataclass
class ValueSurface:
    """``u(t_i, phi)`` on a sub-grid of initial times anchored at ``phi``."""

    steps: np.ndarray
    times: np.ndarray
    values: np.ndarray
    std_errors: np.ndarray
    phi: DiscretePath
    solutions: dict = field(default_factory=dict)

    def at(self, t) -> np.ndarray:
        """Linear interpolation between nodes, flat outside the computed range."""
        return np.array([np.interp(t, self.times, self.values[:, c]) for c in range(self.values.shape[1])])

    def past(self):
        return lambda s: self.at(s)

    def surrogate(self, t: float):
        """Regression surrogates attached to the solve started at node ``t``."""
        i = self.phi.grid.index(t)
        if i not in self.solutions:
            raise StateError(f"no stored solution for initial time {t}")
        return self.solutions[i]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            m = self.values.shape[1]
            if m == 1:
                w.writerow(["step", "t", "u", "std_error"])
            else:
                w.writerow(["step", "t"] + [f"u{c + 1}" for c in range(m)]
                           + [f"std_error{c + 1}" for c in range(m)])
            for s, t, u, e in zip(self.steps, self.times, self.values, self.std_errors):
                w.writerow([int(s), repr(float(t))] + [repr(float(v)) for v in u]
                           + [repr(float(v)) for v in e])


def _annotate(err: DelayBsdeError, t: float) -> DelayBsdeError:
    if err.args:
        err.args = (f"initial time {t:g}: {err.args[0]}",) + tuple(err.args[1:])
    return err


def u_surface(phi: DiscretePath, model: ForwardModel, gen: GeneratorSpec, payoff,
              cfg: SolverConfig = None, bm: BrownianEnsemble = None, stride: int = 1,
              until: float = None, keep_solutions: bool = False) -> ValueSurface:
    """Compute ``u(t_i, phi)`` for ``t_i = t0, t0 + stride*dt, ...`` up to ``T`` (or ``until``).

    The same Brownian ensemble is reused at every node. The value at ``T`` is
    ``payoff(phi)`` itself.
    """
    cfg = cfg or SolverConfig()
    grid = phi.grid
    if stride < 1:
        raise DomainError("stride must be a positive number of steps")
    last = grid.N if until is None else grid.index(until)
    steps = list(range(0, last + 1, stride))
    if steps[-1] != last:
        steps.append(last)
    m = np.asarray(payoff(phi.values[None]), dtype=float).reshape(1, -1).shape[1]
    times, values, errors, sols = [], [], [], {}
    for s in steps:
        t = grid.time(s)
        if s == grid.N:
            u = np.asarray(payoff(phi.values[None]), dtype=float).reshape(m)
            se = np.zeros(m)
        else:
            past = None
            if s > 0:
                tv, vv = np.array(times), np.array(values)
                past = lambda r, tv=tv, vv=vv: np.array([np.interp(r, tv, vv[:, c]) for c in range(m)])
            try:
                sol, _ = solve_delayed_bsde(t, phi, model, gen, payoff, cfg, bm, past_u=past)
            except DelayBsdeError as err:
                raise _annotate(err, t)
            u, se = sol.u0, sol.std_error
            if keep_solutions:
                sols[s] = sol
        times.append(t)
        values.append(np.array(u, dtype=float))
        errors.append(np.array(se, dtype=float))
    return ValueSurface(np.array(steps), np.array(times), np.array(values), np.array(errors), phi, sols)


@dataclass
class ConsistencyReport:
    """Out-of-sample gap between re-solved ``Y(s)`` and the fitted ``u(s, .)`` on fresh paths."""

    steps: np.ndarray
    times: np.ndarray
    mean_error: np.ndarray
    max_error: np.ndarray
    in_sample: np.ndarray

    @property
    def max_abs_error(self) -> float:
        return float(np.max(self.mean_error))

    @property
    def in_sample_residual(self) -> float:
        return float(np.max(self.in_sample))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "s", "mean_error", "max_error", "in_sample_mean_error"])
            for row in zip(self.steps, self.times, self.mean_error, self.max_error, self.in_sample):
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def _gap(Y, pred):
    a = np.abs(Y - pred).reshape(Y.shape[0], -1).max(axis=1)
    return float(a.mean()), float(a.max())


def check_fk_consistency(t: float, phi: DiscretePath, model: ForwardModel, gen: GeneratorSpec,
                         payoff, cfg: SolverConfig, bm_test: BrownianEnsemble,
                         bm_train: BrownianEnsemble = None, sol: BsdeSolution = None,
                         past_u=None) -> ConsistencyReport:
    """Compare ``Y(s)`` on a fresh ensemble with the training surrogate ``u(s, X(s))``.

    ``sol`` (or a solve on ``bm_train``) supplies the surrogates. The fresh
    ensemble is solved independently and, at every step from the start
    step on, the ensemble mean of ``|Y_fresh(s) - u_train(s, X_fresh)|`` is
    recorded together with the same statistic on the training ensemble.
    """
    if sol is None:
        if bm_train is None:
            raise StateError("either a solved BsdeSolution or a training ensemble is required")
        sol, _ = solve_delayed_bsde(t, phi, model, gen, payoff, cfg, bm_train, past_u=past_u)
    if not sol.reg_coeffs:
        raise StateError("solution carries no regression surrogates")
    fresh, _ = solve_delayed_bsde(t, phi, model, gen, payoff, cfg, bm_test, past_u=past_u)
    s0, N = sol.start_step, sol.grid.N
    steps = np.arange(s0, N + 1)
    mean_e, max_e, ins = [], [], []
    for s in steps:
        a, b = _gap(fresh.Y[:, s], sol.surrogate(s, fresh.forward))
        mean_e.append(a)
        max_e.append(b)
        ins.append(_gap(sol.Y[:, s], sol.surrogate(s, sol.forward))[0])
    return ConsistencyReport(steps, sol.grid.times[steps], np.array(mean_e), np.array(max_e), np.array(ins))


def value_at(t: float, phi: DiscretePath, model: ForwardModel, gen: GeneratorSpec, payoff,
             cfg: SolverConfig, bm: BrownianEnsemble, stride: int = 1) -> np.ndarray:
    """``u(t, phi)``; runs the upward sweep when the delay window reaches before ``t``."""
    grid = phi.grid
    if grid.index(t) == 0 or not gen.delayed:
        if grid.index(t) == grid.N:
            return np.asarray(payoff(phi.values[None]), dtype=float).reshape(-1)
        return solve_delayed_bsde(t, phi, model, gen, payoff, cfg, bm)[0].u0
    return u_surface(phi, model, gen, payoff, cfg, bm, stride=stride, until=t).values[-1]


def check_u_continuity(t: float, phi: DiscretePath, eps_list, model: ForwardModel, gen: GeneratorSpec,
                       payoff, cfg: SolverConfig, bm: BrownianEnsemble, psi: DiscretePath = None,
                       stride: int = 1):
    """Rows ``(eps, |u(t, phi + eps*psi) - u(t, phi)|)`` with common random numbers.

    The default bump ``psi`` is the constant path 1.
    """
    psi = psi if psi is not None else DiscretePath.constant(phi.grid, np.ones(phi.d))
    base = value_at(t, phi, model, gen, payoff, cfg, bm, stride)
    rows = []
    for eps in eps_list:
        if eps == 0:
            rows.append((0.0, 0.0))
            continue
        bumped = phi.with_values(phi.values + eps * psi.values)
        u = value_at(t, bumped, model, gen, payoff, cfg, bm, stride)
        rows.append((float(eps), float(np.max(np.abs(u - base)))))
    return rows
