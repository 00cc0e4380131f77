"""Command-line front end.

    delaybsde price   --config run.yaml --set grid.N=200 --threads 4
    delaybsde validate

Every run writes its CSV artifacts and a ``manifest.txt`` into the output
directory. Exit codes: 0 success, 1 numerical failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import platform
import sys
import time
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import feynman_kac, finance, oracles
from .bsde import SolverConfig, solve_delayed_bsde
from .config import ExperimentConfig, load_config, parse_config
from .errors import ConfigurationError, DelayBsdeError, DomainError, NonConvergenceError
from .forward import make_model
from .generators import CONTRACTION_THRESHOLD, make_generator, make_lagged, make_moving_average, zero
from .paths import DiscretePath, TimeGrid
from .payoffs import constant as constant_payoff, make_payoff, terminal_value
from .regression import IndicatorBasis, make_basis
from .rng import BrownianEnsemble

logger = logging.getLogger("delaybsde")

COMMANDS = ("price", "risk", "price-large-investor", "surface", "convergence", "validate")


def default_config_text() -> str:
    return resources.files("delaybsde").joinpath("configs/default.yaml").read_text()


# --- builders ---------------------------------------------------------------


def build_grid(cfg: ExperimentConfig, N: int = None) -> TimeGrid:
    return TimeGrid(cfg.number("grid.t0", 0.0), cfg.number("grid.T"),
                    N or cfg.number("grid.N", kind=int))


def build_ensemble(cfg, grid, workers=1, M=None, dim=1) -> BrownianEnsemble:
    return BrownianEnsemble.generate(grid, M or cfg.number("ensemble.M", kind=int),
                                     cfg.number("ensemble.seed", kind=int), dim=dim, workers=workers,
                                     antithetic=bool(cfg.get("ensemble.antithetic", False)))


def _params(cfg, key):
    p = cfg.get(key) or {}
    if not isinstance(p, dict):
        raise cfg.error(key, "must be a mapping")
    return p


def _build(cfg, key, factory):
    try:
        return factory(cfg.get(f"{key}.name"), **_params(cfg, f"{key}.params"))
    except TypeError as err:
        raise cfg.error(f"{key}.params", str(err)) from None
    except (KeyError, DomainError) as err:
        raise cfg.error(f"{key}.params", f"invalid parameters ({err})") from None


def build_model(cfg):
    return _build(cfg, "forward", make_model)


def build_generator(cfg):
    return _build(cfg, "generator", make_generator)


def build_payoff(cfg):
    return _build(cfg, "payoff", make_payoff)


def build_phi(cfg, grid, model) -> DiscretePath:
    x0 = cfg.get("forward.initial", 0.0)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.size == 1:
        x0 = np.repeat(x0, model.d)
    return DiscretePath.constant(grid, x0)


def build_solver(cfg, workers=1) -> SolverConfig:
    basis = make_basis(cfg.get("solver.basis.kind", "polynomial"),
                       int(cfg.get("solver.basis.degree", 3)), cfg.get("solver.basis.lag"))
    return SolverConfig(
        picard_tol=cfg.number("solver.picard_tol", 1e-6),
        picard_max_iter=cfg.number("solver.picard_max_iter", 50, kind=int),
        beta_weight=cfg.number("solver.beta_weight", 0.0),
        contraction_policy=cfg.get("solver.contraction_policy", "warn"),
        basis=basis, workers=workers,
    )


# --- output helpers ---------------------------------------------------------


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_manifest(path: Path, command: str, cfg: ExperimentConfig, wall: float, artifacts, status: str):
    lines = [
        f"command: {command}",
        f"status: {status}",
        f"seed: {cfg.get('ensemble.seed')}",
        f"package_version: {__version__}",
        f"python: {platform.python_version()}",
        f"numpy: {np.__version__}",
        f"wall_time_s: {wall:.3f}",
        f"timestamp: {time.strftime('%Y-%m-%dT%H:%M:%S%z')}",
        "artifacts: " + ", ".join(artifacts),
        "--- config ---",
        cfg.dump().rstrip(),
    ]
    path.write_text("\n".join(lines) + "\n")


# --- subcommands ------------------------------------------------------------


def cmd_price(cfg, out: Path, workers: int, state: dict):
    grid = build_grid(cfg)
    model, gen, payoff = build_model(cfg), build_generator(cfg), build_payoff(cfg)
    phi = build_phi(cfg, grid, model)
    bm = build_ensemble(cfg, grid, workers, dim=model.d_noise)
    sol, trace = solve_delayed_bsde(grid.t0, phi, model, gen, payoff, build_solver(cfg, workers), bm)
    state["trace"] = trace
    write_rows(out / "result.csv", ["quantity", "value", "std_error"],
               [("u0", sol.u0[c], sol.std_error[c]) for c in range(sol.u0.size)])
    trace.to_csv(out / "picard_trace.csv")
    sol.to_csv(out / "solution.csv")
    print(f"u0 = {float(sol.u0[0]):.6f} +/- {float(sol.std_error[0]):.6f} "
          f"({trace.iterations} Picard iterations)")
    return ["result.csv", "picard_trace.csv", "solution.csv"]


def cmd_risk(cfg, out, workers, state):
    grid = build_grid(cfg)
    model, payoff = build_model(cfg), build_payoff(cfg)
    phi = build_phi(cfg, grid, model)
    bm = build_ensemble(cfg, grid, workers, dim=model.d_noise)
    beta = cfg.number("risk.beta", 0.0)
    delta = cfg.number("risk.delta", grid.dt)
    sign = int(cfg.get("risk.sign", 1))
    try:
        spec = finance.RiskMeasureSpec(beta, delta, payoff)
        res = finance.risk_measure(spec, model, build_solver(cfg, workers), bm, phi, sign=sign)
    except DomainError as err:
        raise cfg.error("risk", str(err)) from None
    state["trace"] = res.trace
    plain, plain_se = finance.plain_expectation(payoff, model, bm, phi)
    write_rows(out / "result.csv", ["quantity", "value", "std_error"],
               [("rho0", res.rho0, res.std_error), ("plain_expectation", sign * plain, plain_se)])
    res.trace.to_csv(out / "picard_trace.csv")
    res.solution.to_csv(out / "solution.csv")
    print(f"rho0 = {res.rho0:.6f} +/- {res.std_error:.6f} (plain expectation {sign * plain:.6f})")
    return ["result.csv", "picard_trace.csv", "solution.csv"]


def cmd_large_investor(cfg, out, workers, state):
    grid = build_grid(cfg)
    payoff = build_payoff(cfg)
    market = _build(cfg, "market", finance.make_market)
    bm = build_ensemble(cfg, grid, workers)
    res = finance.price_large_investor(market, payoff, build_solver(cfg, workers), bm)
    state["trace"] = res.trace
    write_rows(out / "result.csv", ["quantity", "value", "std_error"],
               [("x0", res.x0, res.std_error),
                ("replication_residual_mean", res.replication_residual,
                 res.replication_se)])
    res.trace.to_csv(out / "picard_trace.csv")
    res.hedge_to_csv(out / "hedge.csv")
    print(f"x0 = {res.x0:.6f} +/- {res.std_error:.6f}; replication residual mean "
          f"{res.replication_residual:.3e}")
    return ["result.csv", "picard_trace.csv", "hedge.csv"]


def cmd_surface(cfg, out, workers, state):
    grid = build_grid(cfg)
    model, gen, payoff = build_model(cfg), build_generator(cfg), build_payoff(cfg)
    phi = build_phi(cfg, grid, model)
    bm = build_ensemble(cfg, grid, workers, dim=model.d_noise)
    stride = cfg.number("surface.stride", 1, kind=int, minimum=1)
    surf = feynman_kac.u_surface(phi, model, gen, payoff, build_solver(cfg, workers), bm, stride=stride)
    surf.to_csv(out / "surface.csv")
    print(f"surface: {len(surf.times)} nodes, u(t0) = {float(surf.values[0, 0]):.6f}")
    return ["surface.csv"]


def convergence_reference(cfg, grid):
    """Oracle value for the configured problem, or ``None`` for self-reference."""
    kind = cfg.get("convergence.oracle", "black_scholes")
    if kind == "black_scholes":
        if cfg.get("forward.name") != "gbm" or cfg.get("payoff.name") not in ("call", "put"):
            raise cfg.error("convergence.oracle", "black_scholes needs a gbm forward and a call/put payoff")
        gname = cfg.get("generator.name")
        r = 0.0
        if gname == "discount":
            r = float(cfg.get("generator.params.r", 0.0))
        elif gname != "zero":
            raise cfg.error("convergence.oracle", "black_scholes needs a zero or discount generator")
        mu = float(cfg.get("forward.params.mu", 0.0))
        if abs(mu - r) > 1e-15:
            raise cfg.error("convergence.oracle", "black_scholes needs forward drift equal to the rate")
        fn = oracles.black_scholes_call if cfg.get("payoff.name") == "call" else oracles.black_scholes_put
        return fn(float(cfg.get("forward.initial", 100.0)), float(cfg.get("payoff.params.strike", 100.0)),
                  r, float(cfg.get("forward.params.vol", 0.2)), grid.T - grid.t0)
    if kind == "delay_ode":
        if cfg.get("payoff.name") != "constant":
            raise cfg.error("convergence.oracle", "delay_ode needs a constant payoff")
        ref = oracles.delay_ode_backward(float(cfg.get("payoff.params.c", 1.0)), build_generator(cfg),
                                         TimeGrid(grid.t0, grid.T, int(cfg.get("convergence.reference_N", 2000))))
        return float(ref.y0[0])
    if kind == "none":
        return None
    raise cfg.error("convergence.oracle", f"unknown oracle {kind!r}")


def cmd_convergence(cfg, out, workers, state):
    grid = build_grid(cfg)
    ref = convergence_reference(cfg, grid)
    Ns = [int(n) for n in cfg.get("convergence.N", [25, 50, 100, 200])]
    Ms = [int(m) for m in cfg.get("convergence.M", [1000, 10000, 100000])]
    model, gen, payoff = build_model(cfg), build_generator(cfg), build_payoff(cfg)
    solver = build_solver(cfg, workers)
    rows = []
    for N in Ns:
        g = build_grid(cfg, N)
        phi = build_phi(cfg, g, model)
        for M in Ms:
            bm = build_ensemble(cfg, g, workers, M=M, dim=model.d_noise)
            sol, _ = solve_delayed_bsde(g.t0, phi, model, gen, payoff, solver, bm)
            rows.append([N, M, float(sol.u0[0]), float(sol.std_error[0])])
            logger.info("N=%d M=%d u0=%.6f", N, M, sol.u0[0])
    if ref is None:
        ref = rows[-1][2]
    for r in rows:
        r += [float(ref), abs(r[2] - ref)]
        print(f"N={r[0]:4d} M={r[1]:7d} u0={r[2]:.6f} se={r[3]:.2e} err={r[5]:.2e}")
    write_rows(out / "convergence.csv", ["N", "M", "u0", "std_error", "reference", "abs_error"], rows)
    return ["convergence.csv"]


def validation_checks(seed: int = 1):
    """Oracle suite: rows ``(check, value, reference, tolerance, passed)``."""
    rows = []

    def add(name, value, reference, tol, passed=None):
        ok = abs(value - reference) <= tol if passed is None else passed
        rows.append((name, float(value), float(reference), float(tol), bool(ok)))

    c = oracles.black_scholes_call(100, 95, 0.03, 0.25, 0.7)
    p = oracles.black_scholes_put(100, 95, 0.03, 0.25, 0.7)
    add("put_call_parity", c - p, 100 - 95 * math.exp(-0.03 * 0.7), 1e-10)
    # lognormal payoff integrated on a fine log-space grid
    x = np.linspace(-12, 12, 400001)
    s_T = 100 * np.exp(-0.02 + 0.2 * x)
    integrand = np.maximum(s_T - 100, 0) * np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
    quad = float(np.sum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(x)))
    add("black_scholes_vs_quadrature", oracles.black_scholes_call(100, 100, 0, 0.2, 1), quad, 1e-6)
    add("contraction_threshold", CONTRACTION_THRESHOLD, 1 / 290, 0.0)

    gen = make_moving_average(0.5, 0.1)
    _, ratios = oracles.delay_ode_halving(1.0, gen, 1.0, Ns=(50, 100, 200), ref_N=1600)
    add("delay_quadrature_order", min(ratios), 4.0, 0.8,
        passed=all(abs(q - 4.0) <= 0.8 for q in ratios))
    from .generators import discount
    y0 = oracles.delay_ode_backward(1.0, discount(0.05), TimeGrid(0, 1, 200)).y0[0]
    add("delay_quadrature_discount", y0, math.exp(-0.05), 1e-6)

    g = TimeGrid(0.0, 1.0, 100)
    ref = oracles.delay_ode_backward(1.0, gen, TimeGrid(0, 1, 2000)).y0[0]
    bm = BrownianEnsemble.generate(g, 1000, seed)
    model = make_model("constant", drift=0.0, vol=0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol, _ = solve_delayed_bsde(0.0, DiscretePath.constant(g, [1.0]), model, gen, constant_payoff(1.0),
                                    SolverConfig(), bm)
        add("solver_vs_delay_quadrature", sol.u0[0], ref, 5e-3)

        g8 = TimeGrid(0.0, 1.0, 8)
        phi8 = DiscretePath.constant(g8, [1.0])
        gbm = make_model("gbm", mu=0.05, vol=0.2)
        tree = oracles.build_tree(phi8, gbm)
        lag = make_lagged(0.1, 2 * g8.dt)
        exact = oracles.tree_bsde_exact(tree, tree.states[-1], lag)
        bmt = BrownianEnsemble.from_increments(g8, tree.increments())
        sol, _ = solve_delayed_bsde(0.0, phi8, gbm, lag, terminal_value(),
                                    SolverConfig(basis=IndicatorBasis(), picard_tol=1e-14,
                                                 picard_max_iter=200), bmt)
        add("solver_vs_tree", sol.u0[0], exact.y0[0], 1e-8)

    z = zero()
    looped = oracles.tree_bsde_exact(tree, tree.states[-1], z)
    one_shot, _ = oracles.tree_backward_induction(tree, tree.states[-1], z)
    add("tree_zero_delay_one_shot", looped.y0[0], one_shot[0][0, 0], 0.0)
    return rows


def cmd_validate(cfg, out, workers, state):
    rows = validation_checks(cfg.number("ensemble.seed", kind=int))
    write_rows(out / "validate.csv", ["check", "value", "reference", "tolerance", "passed"], rows)
    width = max(len(r[0]) for r in rows)
    for name, v, ref, tol, ok in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  value={v:.12g} reference={ref:.12g} tol={tol:g}")
    state["failed"] = not all(r[4] for r in rows)
    return ["validate.csv"]


HANDLERS = {
    "price": cmd_price,
    "risk": cmd_risk,
    "price-large-investor": cmd_large_investor,
    "surface": cmd_surface,
    "convergence": cmd_convergence,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="delaybsde", description="Delayed BSDE regression Monte Carlo")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("-c", "--config", help="YAML experiment file (default: bundled default.yaml)")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config entry by dotted path, e.g. solver.picard_tol=1e-7")
    ap.add_argument("-o", "--out", help="output directory (overrides outputs.directory)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for path simulation")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return ap


def _log_warning(message, category, filename, lineno, file=None, line=None):
    logger.warning("%s", message)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    previous = warnings.showwarning
    warnings.showwarning = _log_warning
    try:
        return _run(args)
    finally:
        warnings.showwarning = previous


def _run(args) -> int:
    try:
        if args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        if args.config:
            cfg = load_config(args.config, args.overrides)
        else:
            cfg = parse_config(default_config_text(), "default.yaml", args.overrides)
        out = Path(args.out or cfg.get("outputs.directory", "out"))
        out.mkdir(parents=True, exist_ok=True)
    except ConfigurationError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    state = {}
    start = time.perf_counter()
    try:
        artifacts = HANDLERS[args.command](cfg, out, args.threads, state)
        status = "failed" if state.get("failed") else "ok"
        code = 1 if state.get("failed") else 0
    except ConfigurationError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except DelayBsdeError as err:
        artifacts = []
        trace = getattr(err, "trace", None) or state.get("trace")
        msg = f"numerical failure: {err}"
        if isinstance(err, NonConvergenceError) or trace is not None:
            trace_path = out / "picard_trace.csv"
            if trace is not None:
                trace.to_csv(trace_path)
                artifacts.append(trace_path.name)
                msg += f" (Picard trace: {trace_path})"
        print(msg, file=sys.stderr)
        status, code = f"error: {type(err).__name__}", 1
    write_manifest(out / "manifest.txt", args.command, cfg, time.perf_counter() - start, artifacts, status)
    return code


if __name__ == "__main__":
    sys.exit(main())
