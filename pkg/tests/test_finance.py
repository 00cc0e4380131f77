import csv

import numpy as np
import pytest

from delaybsde.bsde import SolverConfig
from delaybsde.errors import DomainError, SingularVolatilityError
from delaybsde.finance import (
    LargeInvestorMarket,
    RiskMeasureSpec,
    constant_market,
    large_investor_generator,
    make_market,
    plain_expectation,
    price_large_investor,
    risk_measure,
)
from delaybsde.forward import make_model
from delaybsde.oracles import black_scholes_call, delay_ode_backward
from delaybsde.generators import make_moving_average
from delaybsde.paths import DiscretePath, TimeGrid
from delaybsde.payoffs import call, constant, put, terminal_value
from delaybsde.rng import BrownianEnsemble

GBM = make_model("gbm", mu=0.0, vol=0.2)


def ensemble(N, M, seed):
    return BrownianEnsemble.generate(TimeGrid(0.0, 1.0, N), M, seed)


def test_forward_price_without_rates():
    res = price_large_investor(constant_market(), terminal_value(), SolverConfig(), ensemble(50, 5000, 1))
    assert abs(res.x0 - 100.0) < 4 * res.std_error


def test_black_scholes_with_rates_and_drift():
    res = price_large_investor(constant_market(r=0.02, mu=0.05), call(100.0), SolverConfig(), ensemble(100, 20000, 2))
    bs = black_scholes_call(100.0, 100.0, 0.02, 0.2, 1.0)
    assert abs(res.x0 - bs) <= max(3 * res.std_error, 0.01 * bs)
    assert abs(res.replication_residual) < 0.02 * bs


def test_constant_claim_needs_no_hedge():
    res = price_large_investor(constant_market(), constant(5.0), SolverConfig(), ensemble(20, 500, 3))
    assert res.x0 == pytest.approx(5.0, abs=1e-10)
    assert np.max(np.abs(res.hedge_mean)) < 1e-10
    assert abs(res.replication_residual) < 1e-10


def test_vanishing_volatility_is_rejected():
    flat = LargeInvestorMarket(r=lambda t, y, p, h: 0 * y, mu=lambda t, y, p, h: 0 * y,
                               sigma=lambda t, y, h: np.full(y.shape, 1e-12), L=0.0, K=0.0)
    with pytest.raises(SingularVolatilityError):
        price_large_investor(flat, call(100.0), SolverConfig(), ensemble(10, 100, 1))
    with pytest.raises(DomainError):
        constant_market(sigma=0.0)


def test_impact_market_runs_and_exports(tmp_path):
    market = make_market("impact")
    gen = large_investor_generator(market, TimeGrid(0.0, 1.0, 50))
    assert gen.L > 0 and gen.K > 0
    res = price_large_investor(market, call(100.0), SolverConfig(), ensemble(50, 3000, 4))
    assert np.isfinite(res.x0) and 0 < res.x0 < 100
    assert np.all((res.hedge_mean >= 0) & (res.hedge_mean <= 100))
    res.hedge_to_csv(tmp_path / "hedge.csv")
    rows = list(csv.reader(open(tmp_path / "hedge.csv")))
    assert rows[0] == ["step", "t", "mean_pi", "std_pi"] and len(rows) == 51


def risk(beta, payoff, N=50, M=3000, seed=5, sign=1):
    bm = ensemble(N, M, seed)
    phi = DiscretePath.constant(bm.grid, [100.0])
    return risk_measure(RiskMeasureSpec(beta, 0.1, payoff), GBM, SolverConfig(), bm, phi, sign=sign)


def test_zero_disappointment_is_plain_expectation():
    res = risk(0.0, put(100.0))
    bm = ensemble(50, 3000, 5)
    mean, se = plain_expectation(put(100.0), GBM, bm, DiscretePath.constant(bm.grid, [100.0]))
    assert abs(res.rho0 - mean) <= 2 * se


def test_constant_position_follows_delay_ode():
    res = risk(0.5, constant(1.0), N=100, M=200)
    ref = delay_ode_backward(1.0, make_moving_average(0.5, 0.1), TimeGrid(0.0, 1.0, 2000)).y0[0]
    assert abs(res.rho0 - ref) < 5e-3


def test_monotone_in_the_position():
    assert risk(0.5, put(100.0)).rho0 >= risk(0.5, put(90.0)).rho0


def test_cash_additivity_without_memory():
    base = risk(0.0, put(100.0)).rho0
    shifted = risk(0.0, lambda X: put(100.0)(X) + 3.0).rho0
    assert shifted == pytest.approx(base + 3.0, abs=1e-10)


def test_terminal_identity_and_sign():
    plus = risk(0.5, put(100.0))
    minus = risk(0.5, put(100.0), sign=-1)
    X = plus.solution.forward.paths
    assert np.array_equal(plus.solution.Y[:, -1], put(100.0)(X))
    assert minus.rho0 == pytest.approx(-plus.rho0, abs=1e-10)
    with pytest.raises(DomainError):
        risk(0.5, put(100.0), sign=0)
    with pytest.raises(DomainError):
        RiskMeasureSpec(0.5, 0.0, put(100.0))
