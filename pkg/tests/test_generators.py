import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from delaybsde.errors import ConfigurationError, DomainError
from delaybsde.generators import (
    CONTRACTION_THRESHOLD,
    GAMMA_GRID,
    DelayMeasure,
    check_contraction,
    contraction_for_generator,
    discount,
    linear_driver,
    make_generator,
    make_lagged,
    make_markovian,
    make_moving_average,
    make_weighted_linear,
    probe_lipschitz,
    zero,
)
from delaybsde.paths import PathSegment, TimeGrid, DiscretePath

X = np.zeros((1, 1, 1))
Y = np.zeros((1, 1))
Z = np.zeros((1, 1, 1))


def seg(values):
    return np.asarray(values, dtype=float).reshape(1, -1, 1)


def theta_window(delta, k):
    return -delta + (delta / k) * np.arange(k + 1)


def test_moving_average_examples():
    gen = make_moving_average(0.7, 0.2)
    assert gen.eval(0.5, X, Y, Z, seg(np.full(5, 3.0)))[0, 0] == pytest.approx(2.1)
    unit = make_moving_average(1.0, 1.0)
    assert unit.eval(0.5, X, Y, Z, seg(theta_window(1.0, 10)))[0, 0] == pytest.approx(-0.5)
    assert make_moving_average(0.0, 0.2).eval(0.5, X, Y, Z, seg(np.arange(5.0)))[0, 0] == 0.0
    assert gen.L == 0 and gen.K == pytest.approx(0.49)
    with pytest.raises(DomainError):
        make_moving_average(1.0, 0.0)


def test_lagged_examples():
    gen = make_lagged(2.0, 0.3)
    assert gen.eval(0.5, X, Y, Z, seg(np.full(4, 1.5)))[0, 0] == pytest.approx(3.0)
    assert gen.eval(0.5, X, Y, Z, seg(theta_window(0.3, 3)))[0, 0] == pytest.approx(-0.6)
    assert make_lagged(0.0, 0.3).eval(0.5, X, Y, Z, seg(np.ones(4)))[0, 0] == 0.0


def test_weighted_linear_examples():
    one = make_weighted_linear(lambda s: 1.0, DelayMeasure("uniform"), 0.2)
    assert one.eval(0.5, X, Y, Z, seg(np.full(5, 4.0)))[0, 0] == pytest.approx(4.0)
    dirac_one = make_weighted_linear(lambda s: 1.0, DelayMeasure("dirac"), 0.2)
    assert dirac_one.eval(0.0, X, Y, Z, seg(np.ones(5)))[0, 0] == 0.0
    ident = make_weighted_linear(lambda s: s, DelayMeasure("dirac"), 0.2)
    assert ident.eval(0.5, X, Y, Z, seg(np.ones(5)))[0, 0] == pytest.approx(0.3)


def test_markovian_examples():
    assert discount(0.05).eval(0.0, X, np.ones((1, 1)), Z)[0, 0] == pytest.approx(-0.05)
    assert zero().eval(0.0, X, np.ones((1, 1)), Z)[0, 0] == 0.0
    f = make_markovian(lambda t, x, y, z: y + z.sum(axis=-1), L=1.0)
    assert f.eval(0.0, X, np.full((1, 1), 2.0), np.full((1, 1, 1), 3.0))[0, 0] == 5.0
    assert f.K == 0 and not f.delayed


def test_single_sample_wrapper():
    g = TimeGrid(0.0, 1.0, 10)
    path = DiscretePath.constant(g, [1.0])
    s = PathSegment(0.2, np.array([-0.2, -0.1, 0.0]), np.array([[1.0], [2.0], [3.0]]))
    out = make_moving_average(1.0, 0.2).evaluate(0.5, path, [0.0], [[0.0]], s)
    assert out[0] == pytest.approx(2.0)


def test_registry():
    assert make_generator("moving_average", beta=0.5, delta=0.1).K == pytest.approx(0.25)
    assert make_generator("markovian", name="discount", params={"r": 0.1}).L == pytest.approx(0.1)
    assert make_generator("discount", r=0.1).name == "discount"
    wl = make_generator("weighted_linear", g="exp_decay", delta=0.1, scale=0.5)
    assert wl.K == pytest.approx(0.25)
    with pytest.raises(ConfigurationError):
        make_generator("quadratic")
    with pytest.raises(ConfigurationError):
        make_generator("weighted_linear", g="cubic", delta=0.1)


def test_contraction_examples():
    assert check_contraction(0.0, 1.0, 0.1, 1.0).lhs == 0.0
    assert check_contraction(0.0, 1.0, 0.1, 1.0).satisfied
    rep = check_contraction(1e-4, 1.0, 0.1, 1.0, gamma=0.5)
    assert rep.lhs == pytest.approx(1e-4 * math.exp(1.25), rel=1e-14)
    assert rep.satisfied and rep.margin == pytest.approx(1 / 290 - rep.lhs)
    assert CONTRACTION_THRESHOLD == 1 / 290
    with pytest.raises(DomainError):
        check_contraction(1e-4, 1.0, 0.1, 1.0, gamma=1.0)
    with pytest.raises(DomainError):
        check_contraction(1e-4, 0.0, 0.1, 1.0)


def test_gamma_grid_resolution():
    assert GAMMA_GRID[0] == 0.001 and GAMMA_GRID[-1] == 0.999
    np.testing.assert_allclose(np.diff(GAMMA_GRID), 1e-3)
    rep = check_contraction(1e-3, 2.0, 0.05, 2.0)
    vals = [check_contraction(1e-3, 2.0, 0.05, 2.0, gamma=g).lhs for g in GAMMA_GRID]
    assert rep.lhs == min(vals)
    assert rep.gamma_star == GAMMA_GRID[int(np.argmin(vals))]


def test_contraction_for_bundled_generators():
    assert not contraction_for_generator(make_moving_average(0.5, 0.1), 1.0).satisfied
    assert contraction_for_generator(make_moving_average(0.04, 0.1), 1.0).satisfied
    assert contraction_for_generator(discount(0.05), 1.0).satisfied


def _mp_lhs(K, L, delta, T, gamma):
    K, L, delta, T, gamma = (mp.mpf(v) for v in (K, L, delta, T, gamma))
    return K * gamma * mp.exp((gamma + 6 * L**2 / gamma) * delta) / ((1 - gamma) * L**2) * max(mp.mpf(1), T)


def test_formula_matches_arbitrary_precision():
    mp.mp.dps = 40
    rng = np.random.default_rng(2024)
    for _ in range(100):
        K, L = rng.uniform(0, 0.01), rng.uniform(0.1, 5)
        delta, T, gamma = rng.uniform(0.01, 0.5), rng.uniform(0.1, 5), rng.uniform(0.01, 0.99)
        got = check_contraction(K, L, delta, T, gamma=gamma).lhs
        ref = _mp_lhs(K, L, delta, T, gamma)
        assert abs(got - float(ref)) <= 1e-12 * max(1.0, abs(float(ref)))


params = dict(
    K=st.floats(0, 1), L=st.floats(0.05, 5), delta=st.floats(0.001, 1), T=st.floats(0.01, 5),
    gamma=st.floats(0.01, 0.99),
)


@given(**params)
def test_zero_coupling_always_passes(K, L, delta, T, gamma):
    assert check_contraction(0.0, L, delta, T, gamma=gamma).satisfied


@settings(max_examples=200)
@given(K=st.floats(0, 1), K2=st.floats(0, 1), L=st.floats(0.05, 5), delta=st.floats(0.001, 0.5),
       d2=st.floats(0.001, 0.5), T=st.floats(0.01, 5), T2=st.floats(0.01, 5), gamma=st.floats(0.01, 0.99))
def test_contraction_monotone(K, K2, L, delta, d2, T, T2, gamma):
    def ok(k, d, t):
        return check_contraction(k, L, d, t, gamma=gamma).satisfied

    if not ok(K, delta, T):
        assert not ok(max(K, K2), delta, T)
        assert not ok(K, max(delta, d2), T)
        if T >= 1:
            assert not ok(K, delta, max(T, T2))


@given(st.integers(1, 200), st.sampled_from(["uniform", "dirac"]))
def test_measure_weights_sum_to_one(k, kind):
    w = DelayMeasure(kind).weights_for(k)
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12


@given(st.lists(st.floats(0, 10), min_size=2, max_size=30).filter(lambda v: sum(v) > 0))
def test_discrete_measure_weights(raw):
    w = np.asarray(raw) / np.sum(raw)
    w[-1] = 1.0 - w[:-1].sum()
    if w[-1] < 0:
        return
    m = DelayMeasure("discrete", tuple(w))
    assert abs(sum(m.weights_for(len(w) - 1)) - 1) < 1e-12
    with pytest.raises(ConfigurationError):
        m.weights_for(len(w))


def test_invalid_discrete_measure():
    with pytest.raises(DomainError):
        DelayMeasure("discrete", (0.5, 0.6))
    with pytest.raises(DomainError):
        DelayMeasure("gaussian")


BUNDLED = [
    make_moving_average(0.5, 0.1),
    make_lagged(0.3, 0.1),
    make_weighted_linear(lambda s: math.exp(-s), DelayMeasure("uniform"), 0.1, g_bound=1.0),
    make_generator("weighted_linear", g="identity", delta=0.1, measure="dirac"),
    zero(),
    discount(0.05),
    linear_driver(0.2, -0.3, 1.0),
]


@pytest.mark.parametrize("gen", BUNDLED, ids=lambda g: g.name)
def test_declared_constants_bound_probes(gen):
    k = 10
    x = np.ones((1, 3, 1))
    for t in (0.05, 0.5, 1.0):
        l_ratio, k_ratio = probe_lipschitz(gen, t, x, k, n=3000, seed=1)
        assert l_ratio <= gen.L * (1 + 1e-9) + 1e-12
        assert k_ratio <= gen.K * (1 + 1e-9) + 1e-12
