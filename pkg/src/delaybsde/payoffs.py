"""Terminal functionals ``h`` on sampled paths ``(M, N+1, d) -> (M, 1)``."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError


def _col(v):
    return np.asarray(v, dtype=float).reshape(-1, 1)


def terminal_value(component: int = 0):
    return lambda X: _col(X[:, -1, component])


def constant(c: float = 1.0):
    return lambda X: np.full((X.shape[0], 1), float(c))


def call(strike: float = 100.0):
    return lambda X: _col(np.maximum(X[:, -1, 0] - strike, 0.0))


def put(strike: float = 100.0):
    return lambda X: _col(np.maximum(strike - X[:, -1, 0], 0.0))


def asian_call(strike: float = 100.0):
    """Call on the arithmetic average of the path over the whole grid."""
    return lambda X: _col(np.maximum(X[:, :, 0].mean(axis=1) - strike, 0.0))


def lookback_call(strike: float = 100.0):
    return lambda X: _col(np.maximum(X[:, :, 0].max(axis=1) - strike, 0.0))


PAYOFFS = {
    "terminal_value": terminal_value,
    "constant": constant,
    "call": call,
    "put": put,
    "asian_call": asian_call,
    "lookback_call": lookback_call,
}


def make_payoff(name: str, /, **params):
    try:
        return PAYOFFS[name](**params)
    except KeyError:
        raise ConfigurationError(f"unknown payoff {name!r}") from None
