"""Least-squares conditional expectations for regression Monte Carlo.

A basis is fitted once per time step on a forward ensemble and returns a
step regressor whose ``project`` maps ensemble targets onto their fitted
conditional expectations. The same regressor can later be evaluated on
fresh paths, which is how the value functional ``u(s, .)`` is exported.
"""

from __future__ import annotations

import logging
from itertools import combinations_with_replacement

import numpy as np

from .errors import IllConditionedRegressionError, StateError

logger = logging.getLogger(__name__)

COND_LIMIT = 1e12


class MeanRegressor:
    """Projection on constants: conditioning on the trivial sigma-algebra."""

    q = 1
    condition = 1.0

    def design_matrix(self):
        return None

    def project(self, target, A=None):
        c = target.mean(axis=0)
        return np.broadcast_to(c, target.shape).copy(), c

    def predict(self, coeffs, fwd, i):
        return np.broadcast_to(coeffs, (fwd.paths.shape[0],) + np.shape(coeffs)).copy()


class LinearStepRegressor:
    """Normal-equations projection on standardised polynomial features."""

    def __init__(self, basis, i, fwd, cond_limit=COND_LIMIT):
        self.basis = basis
        raw = basis.raw_features(i, fwd.paths[:, : i + 1], fwd.grid.dt)
        mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        self.keep = std > 1e-12 * np.maximum(1.0, np.abs(mean))
        self.keep &= _independent(raw, mean, std, self.keep)
        self.mean = mean[self.keep]
        self.std = std[self.keep]
        A = self._design(raw)
        self.q = A.shape[1]
        gram = np.einsum("mi,mj->ij", A, A) / A.shape[0]
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > cond_limit:
            lam = 1e-10 * np.trace(gram) / self.q
            gram = gram + lam * np.eye(self.q)
            ridge_cond = np.linalg.cond(gram)
            logger.warning("step %d: cond %.3e above limit, ridge %.3e applied", i, cond, lam)
            if not np.isfinite(ridge_cond) or ridge_cond > cond_limit:
                raise IllConditionedRegressionError(i, ridge_cond)
            cond = ridge_cond
        self.condition = cond
        self.chol = np.linalg.cholesky(gram)
        self._fwd = fwd
        self.i = i

    def design_matrix(self):
        raw = self.basis.raw_features(self.i, self._fwd.paths[:, : self.i + 1], self._fwd.grid.dt)
        return self._design(raw)

    def _design(self, raw):
        z = (raw[:, self.keep] - self.mean) / self.std
        return polynomial_features(z, self.basis.degree)

    def _solve(self, rhs):
        w = np.linalg.solve(self.chol, rhs)
        return np.linalg.solve(self.chol.T, w)

    def project(self, target, A=None):
        if A is None:
            A = self.design_matrix()
        M = target.shape[0]
        flat = target.reshape(M, -1)
        coeffs = self._solve(np.einsum("mi,mc->ic", A, flat) / M)
        fitted = np.einsum("mi,ic->mc", A, coeffs)
        return fitted.reshape(target.shape), coeffs.reshape((self.q,) + target.shape[1:])

    def predict(self, coeffs, fwd, i):
        raw = self.basis.raw_features(i, fwd.paths[:, : i + 1], fwd.grid.dt)
        A = self._design(raw)
        flat = np.einsum("mi,ic->mc", A, coeffs.reshape(self.q, -1))
        return flat.reshape((A.shape[0],) + coeffs.shape[1:])


def _independent(raw, mean, std, keep, tol=1e-10):
    """Greedy mask dropping raw features that are affine in the ones kept before them."""
    out = keep.copy()
    idx = np.flatnonzero(keep)
    if idx.size < 2:
        return out
    z = (raw[:, idx] - mean[idx]) / std[idx]
    C = np.einsum("mi,mj->ij", z, z) / z.shape[0]
    chosen = []
    for a, j in enumerate(idx):
        if chosen:
            S = np.array(chosen)
            r2 = C[a, a] - C[a, S] @ np.linalg.solve(C[np.ix_(S, S)], C[S, a])
            if r2 <= tol:
                out[j] = False
                continue
        chosen.append(a)
    return out


def polynomial_features(z: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of total degree ``<= degree`` in the columns of ``z`` (constant first)."""
    cols = [np.ones(z.shape[0])]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(z.shape[1]), deg):
            cols.append(np.prod(z[:, combo], axis=1))
    return np.stack(cols, axis=1)


class PolynomialBasis:
    """Polynomial of total degree ``degree`` in a small set of path features.

    ``features`` selects the raw inputs: ``"state"`` (current value),
    ``"state+average"`` (current value and running mean) or
    ``"state+lagged"`` (current value and the value ``lag`` time units ago).
    """

    def __init__(self, degree: int = 3, features: str = "state", lag: float = None,
                 cond_limit: float = COND_LIMIT):
        if degree < 0:
            raise ValueError("degree must be nonnegative")
        if features not in ("state", "state+average", "state+lagged"):
            raise ValueError(f"unknown feature set {features!r}")
        if features == "state+lagged" and not lag:
            raise ValueError("state+lagged features need a positive lag")
        self.degree = degree
        self.features = features
        self.lag = lag
        self.cond_limit = cond_limit

    @property
    def kind(self):
        return "polynomial" if self.features == "state" else self.features

    def raw_features(self, i, hist, dt):
        x = hist[:, -1]
        if self.features == "state":
            return x
        if self.features == "state+average":
            return np.concatenate([x, hist.mean(axis=1)], axis=1)
        k = int(round(self.lag / dt))
        return np.concatenate([x, hist[:, max(hist.shape[1] - 1 - k, 0)]], axis=1)

    def fit_step(self, i, fwd):
        return LinearStepRegressor(self, i, fwd, self.cond_limit)


class IndicatorStepRegressor:
    """Exact conditioning on the Brownian increment history of a finite ensemble.

    Samples sharing the same increment history up to step ``i`` form one
    atom of the filtration; projecting on atom indicators is averaging
    within each atom.
    """

    def __init__(self, i, fwd):
        hist = np.ascontiguousarray(fwd.bm.increments[:, :i].reshape(fwd.M, -1))
        if hist.shape[1] == 0:
            self.labels = np.zeros(fwd.M, dtype=np.intp)
            self.keys = [b""]
        else:
            uniq, self.labels = np.unique(hist, axis=0, return_inverse=True)
            self.labels = self.labels.reshape(-1)
            self.keys = [row.tobytes() for row in uniq]
        self.q = len(self.keys)
        self.counts = np.bincount(self.labels, minlength=self.q).astype(float)
        self.condition = 1.0
        self.i = i

    def design_matrix(self):
        return None

    def project(self, target, A=None):
        M = target.shape[0]
        flat = target.reshape(M, -1)
        sums = np.stack(
            [np.bincount(self.labels, weights=flat[:, c], minlength=self.q) for c in range(flat.shape[1])],
            axis=1,
        )
        means = sums / self.counts[:, None]
        fitted = means[self.labels]
        coeffs = dict(zip(self.keys, means.reshape((self.q,) + target.shape[1:])))
        return fitted.reshape(target.shape), coeffs

    def predict(self, coeffs, fwd, i):
        hist = np.ascontiguousarray(fwd.bm.increments[:, :i].reshape(fwd.M, -1))
        try:
            return np.stack([coeffs[row.tobytes() if hist.shape[1] else b""] for row in hist])
        except KeyError:
            raise StateError(f"step {i}: increment history not present in the fitted tree") from None


class IndicatorBasis:
    """Indicator functions of the filtration atoms; exact on enumerated trees."""

    kind = "indicator"
    degree = None

    def fit_step(self, i, fwd):
        return IndicatorStepRegressor(i, fwd)


def make_basis(kind: str = "polynomial", degree: int = 3, lag: float = None) -> object:
    if kind in ("polynomial", "state"):
        return PolynomialBasis(degree, "state")
    if kind in ("state+average", "running_average"):
        return PolynomialBasis(degree, "state+average")
    if kind in ("state+lagged", "lagged"):
        return PolynomialBasis(degree, "state+lagged", lag=lag)
    if kind in ("indicator", "indicator-exact", "tree"):
        return IndicatorBasis()
    raise ValueError(f"unknown basis kind {kind!r}")
