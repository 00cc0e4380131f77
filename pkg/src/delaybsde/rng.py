"""Counter-based Gaussian increments.

Every Brownian increment is a pure function of ``(seed, path, step, dim)``:
the tuple is fed as a counter through Philox4x32-10 and the four output words
become two standard normals via Box-Muller. Any subset of paths can therefore
be generated independently, in any order, by any number of workers, and the
ensemble is bit-identical.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .paths import TimeGrid

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)

# Fixed path-chunk width; results never depend on how chunks map to workers.
CHUNK = 4096


def philox4x32(counter, key, rounds: int = 10):
    """Vectorised Philox4x32 block function.

    ``counter`` is a sequence of four equally shaped integer arrays (the
    32-bit counter words), ``key`` a pair of 32-bit integers. Returns four
    ``uint64`` arrays holding the 32-bit output words.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK for c in counter)
    k0 = np.uint64(int(key[0]) & 0xFFFFFFFF)
    k1 = np.uint64(int(key[1]) & 0xFFFFFFFF)
    for _ in range(rounds):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (p1 >> _S32) ^ c1 ^ k0, p1 & _MASK, (p0 >> _S32) ^ c3 ^ k1, p0 & _MASK
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


def _uniform53(hi, lo):
    a = (hi >> np.uint64(5)).astype(np.float64)
    b = (lo >> np.uint64(6)).astype(np.float64)
    return (a * 67108864.0 + b) / 9007199254740992.0


def standard_normals(seed: int, paths: np.ndarray, n_steps: int, dim: int) -> np.ndarray:
    """Standard normals of shape ``(len(paths), n_steps, dim)`` for the given path indices."""
    paths = np.asarray(paths, dtype=np.uint64)
    n_pairs = (dim + 1) // 2
    p, s, j = np.meshgrid(
        paths, np.arange(n_steps, dtype=np.uint64), np.arange(n_pairs, dtype=np.uint64),
        indexing="ij",
    )
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    w0, w1, w2, w3 = philox4x32((s, p & _MASK, j, p >> _S32), (seed, seed >> 32))
    u1 = _uniform53(w0, w1)
    u2 = _uniform53(w2, w3)
    r = np.sqrt(-2.0 * np.log1p(-u1))
    ang = 2.0 * np.pi * u2
    z = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1).reshape(len(paths), n_steps, -1)
    return z[:, :, :dim]


def chunk_bounds(M: int, chunk: int = CHUNK):
    return [(a, min(a + chunk, M)) for a in range(0, M, chunk)]


def map_chunks(fn, M: int, workers: int = 1, chunk: int = CHUNK):
    """Apply ``fn(a, b)`` to fixed path chunks, returning results in chunk order."""
    bounds = chunk_bounds(M, chunk)
    if workers <= 1 or len(bounds) == 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda ab: fn(*ab), bounds))


@dataclass(frozen=True, eq=False)
class BrownianEnsemble:
    """``M`` sampled Brownian paths on ``grid``; ``increments`` has shape ``(M, N, d')``.

    With ``antithetic`` set, path ``j + M/2`` is the mirror image of path ``j``.
    """

    grid: TimeGrid
    increments: np.ndarray
    seed: int | None = None
    antithetic: bool = False

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim == 2:
            inc = inc[:, :, None]
        if inc.ndim != 3 or inc.shape[1] != self.grid.N:
            raise DomainError(f"increments must have shape (M, N, d'), got {inc.shape}")
        if self.antithetic and inc.shape[0] % 2:
            raise DomainError("antithetic ensembles need an even number of paths")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def M(self) -> int:
        return self.increments.shape[0]

    @property
    def dim(self) -> int:
        return self.increments.shape[2]

    @classmethod
    def generate(cls, grid: TimeGrid, M: int, seed: int, dim: int = 1, workers: int = 1,
                 antithetic: bool = False):
        if M < 1 or dim < 1:
            raise DomainError("ensemble size and dimension must be positive")
        if antithetic and M % 2:
            raise DomainError("antithetic ensembles need an even number of paths")
        scale = np.sqrt(grid.dt)
        n = M // 2 if antithetic else M

        def block(a, b):
            return scale * standard_normals(seed, np.arange(a, b), grid.N, dim)

        inc = np.concatenate(map_chunks(block, n, workers), axis=0)
        if antithetic:
            inc = np.concatenate([inc, -inc], axis=0)
        return cls(grid, inc, seed, antithetic)

    @classmethod
    def from_increments(cls, grid: TimeGrid, increments) -> "BrownianEnsemble":
        return cls(grid, increments, None)

    def std_error(self, values) -> np.ndarray:
        """Standard error of the ensemble mean of per-path ``values`` (leading axis ``M``)."""
        v = np.asarray(values, dtype=float)
        if self.antithetic:
            h = v.shape[0] // 2
            v = 0.5 * (v[:h] + v[h:])
        return v.std(axis=0) / np.sqrt(v.shape[0])

    def paths(self) -> np.ndarray:
        """Brownian paths started at zero, shape ``(M, N+1, d')``."""
        w = np.zeros((self.M, self.grid.N + 1, self.dim))
        np.cumsum(self.increments, axis=1, out=w[:, 1:])
        return w
