"""Dense linear-algebra substrate and the pinned deterministic RNG.

Matrices are 2-d row-major ``float64`` numpy arrays throughout the package;
this module provides the checked operations other modules build on, plus a
seeded generator whose stream is identical on every platform.

The generator pipeline is fixed: splitmix64 expands the seed into the
four-word state of xoshiro256++, uniform doubles take the top 53 bits of
each output word, and Gaussians come from Box-Muller on those doubles.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError

_MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_INV_2_53 = 2.0 ** -53


def _splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state and return (new_state, output)."""
    state = (state + _SPLITMIX_GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, *tags: int) -> int:
    """Derive a child seed from a root seed and integer tags.

    Used to give every independent stream (model init, corpus, batches per
    client, ...) its own generator while keeping the whole run a function
    of one root seed.
    """
    s = seed & _MASK64
    for tag in tags:
        s ^= (tag & _MASK64) * _SPLITMIX_GAMMA & _MASK64
        _, s = _splitmix64(s)
    return s


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256++ generator seeded via splitmix64.

    Not safe for concurrent use; each actor owns its own instance.
    """

    __slots__ = ("_s0", "_s1", "_s2", "_s3", "_spare")

    def __init__(self, seed: int):
        state = seed & _MASK64
        state, self._s0 = _splitmix64(state)
        state, self._s1 = _splitmix64(state)
        state, self._s2 = _splitmix64(state)
        _, self._s3 = _splitmix64(state)
        self._spare: float | None = None  # cached Box-Muller mate

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        result = (_rotl((s0 + s3) & _MASK64, 23) + s0) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return result

    def random(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * _INV_2_53

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n), unbiased via rejection."""
        if n <= 0:
            raise DimensionError(f"integer bound must be positive, got {n}")
        limit = _MASK64 + 1 - ((_MASK64 + 1) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def normal(self) -> float:
        """Standard normal via Box-Muller; pairs are generated and cached."""
        if self._spare is not None:
            z = self._spare
            self._spare = None
            return z
        u1 = self.random()
        while u1 <= 0.0:
            u1 = self.random()
        u2 = self.random()
        radius = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare = radius * math.sin(theta)
        return radius * math.cos(theta)

    def gamma(self, shape: float) -> float:
        """Gamma(shape, 1) via Marsaglia-Tsang squeeze."""
        if shape <= 0.0:
            raise DimensionError(f"gamma shape must be positive, got {shape}")
        if shape < 1.0:
            # boost: Gamma(a) = Gamma(a + 1) * U^(1/a)
            u = self.random()
            while u <= 0.0:
                u = self.random()
            return self.gamma(shape + 1.0) * u ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = self.random()
            if u < 1.0 - 0.0331 * x ** 4:
                return d * v
            if u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integer(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        self.shuffle(items)
        return items


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Checked matrix product."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a @ b
    if not np.isfinite(out).all():
        raise DimensionError("matmul produced non-finite entries")
    return out


def gaussian(rng: Rng, rows: int, cols: int, sigma: float) -> np.ndarray:
    """Matrix of i.i.d. N(0, sigma^2) entries drawn in row-major order."""
    if sigma < 0:
        raise DimensionError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0.0:
        return np.zeros((rows, cols))
    out = np.empty((rows, cols))
    flat = out.reshape(-1)
    for i in range(rows * cols):
        flat[i] = rng.normal() * sigma
    return out


_SVD_START_SEED = 0x5FD7A0C3D1E24B89  # fixed start basis keeps svd_top_r deterministic
_SVD_MAX_ITERS = 100
_SVD_TOL = 1e-12


def svd_top_r(m: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-r singular triplets via orthogonal iteration on the Gram matrix.

    Returns (U, S, V) with U (rows x r), S non-negative non-increasing,
    V (cols x r), such that U @ diag(S) @ V.T is the best rank-r
    approximation of m. Intended for desk-scale matrices (dims <= 512).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"svd_top_r needs a 2-d matrix, got {m.ndim}-d")
    rows, cols = m.shape
    if not 1 <= r <= min(rows, cols):
        raise DimensionError(f"rank {r} out of range for {rows}x{cols} matrix")

    # iterate on the smaller Gram side
    tall = rows >= cols
    g = m.T @ m if tall else m @ m.T
    n = g.shape[0]

    rng = Rng(_SVD_START_SEED)
    q = gaussian(rng, n, r, 1.0)
    q, _ = np.linalg.qr(q)
    g_norm = np.linalg.norm(g)
    for _ in range(_SVD_MAX_ITERS):
        z = g @ q
        q_next, _ = np.linalg.qr(z)
        # subspace residual: how far g maps q outside span(q)
        resid = np.linalg.norm(z - q @ (q.T @ z))
        q = q_next
        if resid <= _SVD_TOL * max(g_norm, 1.0):
            break

    # Rayleigh-Ritz on the converged subspace
    h = q.T @ g @ q
    h = 0.5 * (h + h.T)
    evals, evecs = np.linalg.eigh(h)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    basis = q @ evecs[:, order]
    s = np.sqrt(evals)

    if tall:
        v = basis
        u = np.zeros((rows, r))
        for j in range(r):
            if s[j] > _SVD_TOL * max(g_norm, 1.0):
                u[:, j] = (m @ v[:, j]) / s[j]
    else:
        u = basis
        v = np.zeros((cols, r))
        for j in range(r):
            if s[j] > _SVD_TOL * max(g_norm, 1.0):
                v[:, j] = (m.T @ u[:, j]) / s[j]
    return u, s, v
