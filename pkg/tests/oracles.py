"""Independent reference implementations the tests check the package against.

Everything here is deliberately written straight-line (explicit loops, no
shared code with the package) so a bug cannot hide on both sides of a
comparison.
"""

from __future__ import annotations

import math

import numpy as np


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def full_svd(m: np.ndarray):
    """LAPACK reference SVD (U, s, Vt)."""
    return np.linalg.svd(np.asarray(m, dtype=np.float64), full_matrices=False)


def singular_values(m: np.ndarray) -> np.ndarray:
    return full_svd(m)[1]


def reference_forward(embedding, blocks, tokens, mixer: bool):
    """Straight-line frozen-base forward (no adapters), per position.

    Returns the final hidden states (batch, seq, d). Blocks are applied
    as mix -> dense -> tanh -> residual, with the causal mean computed
    position by position.
    """
    batch, seq = tokens.shape
    d = embedding.shape[1]
    out = np.zeros((batch, seq, d))
    for n in range(batch):
        h = [embedding[tokens[n, t]].copy() for t in range(seq)]
        for w0 in blocks:
            if mixer:
                mixed = []
                for t in range(seq):
                    acc = np.zeros(d)
                    for u in range(t + 1):
                        acc += h[u]
                    mixed.append(acc / (t + 1))
            else:
                mixed = [v.copy() for v in h]
            new_h = []
            for t in range(seq):
                z = np.zeros(d)
                for j in range(d):
                    acc = 0.0
                    for i in range(d):
                        acc += mixed[t][i] * w0[i, j]
                    z[j] = acc
                new_h.append(mixed[t] + np.tanh(z))
            h = new_h
        for t in range(seq):
            out[n, t] = h[t]
    return out


def reference_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Scalar-loop mean cross-entropy."""
    total = 0.0
    for row, t in zip(logits, targets):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[t]
    return total / len(targets)


def central_difference(f, x: np.ndarray, i: int, j: int, h: float = 1e-6) -> float:
    """Central finite difference of scalar f wrt one entry of x (in place)."""
    saved = x[i, j]
    x[i, j] = saved + h
    plus = f()
    x[i, j] = saved - h
    minus = f()
    x[i, j] = saved
    return (plus - minus) / (2.0 * h)


def weighted_delta_average(sizes, mats):
    """Scalar-loop weighted average of a list of equally shaped matrices."""
    total = float(sum(sizes))
    rows, cols = mats[0].shape
    out = np.zeros((rows, cols))
    for size, m in zip(sizes, mats):
        w = size / total
        for i in range(rows):
            for j in range(cols):
                out[i, j] += w * m[i, j]
    return out
