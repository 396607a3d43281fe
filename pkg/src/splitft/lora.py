"""Low-rank adapter lifecycle: init, effective weights, gradients, updates.

Each frozen layer weight W0 (d x k) carries a trainable pair (a, b) with
a (d x r) and b (r x k); the effective weight is W0 + a @ b. Only the pair
is ever trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit
from .errors import DimensionError, RankMismatchError
from .numkit import Rng

INIT_SIGMA = 0.02

PAD_TRUNCATE = "pad_truncate"
REINIT = "reinit"


@dataclass(frozen=True)
class LoraAdapter:
    """Trainable pair attached to one frozen layer. Treated as a value."""

    a: np.ndarray
    b: np.ndarray
    rank: int
    layer_index: int

    @property
    def d(self) -> int:
        return self.a.shape[0]

    @property
    def k(self) -> int:
        return self.b.shape[1]


@dataclass(frozen=True)
class AdapterDelta:
    """Change (da, db) of one adapter, as shipped to the aggregation server."""

    layer_index: int
    da: np.ndarray
    db: np.ndarray
    rank: int


def new_adapter(d: int, k: int, rank: int, layer_index: int, rng: Rng) -> LoraAdapter:
    """Fresh adapter: a ~ N(0, INIT_SIGMA^2), b = 0, so a @ b = 0.

    Zero-product init leaves the frozen model's function untouched until
    the first update.
    """
    if not 1 <= rank <= min(d, k):
        raise DimensionError(f"rank {rank} out of range for {d}x{k} layer")
    a = numkit.gaussian(rng, d, rank, INIT_SIGMA)
    b = np.zeros((rank, k))
    return LoraAdapter(a=a, b=b, rank=rank, layer_index=layer_index)


def delta_w(ad: LoraAdapter) -> np.ndarray:
    """Effective update a @ b, accumulated rank column by rank column.

    The fixed accumulation order makes zero-padding the rank a bitwise
    no-op on the product, which BLAS matmul does not guarantee.
    """
    out = np.zeros((ad.d, ad.k))
    for j in range(ad.rank):
        out += ad.a[:, j : j + 1] * ad.b[j : j + 1, :]
    return out


def effective_weight(w0: np.ndarray, ad: LoraAdapter) -> np.ndarray:
    """w0 + a @ b."""
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.shape != (ad.d, ad.k):
        raise DimensionError(f"base weight {w0.shape} does not match adapter {ad.d}x{ad.k}")
    return w0 + delta_w(ad)


def trainable_params(d: int, k: int, rank: int) -> int:
    """Parameter count of one adapter: d*r + r*k."""
    return d * rank + rank * k


def grad_adapters(x: np.ndarray, g: np.ndarray, ad: LoraAdapter) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of a loss through y = x @ (W0 + a @ b).

    Given the layer input x (n x d) and upstream gradient g = dL/dy
    (n x k), returns (gA, gB) with gA = x^T g b^T and gB = (x a)^T g.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.ndim != 2 or g.ndim != 2 or x.shape[0] != g.shape[0]:
        raise DimensionError(f"incompatible x {x.shape} and g {g.shape}")
    if x.shape[1] != ad.d or g.shape[1] != ad.k:
        raise DimensionError(
            f"x {x.shape} / g {g.shape} do not match adapter {ad.d}x{ad.k}"
        )
    ga = x.T @ g @ ad.b.T
    gb = (x @ ad.a).T @ g
    return ga, gb


def sgd_step(ad: LoraAdapter, ga: np.ndarray, gb: np.ndarray, lr: float) -> LoraAdapter:
    """a <- a - lr*gA, b <- b - lr*gB."""
    if ga.shape != ad.a.shape or gb.shape != ad.b.shape:
        raise DimensionError(
            f"gradient shapes {ga.shape}/{gb.shape} do not match adapter "
            f"{ad.a.shape}/{ad.b.shape}"
        )
    if lr < 0:
        raise DimensionError(f"learning rate must be non-negative, got {lr}")
    return LoraAdapter(
        a=ad.a - lr * ga,
        b=ad.b - lr * gb,
        rank=ad.rank,
        layer_index=ad.layer_index,
    )


def make_delta(before: LoraAdapter, after: LoraAdapter) -> AdapterDelta:
    """Change from one adapter state to a later one at the same rank."""
    if before.rank != after.rank or before.layer_index != after.layer_index:
        raise RankMismatchError(
            f"layer {before.layer_index}: cannot diff rank {before.rank} "
            f"against rank {after.rank}"
        )
    return AdapterDelta(
        layer_index=before.layer_index,
        da=after.a - before.a,
        db=after.b - before.b,
        rank=before.rank,
    )


def apply_delta(ad: LoraAdapter, delta: AdapterDelta) -> LoraAdapter:
    """a <- a + da, b <- b + db."""
    if delta.rank != ad.rank:
        raise RankMismatchError(
            f"layer {ad.layer_index}: delta rank {delta.rank} != adapter rank {ad.rank}"
        )
    if delta.da.shape != ad.a.shape or delta.db.shape != ad.b.shape:
        raise RankMismatchError(
            f"layer {ad.layer_index}: delta shapes {delta.da.shape}/{delta.db.shape} "
            f"do not match adapter"
        )
    return LoraAdapter(
        a=ad.a + delta.da,
        b=ad.b + delta.db,
        rank=ad.rank,
        layer_index=ad.layer_index,
    )


def resize_rank(ad: LoraAdapter, new_rank: int, policy: str, rng: Rng) -> LoraAdapter:
    """Change an adapter's rank.

    pad_truncate: growth appends zero columns/rows (product preserved
    exactly); shrinkage replaces (a, b) with the balanced top-new_rank SVD
    factors of a @ b (best rank-new_rank approximation).
    reinit: fresh zero-product adapter at the new rank.
    """
    d, k = ad.d, ad.k
    if not 1 <= new_rank <= min(d, k):
        raise DimensionError(f"new rank {new_rank} out of range for {d}x{k} adapter")
    if policy == REINIT:
        return new_adapter(d, k, new_rank, ad.layer_index, rng)
    if policy != PAD_TRUNCATE:
        raise DimensionError(f"unknown resize policy {policy!r}")
    if new_rank == ad.rank:
        return ad
    if new_rank > ad.rank:
        extra = new_rank - ad.rank
        a = np.hstack([ad.a, np.zeros((d, extra))])
        b = np.vstack([ad.b, np.zeros((extra, k))])
        return LoraAdapter(a=a, b=b, rank=new_rank, layer_index=ad.layer_index)
    u, s, v = numkit.svd_top_r(delta_w(ad), new_rank)
    root = np.sqrt(s)
    a = u * root[np.newaxis, :]
    b = (v * root[np.newaxis, :]).T
    return LoraAdapter(a=a, b=b, rank=new_rank, layer_index=ad.layer_index)
