"""Adaptive per-client layer allocation and cut-migration bookkeeping.

After each global round every client's accuracy is compared against the
round average; clients above average take on more layers, clients below
shed them. The boundary layers (each client's last layer and the layer
after it) carry the reduced rank r_cut, so moving a cut resizes the
adapters whose designation changed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

from . import lora
from .errors import RangeError
from .lora import LoraAdapter
from .numkit import Rng


@dataclass(frozen=True)
class RankPlan:
    r_cut: int
    r_others: int


@dataclass
class AllocationState:
    """Per-client layer counts plus the control knobs of the adjustment rule."""

    layer_counts: dict[int, int]
    gamma: float
    l_min: int
    l_max: int
    plan: RankPlan


@dataclass(frozen=True)
class MigrationAction:
    layer: int
    old_rank: int
    new_rank: int


def client_weight(acc_i: float, acc_avg: float, gamma: float) -> float:
    """Adjustment weight w = 1 + gamma * (acc_i - acc_avg)."""
    return 1.0 + gamma * (acc_i - acc_avg)


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def reallocate(state: AllocationState, accs: Mapping[int, float]) -> dict[int, int]:
    """New layer count per client: clamp(round(w_i * l_i), l_min, l_max).

    Rounding is half-away-from-zero; with gamma = 0 (or all-equal
    accuracies) the allocation never changes.
    """
    acc_avg = sum(accs.values()) / len(accs)
    new_counts = {}
    for cid, l in state.layer_counts.items():
        w = client_weight(accs[cid], acc_avg, state.gamma)
        new_counts[cid] = max(state.l_min, min(state.l_max, _round_half_away(w * l)))
    return new_counts


def cut_designations(cuts: Iterable[int]) -> frozenset[int]:
    """Layers carrying r_cut: each cut's client-side and server-side layer."""
    out = set()
    for cut in cuts:
        out.add(cut)
        out.add(cut + 1)
    return frozenset(out)


def apply_designations(
    adapters: dict[int, LoraAdapter],
    cuts: Iterable[int],
    plan: RankPlan,
    policy: str,
    rng: Rng,
) -> list[MigrationAction]:
    """Resize adapters in place so ranks match the designation set of ``cuts``.

    Layers in the designation set target r_cut, all others r_others; only
    adapters whose rank actually differs are touched.
    """
    designated = cut_designations(cuts)
    actions = []
    for layer in sorted(adapters):
        target = plan.r_cut if layer in designated else plan.r_others
        ad = adapters[layer]
        if ad.rank != target:
            adapters[layer] = lora.resize_rank(ad, target, policy, rng)
            actions.append(MigrationAction(layer=layer, old_rank=ad.rank, new_rank=target))
    return actions


def migrate_cut(
    adapters: dict[int, LoraAdapter],
    old_l: int,
    new_l: int,
    plan: RankPlan,
    policy: str = lora.PAD_TRUNCATE,
    rng: Rng | None = None,
) -> list[MigrationAction]:
    """Move a single client's cut from old_l to new_l, resizing as needed.

    Growth under pad_truncate preserves every adapter product exactly;
    shrinkage keeps the best rank-r_cut approximation.
    """
    n_layers = max(adapters)
    for l in (old_l, new_l):
        if not 1 <= l <= n_layers - 1:
            raise RangeError(f"cut {l} out of bounds for {n_layers} layers")
    if rng is None:
        rng = Rng(0)
    return apply_designations(adapters, [new_l], plan, policy, rng)
