"""Data-size-weighted averaging of client adapter deltas.

Weights follow each client's share of the total training data. Clients
may hold different numbers of layers after adaptive reallocation, so the
average is taken per layer over the clients actually holding that layer,
with weights renormalized over that subset; at equal depths this is the
plain weighted average.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from . import lora
from .errors import RankMismatchError
from .lora import AdapterDelta
from .model import SplitModel


@dataclass(frozen=True)
class WeightedDelta:
    """One client's report: its data size and a delta per held layer."""

    client_id: int
    data_size: int
    deltas: Mapping[int, AdapterDelta]


def fedavg(reports: Sequence[WeightedDelta]) -> dict[int, AdapterDelta]:
    """Per-layer weighted average of adapter deltas.

    Summation runs in ascending client id so results are bit-reproducible
    regardless of report arrival order. A layer held by exactly one client
    passes through unchanged.
    """
    ordered = sorted(reports, key=lambda r: r.client_id)
    layers = sorted({p for r in ordered for p in r.deltas})
    out: dict[int, AdapterDelta] = {}
    for p in layers:
        holders = [r for r in ordered if p in r.deltas]
        first = holders[0].deltas[p]
        for r in holders[1:]:
            d = r.deltas[p]
            if d.rank != first.rank or d.da.shape != first.da.shape or d.db.shape != first.db.shape:
                raise RankMismatchError(
                    f"layer {p}: client {r.client_id} delta shape disagrees"
                )
        if len(holders) == 1:
            out[p] = first
            continue
        total = float(sum(r.data_size for r in holders))
        da = sum((r.data_size / total) * r.deltas[p].da for r in holders)
        db = sum((r.data_size / total) * r.deltas[p].db for r in holders)
        out[p] = AdapterDelta(layer_index=p, da=da, db=db, rank=first.rank)
    return out


def apply_to_base(model: SplitModel, aggregated: Mapping[int, AdapterDelta]) -> None:
    """Apply aggregated deltas to the base model's adapters in place.

    Raises RankMismatchError when a delta's rank no longer matches the
    base adapter (the caller must migrate ranks first).
    """
    for p in sorted(aggregated):
        model.adapters[p] = lora.apply_delta(model.adapters[p], aggregated[p])
