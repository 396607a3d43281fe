"""Tagged protocol messages exchanged between clients, server, and aggregator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lora import AdapterDelta


@dataclass(frozen=True)
class SmashedData:
    """Client-side cut activations heading to the main server."""

    client_id: int
    round: int
    activations: np.ndarray  # (batch*seq, dim)


@dataclass(frozen=True)
class SmashedGrad:
    """Gradient of the loss at the cut, returned to the client."""

    client_id: int
    round: int
    grad: np.ndarray  # (batch*seq, dim)


@dataclass(frozen=True)
class AdapterDeltaSet:
    """One client's adapter changes for the round, for aggregation."""

    client_id: int
    deltas: tuple[AdapterDelta, ...]


@dataclass(frozen=True)
class AggregatedAdapters:
    """Weighted-average deltas broadcast back after aggregation."""

    deltas: tuple[AdapterDelta, ...]


@dataclass(frozen=True)
class LayerAssignment:
    """New client-side layer count for the next round."""

    client_id: int
    l_new: int


ProtocolMessage = SmashedData | SmashedGrad | AdapterDeltaSet | AggregatedAdapters | LayerAssignment
