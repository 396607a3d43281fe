"""Evaluation and accounting: perplexity, accuracy, bytes, simulated time, CSV.

CSV layout (one row per (round, client) plus a "global" row per round):

    round, client_id, layers, loss, perplexity, accuracy,
    bytes_up, bytes_down, cum_bytes, sim_round_time

Client rows carry that client's evaluation metrics, its own traffic, its
cumulative traffic, and its own compute+comm seconds; the global row
carries the mean loss, exp(mean loss), acc_avg, round totals, cumulative
totals, the cost-model round time, and the summed client layer count in
the layers cell. Floats are printed with 17 significant digits so files
round-trip losslessly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import lora
from .errors import DataError, IoError
from .model import SplitModel

CSV_COLUMNS = [
    "round",
    "client_id",
    "layers",
    "loss",
    "perplexity",
    "accuracy",
    "bytes_up",
    "bytes_down",
    "cum_bytes",
    "sim_round_time",
]


@dataclass(frozen=True)
class CostModel:
    """Declared speeds for the simulated clock (seconds, bytes/second)."""

    client_speed: float | Sequence[float] = 1e-6  # s per layer per token
    server_speed: float = 2e-7
    bandwidth: float = 1e7

    def speed_of(self, client_id: int) -> float:
        if isinstance(self.client_speed, (int, float)):
            return float(self.client_speed)
        return float(self.client_speed[client_id])

    def validate(self) -> None:
        speeds = (
            [self.client_speed]
            if isinstance(self.client_speed, (int, float))
            else list(self.client_speed)
        )
        if any(s <= 0 for s in speeds) or self.server_speed <= 0 or self.bandwidth <= 0:
            raise DataError("cost model entries must all be positive")


@dataclass
class ClientRound:
    """One client's slice of a round."""

    loss: float
    perplexity: float
    accuracy: float
    layers: int
    bytes_up: int
    bytes_down: int
    cum_bytes: int
    time_s: float


@dataclass
class RoundMetrics:
    """Everything recorded about one global round."""

    round: int
    clients: dict[int, ClientRound] = field(default_factory=dict)
    mean_loss: float = 0.0
    perplexity: float = 0.0
    acc_avg: float = 0.0
    bytes_up: int = 0
    bytes_down: int = 0
    cum_bytes: int = 0
    sim_round_time: float = 0.0


def perplexity(mean_nll: float) -> float:
    """exp of the mean per-token negative log likelihood."""
    try:
        return math.exp(mean_nll)
    except OverflowError:
        return float("inf")


def next_token_accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of rows whose argmax equals the target; ties go to the
    lowest token id (numpy argmax already picks the first maximum)."""
    logits = np.asarray(logits)
    targets = np.asarray(targets).reshape(-1)
    if logits.shape[0] != targets.shape[0]:
        raise DataError(f"{targets.shape[0]} targets for {logits.shape[0]} rows")
    if logits.shape[0] == 0:
        return 0.0
    pred = logits.argmax(axis=1)
    return float((pred == targets).mean())


def client_compute_seconds(cost: CostModel, client_id: int, layers: int, tokens: int) -> float:
    """Client-side forward+backward seconds for one round."""
    return cost.speed_of(client_id) * layers * tokens * 2.0


def sim_round_time(
    cost: CostModel,
    layer_plan: Mapping[int, int],
    tokens: Mapping[int, int],
    total_layers: int,
    total_bytes: int,
    mode: str = "sequential",
) -> float:
    """Simulated seconds for one global round under the declared cost model.

    Sequential sums every client's compute plus the server share; parallel
    takes the slowest client plus the (shared) server and comm terms.
    """
    client_terms = {
        cid: client_compute_seconds(cost, cid, layer_plan[cid], tokens[cid])
        for cid in layer_plan
    }
    server_term = sum(
        cost.server_speed * (total_layers - layer_plan[cid]) * tokens[cid] * 2.0
        for cid in layer_plan
    )
    comm_term = total_bytes / cost.bandwidth
    if mode == "parallel":
        return max(client_terms.values()) + server_term + comm_term
    return sum(client_terms.values()) + server_term + comm_term


def trainable_param_total(model: SplitModel) -> int:
    """Total trainable entries over all adapters at their current ranks."""
    d = model.config.dim
    return sum(lora.trainable_params(d, d, ad.rank) for ad in model.adapters.values())


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(metrics: Sequence[RoundMetrics], path: str | Path) -> None:
    """Emit the per-round metrics file (byte-identical for identical runs)."""
    try:
        with open(path, "w", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for rm in metrics:
                for cid in sorted(rm.clients):
                    c = rm.clients[cid]
                    writer.writerow([
                        rm.round, cid, c.layers, _fmt(c.loss), _fmt(c.perplexity),
                        _fmt(c.accuracy), c.bytes_up, c.bytes_down, c.cum_bytes,
                        _fmt(c.time_s),
                    ])
                total_layers = sum(c.layers for c in rm.clients.values())
                writer.writerow([
                    rm.round, "global", total_layers, _fmt(rm.mean_loss),
                    _fmt(rm.perplexity), _fmt(rm.acc_avg), rm.bytes_up,
                    rm.bytes_down, rm.cum_bytes, _fmt(rm.sim_round_time),
                ])
    except OSError as exc:
        raise IoError(f"cannot write metrics file {path}: {exc}") from exc


def read_csv(path: str | Path) -> list[dict[str, str]]:
    """Parse a metrics file back into rows of strings."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise DataError(f"metrics file {path} is empty")
            if reader.fieldnames != CSV_COLUMNS:
                raise DataError(f"unexpected columns in {path}: {reader.fieldnames}")
            return list(reader)
    except OSError as exc:
        raise IoError(f"cannot read metrics file {path}: {exc}") from exc
