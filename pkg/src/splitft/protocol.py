"""Client / main-server / aggregation state machines and round orchestration.

One global round runs, per client: forward over the client's layers,
smashed data up, server forward+backward over the remaining layers with
an in-place server-side update, cut gradient down, client backward and
update. At the end of the round client deltas are aggregated by data
share, applied to the canonical base model, the updated base is evaluated
on every client's shard, layer counts are reallocated from the accuracy
spread, cut-adjacent adapter ranks migrate, and clients are re-issued
their (possibly new) spans from the base model.

Every message crosses the wire codec, so reported bytes are exactly the
sum of emitted frame lengths. Sequential mode processes clients in index
order against the live server stack (the reference semantics); parallel
mode runs clients against a round-frozen server snapshot and merges the
server-side deltas in client-index order, which keeps results independent
of thread scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import aggregate as agg
from . import allocate, lora, metrics as met, model as mod, partition as part, transport
from .allocate import AllocationState
from .config import PARALLEL, ExperimentConfig
from .errors import DataError, ProtocolError
from .lora import AdapterDelta, LoraAdapter
from .messages import (
    AdapterDeltaSet,
    AggregatedAdapters,
    LayerAssignment,
    ProtocolMessage,
    SmashedData,
    SmashedGrad,
)
from .metrics import ClientRound, RoundMetrics
from .model import ActivationCache, SplitModel
from .numkit import Rng, derive_seed

# stream tags for deriving independent generators from the root seed
TAG_MODEL = 1
TAG_CORPUS = 2
TAG_PARTITION = 3
TAG_BATCH = 4
TAG_MIGRATE = 5

DIR_UP = "up"
DIR_DOWN = "down"


class Wire:
    """Counts and traces every frame that crosses a carrier."""

    def __init__(self, carrier: str = "memory", lossless: bool = False):
        self.carrier_kind = carrier
        self.lossless = lossless
        self._carrier = transport.make_carrier(carrier, lossless)
        self.total_bytes = 0
        self.last_bytes = 0
        self.stream_bytes: dict[str, int] = {}
        self.trace: list[str] = []

    def transfer(self, msg: ProtocolMessage, round_no: int, direction: str) -> ProtocolMessage:
        received, nbytes = self._carrier.transfer(msg)
        name = type(msg).__name__
        self.total_bytes += nbytes
        self.stream_bytes[name] = self.stream_bytes.get(name, 0) + nbytes
        self.trace.append(f"round={round_no} dir={direction} type={name} bytes={nbytes}")
        self.last_bytes = nbytes
        return received

    def merge(self, other: "Wire") -> None:
        self.total_bytes += other.total_bytes
        for name, n in other.stream_bytes.items():
            self.stream_bytes[name] = self.stream_bytes.get(name, 0) + n
        self.trace.extend(other.trace)

    def close(self) -> None:
        self._carrier.close()


def window(sample: list[int], seq_len: int) -> np.ndarray:
    """First seq_len+1 tokens; shorter samples are tiled cyclically."""
    arr = np.asarray(sample, dtype=np.int64)
    if arr.shape[0] >= seq_len + 1:
        return arr[: seq_len + 1]
    return np.resize(arr, seq_len + 1)


@dataclass
class ClientState:
    """One client actor: its layer span, adapter copies, data, and stream."""

    client_id: int
    layer_count: int
    model: SplitModel  # frozen parts shared with the server
    adapters: dict[int, LoraAdapter]
    round_start: dict[int, LoraAdapter]
    shard: part.ClientShard
    samples: list[list[int]]
    lr: float
    batch_rng: Rng
    round: int = 1
    pending_cache: ActivationCache | None = None
    bytes_up: int = 0
    bytes_down: int = 0


@dataclass
class ServerState:
    """Main server: canonical model plus per-client entry depths."""

    model: SplitModel
    adapters: dict[int, LoraAdapter]  # working set; aliases model.adapters
    lr: float
    entry_depth: dict[int, int]
    round: int = 1


@dataclass
class FedAvgState:
    """Aggregation actor: waits for every active client before averaging."""

    data_sizes: dict[int, int]
    pending: dict[int, dict[int, AdapterDelta]] = field(default_factory=dict)

    def submit(self, client_id: int, deltas: dict[int, AdapterDelta]) -> None:
        if client_id not in self.data_sizes:
            raise ProtocolError(f"unknown client {client_id}")
        if client_id in self.pending:
            raise ProtocolError(f"client {client_id} already reported this round")
        self.pending[client_id] = deltas

    def aggregate(self) -> dict[int, AdapterDelta]:
        missing = set(self.data_sizes) - set(self.pending)
        if missing:
            raise ProtocolError(f"missing delta reports from clients {sorted(missing)}")
        reports = [
            agg.WeightedDelta(client_id=cid, data_size=self.data_sizes[cid], deltas=deltas)
            for cid, deltas in self.pending.items()
        ]
        self.pending = {}
        return agg.fedavg(reports)


def draw_batch(client: ClientState, batch: int, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample a mini-batch (with replacement) from the client's shard.

    Returns (tokens (batch, seq), flat targets (batch*seq,)).
    """
    if not client.samples:
        raise DataError(f"client {client.client_id} has an empty shard")
    rows = []
    for _ in range(batch):
        idx = client.batch_rng.integer(len(client.samples))
        rows.append(window(client.samples[idx], seq_len))
    stacked = np.stack(rows)
    return stacked[:, :-1], stacked[:, 1:].reshape(-1)


def client_forward_step(client: ClientState, tokens: np.ndarray) -> SmashedData:
    """Forward over layers 1..l_c; caches activations for the backward."""
    if not client.samples:
        raise DataError(f"client {client.client_id} has an empty shard")
    out, cache = mod.forward(client.model, tokens, 1, client.layer_count,
                             adapters=client.adapters)
    client.pending_cache = cache
    return SmashedData(client_id=client.client_id, round=client.round, activations=out)


def server_step(
    server: ServerState, msg: SmashedData, targets: np.ndarray
) -> tuple[float, SmashedGrad]:
    """Forward l_c+1..M, loss, backward, in-place server update, cut grad."""
    if msg.client_id not in server.entry_depth:
        raise ProtocolError(f"unknown client {msg.client_id}")
    if msg.round != server.round:
        raise ProtocolError(
            f"client {msg.client_id} sent round {msg.round}, server is at {server.round}"
        )
    depth = server.entry_depth[msg.client_id]
    cfg = server.model.config
    acts = np.asarray(msg.activations, dtype=np.float64)
    if acts.ndim != 2 or acts.shape[1] != cfg.dim or acts.shape[0] % cfg.seq_len != 0:
        raise ProtocolError(f"smashed data shape {acts.shape} invalid for dim {cfg.dim}")
    logits, cache = mod.forward(server.model, acts, depth + 1, cfg.layers,
                                adapters=server.adapters)
    loss, head_grad = mod.loss_and_head_grad(logits, targets)
    input_grad, grads = mod.backward(server.model, cache, head_grad, depth + 1,
                                     cfg.layers, adapters=server.adapters)
    for p in range(depth + 1, cfg.layers + 1):
        ga, gb = grads[p]
        server.adapters[p] = lora.sgd_step(server.adapters[p], ga, gb, server.lr)
    return loss, SmashedGrad(client_id=msg.client_id, round=msg.round, grad=input_grad)


def client_backward_step(client: ClientState, msg: SmashedGrad) -> None:
    """Backward over 1..l_c with the cut gradient; updates the adapter copies."""
    if client.pending_cache is None:
        raise ProtocolError(
            f"client {client.client_id} has no pending forward for round {msg.round}"
        )
    if msg.round != client.round:
        raise ProtocolError(
            f"gradient for round {msg.round} but client {client.client_id} "
            f"is at round {client.round}"
        )
    cache = client.pending_cache
    client.pending_cache = None
    _, grads = mod.backward(client.model, cache, msg.grad, 1, client.layer_count,
                            adapters=client.adapters)
    for p in range(1, client.layer_count + 1):
        ga, gb = grads[p]
        client.adapters[p] = lora.sgd_step(client.adapters[p], ga, gb, client.lr)


def evaluate_on_shard(
    model: SplitModel, samples: list[list[int]], seq_len: int
) -> tuple[float, float]:
    """Loss and next-token accuracy of the base model on a client's data."""
    if not samples:
        raise DataError("cannot evaluate on an empty shard")
    stacked = np.stack([window(s, seq_len) for s in samples])
    tokens, targets = stacked[:, :-1], stacked[:, 1:].reshape(-1)
    logits, _ = mod.forward(model, tokens, 1, model.config.layers)
    loss, _ = mod.loss_and_head_grad(logits, targets)
    return loss, met.next_token_accuracy(logits, targets)


def end_of_round(
    clients: list[ClientState],
    fedavg: FedAvgState,
    server: ServerState,
    alloc: AllocationState,
    wire: Wire,
    resize_policy: str,
    migrate_rng: Rng,
) -> tuple[AggregatedAdapters, list[LayerAssignment], dict[int, tuple[float, float]]]:
    """Aggregate deltas, update and evaluate the base, reallocate layers.

    Returns the broadcast aggregate message, the per-client assignments,
    and each client's (loss, accuracy) evaluation on the updated base.
    """
    round_no = server.round
    cfg = server.model.config

    # b1: every client reports its adapter changes
    for client in clients:
        if client.pending_cache is not None:
            raise ProtocolError(f"client {client.client_id} has an unconsumed forward")
        deltas = tuple(
            lora.make_delta(client.round_start[p], client.adapters[p])
            for p in range(1, client.layer_count + 1)
        )
        msg = wire.transfer(
            AdapterDeltaSet(client_id=client.client_id, deltas=deltas), round_no, DIR_UP
        )
        client.bytes_up += wire.last_bytes
        fedavg.submit(msg.client_id, {d.layer_index: d for d in msg.deltas})

    # b2: weighted aggregation, then apply to the canonical base model
    aggregated = fedavg.aggregate()
    agg.apply_to_base(server.model, aggregated)

    # b4 evaluation: updated base on each client's training shard
    evals = {
        c.client_id: evaluate_on_shard(server.model, c.samples, cfg.seq_len)
        for c in clients
    }
    accs = {cid: acc for cid, (_, acc) in evals.items()}
    new_counts = allocate.reallocate(alloc, accs)

    # b3: aggregated deltas broadcast back to every client
    agg_msg = AggregatedAdapters(deltas=tuple(aggregated[p] for p in sorted(aggregated)))
    for client in clients:
        wire.transfer(agg_msg, round_no, DIR_DOWN)
        client.bytes_down += wire.last_bytes

    # migrate cut-adjacent ranks on the canonical stack, then reissue spans
    allocate.apply_designations(
        server.model.adapters, new_counts.values(), alloc.plan, resize_policy, migrate_rng
    )

    assignments = []
    for client in clients:
        l_new = new_counts[client.client_id]
        msg = wire.transfer(
            LayerAssignment(client_id=client.client_id, l_new=l_new), round_no, DIR_DOWN
        )
        client.bytes_down += wire.last_bytes
        assignments.append(msg)
        client.layer_count = msg.l_new
        client.adapters = {p: server.model.adapters[p] for p in range(1, l_new + 1)}
        client.round_start = dict(client.adapters)
        client.round += 1
        server.entry_depth[client.client_id] = l_new

    alloc.layer_counts = dict(new_counts)
    server.round += 1
    return agg_msg, assignments, evals


@dataclass
class RunResult:
    """Everything a training run produces."""

    config: ExperimentConfig
    metrics: list[RoundMetrics]
    model: SplitModel
    layer_log: list[dict[int, int]]
    stream_bytes: dict[str, int]
    total_bytes: int
    trace: list[str]


def _initial_rank_plan(cfg: ExperimentConfig) -> dict[int, int]:
    cuts = [cfg.allocation.l_init]
    return {
        p: mod.rank_for_layer(p, cuts, cfg.ranks.r_cut, cfg.ranks.r_others)
        for p in range(1, cfg.model.layers + 1)
    }


def _build_clients(cfg: ExperimentConfig, model: SplitModel,
                   shards: list[part.ClientShard], corpus: part.Corpus) -> list[ClientState]:
    clients = []
    for shard in shards:
        span = {p: model.adapters[p] for p in range(1, cfg.allocation.l_init + 1)}
        clients.append(ClientState(
            client_id=shard.client_id,
            layer_count=cfg.allocation.l_init,
            model=model,
            adapters=dict(span),
            round_start=dict(span),
            shard=shard,
            samples=[corpus.samples[i] for i in shard.sample_indices],
            lr=cfg.learning.lr_client,
            batch_rng=Rng(derive_seed(cfg.seed, TAG_BATCH, shard.client_id)),
        ))
    return clients


def _round_zero_metrics(cfg: ExperimentConfig, model: SplitModel,
                        clients: list[ClientState]) -> RoundMetrics:
    rm = RoundMetrics(round=0)
    losses, accs = [], []
    for c in clients:
        loss, acc = evaluate_on_shard(model, c.samples, cfg.model.seq_len)
        losses.append(loss)
        accs.append(acc)
        rm.clients[c.client_id] = ClientRound(
            loss=loss, perplexity=met.perplexity(loss), accuracy=acc,
            layers=c.layer_count, bytes_up=0, bytes_down=0, cum_bytes=0, time_s=0.0,
        )
    rm.mean_loss = sum(losses) / len(losses)
    rm.perplexity = met.perplexity(rm.mean_loss)
    rm.acc_avg = sum(accs) / len(accs)
    return rm


def _worker_count(n_clients: int) -> int:
    env = os.environ.get("SPLITFT_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, n_clients))


def _run_client_round_parallel(
    client: ClientState,
    snapshot: dict[int, LoraAdapter],
    cfg: ExperimentConfig,
    round_no: int,
    carrier: str,
    lossless_wire: bool,
) -> tuple[Wire, dict[int, LoraAdapter], list[float]]:
    """One client's local steps against a private copy of the server snapshot."""
    wire = Wire(carrier, lossless_wire)
    private = ServerState(
        model=client.model, adapters=dict(snapshot), lr=cfg.learning.lr_server,
        entry_depth={client.client_id: client.layer_count}, round=round_no,
    )
    losses = []
    for _ in range(cfg.federation.local_steps):
        tokens, targets = draw_batch(client, cfg.learning.batch, cfg.model.seq_len)
        msg = wire.transfer(client_forward_step(client, tokens), round_no, DIR_UP)
        client.bytes_up += wire.last_bytes
        loss, grad_msg = server_step(private, msg, targets)
        losses.append(loss)
        grad_msg = wire.transfer(grad_msg, round_no, DIR_DOWN)
        client.bytes_down += wire.last_bytes
        client_backward_step(client, grad_msg)
    wire.close()
    return wire, private.adapters, losses


def run_training(
    cfg: ExperimentConfig,
    carrier: str = "memory",
    lossless_wire: bool = False,
    trace: bool = False,
) -> RunResult:
    """Execute the configured number of global rounds and collect metrics.

    Round 0 in the metrics is the pre-training evaluation of the freshly
    built (zero-product adapter) base model; training rounds are 1..R.
    """
    cfg.validate()
    mcfg = cfg.model
    corpus = part.synth_corpus(mcfg.vocab, cfg.data.n_samples, cfg.data.len_range,
                               derive_seed(cfg.seed, TAG_CORPUS))
    if cfg.data.partition == "iid":
        shards = part.partition_iid(corpus, cfg.federation.n_clients,
                                    derive_seed(cfg.seed, TAG_PARTITION),
                                    k_categories=cfg.data.k_categories)
    else:
        categories = part.bucket_by_length(corpus, cfg.data.k_categories)
        shards = part.dirichlet_partition(categories, cfg.federation.n_clients,
                                          cfg.data.alpha,
                                          derive_seed(cfg.seed, TAG_PARTITION))

    model = mod.build_model(mcfg, derive_seed(cfg.seed, TAG_MODEL), _initial_rank_plan(cfg))
    clients = _build_clients(cfg, model, shards, corpus)
    server = ServerState(
        model=model, adapters=model.adapters, lr=cfg.learning.lr_server,
        entry_depth={c.client_id: c.layer_count for c in clients},
    )
    fedavg = FedAvgState(data_sizes={c.client_id: len(c.samples) for c in clients})
    alloc = AllocationState(
        layer_counts={c.client_id: c.layer_count for c in clients},
        gamma=cfg.allocation.gamma, l_min=cfg.allocation.l_min, l_max=cfg.l_max,
        plan=cfg.ranks,
    )
    migrate_rng = Rng(derive_seed(cfg.seed, TAG_MIGRATE))
    wire = Wire(carrier, lossless_wire)

    all_metrics = [_round_zero_metrics(cfg, model, clients)]
    layer_log = [dict(alloc.layer_counts)]
    tokens_per_round = cfg.federation.local_steps * cfg.learning.batch * mcfg.seq_len
    cum_total = 0
    cum_client: dict[int, int] = {c.client_id: 0 for c in clients}

    for round_no in range(1, cfg.federation.rounds + 1):
        in_round_layers = dict(alloc.layer_counts)
        up0 = {c.client_id: c.bytes_up for c in clients}
        down0 = {c.client_id: c.bytes_down for c in clients}
        total0 = wire.total_bytes

        if cfg.federation.execution == PARALLEL:
            snapshot = dict(server.adapters)
            with ThreadPoolExecutor(max_workers=_worker_count(len(clients))) as pool:
                futures = [
                    pool.submit(_run_client_round_parallel, c, snapshot, cfg, round_no,
                                carrier, lossless_wire)
                    for c in sorted(clients, key=lambda c: c.client_id)
                ]
                results = [f.result() for f in futures]
            # merge wires and server-side deltas in ascending client order
            for (client_wire, private_adapters, _losses), client in zip(
                results, sorted(clients, key=lambda c: c.client_id)
            ):
                wire.merge(client_wire)
                depth = in_round_layers[client.client_id]
                for p in range(depth + 1, mcfg.layers + 1):
                    delta = lora.make_delta(snapshot[p], private_adapters[p])
                    server.adapters[p] = lora.apply_delta(server.adapters[p], delta)
        else:
            for client in sorted(clients, key=lambda c: c.client_id):
                for _ in range(cfg.federation.local_steps):
                    tokens, targets = draw_batch(client, cfg.learning.batch, mcfg.seq_len)
                    msg = wire.transfer(client_forward_step(client, tokens), round_no, DIR_UP)
                    client.bytes_up += wire.last_bytes
                    _loss, grad_msg = server_step(server, msg, targets)
                    grad_msg = wire.transfer(grad_msg, round_no, DIR_DOWN)
                    client.bytes_down += wire.last_bytes
                    client_backward_step(client, grad_msg)

        _agg_msg, _assignments, evals = end_of_round(
            clients, fedavg, server, alloc, wire, cfg.allocation.resize_policy, migrate_rng
        )

        round_total = wire.total_bytes - total0
        cum_total += round_total
        rm = RoundMetrics(round=round_no)
        losses, accs = [], []
        for c in clients:
            loss, acc = evals[c.client_id]
            losses.append(loss)
            accs.append(acc)
            up = c.bytes_up - up0[c.client_id]
            down = c.bytes_down - down0[c.client_id]
            cum_client[c.client_id] += up + down
            layers_used = in_round_layers[c.client_id]
            rm.clients[c.client_id] = ClientRound(
                loss=loss, perplexity=met.perplexity(loss), accuracy=acc,
                layers=layers_used, bytes_up=up, bytes_down=down,
                cum_bytes=cum_client[c.client_id],
                time_s=met.client_compute_seconds(cfg.cost, c.client_id, layers_used,
                                                  tokens_per_round)
                + (up + down) / cfg.cost.bandwidth,
            )
        rm.mean_loss = sum(losses) / len(losses)
        rm.perplexity = met.perplexity(rm.mean_loss)
        rm.acc_avg = sum(accs) / len(accs)
        rm.bytes_up = sum(c.bytes_up for c in clients) - sum(up0.values())
        rm.bytes_down = sum(c.bytes_down for c in clients) - sum(down0.values())
        rm.cum_bytes = cum_total
        rm.sim_round_time = met.sim_round_time(
            cfg.cost, in_round_layers,
            {cid: tokens_per_round for cid in in_round_layers},
            mcfg.layers, round_total, cfg.federation.execution,
        )
        all_metrics.append(rm)
        layer_log.append(dict(alloc.layer_counts))

    wire.close()
    return RunResult(
        config=cfg, metrics=all_metrics, model=model, layer_log=layer_log,
        stream_bytes=dict(wire.stream_bytes), total_bytes=wire.total_bytes,
        trace=list(wire.trace) if trace else [],
    )
