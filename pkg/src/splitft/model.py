"""Frozen toy language model split into M blocks, one adapter per block.

Block p maps hidden states h (batch, seq, d) to

    h' = Mix(h)            causal mean over positions, if the mixer is on
    z  = h' @ (W0_p + A_p @ B_p)
    h  = h' + tanh(z)

with a frozen token embedding in front (tied to the output head) and
cross-entropy loss over next-token targets. Forward and backward run over
any contiguous layer range so clients and the server each execute their
own span; composing ranges reproduces the uncut computation exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import lora, numkit
from .errors import ConfigError, DataError, DimensionError, RangeError
from .lora import LoraAdapter
from .numkit import Rng


@dataclass(frozen=True)
class ModelConfig:
    vocab: int
    dim: int
    layers: int
    seq_len: int
    mixer: bool = True

    def validate(self) -> None:
        if self.layers < 2:
            raise ConfigError(f"need at least 2 layers, got {self.layers}")
        if self.dim < 2 or self.vocab < 2:
            raise ConfigError(f"vocab {self.vocab} and dim {self.dim} must be >= 2")
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")


@dataclass
class SplitModel:
    """Frozen embedding + M frozen blocks + per-block adapters.

    The output head is the embedding transpose (tied, frozen). Only the
    adapters dict is ever replaced after construction.
    """

    config: ModelConfig
    embedding: np.ndarray
    blocks: list[np.ndarray]
    adapters: dict[int, LoraAdapter]


@dataclass
class ActivationCache:
    """Per-layer inputs and pre-activations from one forward call."""

    from_layer: int
    to_layer: int
    batch: int
    mixed_inputs: dict[int, np.ndarray] = field(default_factory=dict)
    preacts: dict[int, np.ndarray] = field(default_factory=dict)
    produced_logits: bool = False


def mixer_matrix(seq_len: int) -> np.ndarray:
    """Lower-triangular row-normalized causal averaging matrix."""
    t = np.tril(np.ones((seq_len, seq_len)))
    return t / t.sum(axis=1, keepdims=True)


def rank_for_layer(layer: int, cut_layers: Sequence[int], r_cut: int, r_others: int) -> int:
    """Cut-adjacent layers (each client's last and the server's first) get r_cut."""
    for cut in cut_layers:
        if layer == cut or layer == cut + 1:
            return r_cut
    return r_others


def build_model(
    cfg: ModelConfig,
    seed: int,
    ranks: int | Sequence[int] | Mapping[int, int] = 8,
) -> SplitModel:
    """Deterministically draw a frozen model and fresh adapters.

    Draw order is fixed: embedding, then blocks 1..M, then adapters 1..M.
    Embedding and block entries are N(0, 1/sqrt(d)); adapters use the
    standard zero-product init. ``ranks`` is a single rank, a per-layer
    sequence, or a layer->rank mapping (1-based).
    """
    cfg.validate()
    if isinstance(ranks, int):
        plan = {p: ranks for p in range(1, cfg.layers + 1)}
    elif isinstance(ranks, Mapping):
        plan = dict(ranks)
    else:
        plan = {p + 1: r for p, r in enumerate(ranks)}
    if sorted(plan) != list(range(1, cfg.layers + 1)):
        raise ConfigError(f"rank plan must cover layers 1..{cfg.layers}")

    rng = Rng(seed)
    sigma = 1.0 / np.sqrt(cfg.dim)
    embedding = numkit.gaussian(rng, cfg.vocab, cfg.dim, sigma)
    blocks = [numkit.gaussian(rng, cfg.dim, cfg.dim, sigma) for _ in range(cfg.layers)]
    adapters = {
        p: lora.new_adapter(cfg.dim, cfg.dim, plan[p], p, rng)
        for p in range(1, cfg.layers + 1)
    }
    return SplitModel(config=cfg, embedding=embedding, blocks=blocks, adapters=adapters)


def _check_range(cfg: ModelConfig, from_layer: int, to_layer: int) -> None:
    if not 1 <= from_layer <= to_layer <= cfg.layers:
        raise RangeError(
            f"layer range [{from_layer}, {to_layer}] invalid for {cfg.layers} layers"
        )


def _adapter_at(model: SplitModel, layer: int, override: Mapping[int, LoraAdapter] | None) -> LoraAdapter:
    if override is not None and layer in override:
        return override[layer]
    return model.adapters[layer]


def forward(
    model: SplitModel,
    x: np.ndarray,
    from_layer: int,
    to_layer: int,
    adapters: Mapping[int, LoraAdapter] | None = None,
) -> tuple[np.ndarray, ActivationCache]:
    """Run blocks [from_layer, to_layer].

    With from_layer == 1, x is an integer token array (batch, seq) and the
    embedding is applied; otherwise x is activations of shape
    (batch*seq, dim). The head is applied exactly when to_layer == M, in
    which case logits of shape (batch*seq, vocab) are returned; otherwise
    activations (batch*seq, dim) are returned. ``adapters`` optionally
    overrides the model's own adapters per global layer index.
    """
    cfg = model.config
    _check_range(cfg, from_layer, to_layer)
    seq = cfg.seq_len

    if from_layer == 1:
        x = np.asarray(x)
        if not np.issubdtype(x.dtype, np.integer):
            raise RangeError("forward from layer 1 expects an integer token array")
        if x.ndim != 2 or x.shape[1] != seq:
            raise DimensionError(f"token array must be (batch, {seq}), got {x.shape}")
        if x.min() < 0 or x.max() >= cfg.vocab:
            raise DataError("token id out of vocabulary range")
        batch = x.shape[0]
        h = model.embedding[x]  # (batch, seq, d)
    else:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.dim:
            raise DimensionError(f"activations must be (batch*seq, {cfg.dim}), got {x.shape}")
        if x.shape[0] % seq != 0:
            raise DimensionError(f"activation rows {x.shape[0]} not a multiple of seq {seq}")
        batch = x.shape[0] // seq
        h = x.reshape(batch, seq, cfg.dim)

    cache = ActivationCache(from_layer=from_layer, to_layer=to_layer, batch=batch)
    mix = mixer_matrix(seq) if cfg.mixer else None
    for p in range(from_layer, to_layer + 1):
        hp = np.matmul(mix, h) if cfg.mixer else h
        ad = _adapter_at(model, p, adapters)
        w_eff = model.blocks[p - 1] + lora.delta_w(ad)
        z = hp @ w_eff
        cache.mixed_inputs[p] = hp
        cache.preacts[p] = z
        h = hp + np.tanh(z)

    if to_layer == cfg.layers:
        cache.produced_logits = True
        return h.reshape(batch * seq, cfg.dim) @ model.embedding.T, cache
    return h.reshape(batch * seq, cfg.dim), cache


def loss_and_head_grad(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over all positions and its logit gradient.

    targets are flat next-token ids, one per row of logits. The gradient
    is (softmax(logits) - onehot(targets)) / n_rows.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise DimensionError(f"{targets.shape[0]} targets for {n} logit rows")
    if targets.min() < 0 or targets.max() >= v:
        raise DataError(f"target id out of range for vocab {v}")
    zmax = logits.max(axis=1, keepdims=True)
    ez = np.exp(logits - zmax)
    zsum = ez.sum(axis=1, keepdims=True)
    softmax = ez / zsum
    rows = np.arange(n)
    nll = (np.log(zsum[:, 0]) + zmax[:, 0]) - logits[rows, targets]
    loss = float(nll.mean())
    grad = softmax
    grad[rows, targets] -= 1.0
    return loss, grad / n


def backward(
    model: SplitModel,
    cache: ActivationCache,
    upstream: np.ndarray,
    from_layer: int,
    to_layer: int,
    adapters: Mapping[int, LoraAdapter] | None = None,
) -> tuple[np.ndarray, dict[int, tuple[np.ndarray, np.ndarray]]]:
    """Reverse-mode pass over [from_layer, to_layer] using a matching cache.

    upstream is the gradient at this span's output: logit-space when the
    forward produced logits, activation-space otherwise. Returns the
    gradient at the span's input activations and per-layer adapter
    gradients (gA, gB).
    """
    cfg = model.config
    _check_range(cfg, from_layer, to_layer)
    if cache.from_layer != from_layer or cache.to_layer != to_layer:
        raise RangeError(
            f"cache covers [{cache.from_layer}, {cache.to_layer}], "
            f"requested [{from_layer}, {to_layer}]"
        )
    seq = cfg.seq_len
    batch = cache.batch
    upstream = np.asarray(upstream, dtype=np.float64)

    if cache.produced_logits:
        if upstream.shape != (batch * seq, cfg.vocab):
            raise DimensionError(f"logit upstream must be {(batch * seq, cfg.vocab)}")
        g_h = upstream @ model.embedding
    else:
        if upstream.shape != (batch * seq, cfg.dim):
            raise DimensionError(f"activation upstream must be {(batch * seq, cfg.dim)}")
        g_h = upstream
    g_h = g_h.reshape(batch, seq, cfg.dim)

    mix_t = mixer_matrix(seq).T if cfg.mixer else None
    grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for p in range(to_layer, from_layer - 1, -1):
        hp = cache.mixed_inputs[p]
        th = np.tanh(cache.preacts[p])
        g_z = g_h * (1.0 - th * th)
        ad = _adapter_at(model, p, adapters)
        w_eff = model.blocks[p - 1] + lora.delta_w(ad)
        g_hp = g_h + np.matmul(g_z, w_eff.T)
        grads[p] = lora.grad_adapters(
            hp.reshape(batch * seq, cfg.dim), g_z.reshape(batch * seq, cfg.dim), ad
        )
        g_h = np.matmul(mix_t, g_hp) if cfg.mixer else g_hp

    return g_h.reshape(batch * seq, cfg.dim), grads
