"""Synthetic corpus construction and IID / length-based Dirichlet partitioning.

The corpus is a seeded Markov bigram source with lengths uniform over a
range. Non-IID shards are built by bucketing samples into K length
quantile categories and splitting each category across clients with
Dirichlet-distributed proportions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import DataError, IoError
from .numkit import Rng, derive_seed

_TAG_TABLE = 0x7AB1E
_TAG_SAMPLES = 0x5A371E

# Successor fan-out and weights of the bigram table. Four successors with
# fixed peaked weights keep the source learnable but not deterministic.
_N_SUCCESSORS = 4
_SUCCESSOR_WEIGHTS = (0.55, 0.25, 0.15, 0.05)


@dataclass(frozen=True)
class Corpus:
    """Token-id sequences with a shared vocabulary size."""

    samples: list[list[int]]
    vocab: int


@dataclass
class ClientShard:
    """One client's slice of the corpus plus its category composition."""

    client_id: int
    sample_indices: list[int]
    category_counts: list[int] = field(default_factory=list)


def bigram_table(vocab: int, seed: int) -> list[dict[int, float]]:
    """Seeded transition table: token -> {successor: probability}.

    Each token gets _N_SUCCESSORS distinct successors with the fixed
    weight profile. synth_corpus samples from exactly this table, which
    lets tests compare empirical bigram frequencies against it.
    """
    rng = Rng(derive_seed(seed, _TAG_TABLE))
    table: list[dict[int, float]] = []
    for _ in range(vocab):
        successors: list[int] = []
        while len(successors) < min(_N_SUCCESSORS, vocab):
            cand = rng.integer(vocab)
            if cand not in successors:
                successors.append(cand)
        row = {tok: w for tok, w in zip(successors, _SUCCESSOR_WEIGHTS)}
        # degenerate tiny vocabularies: renormalize over what we have
        total = sum(row.values())
        table.append({tok: w / total for tok, w in row.items()})
    return table


def synth_corpus(vocab: int, n_samples: int, len_range: tuple[int, int], seed: int) -> Corpus:
    """Deterministic Markov bigram corpus with lengths uniform in len_range."""
    lo, hi = len_range
    if not 1 <= lo <= hi <= 512:
        raise DataError(f"len_range {len_range} must satisfy 1 <= lo <= hi <= 512")
    table = bigram_table(vocab, seed)
    rng = Rng(derive_seed(seed, _TAG_SAMPLES))
    samples: list[list[int]] = []
    for _ in range(n_samples):
        length = lo + rng.integer(hi - lo + 1)
        tok = rng.integer(vocab)
        seq = [tok]
        while len(seq) < length:
            u = rng.random()
            acc = 0.0
            nxt = None
            for cand, w in table[seq[-1]].items():
                acc += w
                if u < acc:
                    nxt = cand
                    break
            if nxt is None:  # guard against accumulated rounding at u ~ 1
                nxt = next(reversed(table[seq[-1]]))
            seq.append(nxt)
        samples.append(seq)
    return Corpus(samples=samples, vocab=vocab)


def _histogram(indices: Sequence[int], categories: Sequence[Sequence[int]]) -> list[int]:
    cat_of = {}
    for c, members in enumerate(categories):
        for idx in members:
            cat_of[idx] = c
    counts = [0] * len(categories)
    for idx in indices:
        if idx in cat_of:
            counts[cat_of[idx]] += 1
    return counts


def partition_iid(corpus: Corpus, n_clients: int, seed: int, k_categories: int = 1) -> list[ClientShard]:
    """Seeded permutation split into n_clients near-equal shards."""
    if n_clients < 1:
        raise DataError(f"n_clients must be >= 1, got {n_clients}")
    n = len(corpus.samples)
    if n_clients > n:
        raise DataError(f"{n_clients} clients exceed corpus size {n}")
    perm = Rng(seed).permutation(n)
    base, extra = divmod(n, n_clients)
    categories = bucket_by_length(corpus, k_categories)
    shards = []
    start = 0
    for i in range(n_clients):
        size = base + (1 if i < extra else 0)
        indices = sorted(perm[start : start + size])
        start += size
        shards.append(
            ClientShard(client_id=i, sample_indices=indices,
                        category_counts=_histogram(indices, categories))
        )
    return shards


def bucket_by_length(corpus: Corpus, k_categories: int) -> list[list[int]]:
    """Bucket sample indices into k length-quantile categories.

    Boundary ties go to the lower bucket. If fewer distinct lengths than
    categories exist, one bucket per distinct length is returned instead.
    """
    if k_categories < 1:
        raise DataError(f"k_categories must be >= 1, got {k_categories}")
    lengths = [len(s) for s in corpus.samples]
    if not lengths:
        return [[] for _ in range(1)]
    distinct = sorted(set(lengths))
    if k_categories >= len(distinct):
        by_len = {ln: [] for ln in distinct}
        for idx, ln in enumerate(lengths):
            by_len[ln].append(idx)
        return [by_len[ln] for ln in distinct]
    n = len(lengths)
    ordered = sorted(lengths)
    # upper edge of bucket j is the (j+1)/k quantile order statistic
    edges = [ordered[-(-n * (j + 1) // k_categories) - 1] for j in range(k_categories - 1)]
    buckets: list[list[int]] = [[] for _ in range(k_categories)]
    for idx, ln in enumerate(lengths):
        b = 0
        while b < len(edges) and ln > edges[b]:
            b += 1
        buckets[b].append(idx)
    return [b for b in buckets if b]


def dirichlet_partition(
    categories: Sequence[Sequence[int]], n_clients: int, alpha: float, seed: int
) -> list[ClientShard]:
    """Allocate each category across clients with Dirichlet proportions.

    Per category k: draw p ~ Dirichlet(alpha, ..., alpha) via normalized
    Gamma(alpha, 1) samples, give client i floor(p_i * n_k) samples of a
    seeded shuffle, then hand the floored-away remainder out one each in
    descending fractional-part order (ties to the lower client id).
    """
    if alpha <= 0:
        raise DataError(f"alpha must be positive, got {alpha}")
    if n_clients < 1:
        raise DataError(f"n_clients must be >= 1, got {n_clients}")
    rng = Rng(seed)
    per_client: list[list[int]] = [[] for _ in range(n_clients)]
    counts = [[0] * len(categories) for _ in range(n_clients)]
    for k, members in enumerate(categories):
        n_k = len(members)
        if n_k == 0:
            continue
        gammas = [rng.gamma(alpha) for _ in range(n_clients)]
        total = sum(gammas)
        props = [g / total for g in gammas]
        quotas = [int(p * n_k) for p in props]
        leftover = n_k - sum(quotas)
        order = sorted(range(n_clients), key=lambda i: (-(props[i] * n_k - quotas[i]), i))
        for j in range(leftover):
            quotas[order[j % n_clients]] += 1
        pool = list(members)
        rng.shuffle(pool)
        start = 0
        for i in range(n_clients):
            take = pool[start : start + quotas[i]]
            start += quotas[i]
            per_client[i].extend(take)
            counts[i][k] += len(take)
    return [
        ClientShard(client_id=i, sample_indices=sorted(per_client[i]), category_counts=counts[i])
        for i in range(n_clients)
    ]


def heterogeneity(shards: Sequence[ClientShard]) -> float:
    """Mean pairwise total-variation distance between category mixtures.

    Shards with no samples contribute a uniform histogram so the measure
    stays defined.
    """
    if len(shards) < 2:
        raise DataError("heterogeneity needs at least 2 shards")
    k = max(len(s.category_counts) for s in shards)
    dists = []
    for s in shards:
        total = sum(s.category_counts)
        if total == 0:
            dists.append([1.0 / k] * k)
        else:
            padded = list(s.category_counts) + [0] * (k - len(s.category_counts))
            dists.append([c / total for c in padded])
    pair_tvs = []
    for i in range(len(dists)):
        for j in range(i + 1, len(dists)):
            tv = 0.5 * sum(abs(a - b) for a, b in zip(dists[i], dists[j]))
            pair_tvs.append(tv)
    return sum(pair_tvs) / len(pair_tvs)


def save_shards(
    path: str | Path,
    shards: Sequence[ClientShard],
    alpha: float | None,
    seed: int,
    k_categories: int,
) -> None:
    """Write the shard file: {clients, alpha, seed, k_categories}."""
    doc = {
        "clients": [
            {"id": s.client_id, "indices": list(s.sample_indices)} for s in shards
        ],
        "alpha": alpha,
        "seed": seed,
        "k_categories": k_categories,
    }
    try:
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write shard file {path}: {exc}") from exc


def load_shards(path: str | Path, corpus: Corpus | None = None) -> tuple[list[ClientShard], dict]:
    """Read a shard file; recompute category histograms when given the corpus."""
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read shard file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed shard file {path}: {exc}") from exc
    categories = None
    if corpus is not None:
        categories = bucket_by_length(corpus, int(doc.get("k_categories", 1)))
    shards = []
    for entry in doc["clients"]:
        indices = [int(i) for i in entry["indices"]]
        counts = _histogram(indices, categories) if categories is not None else []
        shards.append(ClientShard(client_id=int(entry["id"]), sample_indices=indices,
                                  category_counts=counts))
    meta = {k: doc.get(k) for k in ("alpha", "seed", "k_categories")}
    return shards, meta
