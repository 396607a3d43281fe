"""Experiment runner: partition, train, report, gradcheck subcommands.

Configuration comes from an optional JSON file plus flag overrides (flags
win). Every subcommand is deterministic in (config, seed); errors are
printed to stderr as ``error[<Code>]: message`` and exit nonzero.
"""

from __future__ import annotations

import argparse
import struct
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import lora, metrics as met, model as mod, partition as part, protocol
from .errors import DataError, SplitFTError
from .numkit import Rng, derive_seed


def _load_config(args: argparse.Namespace) -> cfgmod.ExperimentConfig:
    doc = {}
    if args.config:
        doc = cfgmod.to_dict(cfgmod.load(args.config))
    if args.seed is not None:
        doc["seed"] = args.seed
    return cfgmod.from_dict(doc)


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_partition(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    corpus = part.synth_corpus(cfg.model.vocab, cfg.data.n_samples, cfg.data.len_range,
                               derive_seed(cfg.seed, protocol.TAG_CORPUS))
    seed = derive_seed(cfg.seed, protocol.TAG_PARTITION)
    if cfg.data.partition == "iid":
        shards = part.partition_iid(corpus, cfg.federation.n_clients, seed,
                                    k_categories=cfg.data.k_categories)
        alpha = None
    else:
        categories = part.bucket_by_length(corpus, cfg.data.k_categories)
        shards = part.dirichlet_partition(categories, cfg.federation.n_clients,
                                          cfg.data.alpha, seed)
        alpha = cfg.data.alpha
    path = out / "shards.json"
    part.save_shards(path, shards, alpha, cfg.seed, cfg.data.k_categories)
    if len(shards) >= 2:
        print(f"heterogeneity: {part.heterogeneity(shards):.6f}")
    else:
        print("heterogeneity: n/a (single client)")
    print(f"wrote {path}")
    return 0


def _write_adapters(path: Path, model: mod.SplitModel, lossless: bool) -> None:
    """Final adapter tensors in the wire matrix format (one file)."""
    fmt = "<f8" if lossless else "<f4"
    blob = struct.pack("<I", len(model.adapters))
    for p in sorted(model.adapters):
        ad = model.adapters[p]
        blob += struct.pack("<II", p, ad.rank)
        for m in (ad.a, ad.b):
            arr = np.ascontiguousarray(m, dtype=np.float64).astype(fmt)
            blob += struct.pack("<II", m.shape[0], m.shape[1]) + arr.tobytes()
    path.write_bytes(blob)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    result = protocol.run_training(cfg, carrier="memory",
                                   lossless_wire=args.lossless_wire, trace=args.trace)
    csv_path = out / "metrics.csv"
    met.write_csv(result.metrics, csv_path)

    layer_log_path = out / "layer_log.csv"
    with open(layer_log_path, "w", newline="\n") as fh:
        fh.write("round," + ",".join(f"client_{cid}" for cid in sorted(result.layer_log[0])) + "\n")
        for rnd, counts in enumerate(result.layer_log):
            fh.write(str(rnd) + "," + ",".join(str(counts[cid]) for cid in sorted(counts)) + "\n")

    _write_adapters(out / "adapters.bin", result.model, args.lossless_wire)
    if args.trace:
        (out / "trace.log").write_text("\n".join(result.trace) + "\n")

    final = result.metrics[-1]
    print(f"rounds: {cfg.federation.rounds}")
    print(f"final perplexity: {final.perplexity:.6f}")
    print(f"final acc_avg: {final.acc_avg:.6f}")
    print(f"total bytes: {result.total_bytes}")
    print(f"wrote {csv_path}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    rows = met.read_csv(args.csv)
    out = _out_dir(args)
    global_rows = [r for r in rows if r["client_id"] == "global"]
    if not global_rows:
        print("empty metrics file: no rounds recorded")
        return 0
    max_acc = max(float(r["accuracy"]) for r in global_rows)
    final_ppl = float(global_rows[-1]["perplexity"])
    total_mb = int(global_rows[-1]["cum_bytes"]) / 1e6
    times = [float(r["sim_round_time"]) for r in global_rows if int(r["round"]) >= 1]
    mean_time = sum(times) / len(times) if times else 0.0
    print(f"max accuracy: {max_acc:.6f}")
    print(f"final perplexity: {final_ppl:.6f}")
    print(f"total comm MB: {total_mb:.6f}")
    print(f"mean sim round time (s): {mean_time:.9f}")

    series = {
        "perplexity_global": [(r["round"], r["perplexity"]) for r in global_rows],
        "accuracy_global": [(r["round"], r["accuracy"]) for r in global_rows],
        "loss_global": [(r["round"], r["loss"]) for r in global_rows],
    }
    client_ids = sorted({r["client_id"] for r in rows if r["client_id"] != "global"}, key=int)
    for cid in client_ids:
        client_rows = [r for r in rows if r["client_id"] == cid]
        series[f"perplexity_client_{cid}"] = [(r["round"], r["perplexity"]) for r in client_rows]
        series[f"layers_client_{cid}"] = [(r["round"], r["layers"]) for r in client_rows]
    for name, points in series.items():
        path = out / f"series_{name}.csv"
        with open(path, "w", newline="\n") as fh:
            fh.write("round,value\n")
            for rnd, value in points:
                fh.write(f"{rnd},{value}\n")
    print(f"wrote {len(series)} series files to {out}")
    return 0


def run_gradcheck(dims: int, seed: int, n_configs: int = 100,
                  corrupt: tuple[int, str, int, int, float] | None = None) -> float:
    """Finite-difference sweep over random small configs; returns max rel err.

    ``corrupt`` is a test hook (layer, 'a'|'b', i, j, eps) that perturbs
    one analytic gradient entry to prove the check catches regressions.
    """
    if dims > 8:
        raise DataError(f"gradcheck dims capped at 8, got {dims}")
    root = Rng(seed)
    h = 1e-6
    worst = 0.0
    for _ in range(n_configs):
        v = 2 + root.integer(dims - 1)
        d = 2 + root.integer(dims - 1)
        m = 2 + root.integer(3)
        seq = 1 + root.integer(dims)
        cfg = mod.ModelConfig(vocab=v, dim=d, layers=m, seq_len=seq,
                              mixer=bool(root.integer(2)))
        rank = 1 + root.integer(d - 1)
        model = mod.build_model(cfg, root.next_u64(), rank)
        # randomize b too so gA is informative (fresh adapters have b = 0)
        for p in list(model.adapters):
            ad = model.adapters[p]
            b = np.array([[root.normal() * 0.1 for _ in range(d)] for _ in range(rank)])
            a = np.array([[root.normal() * 0.1 for _ in range(rank)] for _ in range(d)])
            model.adapters[p] = lora.LoraAdapter(a=a, b=b, rank=rank, layer_index=p)
        batch = 1 + root.integer(2)
        tokens = np.array([[root.integer(v) for _ in range(seq)] for _ in range(batch)])
        targets = np.array([root.integer(v) for _ in range(batch * seq)])

        def loss_of(current: mod.SplitModel) -> float:
            logits, _ = mod.forward(current, tokens, 1, m)
            loss, _ = mod.loss_and_head_grad(logits, targets)
            return loss

        logits, cache = mod.forward(model, tokens, 1, m)
        _, head_grad = mod.loss_and_head_grad(logits, targets)
        _, grads = mod.backward(model, cache, head_grad, 1, m)
        if corrupt is not None:
            layer, which, ci, cj, eps = corrupt
            ga, gb = grads[layer]
            if which == "a":
                ga = ga.copy()
                ga[ci, cj] += eps
            else:
                gb = gb.copy()
                gb[ci, cj] += eps
            grads[layer] = (ga, gb)

        def probe(p, side, i, j):
            ad = model.adapters[p]
            mat = ad.a if side == 0 else ad.b
            analytic = grads[p][side][i, j]
            saved = mat[i, j]
            mat[i, j] = saved + h
            plus = loss_of(model)
            mat[i, j] = saved - h
            minus = loss_of(model)
            mat[i, j] = saved
            fd = (plus - minus) / (2 * h)
            # floor sits above the ~1e-9 central-difference noise at this
            # loss scale and below any real gradient magnitude
            denom = max(abs(fd), abs(analytic), 1e-4)
            return abs(fd - analytic) / denom

        for _ in range(6):
            p = 1 + root.integer(m)
            side = root.integer(2)
            mat = model.adapters[p].a if side == 0 else model.adapters[p].b
            worst = max(worst, probe(p, side, root.integer(mat.shape[0]),
                                     root.integer(mat.shape[1])))
        if corrupt is not None:
            layer, which, ci, cj, _eps = corrupt
            worst = max(worst, probe(layer, 0 if which == "a" else 1, ci, cj))
    return worst


def cmd_gradcheck(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 7
    worst = run_gradcheck(args.dims, seed)
    passed = worst < 1e-5
    print(f"gradcheck: {'PASS' if passed else 'FAIL'} max rel err {worst:.3e}")
    return 0 if passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitft",
                                     description="federated split fine-tuning experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("partition", cmd_partition), ("train", cmd_train),
                     ("report", cmd_report), ("gradcheck", cmd_gradcheck)):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="root seed override")
        p.add_argument("--out", help="output directory (default: cwd)")
        p.add_argument("--trace", action="store_true", help="write the message trace log")
        p.add_argument("--lossless-wire", action="store_true",
                       help="64-bit frames instead of the 32-bit wire format")
        p.set_defaults(fn=fn)
        if name == "report":
            p.add_argument("csv", help="metrics.csv from a training run")
        if name == "gradcheck":
            p.add_argument("--dims", type=int, default=8, help="max dimension (<= 8)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SplitFTError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
