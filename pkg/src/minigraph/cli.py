"""Command-line entry points: gen, partition, train, report."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

from minigraph import __version__
from minigraph.comm import SocketFabric, free_port_base
from minigraph.errors import CommError, ConfigError, ParseError, ProtocolError
from minigraph.graph import generate_sbm, load_graph, save_edgelist, save_graph
from minigraph.hec import DEFAULT_CS, DEFAULT_LS, DEFAULT_NC
from minigraph.partition import (
    import_partition_assignment,
    load_assignment,
    load_partition,
    load_partitions,
    partition,
    save_partitions,
)
from minigraph.sampler import num_minibatches
from minigraph.trainer import RunResult, TrainConfig, rank_main, run_training, write_metrics

EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_NAN = 3


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _fanout(text):
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"fanout must be comma-separated ints, got {text!r}") from None


# -- gen ---------------------------------------------------------------------------


def cmd_gen(args):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.from_edgelist:
        g = load_graph(args.from_edgelist, format="edgelist")
        source = {"kind": "edgelist", "path": str(args.from_edgelist)}
    else:
        g = generate_sbm(args.blocks, args.per_block, args.p_in, args.p_out,
                         feature_dim=args.feature_dim, seed=args.seed, noise=args.noise,
                         train_frac=args.train_frac)
        source = {"kind": "sbm", "blocks": args.blocks, "per_block": args.per_block,
                  "p_in": args.p_in, "p_out": args.p_out, "feature_dim": args.feature_dim,
                  "noise": args.noise, "train_frac": args.train_frac, "seed": args.seed}
    if args.format == "edgelist":
        save_edgelist(g, out)
    else:
        save_graph(g, out)
    man = {
        "source": source,
        "format": args.format,
        "num_vertices": g.num_vertices,
        "num_edges": g.num_edges,
        "num_train": int(g.train_mask.sum()),
        "num_test": int(g.test_mask.sum()),
        "sha256": _sha256(out),
    }
    Path(str(out) + ".json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}: {g.num_vertices} vertices, {g.num_edges} directed edges")
    return 0


# -- partition ---------------------------------------------------------------------


def cmd_partition(args):
    g = load_graph(args.graph)
    if args.assignment:
        a = load_assignment(args.assignment)
        parts = import_partition_assignment(g, a, num_parts=args.ranks)
    else:
        parts = partition(g, args.ranks, args.seed)
    man = save_partitions(parts, args.out, g, args.seed)
    print(f"wrote {len(parts)} partitions to {args.out}: cut edges {man['cut_edges']}")
    return 0


# -- train -------------------------------------------------------------------------


def _config(args) -> TrainConfig:
    return TrainConfig(
        model=args.model, fanout=args.fanout, hidden=args.hidden, heads=args.heads,
        batch_size=args.batch_size, epochs=args.epochs, lr=args.lr, dropout_p=args.dropout,
        cs=args.cs, nc=args.nc, ls=args.ls, delay=args.delay, ranks=args.ranks, seed=args.seed,
        transport=args.transport, dtype=args.dtype, workers=args.workers,
    ).validate()


def _check_delay(parts, cfg):
    m = min(num_minibatches(p, cfg.batch_size) for p in parts)
    if cfg.delay >= max(m, 1):
        raise ConfigError(f"--delay {cfg.delay} must be smaller than the minibatch count M={m} "
                          f"(smallest over ranks at batch size {cfg.batch_size})")


def _prepare_parts(args, cfg, run_dir):
    """Load or build the partitions and record them under the run directory."""
    if args.parts:
        parts = load_partitions(args.parts)
        parts_dir = Path(args.parts)
        dataset = {"parts": str(parts_dir)}
    else:
        if not args.graph:
            raise ConfigError("give a graph file or --parts")
        g = load_graph(args.graph)
        parts = partition(g, cfg.ranks, cfg.seed)
        parts_dir = run_dir / "parts"
        save_partitions(parts, parts_dir, g, cfg.seed)
        dataset = {"graph": str(args.graph), "sha256": _sha256(args.graph)}
    if len(parts) != cfg.ranks:
        raise ConfigError(f"{len(parts)} partitions found, but --ranks is {cfg.ranks}")
    return parts, parts_dir, dataset


def _run_manifest(cfg, dataset, parts_dir, run_dir):
    return {
        "config": cfg.to_dict(),
        "dataset": dataset,
        "partition_manifest": str(Path(parts_dir) / "manifest.json"),
        "version": __version__,
        "outputs": {name: str(run_dir / name) for name in ("metrics.jsonl", "timings.jsonl", "summary.json")},
    }


def _report_epochs(result):
    for m in result.epochs:
        acc = "-" if m.test_acc is None else f"{m.test_acc:.4f}"
        hr = ",".join(f"{h:.3f}" for h in m.hit_rate)
        print(f"epoch {m.epoch}: loss {m.train_loss:.4f} acc {acc} hit-rate [{hr}] "
              f"bytes {m.comm_bytes} wall {m.wall:.2f}s")


def _train_socket_worker(args, cfg):
    """One rank of a socket-transport run; rank 0 writes the metrics."""
    part = load_partition(Path(args.parts) / f"part{args.rank}.mgp")
    fabric = SocketFabric(args.rank, args.world_size, base_port=args.port_base, timeout=args.timeout)
    try:
        res = rank_main(fabric, part, cfg, evaluate_each_epoch=not args.eval_last)
    finally:
        fabric.close()
    if args.rank == 0:
        result = RunResult(cfg, res.global_epochs, [res.epochs], [res.params])
        write_metrics(result, args.run_dir, args.target_acc)
        _report_epochs(result)
    return 0


def _spawn_socket_ranks(args, cfg, parts_dir, run_dir):
    base = free_port_base(cfg.ranks)
    procs = []
    for r in range(cfg.ranks):
        cmd = [sys.executable, "-m", "minigraph.cli", "train",
               "--parts", str(parts_dir), "--run-dir", str(run_dir),
               "--rank", str(r), "--world-size", str(cfg.ranks), "--port-base", str(base),
               "--timeout", str(args.timeout),
               "--model", cfg.model, "--fanout", ",".join(map(str, cfg.fanout)),
               "--hidden", str(cfg.hidden), "--heads", str(cfg.heads),
               "--batch-size", str(cfg.batch_size), "--epochs", str(cfg.epochs),
               "--lr", repr(cfg.learning_rate), "--dropout", repr(cfg.dropout_p),
               "--cs", str(cfg.cs), "--nc", str(cfg.nc), "--ls", str(cfg.ls),
               "--delay", str(cfg.delay), "--ranks", str(cfg.ranks), "--seed", str(cfg.seed),
               "--transport", "socket", "--dtype", cfg.dtype]
        if cfg.workers:
            cmd += ["--workers", str(cfg.workers)]
        if args.target_acc is not None:
            cmd += ["--target-acc", repr(args.target_acc)]
        if args.eval_last:
            cmd.append("--eval-last")
        procs.append(subprocess.Popen(cmd, env=dict(os.environ)))
    codes = [p.wait() for p in procs]
    bad = [c for c in codes if c]
    if not bad:
        return 0
    return EXIT_NAN if EXIT_NAN in bad else max(bad)


def cmd_train(args):
    cfg = _config(args)
    run_dir = Path(args.run_dir)
    if args.rank is not None:
        if cfg.transport != "socket" or args.world_size is None or args.port_base is None or not args.parts:
            raise ConfigError("--rank needs --transport socket, --world-size, --port-base and --parts")
        return _train_socket_worker(args, cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    parts, parts_dir, dataset = _prepare_parts(args, cfg, run_dir)
    _check_delay(parts, cfg)
    man = _run_manifest(cfg, dataset, parts_dir, run_dir)
    (run_dir / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    if cfg.transport == "socket":
        return _spawn_socket_ranks(args, cfg, parts_dir, run_dir)
    result = run_training(None, cfg, parts=parts, evaluate_each_epoch=not args.eval_last,
                          timeout=args.timeout)
    write_metrics(result, run_dir, args.target_acc)
    _report_epochs(result)
    return 0


# -- report ------------------------------------------------------------------------


def _read_jsonl(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def component_rows(run_dir):
    """Per-epoch rows joining deterministic metrics with wall-clock components."""
    metrics = _read_jsonl(Path(run_dir) / "metrics.jsonl")
    timings = {t["epoch"]: t for t in _read_jsonl(Path(run_dir) / "timings.jsonl")}
    rows = []
    for m in metrics:
        t = timings.get(m["epoch"], {})
        rows.append({
            "epoch": m["epoch"],
            "MBC": t.get("MBC"), "FWD": t.get("FWD"), "BWD": t.get("BWD"), "ARed": t.get("ARed"),
            "wall": t.get("wall"),
            "train_loss": m["train_loss"], "test_acc": m["test_acc"],
            "comm_bytes": m["comm_bytes"], "eliminated": m["eliminated"],
        })
    return rows


def hit_rate_rows(run_dir):
    rows = []
    for m in _read_jsonl(Path(run_dir) / "metrics.jsonl"):
        for l, (h, miss) in enumerate(zip(m["hits"], m["misses"])):
            rows.append({"epoch": m["epoch"], "layer": l, "hits": h, "misses": miss,
                         "hit_rate": h / (h + miss) if h + miss else 0.0})
    return rows


def _write_csv(rows, fh):
    if not rows:
        return
    w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)


def cmd_report(args):
    tables = {"components": component_rows(args.run_dir), "hit_rate": hit_rate_rows(args.run_dir)}
    wanted = ["components", "hit_rate"] if args.table == "all" else [args.table]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name in wanted:
            with open(out / f"{name}.csv", "w") as fh:
                _write_csv(tables[name], fh)
        print(f"wrote {', '.join(n + '.csv' for n in wanted)} to {out}")
    else:
        for i, name in enumerate(wanted):
            if i:
                print()
            _write_csv(tables[name], sys.stdout)
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="minigraph", description="Distributed GNN minibatch training on one machine.")
    ap.add_argument("--version", action="version", version=f"minigraph {__version__}")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate an SBM graph or convert an edge list")
    g.add_argument("--blocks", type=int, default=4)
    g.add_argument("--per-block", type=int, default=250)
    g.add_argument("--p-in", type=float, default=0.05)
    g.add_argument("--p-out", type=float, default=0.002)
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--noise", type=float, default=1.0, help="feature noise around the class centers")
    g.add_argument("--train-frac", type=float, default=0.8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--from-edgelist", help="convert this text edge list instead of generating")
    g.add_argument("--format", choices=["csr", "edgelist"], default="csr")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    p = sub.add_parser("partition", help="split a graph into per-rank partitions")
    p.add_argument("graph")
    p.add_argument("--ranks", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--assignment", help="file with one rank id per vertex (e.g. from METIS)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_partition)

    t = sub.add_parser("train", help="train with asynchronous embedding push")
    t.add_argument("graph", nargs="?")
    t.add_argument("--parts", help="directory written by `minigraph partition`")
    t.add_argument("--model", choices=["sage", "gat"], required=True)
    t.add_argument("--fanout", type=_fanout, default=(5, 10, 15))
    t.add_argument("--hidden", type=int, default=256)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--batch-size", type=int, default=1000)
    t.add_argument("--lr", type=float, default=None,
                   help="default: sage 0.003 on one rank, 0.006 on several; gat 0.001")
    t.add_argument("--dropout", type=float, default=0.5)
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--ranks", type=int, default=1)
    t.add_argument("--cs", type=int, default=DEFAULT_CS, help="cache lines per layer")
    t.add_argument("--nc", type=int, default=DEFAULT_NC, help="max embeddings pushed per peer, layer and iteration")
    t.add_argument("--ls", type=int, default=DEFAULT_LS, help="cache-line life-span in iterations")
    t.add_argument("--delay", type=int, default=1, help="iterations between a push and its use")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--transport", choices=["inproc", "socket"], default="inproc")
    t.add_argument("--dtype", choices=["float64", "float32"], default="float64")
    t.add_argument("--workers", type=int, default=None, help="kernel threads per rank (default: MINIGRAPH_WORKERS)")
    t.add_argument("--target-acc", type=float, default=None)
    t.add_argument("--eval-last", action="store_true", help="evaluate only after the last epoch")
    t.add_argument("--timeout", type=float, default=120.0, help="seconds to wait on a peer")
    t.add_argument("--run-dir", default="run")
    t.add_argument("--rank", type=int, default=None, help=argparse.SUPPRESS)
    t.add_argument("--world-size", type=int, default=None, help=argparse.SUPPRESS)
    t.add_argument("--port-base", type=int, default=None, help=argparse.SUPPRESS)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("report", help="CSV tables from a run directory")
    r.add_argument("run_dir")
    r.add_argument("--table", choices=["components", "hit_rate", "all"], default="all")
    r.add_argument("--out", help="directory for CSV files (default: stdout)")
    r.set_defaults(fn=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FloatingPointError as exc:
        print(f"minigraph: aborted: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (ConfigError, ParseError) as exc:
        print(f"minigraph: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, CommError, FileNotFoundError) as exc:
        print(f"minigraph: failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
