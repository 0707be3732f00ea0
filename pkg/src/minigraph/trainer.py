"""Per-rank training with asynchronous embedding push (AEP).

Each iteration ``k`` of an epoch with ``M`` minibatches:

1. sample the minibatch blocks and load the seeds' input features;
2. if ``k >= d``: wait for the embeddings pushed ``d`` iterations ago and
   store them in the per-layer caches;
3. look up every halo source in its layer's cache, load the hits, and drop
   the edges of the misses;
4. forward, loss, backward;
5. if ``k < M - d``: for each layer, pick the local solid sources that are
   halo on some other rank, cap them at ``nc`` per destination rank by
   degree-weighted sampling, and push their embeddings asynchronously;
6. all-reduce gradients, Adam step, age the caches by one iteration.
"""

from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from minigraph import rng
from minigraph.comm import Fabric, InProcGroup
from minigraph.errors import ConfigError, ProtocolError
from minigraph.graph import CsrGraph
from minigraph.hec import DEFAULT_CS, DEFAULT_LS, DEFAULT_NC, Hec, create_db, map_solids, sample_by_degree
from minigraph.models import GNN, loss_and_accuracy
from minigraph.optim import Adam
from minigraph.partition import HALO, Partition, halo_vid_o, partition
from minigraph.sampler import create_minibatches, find_halo_nodes, find_solid_nodes, full_block, num_minibatches, sample_blocks

_PUSH_TAG = 0x9054

# learning rates per model: (single rank, multiple ranks)
DEFAULT_LR = {"sage": (0.003, 0.006), "gat": (0.001, 0.001)}


@dataclass
class TrainConfig:
    model: str = "sage"
    fanout: tuple = (5, 10, 15)
    hidden: int = 256
    heads: int = 4
    batch_size: int = 1000
    epochs: int = 1
    lr: float | None = None
    dropout_p: float = 0.5
    cs: int = DEFAULT_CS
    nc: int = DEFAULT_NC
    ls: int = DEFAULT_LS
    delay: int = 1
    ranks: int = 1
    seed: int = 0
    transport: str = "inproc"
    dtype: str = "float64"
    workers: int | None = None

    def __post_init__(self):
        self.fanout = tuple(int(f) for f in self.fanout)

    @property
    def num_layers(self) -> int:
        return len(self.fanout)

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        single, multi = DEFAULT_LR[self.model]
        return single if self.ranks == 1 else multi

    def validate(self):
        if self.model not in DEFAULT_LR:
            raise ConfigError(f"model must be 'sage' or 'gat', got {self.model!r}")
        if not self.fanout:
            raise ConfigError("fanout needs one entry per layer")
        if self.delay < 1:
            raise ConfigError("delay must be >= 1 (the push is consumed in a later iteration)")
        if self.cs < self.nc:
            raise ConfigError(f"cache size cs={self.cs} must be >= nc={self.nc}")
        if self.ls < 0 or self.nc < 0:
            raise ConfigError("ls and nc must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.ranks < 1:
            raise ConfigError("batch_size, epochs and ranks must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.model == "gat" and self.hidden % self.heads:
            raise ConfigError("hidden must be divisible by heads")
        if self.transport not in ("inproc", "socket"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fanout"] = list(self.fanout)
        d["lr"] = self.learning_rate
        return d


@dataclass
class EpochMetrics:
    epoch: int
    iterations: int = 0
    loss_sum: float = 0.0
    loss_count: int = 0
    train_loss: float = 0.0
    test_acc: float | None = None
    hits: list = field(default_factory=list)
    misses: list = field(default_factory=list)
    eliminated: int = 0
    comm_bytes: int = 0
    sent_tags: int = 0
    stored: int = 0
    consumed_rounds: int = 0
    staleness: list = field(default_factory=list)
    max_outstanding: int = 0
    mbc: float = 0.0
    fwd: float = 0.0
    bwd: float = 0.0
    ared: float = 0.0
    wall: float = 0.0
    losses: list = field(default_factory=list)

    @property
    def hit_rate(self) -> list:
        return [h / (h + m) if h + m else 0.0 for h, m in zip(self.hits, self.misses)]

    def record(self) -> dict:
        """Deterministic fields only (no wall-clock times)."""
        return {
            "epoch": self.epoch,
            "iterations": self.iterations,
            "train_loss": self.train_loss,
            "test_acc": self.test_acc,
            "hits": self.hits,
            "misses": self.misses,
            "hit_rate": self.hit_rate,
            "eliminated": self.eliminated,
            "comm_bytes": self.comm_bytes,
            "sent_tags": self.sent_tags,
            "staleness": sorted(set(self.staleness)),
            "max_outstanding": self.max_outstanding,
        }

    def timing(self) -> dict:
        return {"epoch": self.epoch, "MBC": self.mbc, "FWD": self.fwd, "BWD": self.bwd,
                "ARed": self.ared, "wall": self.wall}


@dataclass
class RankState:
    part: Partition
    cfg: TrainConfig
    fabric: Fabric
    model: GNN
    hecs: list
    db: dict
    opt: Adam
    num_batches: int
    local_batches: int
    dims: list
    pending: deque = field(default_factory=deque)


def _gather_ints(fabric, values):
    rows = fabric.bcast_allgather(np.asarray(values, dtype=np.int64))
    return np.stack(rows)


def initialize(part: Partition, cfg: TrainConfig, fabric: Fabric) -> RankState:
    """Exchange halo lists, build db_halo, caches, model and optimizer."""
    cfg.validate()
    halo_lists = fabric.bcast_allgather(halo_vid_o(part))
    db = create_db(halo_lists, part)
    local_batches = num_minibatches(part, cfg.batch_size)
    max_label = int(part.labels.max()) if part.num_solid else 0
    info = _gather_ints(fabric, [local_batches, max_label, part.features.shape[1]])
    num_classes = int(info[:, 1].max()) + 1
    feat_dim = int(info[:, 2].max())
    m_min, m_max = int(info[:, 0].min()), int(info[:, 0].max())
    if cfg.delay >= max(m_min, 1):
        raise ConfigError(
            f"delay d={cfg.delay} must be smaller than the minibatch count of every rank (min {m_min})"
        )
    dtype = np.dtype(cfg.dtype)
    model = GNN(cfg.model, feat_dim, cfg.hidden, num_classes, cfg.num_layers, cfg.heads, cfg.seed, dtype)
    dims = model.layer_dims()
    hecs = [Hec(cfg.cs, dim, cfg.ls, cfg.nc, dtype) for dim in dims]
    return RankState(part, cfg, fabric, model, hecs, db, Adam(cfg.learning_rate), m_max, local_batches, dims)


def _load_halos(state: RankState, mb, metrics: EpochMetrics):
    """Search each layer's cache for the minibatch's halo sources.

    Returns the blocks with missed halos' edges removed and an ``inject``
    callback that writes the cached rows into each layer's input.
    """
    part = state.part
    blocks, fills = [], []
    for l, blk in enumerate(mb.blocks):
        halo_b = find_halo_nodes(blk, part)
        tags = part.vid_o[blk.src_vid_p[halo_b]]
        lookup = state.hecs[l].search(tags)
        rows = state.hecs[l].load(lookup)
        hit = lookup.hits
        metrics.hits[l] += int(hit.sum())
        metrics.misses[l] += int((~hit).sum())
        metrics.eliminated += int((~hit).sum())
        drop = np.zeros(blk.num_src, dtype=bool)
        drop[halo_b[~hit]] = True
        blocks.append(blk.without_sources(drop) if drop.any() else blk)
        fills.append((halo_b[hit], rows))

    def inject(l, h):
        idx, rows = fills[l]
        if len(idx):
            h[idx] = rows

    return blocks, inject


def _receive(state: RankState, giter: int, metrics: EpochMetrics):
    cfg, n = state.cfg, state.model.num_layers
    produced, handles = state.pending.popleft()
    if giter - produced != cfg.delay:
        raise ProtocolError(f"consumed push from iteration {produced} at {giter}, delay is {cfg.delay}")
    part = state.part
    for l, handle in enumerate(handles):
        if handle.round_id != produced * n + l:
            raise ProtocolError(f"layer {l}: round {handle.round_id} does not match iteration {produced}")
        tags, rows = state.fabric.comm_wait(handle)
        if len(tags):
            local = part.to_local(tags)
            if np.any(local < 0) or np.any(part.vtype[local] != HALO):
                raise ProtocolError("received embedding for a vertex that is not a local halo")
            state.hecs[l].store(tags, rows.astype(state.hecs[l].data.dtype, copy=False))
        metrics.stored += len(tags)
    metrics.consumed_rounds += 1
    metrics.staleness.append(giter - produced)


def _push(state: RankState, mb, inputs, epoch: int, k: int, giter: int, metrics: EpochMetrics):
    cfg, part, n = state.cfg, state.part, state.model.num_layers
    deg = part.degrees()
    handles = []
    for l in range(n):
        payload = {}
        if mb is not None and state.db:
            blk = mb.blocks[l]
            sv = find_solid_nodes(blk, part)
            cands = map_solids(sv, state.db, part.vid_o[blk.src_vid_p])
            for r in sorted(cands):
                vb, vo = cands[r]
                gen = rng.generator(cfg.seed, epoch, k, l, r, _PUSH_TAG)
                vb, vo = sample_by_degree(vb, vo, deg[blk.src_vid_p[vb]], cfg.nc, gen)
                if len(vo):
                    payload[r] = (vo, inputs[l][vb])
                    metrics.sent_tags += len(vo)
        before = state.fabric.bytes_sent
        handles.append(state.fabric.alltoall_async(payload, state.dims[l], round_id=giter * n + l))
        metrics.comm_bytes += state.fabric.bytes_sent - before
    state.pending.append((giter, handles))
    metrics.max_outstanding = max(metrics.max_outstanding, len(state.pending))
    if len(state.pending) > cfg.delay:
        raise ProtocolError(f"{len(state.pending)} outstanding pushes exceed delay {cfg.delay}")


def train_epoch(state: RankState, epoch: int) -> EpochMetrics:
    cfg, part, model = state.cfg, state.part, state.model
    n, d, M = model.num_layers, cfg.delay, state.num_batches
    metrics = EpochMetrics(epoch, hits=[0] * n, misses=[0] * n)
    t_epoch = time.perf_counter()
    seed_sets, _ = create_minibatches(part, cfg.batch_size, cfg.seed, epoch)
    feats = part.features
    for k in range(M):
        giter = epoch * M + k
        t0 = time.perf_counter()
        mb = None
        if k < len(seed_sets):
            mb = sample_blocks(part, seed_sets[k], cfg.fanout, (cfg.seed, epoch, k), cfg.workers)
            b0 = mb.blocks[0]
            x0 = np.zeros((b0.num_src, feats.shape[1]), dtype=model.dtype)
            x0[:b0.num_solid] = feats[b0.src_vid_p[:b0.num_solid]]
        t1 = time.perf_counter()
        metrics.mbc += t1 - t0

        if k >= d:
            _receive(state, giter, metrics)
        grads = None
        if mb is not None:
            blocks, inject = _load_halos(state, mb, metrics)
            logits, caches, inputs = model.forward(blocks, x0, cfg.dropout_p, (cfg.seed, epoch, k), inject)
            loss, g_logits, _ = loss_and_accuracy(logits, mb.labels)
            if not math.isfinite(loss):
                raise FloatingPointError(f"rank {part.rank}: non-finite loss at epoch {epoch} iteration {k}")
            metrics.loss_sum += loss
            metrics.loss_count += 1
            metrics.losses.append(loss)
        if k < M - d:
            _push(state, mb, inputs if mb is not None else None, epoch, k, giter, metrics)
        t2 = time.perf_counter()
        metrics.fwd += t2 - t1

        if mb is not None:
            grads = model.backward(g_logits, caches, blocks, cfg.workers)
            flat = model.flatten_grads(grads)
        else:
            flat = np.zeros(model.flat_params().shape, dtype=np.float64)
        t3 = time.perf_counter()
        metrics.bwd += t3 - t2

        total = state.fabric.allreduce_sum(flat)
        total /= state.fabric.world_size
        state.opt.step(list(model.named_params()), model.unflatten(total.astype(model.dtype, copy=False)))
        for h in state.hecs:
            h.age_tick()
        metrics.ared += time.perf_counter() - t3
        metrics.iterations += 1

    while state.pending:
        produced, handles = state.pending.popleft()
        for l, handle in enumerate(handles):
            tags, rows = state.fabric.comm_wait(handle)
            if len(tags):
                state.hecs[l].store(tags, rows)
    metrics.train_loss = metrics.loss_sum / metrics.loss_count if metrics.loss_count else 0.0
    metrics.wall = time.perf_counter() - t_epoch
    return metrics


def _exact_halo_exchange(state: RankState):
    part, fabric = state.part, state.fabric

    def inject(l, h):
        payload = {r: (tags, h[part.to_local(tags)]) for r, tags in state.db.items() if len(tags)}
        handle = fabric.alltoall_async(payload, h.shape[1])
        tags, rows = fabric.comm_wait(handle)
        if len(tags):
            h[part.to_local(tags)] = rows

    return inject


def predict(state: RankState) -> np.ndarray:
    """Full-neighborhood logits for every local solid vertex (collective)."""
    part, model = state.part, state.model
    blk = full_block(part)
    x = np.zeros((part.num_local, part.features.shape[1]), dtype=model.dtype)
    x[:part.num_solid] = part.features
    logits, _, _ = model.forward([blk] * model.num_layers, x, inject=_exact_halo_exchange(state))
    return logits


def evaluate(state: RankState) -> float:
    """Global test accuracy, weighting each rank by its test-vertex count."""
    part = state.part
    logits = predict(state)
    test = part.test_vertices
    correct = float(np.count_nonzero(np.argmax(logits[test], axis=1) == part.labels[test])) if len(test) else 0.0
    tot = state.fabric.allreduce_sum([correct, float(len(test))])
    return float(tot[0] / tot[1]) if tot[1] else 0.0


# -- metrics reduction -------------------------------------------------------------


def reduce_metrics(fabric: Fabric, m: EpochMetrics) -> EpochMetrics:
    """Combine per-rank metrics: counts summed, times averaged over ranks."""
    n = len(m.hits)
    vec = np.array([m.loss_sum, m.loss_count, m.eliminated, m.comm_bytes, m.sent_tags, m.stored,
                    m.consumed_rounds, m.mbc, m.fwd, m.bwd, m.ared, m.wall] + m.hits + m.misses, dtype=np.float64)
    tot = fabric.allreduce_sum(vec)
    R = fabric.world_size
    diag = fabric.bcast_allgather([m.max_outstanding] + sorted(set(m.staleness)))
    out = EpochMetrics(m.epoch, iterations=m.iterations)
    out.loss_sum, out.loss_count = float(tot[0]), int(tot[1])
    out.train_loss = out.loss_sum / out.loss_count if out.loss_count else 0.0
    out.eliminated, out.comm_bytes, out.sent_tags = int(tot[2]), int(tot[3]), int(tot[4])
    out.stored, out.consumed_rounds = int(tot[5]), int(tot[6])
    out.mbc, out.fwd, out.bwd, out.ared, out.wall = (float(x) / R for x in tot[7:12])
    out.hits = [int(x) for x in tot[12:12 + n]]
    out.misses = [int(x) for x in tot[12 + n:12 + 2 * n]]
    out.max_outstanding = int(max(row[0] for row in diag))
    out.staleness = sorted({int(s) for row in diag for s in row[1:]})
    out.losses = list(m.losses)
    return out


# -- driver ---------------------------------------------------------------------------


@dataclass
class RankResult:
    rank: int
    epochs: list           # per-rank EpochMetrics
    global_epochs: list    # reduced EpochMetrics (identical on every rank)
    params: np.ndarray


def rank_main(fabric: Fabric, part: Partition, cfg: TrainConfig, evaluate_each_epoch=True) -> RankResult:
    state = initialize(part, cfg, fabric)
    local, merged = [], []
    for epoch in range(cfg.epochs):
        m = train_epoch(state, epoch)
        if evaluate_each_epoch or epoch == cfg.epochs - 1:
            m.test_acc = evaluate(state)
        g = reduce_metrics(fabric, m)
        g.test_acc = m.test_acc
        local.append(m)
        merged.append(g)
    return RankResult(part.rank, local, merged, state.model.flat_params())


@dataclass
class RunResult:
    config: TrainConfig
    epochs: list            # global EpochMetrics per epoch
    rank_epochs: list       # rank -> list of EpochMetrics
    params: list            # rank -> flat parameters

    @property
    def losses(self) -> list:
        return [m.train_loss for m in self.epochs]

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].test_acc if self.epochs else 0.0

    def staleness_values(self) -> set:
        return {s for eps in self.rank_epochs for m in eps for s in m.staleness}

    def max_outstanding(self) -> int:
        return max((m.max_outstanding for eps in self.rank_epochs for m in eps), default=0)

    def total_comm_bytes(self) -> int:
        return sum(m.comm_bytes for m in self.epochs)

    def hit_rate(self) -> float:
        h = sum(sum(m.hits) for m in self.epochs)
        s = h + sum(sum(m.misses) for m in self.epochs)
        return h / s if s else 0.0


def run_training(graph: CsrGraph | None, cfg: TrainConfig, parts: list | None = None,
                 evaluate_each_epoch=True, timeout=None) -> RunResult:
    """Partition (unless ``parts`` is given) and train every rank in-process."""
    cfg.validate()
    if parts is None:
        parts = partition(graph, cfg.ranks, cfg.seed)
    if len(parts) != cfg.ranks:
        raise ConfigError(f"{len(parts)} partitions for {cfg.ranks} ranks")
    group = InProcGroup(cfg.ranks, **({"timeout": timeout} if timeout else {}))
    results = group.run(lambda fab, r: rank_main(fab, parts[r], cfg, evaluate_each_epoch))
    return RunResult(cfg, results[0].global_epochs, [r.epochs for r in results], [r.params for r in results])


def write_metrics(result: RunResult, run_dir, target_acc=None) -> dict:
    """Write ``metrics.jsonl`` (deterministic), ``timings.jsonl`` and ``summary.json``.

    With ``target_acc`` the summary also names the first epoch reaching it.
    """
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as fh:
        for m in result.epochs:
            fh.write(json.dumps(m.record(), sort_keys=True) + "\n")
    with open(out / "timings.jsonl", "w") as fh:
        for m in result.epochs:
            fh.write(json.dumps(m.timing(), sort_keys=True) + "\n")
    accs = [(m.test_acc, m.epoch) for m in result.epochs if m.test_acc is not None]
    best_acc, best_epoch = max(accs, key=lambda t: (t[0], -t[1])) if accs else (None, None)
    n = max(len(result.epochs), 1)
    summary = {
        "config": result.config.to_dict(),
        "epochs": len(result.epochs),
        "best_test_acc": best_acc,
        "best_epoch": best_epoch,
        "final_test_acc": result.final_accuracy if result.epochs else None,
        "target_acc": target_acc,
        "epoch_at_target": next((e for a, e in accs if target_acc is not None and a >= target_acc), None),
        "mean_epoch_time": {k: sum(m.timing()[k] for m in result.epochs) / n
                            for k in ("MBC", "FWD", "BWD", "ARed", "wall")},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
