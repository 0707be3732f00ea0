"""Edge-cut partitioning with halo vertices and ID lookup tables.

Every vertex is *solid* (owned, with features) in exactly one partition.
When an edge ``(u, v)`` is cut, ``v``'s partition gets a feature-less
*halo* copy of ``u`` and vice versa. Within a partition, solid vertices
take local ids ``[0, num_solid)`` and halos ``[num_solid, P)``, both in
ascending original-id order.
"""

from __future__ import annotations

import heapq
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from minigraph.errors import ConfigError, ParseError
from minigraph.graph import CsrGraph

SOLID = 0
HALO = 1
PART_MAGIC = b"MGPART1"
BALANCE_SLACK = 1.05


@dataclass(eq=False)
class Partition:
    rank: int
    num_parts: int
    num_solid: int
    num_halo: int
    vid_o: np.ndarray       # VID_p -> VID_o
    vtype: np.ndarray       # VID_p -> SOLID | HALO
    owner: np.ndarray       # VID_p -> owning rank
    indptr: np.ndarray      # local in-neighbor CSR over VID_p
    indices: np.ndarray
    features: np.ndarray    # solid rows only
    labels: np.ndarray
    train_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        self._sort = np.argsort(self.vid_o, kind="stable")
        self._sorted_o = self.vid_o[self._sort]

    @property
    def num_local(self) -> int:
        return self.num_solid + self.num_halo

    @property
    def num_edges(self) -> int:
        return int(self.indices.shape[0])

    @property
    def train_vertices(self) -> np.ndarray:
        return np.nonzero(self.train_mask)[0]

    @property
    def test_vertices(self) -> np.ndarray:
        return np.nonzero(self.test_mask)[0]

    def degrees(self) -> np.ndarray:
        """Local in-degree per VID_p; equals the global degree for solids."""
        return np.diff(self.indptr)

    def to_local(self, vid_o) -> np.ndarray:
        """VID_o -> VID_p, with -1 for vertices not present here."""
        q = np.asarray(vid_o, dtype=np.int64)
        out = np.full(q.shape, -1, dtype=np.int64)
        if not len(self._sorted_o):
            return out
        pos = np.minimum(np.searchsorted(self._sorted_o, q), len(self._sorted_o) - 1)
        found = self._sorted_o[pos] == q
        out[found] = self._sort[pos[found]]
        return out

    def solid_vid_o(self) -> np.ndarray:
        return self.vid_o[:self.num_solid]

    def global_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Local edges mapped back to original ids as ``(src, dst)``."""
        dst = np.repeat(np.arange(self.num_local, dtype=np.int64), self.degrees())
        return self.vid_o[self.indices], self.vid_o[dst]


def halo_vid_o(p: Partition) -> np.ndarray:
    """Original ids of ``p``'s halo vertices, ascending."""
    return p.vid_o[p.num_solid:].copy()


def cut_edge_count(g: CsrGraph, assignment) -> int:
    """Undirected edges whose endpoints land in different parts."""
    a = np.asarray(assignment)
    src, dst = g.edges()
    return int(np.count_nonzero((a[src] != a[dst]) & (src < dst)))


def _build_partitions(g: CsrGraph, assignment: np.ndarray, R: int) -> list[Partition]:
    V = g.num_vertices
    deg = g.degrees()
    g2l = np.full(V, -1, dtype=np.int64)
    parts = []
    for r in range(R):
        solids = np.nonzero(assignment == r)[0]
        counts = deg[solids]
        if len(solids):
            nbrs = np.concatenate([g.indices[g.indptr[v]:g.indptr[v + 1]] for v in solids])
        else:
            nbrs = np.zeros(0, dtype=np.int64)
        halos = np.unique(nbrs[assignment[nbrs] != r])
        vid_o = np.concatenate([solids, halos]).astype(np.int64)
        g2l[vid_o] = np.arange(len(vid_o))
        indptr = np.zeros(len(vid_o) + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:len(solids) + 1])
        indptr[len(solids) + 1:] = indptr[len(solids)]
        vtype = np.concatenate([np.full(len(solids), SOLID, np.uint8), np.full(len(halos), HALO, np.uint8)])
        parts.append(Partition(
            rank=r,
            num_parts=R,
            num_solid=len(solids),
            num_halo=len(halos),
            vid_o=vid_o,
            vtype=vtype,
            owner=assignment[vid_o].astype(np.int64),
            indptr=indptr,
            indices=g2l[nbrs],
            features=g.features[solids],
            labels=g.labels[solids],
            train_mask=g.train_mask[solids],
            test_mask=g.test_mask[solids],
        ))
        g2l[vid_o] = -1
    return parts


def import_partition_assignment(g: CsrGraph, assignment, num_parts=None) -> list[Partition]:
    """Build partitions from an externally computed vertex -> rank map."""
    a = np.asarray(assignment, dtype=np.int64)
    if a.shape != (g.num_vertices,):
        raise ConfigError(f"assignment needs {g.num_vertices} entries, got {a.shape[0]}")
    if len(a) and a.min() < 0:
        raise ConfigError("negative rank id in assignment")
    R = int(a.max()) + 1 if num_parts is None and len(a) else (num_parts or 1)
    if len(a) and a.max() >= R:
        raise ConfigError(f"rank id {int(a.max())} out of range for {R} parts")
    return _build_partitions(g, a, R)


def greedy_assignment(g: CsrGraph, R: int, seed: int = 0, refine_passes: int = 4,
                      restarts: int = 8) -> np.ndarray:
    """Balanced min-edge-cut assignment by greedy graph growing.

    Parts are grown one at a time from a seeded start vertex, always taking
    the frontier vertex with the most edges into the part. Training and
    non-training vertices have separate per-part quotas, so training work
    is balanced. A boundary refinement pass then moves vertices that have
    more neighbors in another part, within a 5% balance slack.

    The result depends a lot on the start vertices on sparse graphs, so
    ``restarts`` seeded attempts are made and the smallest cut is kept
    (earliest attempt on ties).
    """
    best, best_cut = None, None
    for attempt in range(max(restarts, 1)):
        a = _grow(g, R, int(np.random.default_rng([seed, attempt]).integers(1 << 62)), refine_passes)
        cut = cut_edge_count(g, a)
        if best_cut is None or cut < best_cut:
            best, best_cut = a, cut
    return best


def _grow(g: CsrGraph, R: int, seed: int, refine_passes: int) -> np.ndarray:
    V = g.num_vertices
    if R < 1:
        raise ConfigError("need at least one part")
    if R > V:
        raise ConfigError(f"cannot split {V} vertices into {R} parts")
    assign = np.full(V, -1, dtype=np.int64)
    if R == 1:
        assign[:] = 0
        return assign
    train = g.train_mask
    order = np.random.default_rng(seed).permutation(V)
    rank_of = np.empty(V, dtype=np.int64)
    rank_of[order] = np.arange(V)
    gain = np.zeros(V, dtype=np.int64)

    for r in range(R - 1):
        free = assign < 0
        left = R - r
        quota_t = math.ceil(int(np.count_nonzero(free & train)) / left)
        quota_n = math.ceil(int(np.count_nonzero(free & ~train)) / left)
        nt = nn = 0
        gain[:] = 0
        heap: list = []
        cursor = 0

        def admissible(v):
            return assign[v] < 0 and (nt < quota_t if train[v] else nn < quota_n)

        while nt < quota_t or nn < quota_n:
            v = -1
            while heap:
                neg, _, u = heapq.heappop(heap)
                if -neg == gain[u] and admissible(u):
                    v = u
                    break
            if v < 0:
                while cursor < V and not admissible(order[cursor]):
                    cursor += 1
                if cursor == V:
                    break
                v = int(order[cursor])
            assign[v] = r
            if train[v]:
                nt += 1
            else:
                nn += 1
            for u in g.indices[g.indptr[v]:g.indptr[v + 1]]:
                if assign[u] < 0:
                    gain[u] += 1
                    heapq.heappush(heap, (-gain[u], rank_of[u], int(u)))
    assign[assign < 0] = R - 1
    _refine(g, assign, R, refine_passes)
    return assign


def _refine(g: CsrGraph, assign: np.ndarray, R: int, passes: int):
    V = g.num_vertices
    train = g.train_mask
    tcap = math.ceil(BALANCE_SLACK * int(train.sum()) / R)
    vcap = math.ceil(BALANCE_SLACK * V / R)
    vcount = np.bincount(assign, minlength=R)
    tcount = np.bincount(assign[train], minlength=R)
    for _ in range(passes):
        moved = 0
        for v in range(V):
            nbrs = g.indices[g.indptr[v]:g.indptr[v + 1]]
            nbrs = nbrs[nbrs != v]
            if not len(nbrs):
                continue
            here = assign[v]
            links = np.bincount(assign[nbrs], minlength=R)
            best = int(np.argmax(links))  # lowest rank on ties
            if best == here or links[best] <= links[here] or vcount[here] <= 1:
                continue
            if vcount[best] + 1 > vcap or (train[v] and tcount[best] + 1 > tcap):
                continue
            assign[v] = best
            vcount[here] -= 1
            vcount[best] += 1
            if train[v]:
                tcount[here] -= 1
                tcount[best] += 1
            moved += 1
        if not moved:
            break


def partition(g: CsrGraph, R: int, seed: int = 0) -> list[Partition]:
    """Split ``g`` into ``R`` partitions with halos and lookup tables."""
    return _build_partitions(g, greedy_assignment(g, R, seed), R)


def assignment_of(parts: list[Partition]) -> np.ndarray:
    V = sum(p.num_solid for p in parts)
    a = np.full(V, -1, dtype=np.int64)
    for p in parts:
        a[p.solid_vid_o()] = p.rank
    return a


# -- files ---------------------------------------------------------------------


def load_assignment(path) -> np.ndarray:
    """One rank id per line; line number (0-based) is the VID_o."""
    ranks = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                ranks.append(int(line))
            except ValueError:
                raise ParseError(f"bad rank id {line!r}", lineno) from None
    return np.array(ranks, dtype=np.int64)


def save_partition(p: Partition, path):
    F = p.features.shape[1]
    with open(path, "wb") as fh:
        fh.write(PART_MAGIC)
        fh.write(struct.pack("<QQQQQQ", p.rank, p.num_parts, p.num_solid, p.num_halo, F, p.num_edges))
        fh.write(p.vid_o.astype("<u8").tobytes())
        fh.write(p.vtype.astype("u1").tobytes())
        fh.write(p.owner.astype("<u4").tobytes())
        fh.write(p.indptr.astype("<u8").tobytes())
        fh.write(p.indices.astype("<u8").tobytes())
        fh.write(p.features.astype("<f4").tobytes())
        fh.write(p.labels.astype("<u4").tobytes())
        fh.write(p.train_mask.astype("u1").tobytes())
        fh.write(p.test_mask.astype("u1").tobytes())


def load_partition(path) -> Partition:
    buf = Path(path).read_bytes()
    if buf[:7] != PART_MAGIC:
        raise ParseError(f"{path}: not a partition file (bad magic)")
    rank, R, ns, nh, F, E = struct.unpack_from("<QQQQQQ", buf, 7)
    off = 7 + 48
    P = ns + nh

    def take(dtype, count):
        nonlocal off
        dt = np.dtype(dtype)
        end = off + dt.itemsize * count
        if end > len(buf):
            raise ParseError(f"{path}: truncated file")
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=off)
        off = end
        return arr

    return Partition(
        rank=int(rank), num_parts=int(R), num_solid=int(ns), num_halo=int(nh),
        vid_o=take("<u8", P).astype(np.int64),
        vtype=take("u1", P).astype(np.uint8),
        owner=take("<u4", P).astype(np.int64),
        indptr=take("<u8", P + 1).astype(np.int64),
        indices=take("<u8", E).astype(np.int64),
        features=take("<f4", ns * F).reshape(ns, F).astype(np.float32),
        labels=take("<u4", ns).astype(np.int64),
        train_mask=take("u1", ns).astype(bool),
        test_mask=take("u1", ns).astype(bool),
    )


def partition_manifest(parts: list[Partition], g: CsrGraph | None = None, seed=None) -> dict:
    man = {
        "num_parts": len(parts),
        "seed": seed,
        "ranks": [
            {"rank": p.rank, "file": f"part{p.rank}.mgp", "num_solid": p.num_solid,
             "num_halo": p.num_halo, "num_train": int(p.train_mask.sum())}
            for p in parts
        ],
    }
    if g is not None:
        man["num_vertices"] = g.num_vertices
        man["cut_edges"] = cut_edge_count(g, assignment_of(parts))
    return man


def save_partitions(parts: list[Partition], out_dir, g: CsrGraph | None = None, seed=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for p in parts:
        save_partition(p, out / f"part{p.rank}.mgp")
    man = partition_manifest(parts, g, seed)
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return man


def load_partitions(out_dir) -> list[Partition]:
    out = Path(out_dir)
    man = json.loads((out / "manifest.json").read_text())
    return [load_partition(out / entry["file"]) for entry in man["ranks"]]
