"""Layered neighbor sampling over one partition.

A minibatch over ``n`` GNN layers holds ``n`` blocks. Block ``n-1`` has the
training seeds as destinations; block 0 is the input layer. Within a
block, source vertices are numbered densely (VID_b): destinations first,
then newly reached solid vertices, then halo vertices, each group in
ascending VID_p order. The destinations of block ``l`` are exactly the
solid sources of block ``l+1``; halo vertices have no local in-edges and
are never expanded.

Neighbor choice is uniform without replacement: every candidate edge gets
a counter-based hash keyed by (seed, epoch, batch, layer, destination,
neighbor) and each destination keeps its ``fanout`` smallest keys. The
result is independent of how destinations are split across workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from minigraph import rng
from minigraph.partition import HALO, SOLID, Partition
from minigraph.tensor import default_workers, parallel_map, split_range

_SHUFFLE_TAG = 0x5348


@dataclass(eq=False)
class Block:
    src_vid_p: np.ndarray   # VID_b -> VID_p
    num_dst: int
    num_solid: int
    edge_src: np.ndarray    # VID_b of each edge's source
    edge_dst: np.ndarray    # VID_b of each edge's destination, < num_dst

    @property
    def num_src(self) -> int:
        return int(self.src_vid_p.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.edge_src.shape[0])

    @property
    def dst_vid_p(self) -> np.ndarray:
        return self.src_vid_p[:self.num_dst]

    def in_degrees(self) -> np.ndarray:
        return np.bincount(self.edge_dst, minlength=self.num_dst)

    def without_sources(self, drop_mask: np.ndarray) -> "Block":
        """Same vertices, with every edge from a dropped source removed."""
        keep = ~drop_mask[self.edge_src]
        return Block(self.src_vid_p, self.num_dst, self.num_solid,
                     self.edge_src[keep], self.edge_dst[keep])


@dataclass(eq=False)
class Minibatch:
    blocks: list
    seeds: np.ndarray       # VID_p of the training seeds
    labels: np.ndarray

    @property
    def num_layers(self) -> int:
        return len(self.blocks)


def create_minibatches(p: Partition, batch_size: int, seed: int, epoch: int):
    """Shuffle local training vertices and chunk them into seed sets."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    tv = p.train_vertices
    order = rng.generator(seed, epoch, _SHUFFLE_TAG).permutation(len(tv))
    tv = tv[order]
    chunks = [tv[i:i + batch_size] for i in range(0, len(tv), batch_size)]
    return chunks, len(chunks)


def num_minibatches(p: Partition, batch_size: int) -> int:
    return -(-int(p.train_mask.sum()) // batch_size)


def _sample_chunk(p: Partition, dst: np.ndarray, fanout, layer_key: int):
    starts = p.indptr[dst]
    counts = p.indptr[dst + 1] - starts
    total = int(counts.sum())
    group = np.repeat(np.arange(len(dst), dtype=np.int64), counts)
    first = np.concatenate([[0], np.cumsum(counts)[:-1]]) if len(dst) else np.zeros(0, np.int64)
    offs = np.arange(total, dtype=np.int64) - np.repeat(first, counts)
    nbr = p.indices[np.repeat(starts, counts) + offs]
    if fanout is None or fanout < 0:
        return nbr, group
    dkey = rng.hash_counters(layer_key, dst)
    keys = rng.hash_counters(dkey[group], nbr)
    order = np.lexsort((keys, group))
    rank = np.arange(total, dtype=np.int64) - np.repeat(first, counts)
    keep = order[rank < fanout]
    return nbr[keep], group[keep]


def sample_layer(p: Partition, dst: np.ndarray, fanout, layer_key: int, workers=None):
    """Sample in-edges for each destination. Returns ``(src VID_p, dst index)``."""
    dst = np.asarray(dst, dtype=np.int64)
    workers = default_workers() if workers is None else workers
    chunks = split_range(len(dst), workers)
    parts = parallel_map(lambda ab: _sample_chunk(p, dst[ab[0]:ab[1]], fanout, layer_key), chunks, workers)
    src = np.concatenate([s for s, _ in parts])
    idx = np.concatenate([g + a for (_, g), (a, _) in zip(parts, chunks)])
    return src, idx


def sample_blocks(p: Partition, seeds, fanout, key=(0, 0, 0), workers=None) -> Minibatch:
    """Build the layered blocks for one seed set.

    ``fanout[l]`` caps the sampled in-edges per destination at layer ``l``
    (``None`` or a negative value keeps every neighbor). ``key`` is the
    (seed, epoch, batch index) triple that selects the random substreams.
    """
    seeds = np.asarray(seeds, dtype=np.int64)
    if len(seeds) and np.any(p.vtype[seeds] != SOLID):
        raise RuntimeError("minibatch seeds must be solid vertices")
    dst = seeds
    blocks = []
    for layer in reversed(range(len(fanout))):
        lkey = rng.derive_key(*key, layer)
        e_src, e_dst = sample_layer(p, dst, fanout[layer], lkey, workers)
        new = np.setdiff1d(e_src, dst)  # sorted: solids (< num_solid) before halos
        src_vid_p = np.concatenate([dst, new])
        sorter = np.argsort(src_vid_p, kind="stable")
        e_src_b = sorter[np.searchsorted(src_vid_p, e_src, sorter=sorter)]
        num_solid = len(dst) + int(np.count_nonzero(new < p.num_solid))
        blocks.append(Block(src_vid_p, len(dst), num_solid, e_src_b, e_dst))
        dst = src_vid_p[:num_solid]
    blocks.reverse()
    return Minibatch(blocks, seeds, p.labels[seeds])


def find_halo_nodes(block: Block, p: Partition) -> np.ndarray:
    """VID_b of the block's halo sources, found through the partition LUT."""
    return np.nonzero(p.vtype[block.src_vid_p] == HALO)[0]


def find_solid_nodes(block: Block, p: Partition) -> np.ndarray:
    return np.nonzero(p.vtype[block.src_vid_p] == SOLID)[0]


def full_block(p: Partition) -> Block:
    """Every solid vertex as a destination with all of its local in-edges."""
    dst = np.repeat(np.arange(p.num_local, dtype=np.int64), p.degrees())
    return Block(np.arange(p.num_local, dtype=np.int64), p.num_solid, p.num_solid,
                 p.indices.copy(), dst)
