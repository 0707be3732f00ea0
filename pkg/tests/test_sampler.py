import numpy as np
import pytest

from minigraph import rng
from minigraph.graph import CsrGraph, generate_sbm
from minigraph.partition import import_partition_assignment, partition
from minigraph.sampler import (
    create_minibatches,
    find_halo_nodes,
    find_solid_nodes,
    full_block,
    sample_blocks,
)


def star(n_leaves):
    g = CsrGraph.from_edges(n_leaves + 1, np.arange(1, n_leaves + 1), np.zeros(n_leaves, dtype=int))
    return import_partition_assignment(g, np.zeros(g.num_vertices, dtype=int))[0]


def reference_sample(p, seeds, fanout, key):
    """Sequential sampler: one destination and one neighbor at a time."""
    dst = [int(s) for s in seeds]
    layers = []
    for layer in reversed(range(len(fanout))):
        lkey = rng.derive_key(*key, layer)
        edges = []
        for i, v in enumerate(dst):
            nbrs = [int(u) for u in p.indices[p.indptr[v]:p.indptr[v + 1]]]
            cap = fanout[layer]
            if cap is not None and cap >= 0:
                dkey = rng.hash_counter_scalar(lkey, v)
                nbrs = sorted(nbrs, key=lambda u: rng.hash_counter_scalar(dkey, u))[:cap]
            edges.extend((u, i) for u in nbrs)
        seen = set(dst)
        new = sorted({u for u, _ in edges if u not in seen})
        src = dst + new
        where = {v: b for b, v in enumerate(src)}
        layers.append((src, sorted((where[u], i) for u, i in edges)))
        dst = [v for v in src if v < p.num_solid]
    return layers[::-1]


def block_edges(b):
    return sorted(zip(b.edge_src.tolist(), b.edge_dst.tolist()))


def test_star_fanout_cap():
    p = star(5)
    mb = sample_blocks(p, [0], [2], key=(1, 0, 0))
    assert mb.blocks[0].num_edges == 2
    assert mb.blocks[0].num_dst == 1


def test_degree_below_fanout_takes_all():
    p = star(3)
    mb = sample_blocks(p, [0], [10])
    b = mb.blocks[0]
    assert sorted(b.src_vid_p[b.edge_src].tolist()) == [1, 2, 3]


def test_negative_fanout_takes_all():
    p = star(7)
    assert sample_blocks(p, [0], [-1]).blocks[0].num_edges == 7
    assert sample_blocks(p, [0], [None]).blocks[0].num_edges == 7


@pytest.fixture(scope="module")
def parted():
    g = generate_sbm(4, 60, 0.15, 0.02, seed=11)
    return g, partition(g, 3, seed=11)


def test_three_layers_against_sequential_reference(parted):
    _, parts = parted
    fanout = [5, 10, 15]
    for p in parts:
        chunks, _ = create_minibatches(p, 16, seed=3, epoch=1)
        for k, seeds in enumerate(chunks[:3]):
            key = (3, 1, k)
            mb = sample_blocks(p, seeds, fanout, key=key, workers=3)
            ref = reference_sample(p, seeds, fanout, key)
            for b, (src, edges) in zip(mb.blocks, ref):
                assert b.src_vid_p.tolist() == src
                assert block_edges(b) == edges


def test_layer_invariants(parted):
    _, parts = parted
    fanout = [5, 10, 15]
    p = parts[0]
    seeds = p.train_vertices[:20]
    mb = sample_blocks(p, seeds, fanout, key=(0, 0, 0))
    assert mb.blocks[-1].dst_vid_p.tolist() == seeds.tolist()
    for layer, b in enumerate(mb.blocks):
        assert b.in_degrees().max() <= fanout[layer]
        pairs = list(zip(b.edge_src.tolist(), b.edge_dst.tolist()))
        assert len(pairs) == len(set(pairs))
        assert len(set(b.src_vid_p.tolist())) == b.num_src
        assert np.all(b.edge_dst < b.num_dst)
        # solids precede halos
        assert np.all(b.src_vid_p[:b.num_solid] < p.num_solid)
        assert np.all(b.src_vid_p[b.num_solid:] >= p.num_solid)
    for lo, hi in zip(mb.blocks[:-1], mb.blocks[1:]):
        assert lo.dst_vid_p.tolist() == hi.src_vid_p[:hi.num_solid].tolist()


def test_worker_count_invariant(parted):
    _, parts = parted
    p = parts[1]
    seeds = p.train_vertices[:30]
    a = sample_blocks(p, seeds, [5, 10, 15], key=(9, 2, 1), workers=1)
    b = sample_blocks(p, seeds, [5, 10, 15], key=(9, 2, 1), workers=4)
    for x, y in zip(a.blocks, b.blocks):
        np.testing.assert_array_equal(x.src_vid_p, y.src_vid_p)
        np.testing.assert_array_equal(x.edge_src, y.edge_src)
        np.testing.assert_array_equal(x.edge_dst, y.edge_dst)


def test_different_batch_keys_differ(parted):
    _, parts = parted
    p = parts[0]
    seeds = p.train_vertices[:30]
    a = sample_blocks(p, seeds, [2, 2], key=(0, 0, 0))
    b = sample_blocks(p, seeds, [2, 2], key=(0, 0, 1))
    assert block_edges(a.blocks[1]) != block_edges(b.blocks[1])


def test_halo_and_solid_sets_match_lut_walk(parted):
    _, parts = parted
    for p in parts:
        mb = sample_blocks(p, p.train_vertices[:25], [5, 10, 15], key=(1, 0, 0))
        for b in mb.blocks:
            halo = find_halo_nodes(b, p)
            solid = find_solid_nodes(b, p)
            oracle_h, oracle_s = [], []
            for vb, vp in enumerate(b.src_vid_p):
                vo = p.vid_o[vp]
                (oracle_s if p.owner[vp] == p.rank and p.to_local([vo])[0] == vp else oracle_h).append(vb)
            assert halo.tolist() == oracle_h
            assert solid.tolist() == oracle_s
            assert len(np.intersect1d(halo, solid)) == 0
            assert len(halo) + len(solid) == b.num_src


def test_exactly_three_known_halos():
    # path 0-1-2-3 with a fan: vertex 0 (rank 0) touches halos 4, 5, 6 on rank 1
    g = CsrGraph.from_edges(7, [0, 0, 0, 0], [1, 4, 5, 6])
    p = import_partition_assignment(g, [0, 0, 1, 1, 1, 1, 1])[0]
    mb = sample_blocks(p, [0], [10])
    b = mb.blocks[0]
    halo = find_halo_nodes(b, p)
    assert sorted(p.vid_o[b.src_vid_p[halo]].tolist()) == [4, 5, 6]


def test_single_rank_has_no_halos():
    g = generate_sbm(2, 20, 0.3, 0.05, seed=0)
    p = partition(g, 1)[0]
    mb = sample_blocks(p, p.train_vertices[:10], [3, 3])
    for b in mb.blocks:
        assert len(find_halo_nodes(b, p)) == 0
        assert len(find_solid_nodes(b, p)) == b.num_src


def test_halo_seed_rejected():
    g = CsrGraph.from_edges(2, [0], [1])
    p = import_partition_assignment(g, [0, 1])[0]
    with pytest.raises(RuntimeError):
        sample_blocks(p, [1], [2])


def fake_partition(n_train):
    g = CsrGraph.from_edges(n_train, [], [])
    g = CsrGraph(g.num_vertices, g.indptr, g.indices, np.zeros((n_train, 1), np.float32),
                 np.zeros(n_train, np.int64), np.ones(n_train, bool), np.zeros(n_train, bool))
    return import_partition_assignment(g, np.zeros(n_train, dtype=int))[0]


@pytest.mark.parametrize("n,sizes", [(10, [10]), (2500, [1000, 1000, 500]), (0, [])])
def test_minibatch_counts(n, sizes):
    chunks, M = create_minibatches(fake_partition(n), 1000, seed=0, epoch=0)
    assert M == len(sizes)
    assert [len(c) for c in chunks] == sizes
    if n:
        assert sorted(np.concatenate(chunks).tolist()) == list(range(n))


def test_minibatch_shuffle_deterministic():
    p = fake_partition(50)
    a, _ = create_minibatches(p, 7, seed=1, epoch=2)
    b, _ = create_minibatches(p, 7, seed=1, epoch=2)
    c, _ = create_minibatches(p, 7, seed=1, epoch=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_full_block_covers_every_edge():
    g = generate_sbm(2, 15, 0.3, 0.1, seed=2)
    parts = partition(g, 2)
    for p in parts:
        b = full_block(p)
        assert b.num_dst == p.num_solid
        assert b.num_edges == p.num_edges
