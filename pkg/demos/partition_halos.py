"""Partition a small SBM and look at solids, halos, and who pushes what to whom.

Run: python demos/partition_halos.py
"""

import numpy as np

from minigraph.graph import generate_sbm
from minigraph.hec import create_db
from minigraph.partition import assignment_of, cut_edge_count, halo_vid_o, partition

g = generate_sbm(blocks=4, per_block=50, p_in=0.1, p_out=0.005, seed=1)
parts = partition(g, R=4, seed=1)
a = assignment_of(parts)
print(f"{g.num_vertices} vertices, {g.num_edges // 2} undirected edges, cut {cut_edge_count(g, a)}")

# how well the greedy partitioner recovered the planted blocks
for p in parts:
    planted = np.bincount(g.labels[p.solid_vid_o()], minlength=4)
    print(f"rank {p.rank}: {p.num_solid} solid ({int(p.train_mask.sum())} train), "
          f"{p.num_halo} halo, planted blocks {planted.tolist()}")

# the halo lists every rank broadcasts at start-up, and the resulting
# per-peer list of local solids whose embeddings each rank will push
lists = [halo_vid_o(p) for p in parts]
for p in parts:
    db = create_db(lists, p)
    print(f"rank {p.rank} pushes to:", {r: len(v) for r, v in db.items()})
