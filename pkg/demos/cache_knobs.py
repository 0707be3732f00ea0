"""How the push cap nc and the life-span ls trade traffic against hit rate.

Run: python demos/cache_knobs.py
"""

from minigraph.graph import generate_sbm
from minigraph.partition import partition
from minigraph.trainer import TrainConfig, run_training

g = generate_sbm(blocks=4, per_block=500, p_in=0.05, p_out=0.002, feature_dim=16, noise=2.0, seed=0)
parts = partition(g, 4, seed=0)

print(f"{'nc':>6} {'ls':>3} {'MB sent':>9} {'hit rate':>9} {'dropped':>8} {'acc':>6}")
for nc, ls in [(2000, 2), (200, 2), (50, 2), (0, 2), (2000, 0), (2000, 5)]:
    cfg = TrainConfig(model="sage", hidden=64, batch_size=64, epochs=4, ranks=4, nc=nc, ls=ls, seed=0)
    res = run_training(None, cfg, parts=parts, evaluate_each_epoch=False)
    dropped = sum(m.eliminated for m in res.epochs)
    print(f"{nc:>6} {ls:>3} {res.total_comm_bytes() / 1e6:>9.2f} {res.hit_rate():>9.3f} "
          f"{dropped:>8} {res.final_accuracy:>6.3f}")
