"""Train GraphSAGE on a 4-block SBM with one rank and with four ranks.

Four in-process ranks each sample from their own partition, read remote
neighbors from the cache, and push boundary embeddings one iteration late.

Run: python demos/train_sbm.py
"""

from minigraph.graph import generate_sbm
from minigraph.trainer import TrainConfig, run_training

g = generate_sbm(blocks=4, per_block=500, p_in=0.05, p_out=0.002, feature_dim=16, noise=2.0, seed=0)

for ranks in (1, 4):
    cfg = TrainConfig(model="sage", hidden=64, batch_size=64, epochs=5, ranks=ranks, seed=0)
    res = run_training(g, cfg)
    print(f"R={ranks}, lr={cfg.learning_rate}")
    for m in res.epochs:
        hr = " ".join(f"{x:.2f}" for x in m.hit_rate)
        print(f"  epoch {m.epoch}: loss {m.train_loss:.3f}  acc {m.test_acc:.3f}  "
              f"hit rate per layer [{hr}]  pushed {m.comm_bytes / 1e6:.2f} MB")
