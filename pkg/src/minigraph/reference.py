"""Plain single-process minibatch trainer.

No partitions beyond the trivial one, no cache, no communication. It shares
the sampler, layers and optimizer with the distributed trainer, so at one
rank the two must produce the same losses bit for bit.
"""

from __future__ import annotations

import numpy as np

from minigraph.graph import CsrGraph
from minigraph.models import GNN, loss_and_accuracy
from minigraph.optim import Adam
from minigraph.partition import import_partition_assignment
from minigraph.sampler import create_minibatches, full_block, sample_blocks


def train_reference(g: CsrGraph, model="sage", fanout=(5, 10, 15), hidden=256, heads=4,
                    batch_size=1000, epochs=1, lr=0.003, dropout_p=0.5, seed=0,
                    workers=None, evaluate=False):
    """Returns ``(epoch mean losses, per-iteration losses, test accuracies, model)``."""
    (p,) = import_partition_assignment(g, np.zeros(g.num_vertices, dtype=np.int64), num_parts=1)
    num_classes = int(g.labels.max()) + 1
    net = GNN(model, g.features.shape[1], hidden, num_classes, len(fanout), heads, seed)
    opt = Adam(lr)
    epoch_losses, iter_losses, accs = [], [], []
    for epoch in range(epochs):
        seed_sets, _ = create_minibatches(p, batch_size, seed, epoch)
        total = 0.0
        for k, seeds in enumerate(seed_sets):
            mb = sample_blocks(p, seeds, fanout, (seed, epoch, k), workers)
            b0 = mb.blocks[0]
            x = np.zeros((b0.num_src, p.features.shape[1]))
            x[:b0.num_solid] = p.features[b0.src_vid_p[:b0.num_solid]]
            logits, caches, _ = net.forward(mb.blocks, x, dropout_p, (seed, epoch, k))
            loss, grad, _ = loss_and_accuracy(logits, mb.labels)
            grads = net.backward(grad, caches, mb.blocks, workers)
            opt.step(list(net.named_params()), grads)
            iter_losses.append(loss)
            total += loss
        epoch_losses.append(total / len(seed_sets) if seed_sets else 0.0)
        if evaluate:
            accs.append(reference_accuracy(net, p))
    return epoch_losses, iter_losses, accs, net


def reference_accuracy(net: GNN, p) -> float:
    blk = full_block(p)
    logits, _, _ = net.forward([blk] * net.num_layers, p.features.astype(np.float64))
    test = p.test_vertices
    if not len(test):
        return 0.0
    return float(np.mean(np.argmax(logits[test], axis=1) == p.labels[test]))
