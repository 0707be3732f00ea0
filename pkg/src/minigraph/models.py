"""GraphSAGE and GAT layers over sampled blocks, with hand-written backward.

A layer maps the source features of a block to its destination rows.
Because destinations are the leading sources of a block, a vertex's own
features are ``src_feats[:num_dst]``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from minigraph import rng
from minigraph.errors import ShapeError
from minigraph.tensor import (
    edge_softmax,
    edge_softmax_backward,
    fused_forward,
    fused_update_backward,
    leaky_relu,
    leaky_relu_backward,
    segment_sum,
)

_DROPOUT_TAG = 0xD120


def glorot(gen, fan_in, fan_out, shape=None, dtype=np.float64):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-a, a, shape or (fan_in, fan_out)).astype(dtype)


# -- aggregation -------------------------------------------------------------------


def mean_matrix(block) -> sp.csr_matrix:
    """Row-normalized adjacency ``(num_dst x num_src)``; empty rows stay zero."""
    deg = np.bincount(block.edge_dst, minlength=block.num_dst).astype(np.float64)
    w = 1.0 / deg[block.edge_dst] if block.num_edges else np.zeros(0)
    return sp.csr_matrix((w, (block.edge_dst, block.edge_src)), shape=(block.num_dst, block.num_src))


def agg_mean(block, src_feats):
    """Mean of sampled in-neighbor rows per destination (zero when none)."""
    if src_feats.shape[0] != block.num_src:
        raise ShapeError(f"need {block.num_src} source rows, got {src_feats.shape[0]}")
    return np.asarray(mean_matrix(block) @ src_feats)


def agg_mean_backward(block, grad, adj=None):
    adj = mean_matrix(block) if adj is None else adj
    return np.asarray(adj.T @ grad)


# -- GraphSAGE ---------------------------------------------------------------------


class SageLayer:
    """``h_v = Dropout(ReLU(W_n · mean(h_u) + W_s · h_v + b))``; the output
    layer drops ReLU and Dropout."""

    kind = "sage"

    def __init__(self, in_dim, out_dim, gen, final=False, dtype=np.float64):
        self.in_dim, self.out_dim, self.final = in_dim, out_dim, final
        self.params = {
            "W_n": glorot(gen, in_dim, out_dim, dtype=dtype),
            "W_s": glorot(gen, in_dim, out_dim, dtype=dtype),
            "b": np.zeros(out_dim, dtype=dtype),
        }

    def forward(self, block, src_feats, dropout_p=0.0, key=0):
        p = self.params
        adj = mean_matrix(block)
        agg = np.asarray(adj @ src_feats)
        x = np.hstack([agg, src_feats[:block.num_dst]])
        w = np.vstack([p["W_n"], p["W_s"]])
        out, upd = fused_forward(x, w, p["b"], dropout_p, key, activate=not self.final)
        return out, (block, adj, upd, src_feats.shape)

    def backward(self, grad_out, cache, workers=None):
        block, adj, upd, src_shape = cache
        gx, gw, gb = fused_update_backward(grad_out, upd, workers)
        C = self.in_dim
        grads = {"W_n": gw[:C], "W_s": gw[C:], "b": gb}
        g_src = np.zeros(src_shape, dtype=gx.dtype)
        g_src[:block.num_dst] += gx[:, C:]
        g_src += np.asarray(adj.T @ gx[:, :C])
        return grads, g_src


# -- GAT -----------------------------------------------------------------------------


class GatLayer:
    """Attention layer with bias and ReLU applied to the projections before
    the attention logits are formed.

    ``z_u = ReLU(W_u f_u + b)``, ``z_v = ReLU(W_v f_v + b)``,
    ``e = a_u·z_u + a_v·z_v`` per head, ``alpha = softmax_dst(LeakyReLU(e))``,
    ``h_v = sum_u alpha_uv z_u``. Heads are concatenated, or averaged on the
    output layer.
    """

    kind = "gat"

    def __init__(self, in_dim, head_dim, heads, gen, final=False, dtype=np.float64):
        self.in_dim, self.head_dim, self.heads, self.final = in_dim, head_dim, heads, final
        self.out_dim = head_dim if final else head_dim * heads
        HD = heads * head_dim
        self.params = {
            "W_u": glorot(gen, in_dim, HD, dtype=dtype),
            "W_v": glorot(gen, in_dim, HD, dtype=dtype),
            "b": np.zeros(HD, dtype=dtype),
            "a_u": glorot(gen, head_dim, 1, (heads, head_dim), dtype),
            "a_v": glorot(gen, head_dim, 1, (heads, head_dim), dtype),
        }

    def _attention_matrix(self, block, alpha, h):
        return sp.csr_matrix((alpha[:, h], (block.edge_dst, block.edge_src)),
                             shape=(block.num_dst, block.num_src))

    def forward(self, block, src_feats, dropout_p=0.0, key=0):
        p = self.params
        H, D, nd, ns = self.heads, self.head_dim, block.num_dst, block.num_src
        if src_feats.shape[0] != ns:
            raise ShapeError(f"need {ns} source rows, got {src_feats.shape[0]}")
        zu, cu = fused_forward(src_feats, p["W_u"], p["b"])
        zv, cv = fused_forward(src_feats[:nd], p["W_v"], p["b"])
        Zu = zu.reshape(ns, H, D)
        Zv = zv.reshape(nd, H, D)
        eu = np.einsum("shd,hd->sh", Zu, p["a_u"])
        ev = np.einsum("thd,hd->th", Zv, p["a_v"])
        logits = eu[block.edge_src] + ev[block.edge_dst]
        alpha = edge_softmax(leaky_relu(logits), block.edge_dst, nd)
        mats = [self._attention_matrix(block, alpha, h) for h in range(H)]
        out = np.empty((nd, H, D), dtype=zu.dtype)
        for h in range(H):
            out[:, h, :] = mats[h] @ Zu[:, h, :]
        res = out.mean(axis=1) if self.final else out.reshape(nd, H * D)
        return res, (block, cu, cv, Zu, Zv, logits, alpha, mats, src_feats.shape)

    def backward(self, grad_out, cache, workers=None):
        block, cu, cv, Zu, Zv, logits, alpha, mats, src_shape = cache
        p = self.params
        H, D, nd = self.heads, self.head_dim, block.num_dst
        if self.final:
            G = np.repeat(grad_out[:, None, :] / H, H, axis=1)
        else:
            G = grad_out.reshape(nd, H, D)
        d_alpha = np.einsum("ehd,ehd->eh", G[block.edge_dst], Zu[block.edge_src])
        dZu = np.empty_like(Zu)
        for h in range(H):
            dZu[:, h, :] = mats[h].T @ G[:, h, :]
        d_logit = leaky_relu_backward(edge_softmax_backward(d_alpha, alpha, block.edge_dst, nd), logits)
        d_eu = segment_sum(d_logit, block.edge_src, block.num_src)
        d_ev = segment_sum(d_logit, block.edge_dst, nd)
        dZu += d_eu[:, :, None] * p["a_u"][None]
        dZv = d_ev[:, :, None] * p["a_v"][None]
        grads = {
            "a_u": np.einsum("sh,shd->hd", d_eu, Zu),
            "a_v": np.einsum("th,thd->hd", d_ev, Zv),
        }
        gsu, gWu, gbu = fused_update_backward(dZu.reshape(len(Zu), H * D), cu, workers)
        gsv, gWv, gbv = fused_update_backward(dZv.reshape(nd, H * D), cv, workers)
        grads.update({"W_u": gWu, "W_v": gWv, "b": gbu + gbv})
        g_src = np.zeros(src_shape, dtype=gsu.dtype)
        g_src += gsu
        g_src[:nd] += gsv
        return grads, g_src


# -- loss ------------------------------------------------------------------------------


def loss_and_accuracy(logits, labels):
    """Mean softmax cross-entropy, its gradient, and top-1 accuracy."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits), 0.0
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logz - shifted[rows, labels]))
    grad = np.exp(shifted - logz[:, None])
    grad[rows, labels] -= 1.0
    grad /= n
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return loss, grad, acc


# -- full model ---------------------------------------------------------------------------


class GNN:
    """A stack of SAGE or GAT layers sharing one forward/backward driver."""

    def __init__(self, kind, in_dim, hidden, num_classes, num_layers, heads=4, seed=0, dtype=np.float64):
        if kind not in ("sage", "gat"):
            raise ValueError(f"unknown model {kind!r}")
        if kind == "gat" and hidden % heads:
            raise ValueError(f"hidden size {hidden} is not divisible by {heads} heads")
        self.kind = kind
        self.dtype = np.dtype(dtype)
        gen = rng.generator(seed, 0x1A17)
        self.layers = []
        dims = [in_dim] + [hidden] * (num_layers - 1) + [num_classes]
        for l in range(num_layers):
            final = l == num_layers - 1
            if kind == "sage":
                layer = SageLayer(dims[l], dims[l + 1], gen, final, dtype)
            else:
                head_dim = num_classes if final else hidden // heads
                layer = GatLayer(dims[l], head_dim, heads, gen, final, dtype)
            self.layers.append(layer)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def layer_dims(self) -> list:
        """Input width of each layer, i.e. the width of that layer's cache lines."""
        return [layer.in_dim for layer in self.layers]

    def named_params(self):
        for l, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield f"{l}.{name}", layer.params[name]

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p in self.named_params()])

    def flatten_grads(self, grads: dict) -> np.ndarray:
        return np.concatenate([grads[name].ravel() for name, _ in self.named_params()])

    def unflatten(self, flat: np.ndarray) -> dict:
        out, off = {}, 0
        for name, p in self.named_params():
            out[name] = flat[off:off + p.size].reshape(p.shape)
            off += p.size
        return out

    def forward(self, blocks, x, dropout_p=0.0, key=None, inject=None):
        """Run every layer. ``inject(l, h)`` may overwrite rows of layer ``l``'s
        input in place (used for cached halo embeddings).

        Returns ``(logits, caches, inputs)`` where ``inputs[l]`` is the input
        matrix layer ``l`` consumed.
        """
        h = np.asarray(x, dtype=self.dtype)
        if inject is not None:
            inject(0, h)
        caches, inputs = [], [h]
        n = len(self.layers)
        for l, (layer, blk) in enumerate(zip(self.layers, blocks)):
            dkey = rng.derive_key(*(key or (0,)), l, _DROPOUT_TAG)
            out, cache = layer.forward(blk, h, dropout_p if key is not None else 0.0, dkey)
            caches.append(cache)
            if l + 1 < n:
                nxt = blocks[l + 1]
                h = np.zeros((nxt.num_src, out.shape[1]), dtype=out.dtype)
                h[:nxt.num_solid] = out
                if inject is not None:
                    inject(l + 1, h)
                inputs.append(h)
        return out, caches, inputs

    def backward(self, grad_logits, caches, blocks, workers=None) -> dict:
        grads = {}
        g = grad_logits
        for l in reversed(range(len(self.layers))):
            pg, g_src = self.layers[l].backward(g, caches[l], workers)
            for name, val in pg.items():
                grads[f"{l}.{name}"] = val
            if l > 0:
                # halo rows are constants; only solid sources carry gradient back
                g = g_src[:blocks[l].num_solid]
        return grads

    def apply_flat(self, flat):
        for (_, p), (_, new) in zip(self.named_params(), self.unflatten(flat).items()):
            p[...] = new


# -- checkpoints -------------------------------------------------------------------------


def save_params(model: GNN, path):
    """Write ``<path>.bin`` (little-endian f64, concatenated) and ``<path>.json``."""
    path = Path(path)
    entries, off = [], 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, p in model.named_params():
            fh.write(np.asarray(p, dtype="<f8").tobytes())
            entries.append({"name": name, "shape": list(p.shape), "offset": off})
            off += p.size
    path.with_suffix(".json").write_text(json.dumps({"kind": model.kind, "tensors": entries}, indent=1))


def load_params(model: GNN, path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    params = dict(model.named_params())
    for e in meta["tensors"]:
        p = params[e["name"]]
        if list(p.shape) != e["shape"]:
            raise ShapeError(f"{e['name']}: checkpoint shape {e['shape']} != model {list(p.shape)}")
        p[...] = flat[e["offset"]:e["offset"] + p.size].reshape(p.shape)
