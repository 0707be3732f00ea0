"""Dense kernels with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects (float64 unless a caller asks
for float32). The blocked layouts mirror the 4-D tiling used by fused
UPDATE kernels: ``in[N][C] -> in[nn][bn][nc][bc]`` and
``wt[C][K] -> wt[nk][nc][bc][bk]``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from minigraph import rng
from minigraph.errors import ShapeError

LEAKY_SLOPE = 0.01

_pool = None
_pool_size = 0


def default_workers() -> int:
    env = os.environ.get("MINIGRAPH_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, min(4, os.cpu_count() or 1))


def parallel_map(fn, items, workers=None):
    """Map ``fn`` over ``items`` on the shared pool, preserving order."""
    global _pool, _pool_size
    items = list(items)
    workers = default_workers() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    if _pool is None or _pool_size < workers:
        _pool = ThreadPoolExecutor(max_workers=workers)
        _pool_size = workers
    return list(_pool.map(fn, items))


def split_range(n: int, parts: int) -> list[tuple[int, int]]:
    """Split ``range(n)`` into at most ``parts`` contiguous, near-equal chunks."""
    parts = max(1, min(parts, n)) if n else 1
    bounds = np.linspace(0, n, parts + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


# -- blocked layouts ---------------------------------------------------------


@dataclass(frozen=True)
class BlockSizes:
    bn: int
    bc: int
    bk: int

    def resolve(self, c: int, k: int) -> "BlockSizes":
        # non-dividing feature blocks fall back to the full dimension
        bc = self.bc if c % self.bc == 0 else c
        bk = self.bk if k % self.bk == 0 else k
        return BlockSizes(self.bn, bc, bk)


def block_input(a: np.ndarray, bn: int, bc: int) -> np.ndarray:
    """``[N][C] -> [nn][bn][nc][bc]``; rows are zero-padded up to ``nn*bn``."""
    n, c = a.shape
    if c % bc:
        raise ShapeError(f"C={c} is not divisible by bc={bc}")
    nn = -(-n // bn)
    padded = np.zeros((nn * bn, c), dtype=a.dtype)
    padded[:n] = a
    return padded.reshape(nn, bn, c // bc, bc).copy()


def unblock_input(blocked: np.ndarray, n: int) -> np.ndarray:
    nn, bn, nc, bc = blocked.shape
    return blocked.reshape(nn * bn, nc * bc)[:n].copy()


def block_weight(w: np.ndarray, bc: int, bk: int) -> np.ndarray:
    """``[C][K] -> [nk][nc][bc][bk]``."""
    c, k = w.shape
    if c % bc or k % bk:
        raise ShapeError(f"weight {w.shape} not divisible by ({bc}, {bk})")
    return w.reshape(c // bc, bc, k // bk, bk).transpose(2, 0, 1, 3).copy()


def unblock_weight(blocked: np.ndarray) -> np.ndarray:
    nk, nc, bc, bk = blocked.shape
    return blocked.transpose(1, 2, 0, 3).reshape(nc * bc, nk * bk).copy()


def _check_mm(a, w):
    if a.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {w.shape}")
    if a.shape[1] != w.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {w.shape}")


def matmul(a: np.ndarray, w: np.ndarray, block: BlockSizes | None = None, workers=None) -> np.ndarray:
    """Dense ``a @ w``. With ``block`` set, iterate (bn x bc)·(bc x bk) tiles."""
    a = np.asarray(a)
    w = np.asarray(w)
    _check_mm(a, w)
    if block is None:
        return a @ w
    n, c = a.shape
    k = w.shape[1]
    bs = block.resolve(c, k)
    ain = block_input(a, bs.bn, bs.bc)
    wt = block_weight(w, bs.bc, bs.bk)
    nn, nc, nk = ain.shape[0], ain.shape[2], wt.shape[0]
    out = np.zeros((nn, bs.bn, nk, bs.bk), dtype=np.result_type(a, w))

    def row_block(i):
        for kk in range(nk):
            acc = out[i, :, kk, :]
            for cc in range(nc):
                acc += ain[i, :, cc, :] @ wt[kk, cc]

    parallel_map(row_block, range(nn), workers)
    return out.reshape(nn * bs.bn, nk * bs.bk)[:n]


# -- fused UPDATE: Dropout(ReLU(x @ w + b)) ----------------------------------


def dropout_scale(shape, p: float, key: int, dtype=np.float64) -> np.ndarray:
    """Per-element keep scale: 0 for dropped, ``1/(1-p)`` for kept."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    size = int(np.prod(shape))
    if p == 0.0:
        return np.ones(shape, dtype=dtype)
    u = rng.uniform(key, np.arange(size, dtype=np.uint64)).reshape(shape)
    return ((u >= p) * (1.0 / (1.0 - p))).astype(dtype)


@dataclass
class UpdateCache:
    x: np.ndarray
    w: np.ndarray
    pre_act: np.ndarray
    mask: np.ndarray
    activate: bool


def fused_update_forward(x, w, b, dropout_p=0.0, key=0, activate=True):
    """``Dropout(ReLU(x @ w + b))`` in one pass over the output tile.

    Returns ``(out, mask, pre_act)``. With ``activate=False`` the ReLU and
    dropout stages are skipped (output layer).
    """
    x = np.asarray(x)
    w = np.asarray(w)
    b = np.asarray(b)
    _check_mm(x, w)
    if b.shape[-1] != w.shape[1]:
        raise ShapeError(f"bias {b.shape} does not match output width {w.shape[1]}")
    pre = x @ w
    pre += b.reshape(-1)
    if not activate:
        return pre.copy(), np.ones_like(pre), pre
    mask = dropout_scale(pre.shape, dropout_p, key, pre.dtype)
    out = np.maximum(pre, 0.0)
    out *= mask
    return out, mask, pre


def fused_forward(x, w, b, dropout_p=0.0, key=0, activate=True):
    out, mask, pre = fused_update_forward(x, w, b, dropout_p, key, activate)
    return out, UpdateCache(np.asarray(x), np.asarray(w), pre, mask, activate)


def fused_update_backward(grad_out, saved: UpdateCache, workers=None):
    """Gradients of the fused UPDATE.

    The weight gradient is accumulated as one partial ``x_c.T @ g_c`` per
    worker over contiguous row chunks, summed in ascending worker order.
    """
    g = np.asarray(grad_out)
    if g.shape != saved.pre_act.shape:
        raise ShapeError(f"grad {g.shape} does not match output {saved.pre_act.shape}")
    if saved.activate:
        g = g * saved.mask
        g *= saved.pre_act > 0
    grad_x = g @ saved.w.T
    grad_b = g.sum(axis=0)
    workers = default_workers() if workers is None else workers
    chunks = split_range(g.shape[0], workers)
    partials = parallel_map(lambda ab: saved.x[ab[0]:ab[1]].T @ g[ab[0]:ab[1]], chunks, workers)
    grad_w = partials[0].copy()
    for part in partials[1:]:
        grad_w += part
    return grad_x, grad_w, grad_b


# -- elementwise and softmax family ------------------------------------------


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad, x):
    return grad * (x > 0)


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(grad, x, slope=LEAKY_SLOPE):
    return grad * np.where(x > 0, 1.0, slope)


def edge_softmax(logits, dst, num_dst):
    """Normalize per-edge logits over the in-edges of each destination.

    ``logits`` is ``(E,)`` or ``(E, H)``; ``dst`` gives each edge's
    destination index in ``range(num_dst)``.
    """
    logits = np.asarray(logits)
    if logits.dtype.kind != "f":
        logits = logits.astype(np.float64)
    dst = np.asarray(dst, dtype=np.int64)
    if logits.shape[0] != dst.shape[0]:
        raise ShapeError("one destination index per edge is required")
    if logits.shape[0] == 0:
        return np.zeros_like(logits)
    tail = logits.shape[1:]
    peak = np.full((num_dst,) + tail, -np.inf, dtype=logits.dtype)
    np.maximum.at(peak, dst, logits)
    ex = np.exp(logits - peak[dst])
    denom = np.zeros((num_dst,) + tail, dtype=logits.dtype)
    np.add.at(denom, dst, ex)
    return ex / denom[dst]


def edge_softmax_backward(grad_alpha, alpha, dst, num_dst):
    """``dL/dlogit_k = a_k (g_k - sum_{j in dst(k)} a_j g_j)``."""
    if alpha.shape[0] == 0:
        return np.zeros_like(alpha)
    dot = np.zeros((num_dst,) + alpha.shape[1:], dtype=alpha.dtype)
    np.add.at(dot, dst, alpha * grad_alpha)
    return alpha * (grad_alpha - dot[dst])


def segment_sum(values, index, num_segments):
    out = np.zeros((num_segments,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, index, values)
    return out
