"""Full-graph container, file formats, and synthetic datasets."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from minigraph.errors import ParseError

CSR_MAGIC = b"MGCSR1"


@dataclass(frozen=True, eq=False)
class CsrGraph:
    """Undirected graph stored as in-neighbor CSR.

    Edge ``u -> v`` lives in row ``v``: ``indices[indptr[v]:indptr[v+1]]``
    are the in-neighbors of ``v``, sorted ascending. Features are float32
    so the binary format round-trips exactly; kernels upcast as needed.
    """

    num_vertices: int
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray = field(default=None)
    labels: np.ndarray = field(default=None)
    train_mask: np.ndarray = field(default=None)
    test_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        V = self.num_vertices
        set_ = object.__setattr__
        set_(self, "indptr", np.ascontiguousarray(self.indptr, dtype=np.int64))
        set_(self, "indices", np.ascontiguousarray(self.indices, dtype=np.int64))
        if self.features is None:
            set_(self, "features", np.zeros((V, 0), dtype=np.float32))
        set_(self, "features", np.ascontiguousarray(self.features, dtype=np.float32))
        if self.labels is None:
            set_(self, "labels", np.zeros(V, dtype=np.int64))
        set_(self, "labels", np.asarray(self.labels, dtype=np.int64))
        for name in ("train_mask", "test_mask"):
            m = getattr(self, name)
            set_(self, name, np.zeros(V, dtype=bool) if m is None else np.asarray(m, dtype=bool))
        for arr in (self.indptr, self.indices, self.features, self.labels, self.train_mask, self.test_mask):
            arr.setflags(write=False)
        self.validate()

    @property
    def num_edges(self) -> int:
        return int(self.indices.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.num_vertices else 0

    def validate(self):
        V = self.num_vertices
        ip = self.indptr
        if ip.shape != (V + 1,) or ip[0] != 0:
            raise ValueError("indptr must have length V+1 and start at 0")
        if np.any(np.diff(ip) < 0):
            raise ValueError("indptr must be non-decreasing")
        if ip[-1] != self.indices.shape[0]:
            raise ValueError("indptr[V] must equal the edge count")
        if self.num_edges and (self.indices.min() < 0 or self.indices.max() >= V):
            raise ValueError("column index out of range")
        if self.features.shape[0] != V or self.labels.shape != (V,):
            raise ValueError("features/labels must have one row per vertex")
        if self.train_mask.shape != (V,) or self.test_mask.shape != (V,):
            raise ValueError("masks must have one entry per vertex")

    def _check(self, v):
        if not 0 <= v < self.num_vertices:
            raise IndexError(f"vertex {v} out of range [0, {self.num_vertices})")

    def degree(self, v: int) -> int:
        self._check(v)
        return int(self.indptr[v + 1] - self.indptr[v])

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def in_neighbors(self, v: int) -> np.ndarray:
        self._check(v)
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """All stored directed edges as ``(src, dst)`` arrays."""
        dst = np.repeat(np.arange(self.num_vertices, dtype=np.int64), self.degrees())
        return self.indices.copy(), dst

    def is_symmetric(self) -> bool:
        src, dst = self.edges()
        V = self.num_vertices
        fwd = np.sort(dst * V + src)
        rev = np.sort(src * V + dst)
        return bool(np.array_equal(fwd, rev))

    def equals(self, other: "CsrGraph") -> bool:
        return (
            self.num_vertices == other.num_vertices
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("indptr", "indices", "features", "labels", "train_mask", "test_mask")
            )
        )

    @classmethod
    def from_edges(cls, num_vertices, src, dst, **data) -> "CsrGraph":
        """Build from directed pairs; symmetrizes and drops duplicates."""
        V = int(num_vertices)
        src = np.asarray(src, dtype=np.int64).ravel()
        dst = np.asarray(dst, dtype=np.int64).ravel()
        if src.shape != dst.shape:
            raise ValueError("src and dst must have equal length")
        s = np.concatenate([src, dst])
        d = np.concatenate([dst, src])
        key = np.unique(d * V + s) if V else np.zeros(0, dtype=np.int64)
        d, s = np.divmod(key, V) if V else (key, key)
        indptr = np.zeros(V + 1, dtype=np.int64)
        np.cumsum(np.bincount(d, minlength=V), out=indptr[1:])
        return cls(V, indptr, s, **data)

    def symmetrized(self) -> "CsrGraph":
        src, dst = self.edges()
        return CsrGraph.from_edges(
            self.num_vertices, src, dst, features=self.features, labels=self.labels,
            train_mask=self.train_mask, test_mask=self.test_mask,
        )


# -- file formats -------------------------------------------------------------


def _read_edgelist(path):
    V = None
    pairs = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "V":
                if V is not None or pairs or len(parts) != 2:
                    raise ParseError("header 'V <n>' must appear once, before any edge", lineno)
                try:
                    V = int(parts[1])
                except ValueError:
                    raise ParseError(f"bad vertex count {parts[1]!r}", lineno) from None
                if V < 0:
                    raise ParseError("vertex count must be non-negative", lineno)
                continue
            if len(parts) != 2:
                raise ParseError(f"expected 'u v', got {line!r}", lineno)
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"non-integer vertex id in {line!r}", lineno) from None
            if u < 0 or v < 0:
                raise ParseError("vertex ids must be non-negative", lineno)
            if V is not None and (u >= V or v >= V):
                raise ParseError(f"vertex id out of range for V={V}", lineno)
            pairs.append((u, v))
    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    if V is None:
        V = int(arr.max()) + 1 if len(arr) else 0
    return CsrGraph.from_edges(V, arr[:, 0], arr[:, 1])


def save_edgelist(g: CsrGraph, path):
    src, dst = g.edges()
    keep = src <= dst
    with open(path, "w") as fh:
        fh.write(f"V {g.num_vertices}\n")
        for u, v in zip(src[keep], dst[keep]):
            fh.write(f"{u} {v}\n")


def save_graph(g: CsrGraph, path):
    """Write the binary CSR format (little-endian)."""
    V, E, F = g.num_vertices, g.num_edges, g.feature_dim
    with open(path, "wb") as fh:
        fh.write(CSR_MAGIC)
        fh.write(struct.pack("<QQQ", V, E, F))
        fh.write(g.indptr.astype("<u8").tobytes())
        fh.write(g.indices.astype("<u8").tobytes())
        fh.write(g.features.astype("<f4").tobytes())
        fh.write(g.labels.astype("<u4").tobytes())
        fh.write(g.train_mask.astype(np.uint8).tobytes())
        fh.write(g.test_mask.astype(np.uint8).tobytes())


def _read_csr(path):
    buf = Path(path).read_bytes()
    if buf[:6] != CSR_MAGIC:
        raise ParseError(f"{path}: not a binary CSR file (bad magic)")
    V, E, F = struct.unpack_from("<QQQ", buf, 6)
    off = 6 + 24

    def take(dtype, count):
        nonlocal off
        dt = np.dtype(dtype)
        end = off + dt.itemsize * count
        if end > len(buf):
            raise ParseError(f"{path}: truncated file")
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=off)
        off = end
        return arr

    indptr = take("<u8", V + 1).astype(np.int64)
    indices = take("<u8", E).astype(np.int64)
    feats = take("<f4", V * F).reshape(V, F).astype(np.float32)
    labels = take("<u4", V).astype(np.int64)
    train = take("u1", V).astype(bool)
    test = take("u1", V).astype(bool)
    try:
        return CsrGraph(V, indptr, indices, feats, labels, train, test)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None


def load_graph(path, format=None) -> CsrGraph:
    """Load an edge-list text file or a binary CSR file.

    ``format`` is ``"edgelist"`` or ``"csr"``; by default it is sniffed from
    the file's leading bytes.
    """
    if format is None:
        with open(path, "rb") as fh:
            format = "csr" if fh.read(6) == CSR_MAGIC else "edgelist"
    if format == "csr":
        return _read_csr(path)
    if format == "edgelist":
        return _read_edgelist(path)
    raise ValueError(f"unknown graph format {format!r}")


# -- synthetic data -----------------------------------------------------------


def generate_sbm(blocks, per_block, p_in, p_out, feature_dim=16, seed=0,
                 noise=1.0, train_frac=0.8) -> CsrGraph:
    """Stochastic block model with block-dependent Gaussian features.

    Labels are block ids; a seeded permutation puts ``train_frac`` of the
    vertices in the training set and the rest in the test set.
    """
    for p in (p_in, p_out):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"edge probability {p} outside [0, 1]")
    rs = np.random.default_rng(seed)
    V = blocks * per_block
    src_parts, dst_parts = [], []
    base = np.arange(per_block, dtype=np.int64)
    for a in range(blocks):
        for b in range(a, blocks):
            draw = rs.random((per_block, per_block))
            if a == b:
                hit = np.triu(draw < p_in, k=1)
            else:
                hit = draw < p_out
            i, j = np.nonzero(hit)
            src_parts.append(base[i] + a * per_block)
            dst_parts.append(base[j] + b * per_block)
    src = np.concatenate(src_parts) if src_parts else np.zeros(0, np.int64)
    dst = np.concatenate(dst_parts) if dst_parts else np.zeros(0, np.int64)
    labels = np.repeat(np.arange(blocks, dtype=np.int64), per_block)
    means = rs.normal(0.0, 1.0, (blocks, feature_dim))
    feats = means[labels] + rs.normal(0.0, noise, (V, feature_dim))
    order = rs.permutation(V)
    n_train = int(round(train_frac * V))
    train = np.zeros(V, dtype=bool)
    train[order[:n_train]] = True
    return CsrGraph.from_edges(
        V, src, dst, features=feats.astype(np.float32), labels=labels,
        train_mask=train, test_mask=~train,
    )
