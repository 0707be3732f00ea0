"""Shared oracles for the test suite."""

import numpy as np

EPS = 1e-6
REL_TOL = 1e-5


def numeric_grad(f, x, eps=EPS):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(analytic, numeric, floor=1e-4):
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries that are zero up to rounding from dominating.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def naive_matmul(a, w):
    n, c = a.shape
    k = w.shape[1]
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            s = 0.0
            for t in range(c):
                s += a[i, t] * w[t, j]
            out[i, j] = s
    return out


def cut_pairs(g, assignment):
    """Brute force: ``{rank: sorted halo VID_o}`` from every cut edge."""
    halos = {r: set() for r in range(int(max(assignment)) + 1)}
    for v in range(g.num_vertices):
        for u in g.in_neighbors(v):
            if assignment[u] != assignment[v]:
                halos[int(assignment[v])].add(int(u))
    return {r: sorted(s) for r, s in halos.items()}


def partition_mismatches(g, parts, assignment):
    """Compare partitions against brute-force expectations; return a list of problems."""
    problems = []
    halos = cut_pairs(g, assignment)
    edges = set()
    for v in range(g.num_vertices):
        for u in g.in_neighbors(v):
            edges.add((int(u), int(v)))
    seen = set()
    solid_count = np.zeros(g.num_vertices, dtype=int)
    for p in parts:
        solids = [int(x) for x in p.vid_o[:p.num_solid]]
        if solids != sorted(np.nonzero(np.asarray(assignment) == p.rank)[0].tolist()):
            problems.append(f"rank {p.rank}: solid set")
        for x in solids:
            solid_count[x] += 1
        if [int(x) for x in p.vid_o[p.num_solid:]] != halos.get(p.rank, []):
            problems.append(f"rank {p.rank}: halo set")
        for i in range(p.num_local):
            o = int(p.vid_o[i])
            if int(p.owner[i]) != int(assignment[o]):
                problems.append(f"rank {p.rank}: owner of {o}")
            if int(p.to_local([o])[0]) != i:
                problems.append(f"rank {p.rank}: lookup of {o}")
            for j in p.indices[p.indptr[i]:p.indptr[i + 1]]:
                seen.add((int(p.vid_o[j]), o))
        for i in range(p.num_solid, p.num_local):
            if p.indptr[i + 1] != p.indptr[i]:
                problems.append(f"rank {p.rank}: halo {int(p.vid_o[i])} has edges")
        for i in range(p.num_solid):
            o = int(p.vid_o[i])
            if not np.array_equal(p.features[i], g.features[o]):
                problems.append(f"rank {p.rank}: features of {o}")
    if seen != edges:
        problems.append(f"edge union differs ({len(seen ^ edges)} edges)")
    if np.any(solid_count != 1):
        problems.append("vertex not solid in exactly one partition")
    return problems


class RefHec:
    """Dictionary model of the embedding cache, one tag at a time."""

    def __init__(self, capacity, ls):
        self.capacity = capacity
        self.ls = ls
        self.lines = {}  # tag -> [age, row]

    def _victim(self, pool):
        return max(pool, key=lambda t: (self.lines[t][0], t))

    def store(self, tags, rows):
        report = [0, 0, 0, 0]
        final, order = {}, []
        for t, r in zip(tags, rows):
            t = int(t)
            if t not in final:
                order.append(t)
            final[t] = np.array(r, copy=True)
        if not order:
            return report
        fresh = []
        for t in order:
            if t in self.lines:
                self.lines[t] = [0, final[t]]
                report[0] += 1
            else:
                fresh.append(t)
        if self.capacity == 0:
            return report
        for t in fresh:
            expired = [u for u, (a, _) in self.lines.items() if a > self.ls]
            if expired:
                del self.lines[self._victim(expired)]
                report[1] += 1
            elif len(self.lines) < self.capacity:
                report[2] += 1
            else:
                del self.lines[self._victim(list(self.lines))]
                report[3] += 1
            self.lines[t] = [0, final[t]]
        return report

    def tick(self):
        for line in self.lines.values():
            line[0] += 1

    def search(self, keys):
        return [int(k) in self.lines and self.lines[int(k)][0] <= self.ls for k in keys]

    def load(self, keys):
        return [self.lines[int(k)][1] for k, h in zip(keys, self.search(keys)) if h]

    def resident(self):
        return {t: a for t, (a, _) in self.lines.items() if a <= self.ls}


def _drive_hec(h, ref, rs, ops, tag_range, dim):
    capacity = h.capacity
    for i in range(ops):
        op = rs.random()
        if op < 0.45:
            n = int(rs.integers(0, capacity + 3))
            tags = rs.integers(0, tag_range, size=n)
            rows = rs.normal(size=(n, dim))
            rep = h.store(tags, rows)
            want = ref.store(tags, rows)
            got = [rep.replaced_same_tag, rep.replaced_expired, rep.filled_new, rep.evicted_oldest]
            if got != want:
                return f"op {i}: store report {got} != {want}"
        elif op < 0.75:
            h.age_tick()
            ref.tick()
        else:
            keys = rs.integers(0, tag_range, size=int(rs.integers(0, 6)))
            look = h.search(keys)
            if look.hits.tolist() != ref.search(keys):
                return f"op {i}: search hits differ"
            got = h.load(look)
            want = ref.load(keys)
            if got.shape != (len(want), dim) or any(not np.array_equal(a, b) for a, b in zip(got, want)):
                return f"op {i}: loaded rows differ"
        if h.resident() != ref.resident():
            return f"op {i}: resident set {h.resident()} != {ref.resident()}"
        held = h.tags[h.tags != -1]
        if len(held) > capacity:
            return f"op {i}: occupancy above capacity"
        if len(np.unique(held)) != len(held):
            return f"op {i}: duplicate tag"
        if any(a > h.ls for a in h.resident().values()):
            return f"op {i}: visible line older than ls"
    return None


def hec_differential(ops, capacity, ls, seed, dim=2, tag_range=None):
    """Drive ``Hec`` and ``RefHec`` with one long random op stream; return the first mismatch or None."""
    from minigraph.hec import Hec

    rs = np.random.default_rng(seed)
    tag_range = tag_range or 3 * max(capacity, 1) + 2
    return _drive_hec(Hec(capacity, dim, ls=ls), RefHec(capacity, ls), rs, ops, tag_range, dim)


def hec_sequences(num_sequences, seed, max_capacity=8, max_len=20):
    """Many short random op sequences on fresh small caches. Returns ``(violations, ops run)``."""
    from minigraph.hec import Hec

    rs = np.random.default_rng(seed)
    bad, total = [], 0
    for s in range(num_sequences):
        capacity = int(rs.integers(1, max_capacity + 1))
        ls = int(rs.integers(0, 4))
        ops = int(rs.integers(1, max_len + 1))
        dim = int(rs.integers(1, 3))
        err = _drive_hec(Hec(capacity, dim, ls=ls), RefHec(capacity, ls), rs, ops, 3 * capacity + 2, dim)
        total += ops
        if err:
            bad.append(f"sequence {s} (cs={capacity}, ls={ls}): {err}")
    return bad, total


def random_block(rs, num_dst, num_src, num_edges, empty_dst=True):
    """A block with unique (src, dst) pairs; some destinations may get no edges."""
    from minigraph.sampler import Block

    pairs = set()
    while len(pairs) < num_edges:
        pairs.add((int(rs.integers(0, num_src)), int(rs.integers(0, num_dst))))
    if not empty_dst:
        for d in range(num_dst):
            if not any(p[1] == d for p in pairs):
                pairs.add((int(rs.integers(0, num_src)), d))
    pairs = sorted(pairs)
    rs.shuffle(pairs)
    src = np.array([p[0] for p in pairs], dtype=np.int64)
    dst = np.array([p[1] for p in pairs], dtype=np.int64)
    return Block(np.arange(num_src, dtype=np.int64), num_dst, num_src, src, dst)


def layer_gradcheck(layer, block, x, dropout_p=0.0, key=0, seed=0):
    """Largest relative error of every parameter and input gradient of ``layer``."""
    rs = np.random.default_rng(seed)
    out, _ = layer.forward(block, x, dropout_p, key)
    r = rs.normal(size=out.shape)

    def f():
        o, _ = layer.forward(block, x, dropout_p, key)
        return float(np.sum(o * r))

    _, cache = layer.forward(block, x, dropout_p, key)
    grads, gx = layer.backward(r, cache)
    errs = [rel_error(gx, numeric_grad(f, x))]
    for name, p in layer.params.items():
        errs.append(rel_error(grads[name], numeric_grad(f, p)))
    return max(errs)


def loss_gradcheck(seed):
    from minigraph.models import loss_and_accuracy

    rs = np.random.default_rng(seed)
    n, c = int(rs.integers(1, 8)), int(rs.integers(2, 6))
    logits = rs.normal(size=(n, c)) * 3
    labels = rs.integers(0, c, size=n)
    _, grad, _ = loss_and_accuracy(logits, labels)
    num = numeric_grad(lambda: loss_and_accuracy(logits, labels)[0], logits)
    return rel_error(grad, num)


def fused_gradcheck(seed):
    from minigraph.tensor import fused_forward, fused_update_backward, fused_update_forward

    rs = np.random.default_rng(seed)
    n, c, k = (int(v) for v in rs.integers(1, 7, size=3))
    x, w, b = rs.normal(size=(n, c)), rs.normal(size=(c, k)), rs.normal(size=k)
    p = float(rs.choice([0.0, 0.5]))
    activate = bool(rs.integers(0, 2))
    r = rs.normal(size=(n, k))

    def f():
        return float(np.sum(fused_update_forward(x, w, b, p, seed, activate)[0] * r))

    _, cache = fused_forward(x, w, b, p, seed, activate)
    gx, gw, gb = fused_update_backward(r, cache, workers=int(rs.integers(1, 4)))
    return max(rel_error(gx, numeric_grad(f, x)), rel_error(gw, numeric_grad(f, w)),
               rel_error(gb, numeric_grad(f, b)))


def model_layer_gradcheck(kind, seed, heads=1, final=None):
    from minigraph.models import GatLayer, SageLayer

    rs = np.random.default_rng(seed)
    nd = int(rs.integers(1, 5))
    ns = nd + int(rs.integers(0, 5))
    ne = int(rs.integers(1, min(nd * ns, 14) + 1))
    block = random_block(rs, nd, ns, ne)
    c = int(rs.integers(1, 5))
    x = rs.normal(size=(ns, c))
    final = bool(rs.integers(0, 2)) if final is None else final
    gen = np.random.default_rng(seed + 1)
    if kind == "sage":
        layer = SageLayer(c, int(rs.integers(1, 5)), gen, final=final)
        p = 0.0 if final else 0.5
    else:
        layer = GatLayer(c, int(rs.integers(1, 4)), heads, gen, final=final)
        p = 0.0
    for name in layer.params:
        if name == "b":
            layer.params[name] = rs.normal(size=layer.params[name].shape) * 0.5
    return layer_gradcheck(layer, block, x, p, key=seed, seed=seed)
