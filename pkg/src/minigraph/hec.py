"""Historical embedding cache (HEC) and the solid-to-halo database.

One :class:`Hec` per GNN layer holds embeddings of remote vertices, tagged
by original vertex id. Lines age by one per training iteration; a line
whose age exceeds the life-span ``ls`` is invisible to lookups and is the
first choice for replacement. When no expired or free line is left, the
oldest line is evicted (oldest-cache-line-first), larger tag first on ties.

A store is applied as one message: tags already resident are refreshed in
place first, then the remaining tags claim lines in arrival order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from minigraph.errors import ShapeError
from minigraph.partition import Partition

DEFAULT_CS = 1 << 14
DEFAULT_NC = 2000
DEFAULT_LS = 2

EMPTY = -1


@dataclass
class StoreReport:
    replaced_same_tag: int = 0
    replaced_expired: int = 0
    filled_new: int = 0
    evicted_oldest: int = 0

    def __iadd__(self, other):
        self.replaced_same_tag += other.replaced_same_tag
        self.replaced_expired += other.replaced_expired
        self.filled_new += other.filled_new
        self.evicted_oldest += other.evicted_oldest
        return self


@dataclass(frozen=True)
class Lookup:
    """Result of :meth:`Hec.search`: one slot per key, ``-1`` on a miss."""

    slots: np.ndarray
    version: int

    @property
    def hits(self) -> np.ndarray:
        return self.slots >= 0

    @property
    def num_hits(self) -> int:
        return int(np.count_nonzero(self.slots >= 0))


class StaleHandleError(RuntimeError):
    pass


class Hec:
    def __init__(self, capacity=DEFAULT_CS, dim=0, ls=DEFAULT_LS, nc=DEFAULT_NC, dtype=np.float64):
        if capacity < 0 or ls < 0 or nc < 0:
            raise ValueError("cache parameters must be non-negative")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.ls = int(ls)
        self.nc = int(nc)
        self.tags = np.full(self.capacity, EMPTY, dtype=np.int64)
        self.ages = np.zeros(self.capacity, dtype=np.int64)
        self.data = np.zeros((self.capacity, self.dim), dtype=dtype)
        self._slot_of: dict[int, int] = {}
        self.version = 0

    # -- state queries

    def _valid(self) -> np.ndarray:
        return (self.tags != EMPTY) & (self.ages <= self.ls)

    @property
    def occupancy(self) -> int:
        """Lines holding a visible (non-expired) embedding."""
        return int(np.count_nonzero(self._valid()))

    def resident(self) -> dict[int, int]:
        """Visible tags and their ages."""
        v = self._valid()
        return dict(zip(self.tags[v].tolist(), self.ages[v].tolist()))

    def dump(self) -> str:
        pairs = sorted(self.resident().items())
        return json.dumps([[t, a] for t, a in pairs])

    # -- HECSearch / HECLoad

    def search(self, keys) -> Lookup:
        keys = np.asarray(keys, dtype=np.int64).ravel()
        slots = np.fromiter((self._slot_of.get(k, EMPTY) for k in keys.tolist()),
                            dtype=np.int64, count=len(keys))
        found = slots >= 0
        if found.any():
            expired = self.ages[slots[found]] > self.ls
            idx = np.nonzero(found)[0]
            slots[idx[expired]] = EMPTY
        return Lookup(slots, self.version)

    def load(self, lookup: Lookup) -> np.ndarray:
        """Gather the rows of the hits, in key order."""
        if lookup.version != self.version:
            raise StaleHandleError("cache changed since the lookup was made")
        return self.data[lookup.slots[lookup.slots >= 0]].copy()

    # -- HECStore

    def store(self, tags, rows) -> StoreReport:
        tags = np.asarray(tags, dtype=np.int64).ravel()
        rows = np.asarray(rows)
        if rows.ndim != 2 or rows.shape[0] != len(tags) or rows.shape[1] != self.dim:
            raise ShapeError(f"expected {len(tags)} x {self.dim} rows, got {rows.shape}")
        report = StoreReport()
        if not len(tags):
            return report
        self.version += 1
        # repeated tag: keeps its first position, takes its last row
        _, first = np.unique(tags, return_index=True)
        _, first_rev = np.unique(tags[::-1], return_index=True)
        last = len(tags) - 1 - first_rev
        order = np.argsort(first, kind="stable")
        tags, rows = tags[first[order]], rows[last[order]]

        slots = np.fromiter((self._slot_of.get(t, EMPTY) for t in tags.tolist()),
                            dtype=np.int64, count=len(tags))
        present = slots >= 0
        if present.any():
            # a tag's own line is reused even when it has expired
            self.data[slots[present]] = rows[present]
            self.ages[slots[present]] = 0
            report.replaced_same_tag = int(present.sum())
        new_tags = tags[~present]
        new_rows = rows[~present]
        if not len(new_tags) or not self.capacity:
            return report
        touched = np.zeros(self.capacity, dtype=bool)
        touched[slots[present]] = True
        occupied = self.tags != EMPTY
        expired = occupied & (self.ages > self.ls) & ~touched
        live_old = occupied & ~expired & ~touched & (self.ages > 0)
        if len(new_tags) > expired.sum() + (~occupied).sum() + live_old.sum():
            for t, r in zip(new_tags.tolist(), new_rows):
                self._store_one(t, r, report)
            return report

        def by_age(mask):
            idx = np.nonzero(mask)[0]
            return idx[np.lexsort((-self.tags[idx], -self.ages[idx]))]

        exp_idx, free_idx, old_idx = by_age(expired), np.nonzero(~occupied)[0], by_age(live_old)
        cand = np.concatenate([exp_idx, free_idx, old_idx])[:len(new_tags)]
        n_exp = min(len(exp_idx), len(new_tags))
        n_free = min(len(free_idx), len(new_tags) - n_exp)
        report.replaced_expired += n_exp
        report.filled_new += n_free
        report.evicted_oldest += len(new_tags) - n_exp - n_free
        for s in cand.tolist():
            old = int(self.tags[s])
            if old != EMPTY:
                del self._slot_of[old]
        self.tags[cand] = new_tags
        self.ages[cand] = 0
        self.data[cand] = new_rows
        self._slot_of.update(zip(new_tags.tolist(), cand.tolist()))
        return report

    def _store_one(self, tag, row, report):
        occupied = self.tags != EMPTY
        expired = occupied & (self.ages > self.ls)
        if expired.any():
            idx = np.nonzero(expired)[0]
            s = idx[np.lexsort((-self.tags[idx], -self.ages[idx]))[0]]
            report.replaced_expired += 1
        elif not occupied.all():
            s = np.nonzero(~occupied)[0][0]
            report.filled_new += 1
        else:
            s = np.lexsort((-self.tags, -self.ages))[0]
            report.evicted_oldest += 1
        s = int(s)
        if self.tags[s] != EMPTY:
            del self._slot_of[int(self.tags[s])]
        self.tags[s] = tag
        self.ages[s] = 0
        self.data[s] = row
        self._slot_of[tag] = s

    def age_tick(self):
        """Advance every occupied line by one iteration."""
        self.ages[self.tags != EMPTY] += 1
        self.version += 1


# -- db_halo -------------------------------------------------------------------


class DbHalo(dict):
    """``rank -> sorted VID_o`` of local solids that are halo on that rank."""

    def total(self) -> int:
        return sum(len(v) for v in self.values())


def create_db(halo_lists, local: Partition) -> DbHalo:
    """Intersect every other rank's halo list with the local solid set."""
    solid = local.solid_vid_o()
    db = DbHalo()
    for r, lst in enumerate(halo_lists):
        if r == local.rank:
            continue
        lst = np.asarray(lst, dtype=np.int64)
        db[r] = np.intersect1d(lst, solid)
    return db


def map_solids(sv, db: DbHalo, vid_o_of_b) -> dict:
    """For each remote rank, the ``(VID_b, VID_o)`` of ``sv`` listed in its db entry.

    ``vid_o_of_b`` maps every VID_b of the layer to its VID_o. Output is
    ordered by ascending VID_o.
    """
    sv = np.asarray(sv, dtype=np.int64)
    tags = np.asarray(vid_o_of_b, dtype=np.int64)[sv]
    order = np.argsort(tags, kind="stable")
    sv, tags = sv[order], tags[order]
    out = {}
    for r, entries in db.items():
        m = np.isin(tags, entries, assume_unique=False)
        out[r] = (sv[m], tags[m])
    return out


def sample_by_degree(vid_b, vid_o, degrees, nc, gen: np.random.Generator):
    """Keep at most ``nc`` candidates, sampled without replacement with
    probability proportional to degree. Returns the kept ``(vid_b, vid_o)``
    in their original order."""
    vid_b = np.asarray(vid_b)
    vid_o = np.asarray(vid_o)
    n = len(vid_b)
    if n <= nc:
        return vid_b, vid_o
    if nc <= 0:
        return vid_b[:0], vid_o[:0]
    w = np.asarray(degrees, dtype=np.float64)
    if w.sum() <= 0:
        w = np.ones(n)
    elif np.count_nonzero(w) < nc:
        # numpy refuses to draw more non-zero-weight items than exist
        w = np.where(w > 0, w, w[w > 0].min() * 1e-9)
    pick = np.sort(gen.choice(n, size=nc, replace=False, p=w / w.sum()))
    return vid_b[pick], vid_o[pick]
