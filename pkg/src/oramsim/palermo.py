"""Concurrent RingORAM access rules.

Requests carry a dense global id.  Per hierarchy level, the tree-modifying
window of a request (position-map remap, early-reshuffle pre-check, read
offset selection and, for eviction requests, the eviction itself) runs in
global-id order, guarded by ``commit_head``.  Everything else, notably the
path reads and their returns, may overlap freely.

Each request at each level is a ``Ticket`` driven through these steps::

    lock -> reshuffle -> issue_rp -> [release] -> land           (gid % a != 0)
    lock -> reshuffle -> issue_rp -> land -> evict_read -> evict_write -> release

A scheduler (the mesh controller, the interleaving explorer or the lag
driver below) decides when each enabled step runs.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .baselines import READ, WRITE, Stage
from .config import OramConfig
from .errors import HazardError, OrderError, ProtocolViolation
from .tree import STASH, Hierarchy


@dataclass
class OramRequest:
    pa: int
    op: str = READ
    payload: bytes | None = None
    global_id: int = -1


@dataclass
class ConcurrencyState:
    commit_head: int = 0
    pending: set = field(default_factory=set)


@dataclass
class Ticket:
    gid: int
    level: int
    block: int
    op: str = READ
    data: bytes | None = None
    leaf: int = -1
    path: list = field(default_factory=list)
    fake: bool = False            # block was pending: a uniform leaf was read
    bypass: list = field(default_factory=list)    # nodes reset by the pre-check
    rp_slots: list = field(default_factory=list)
    rp_epochs: list = field(default_factory=list)
    captured: list = field(default_factory=list)  # (pa, payload) off the tree
    evict: bool = False
    evict_leaf: int = -1
    state: str = "new"
    result: bytes | None = None
    stages: list = field(default_factory=list)


class LevelEngine:
    """Protocol state of one tree under concurrent access."""

    def __init__(self, tree, a: int, width_bytes: int, release_at: str = "rp"):
        if release_at not in ("rp", "reshuffle", "manual"):
            raise ValueError(f"unknown release point {release_at!r}")
        self.tree = tree
        self.a = a
        self.width_bytes = width_bytes
        self.cs = ConcurrencyState(0, tree.pending)
        # "rp": the window closes once the path reads are issued (normal);
        # "manual": the scheduler releases (software-mutex style, whole request);
        # "reshuffle": closes before the reads are issued, which is unsafe and
        # only exists so tests can show the resulting hazard
        self.release_at = release_at
        self.unlanded: dict[int, list[Ticket]] = {}

    @property
    def commit_head(self) -> int:
        return self.cs.commit_head

    # -- tree-lock window ----------------------------------------------------
    def lock(self, tk: Ticket):
        t = self.tree
        if self.cs.commit_head != tk.gid:
            raise OrderError(f"level {t.level}: gid {tk.gid} entered before commit head {self.cs.commit_head}")
        b = tk.block
        if b in t.pending:
            tk.leaf = t.rand_leaf()
            tk.fake = True
            t.lookup_and_remap(b)
        else:
            tk.leaf, _ = t.lookup_and_remap(b)
        t.pending.add(b)
        t.hold[b] = t.hold.get(b, 0) + 1
        self.unlanded.setdefault(b, []).append(tk)
        tk.path = path = t.path(tk.leaf)
        tk.evict = tk.gid % self.a == 0
        W, s = t.W, t.s
        resets = []
        for n in path:
            if t.accessed[n] == s - 1:
                resets += t.reset_read(n)
                tk.bypass.append(n)
        tk.stages.append(Stage(t.level, "LM", meta_reads=list(path), gid=tk.gid))
        if tk.bypass:
            tk.stages.append(Stage(t.level, "ER", resets,
                                   [g for n in tk.bypass for g in range(n * W, n * W + W)], gid=tk.gid))
        bypass = set(tk.bypass)
        epoch = t.epoch
        for n in path:
            if n in bypass:
                continue
            tk.rp_slots.append(n * W + t.touch_block(n, b))
            tk.rp_epochs.append(epoch[n])
        tk.stages.append(Stage(t.level, "RP", list(tk.rp_slots), gid=tk.gid))
        tk.state = "locked"

    def reshuffle(self, tk: Ticket):
        """Write back the buckets reset by the pre-check."""
        t = self.tree
        for n in tk.bypass:
            t.write_bucket(n)
        t.stash.observe()
        tk.state = "reshuffled"
        if self.release_at == "reshuffle" and not tk.evict:
            self.release(tk)

    def issue_rp(self, tk: Ticket):
        """Send the path reads.  The slot contents are captured here; a reset of
        the node since selection would mean the read hits a rewritten bucket."""
        t = self.tree
        W = t.W
        blk, loc, epoch = t.blk, t.loc, t.epoch
        for g, ep in zip(tk.rp_slots, tk.rp_epochs):
            n = g // W
            if epoch[n] != ep or n in t.resetting:
                raise HazardError(f"level {t.level}: gid {tk.gid} reads node {n} inside its reset window")
            pa = blk[g]
            if pa >= 0 and loc[pa] == g:
                loc[pa] = STASH
                tk.captured.append((pa, t.payload.pop(g, None)))
                t.stash.inflight += 1
        tk.state = "issued"
        if self.release_at == "rp" and not tk.evict:
            self.release(tk)

    def release(self, tk: Ticket):
        if self.cs.commit_head != tk.gid:
            raise OrderError(f"level {self.tree.level}: gid {tk.gid} released out of order")
        self.cs.commit_head += 1

    # -- outside the window --------------------------------------------------
    def can_land(self, tk: Ticket) -> bool:
        if tk.state not in ("issued", "released"):
            return False
        return self.unlanded[tk.block][0] is tk

    def land(self, tk: Ticket):
        """Path data returned: stash the captured block and serve the request."""
        t = self.tree
        if not self.can_land(tk):
            raise HazardError(f"level {t.level}: gid {tk.gid} landed before an older request to the same block")
        entries = t.stash.entries
        for pa, pl in tk.captured:
            entries[pa] = pl
            t.stash.inflight -= 1
        b = tk.block
        if b not in entries:
            raise ProtocolViolation(f"level {t.level}: block {b} missing at land of gid {tk.gid}")
        out = entries[b]
        if out is None and t.level == 0:
            out = bytes(self.width_bytes)
        if tk.op == WRITE:
            entries[b] = tk.data
        tk.result = out
        h = t.hold[b] - 1
        if h:
            t.hold[b] = h
        else:
            del t.hold[b]
        q = self.unlanded[b]
        q.pop(0)
        if not q:
            del self.unlanded[b]
        t.stash.observe()
        tk.state = "landed"

    def evict_read(self, tk: Ticket):
        t = self.tree
        tk.evict_leaf = t.next_eviction_leaf()
        tk.stages.append(Stage(t.level, "EP", t.evict_path_read(tk.evict_leaf), gid=tk.gid))
        tk.state = "evicting"

    def evict_write(self, tk: Ticket):
        t = self.tree
        t.evict_path_write(tk.evict_leaf)
        W = t.W
        tk.stages[-1].writes = [g for n in t.path(tk.evict_leaf) for g in range(n * W, n * W + W)]
        t.stash.observe()
        tk.state = "evicted"
        if self.release_at != "manual":
            self.release(tk)


class PalermoOram:
    """Hierarchy of level engines plus request bookkeeping."""

    def __init__(self, n_blocks: int, cfg: OramConfig, seed: int = 0, fatal_overflow: bool = True,
                 release_at: str = "rp"):
        self.cfg = cfg
        self.n_blocks = n_blocks
        self.width_bytes = cfg.block_bytes * cfg.prefetch_len
        self.h = Hierarchy(n_blocks, cfg, seed, "ring", fatal_overflow=fatal_overflow)
        self.trees = self.h.trees
        self.engines = [LevelEngine(t, cfg.a, self.width_bytes, release_at) for t in self.trees]
        self.next_gid = 0

    def begin(self, pa: int, op: str = READ, data: bytes | None = None) -> list[Ticket]:
        """Assign the next global id and create one ticket per level (data first)."""
        if not 0 <= pa < self.n_blocks:
            raise ValueError(f"address {pa} outside protected space of {self.n_blocks} blocks")
        gid = self.next_gid
        self.next_gid += 1
        return [Ticket(gid, lvl, b, op if lvl == 0 else READ, data if lvl == 0 else None)
                for lvl, b in enumerate(self.h.block_ids(pa))]

    def run_window(self, tk: Ticket):
        """lock + reshuffle + issue_rp for one level."""
        e = self.engines[tk.level]
        e.lock(tk)
        e.reshuffle(tk)
        e.issue_rp(tk)

    def finish(self, tk: Ticket):
        e = self.engines[tk.level]
        e.land(tk)
        if tk.evict:
            e.evict_read(tk)
            e.evict_write(tk)

    def access(self, pa: int, op: str = READ, data: bytes | None = None):
        """One request with no overlap (levels top-down)."""
        tickets = self.begin(pa, op, data)
        for tk in reversed(tickets):
            self.run_window(tk)
            self.finish(tk)
        return tickets[0].result, [st for tk in reversed(tickets) for st in tk.stages]

    def stash_max(self) -> list[int]:
        return self.h.stash_max()


def run_lagged(oram: PalermoOram, requests, cols: int, on_result=None, on_progress=None):
    """Untimed driver with up to ``cols`` requests in flight per level.

    Each level keeps the ``cols - 1`` most recent tickets un-landed while the
    next one runs its window, the most stash pressure a mesh of ``cols``
    columns can produce.  Eviction requests land (with any older ticket to the
    same block) before evicting.  ``on_result(gid, payload)`` is called in
    land order for data-level tickets.
    """
    levels = len(oram.engines)
    queues = [deque() for _ in range(levels)]

    def land(e, q, tk):
        # forward older tickets to the same block first
        for old in list(e.unlanded.get(tk.block, ())):
            if old is tk:
                break
            q.remove(old)
            _land(e, old)
        _land(e, tk)

    def _land(e, tk):
        e.land(tk)
        if tk.level == 0 and on_result is not None:
            on_result(tk.gid, tk.result)

    for i, (pa, op, data) in enumerate(requests):
        for tk in reversed(oram.begin(pa, op, data)):
            e = oram.engines[tk.level]
            q = queues[tk.level]
            e.lock(tk)
            e.reshuffle(tk)
            e.issue_rp(tk)
            if tk.evict:
                land(e, q, tk)
                e.evict_read(tk)
                e.evict_write(tk)
            else:
                q.append(tk)
            while len(q) > cols - 1:
                land(e, q, q.popleft())
        if on_progress is not None:
            on_progress(i)
    for lvl in range(levels):
        e, q = oram.engines[lvl], queues[lvl]
        while q:
            land(e, q, q.popleft())


def dependency_edges(reqs, a: int, levels: int, ignore_sibling: bool = False):
    """Ordering constraints among in-flight requests.

    ``reqs`` is a list of global ids (consecutive, in issue order).  Edges are
    ``((gid, level, phase), (gid, level, phase))`` meaning the first must
    complete before the second may begin:

    * sibling: gid k-1's window (ER, or EP when k-1 is an eviction request)
      precedes gid k's LM on the same level;
    * parent-child: level l+1's RP precedes level l's LM of the same request;
    * own: a request's EP follows its own RP.
    """
    gids = sorted(reqs)
    edges = set()
    for lvl in range(levels):
        for k in gids:
            if not ignore_sibling and k - 1 in gids:
                ph = "EP" if (k - 1) % a == 0 else "ER"
                edges.add(((k - 1, lvl, ph), (k, lvl, "LM")))
            if lvl + 1 < levels:
                edges.add(((k, lvl + 1, "RP"), (k, lvl, "LM")))
            if k % a == 0:
                edges.add(((k, lvl, "RP"), (k, lvl, "EP")))
    return edges
