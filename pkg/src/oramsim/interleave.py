"""Exhaustive schedule enumeration for a handful of concurrent requests.

Every step of every ticket that the ordering rules allow is tried at every
point, depth first, on a deep copy of the protocol state.  Each complete
schedule is checked against a flat reference memory and the tree invariants;
hazards raised by the engine (a path read landing in a reset window, an
out-of-order commit) are collected as violations rather than propagated.

Prefixes that reach an identical state (same protocol state, ticket states
and selected slots) share every continuation, so each state is expanded
once.  ``schedules`` counts complete schedules through distinct states;
``states`` counts the states expanded.
"""

from __future__ import annotations

import hashlib
import pickle
from dataclasses import dataclass, field

from .baselines import WRITE
from .config import OramConfig
from .errors import OramError
from .palermo import PalermoOram


@dataclass
class ExploreResult:
    schedules: int = 0
    states: int = 0
    violations: list = field(default_factory=list)
    max_accessed: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations


def _enabled(oram: PalermoOram, tickets, levels):
    out = []
    for i, per_level in enumerate(tickets):
        for lvl, tk in enumerate(per_level):
            e = oram.engines[lvl]
            st = tk.state
            if st == "new":
                if e.commit_head != tk.gid:
                    continue
                if lvl + 1 < levels and per_level[lvl + 1].state not in ("landed", "evicting", "evicted"):
                    continue
                out.append((i, lvl, "lock"))
            elif st == "locked":
                out.append((i, lvl, "reshuffle"))
            elif st == "reshuffled":
                out.append((i, lvl, "issue_rp"))
            elif st == "issued":
                if e.can_land(tk):
                    out.append((i, lvl, "land"))
            elif st == "landed" and tk.evict:
                out.append((i, lvl, "evict_read"))
            elif st == "evicting":
                out.append((i, lvl, "evict_write"))
    return out


def _done(tickets) -> bool:
    for per_level in tickets:
        for tk in per_level:
            if tk.state not in ("landed", "evicted") or (tk.evict and tk.state != "evicted"):
                return False
    return True


def _state_key(oram: PalermoOram, tickets, selected) -> bytes:
    """Digest of everything that can influence the rest of a schedule.

    Containers whose order only reflects history (stash insertion order,
    sets) are sorted; statistics such as stash maxima are left out.
    """
    parts = []
    for t in oram.trees:
        parts.append((t.blk, bytes(t.valid), bytes(t.dummy), t.accessed, t.epoch, t.loc, t.posmap,
                      sorted(t.payload.items()), sorted(t.stash.entries.items(), key=lambda e: e[0]),
                      t.stash.inflight, sorted(t.hold.items()), sorted(t.pending), sorted(t.resetting),
                      t.evictions, t.rng.getstate()))
    for e in oram.engines:
        parts.append((e.commit_head, sorted((b, [tk.gid for tk in q]) for b, q in e.unlanded.items())))
    for per_level in tickets:
        for tk in per_level:
            parts.append((tk.state, tk.leaf, tk.fake, tk.bypass, tk.rp_slots, tk.rp_epochs,
                          sorted(tk.captured, key=lambda c: c[0]), tk.evict_leaf, tk.result))
    parts.append(sorted(selected))
    return hashlib.blake2b(pickle.dumps(parts, -1), digest_size=16).digest()


def explore(cfg: OramConfig, n_blocks: int, warmup, requests, seed: int = 0,
            release_at: str = "rp", max_schedules: int | None = None) -> ExploreResult:
    """Enumerate every legal interleaving of ``requests`` after a serial ``warmup``.

    ``warmup`` and ``requests`` are lists of ``(pa, op, data)``.
    """
    oram = PalermoOram(n_blocks, cfg, seed, fatal_overflow=True, release_at=release_at)
    ref: dict[int, bytes] = {}
    zero = bytes(oram.width_bytes)
    for pa, op, data in warmup:
        oram.access(pa, op, data)
        if op == WRITE:
            ref[pa] = data
    expected = []
    for pa, op, data in requests:
        expected.append(ref.get(pa, zero))
        if op == WRITE:
            ref[pa] = data
    tickets = [oram.begin(pa, op, data) for pa, op, data in requests]
    levels = len(oram.engines)
    s = cfg.s
    res = ExploreResult()
    seen: set[bytes] = set()

    def record(trace, why):
        res.violations.append((tuple(trace), why))

    def dfs(oram, tickets, selected, trace):
        if max_schedules is not None and res.schedules >= max_schedules:
            return
        key = _state_key(oram, tickets, selected)
        if key in seen:
            return
        seen.add(key)
        res.states += 1
        steps = _enabled(oram, tickets, levels)
        if not steps:
            if not _done(tickets):
                record(trace, "deadlock")
                return
            res.schedules += 1
            for i, want in enumerate(expected):
                if tickets[i][0].result != want:
                    record(trace, f"request {i} returned a stale value")
            try:
                for t in oram.trees:
                    t.check_invariants()
            except OramError as exc:
                record(trace, str(exc))
            return
        for step in steps:
            o2, t2, sel2 = pickle.loads(pickle.dumps((oram, tickets, selected), -1))
            i, lvl, name = step
            tk = t2[i][lvl]
            try:
                getattr(o2.engines[lvl], name)(tk)
            except OramError as exc:
                record(trace + [step], f"{type(exc).__name__}: {exc}")
                continue
            if name == "lock":
                tree = o2.trees[lvl]
                for g, ep in zip(tk.rp_slots, tk.rp_epochs):
                    key = (lvl, g, ep)
                    if key in sel2:
                        record(trace + [step], f"slot {g} selected twice in one bucket epoch")
                    sel2.add(key)
                for n in tk.path:
                    res.max_accessed = max(res.max_accessed, tree.accessed[n])
                    if tree.accessed[n] >= s:
                        record(trace + [step], f"node {n} reached {tree.accessed[n]} touches")
            dfs(o2, t2, sel2, trace + [step])

    dfs(oram, tickets, set(), [])
    return res
