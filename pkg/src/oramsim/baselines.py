"""Serialized baseline protocols: RingORAM, PathORAM and PrORAM-style group prefetch.

Every access returns its payload together with the list of ``Stage`` records
it generated.  A stage is one dependency step of the command stream: the
controller issues its reads, waits for them, then issues its writes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import OramConfig
from .tree import Hierarchy

READ, WRITE = "R", "W"


@dataclass
class Stage:
    level: int
    phase: str                      # LM, RP, ER, EP, WB
    reads: list[int] = field(default_factory=list)        # global slots
    writes: list[int] = field(default_factory=list)       # global slots
    meta_reads: list[int] = field(default_factory=list)   # node ids
    gid: int = -1
    dummy: bool = False


def _zeros(n: int) -> bytes:
    return bytes(n)


class _Base:
    kind = "ring"

    def __init__(self, n_blocks: int, cfg: OramConfig, seed: int = 0, **hier_kw):
        self.cfg = cfg
        self.n_blocks = n_blocks
        self.width_bytes = cfg.block_bytes * cfg.prefetch_len
        self.h = Hierarchy(n_blocks, cfg, seed, self.kind, **hier_kw)
        self.trees = self.h.trees
        self.requests = 0
        self.dummy_requests = 0

    def _check_pa(self, pa: int):
        if not 0 <= pa < self.n_blocks:
            raise ValueError(f"address {pa} outside protected space of {self.n_blocks} blocks")

    def stash_tags(self) -> int:
        return self.trees[0].stash.tags

    def stash_max(self) -> list[int]:
        return self.h.stash_max()


class RingOram(_Base):
    """RingORAM with recursive position maps, one access at a time."""

    kind = "ring"

    def __init__(self, n_blocks: int, cfg: OramConfig, seed: int = 0, fatal_overflow: bool = True):
        super().__init__(n_blocks, cfg, seed, fatal_overflow=fatal_overflow)
        self.round = [0] * len(self.trees)

    def access(self, pa: int, op: str = READ, data: bytes | None = None):
        self._check_pa(pa)
        stages: list[Stage] = []
        result = None
        gid = self.requests
        for lvl, b in reversed(list(enumerate(self.h.block_ids(pa)))):
            out = self._level_access(lvl, b, op if lvl == 0 else READ, data, stages, gid)
            if lvl == 0:
                result = out
        self.requests += 1
        return result, stages

    def _level_access(self, lvl, b, op, data, stages, gid):
        t = self.trees[lvl]
        W = t.W
        leaf, _ = t.lookup_and_remap(b)
        path = t.path(leaf)
        stages.append(Stage(lvl, "LM", meta_reads=list(path), gid=gid))
        reads = []
        for n in path:
            g = n * W + t.touch_block(n, b)
            reads.append(g)
            t.take(g)
        stages.append(Stage(lvl, "RP", reads, gid=gid))
        entries = t.stash.entries
        out = entries[b]
        if out is None and lvl == 0:
            out = _zeros(self.width_bytes)
        if op == WRITE:
            entries[b] = data
        t.stash.observe()
        r = self.round[lvl]
        self.round[lvl] = r + 1
        if r % self.cfg.a == 0:
            stages.append(self.evict_path(lvl, gid))
        resets = self.early_reshuffle(lvl, leaf, gid)
        if resets:
            stages.append(resets)
        t.stash.observe()
        return out

    def evict_path(self, lvl: int, gid: int = -1) -> Stage:
        t = self.trees[lvl]
        leaf = t.next_eviction_leaf()
        reads = t.evict_path_read(leaf)
        t.evict_path_write(leaf)
        W = t.W
        writes = [g for n in t.path(leaf) for g in range(n * W, n * W + W)]
        return Stage(lvl, "EP", reads, writes, gid=gid)

    def early_reshuffle(self, lvl: int, leaf: int, gid: int = -1) -> Stage | None:
        t = self.trees[lvl]
        W, s = t.W, t.s
        reads, writes = [], []
        for n in t.path(leaf):
            if t.accessed[n] >= s:
                r, _ = t.reset_bucket(n)
                reads += r
                writes.extend(range(n * W, n * W + W))
        if not reads:
            return None
        return Stage(lvl, "ER", reads, writes, gid=gid)

    def reset_nodes(self, stage: Stage | None) -> list[int]:
        if stage is None:
            return []
        W = self.trees[stage.level].W
        return sorted({g // W for g in stage.writes})


class PathOram(_Base):
    """PathORAM: read the whole path, serve, write the same path back."""

    kind = "path"

    def __init__(self, n_blocks: int, cfg: OramConfig, seed: int = 0, z_path: int = 4,
                 fatal_overflow: bool = True, group: int = 1, data_stash_capacity: int | None = None):
        super().__init__(n_blocks, cfg, seed, z_path=z_path, group=group,
                         fatal_overflow=fatal_overflow, data_stash_capacity=data_stash_capacity)
        self.z_path = z_path
        self.group = group

    def access(self, pa: int, op: str = READ, data: bytes | None = None):
        self._check_pa(pa)
        stages: list[Stage] = []
        result = None
        gid = self.requests
        for lvl, b in reversed(list(enumerate(self.h.block_ids(pa)))):
            t = self.trees[lvl]
            leaf, _ = t.lookup_and_remap(b)
            stages.append(Stage(lvl, "RP", t.read_path(leaf), gid=gid))
            if lvl == 0:
                result = self._serve(t, pa, op, data)
            stages.append(Stage(lvl, "WB", writes=t.write_path(leaf), gid=gid))
            t.stash.observe()
        self.requests += 1
        return result, stages

    def _serve(self, t, pa, op, data):
        entries = t.stash.entries
        out = entries[pa]
        if out is None:
            out = _zeros(self.width_bytes)
        if op == WRITE:
            entries[pa] = data
        return out

    def dummy_access(self) -> list[Stage]:
        """A full hierarchical path read and write-back on uniformly random leaves."""
        stages = []
        gid = -1
        for lvl in reversed(range(len(self.trees))):
            t = self.trees[lvl]
            leaf = t.rand_leaf()
            stages.append(Stage(lvl, "RP", t.read_path(leaf), gid=gid, dummy=True))
            stages.append(Stage(lvl, "WB", writes=t.write_path(leaf), gid=gid, dummy=True))
        self.dummy_requests += 1
        return stages


class PrOram(PathOram):
    """PathORAM whose data-tree position map assigns one leaf per group of
    ``group_len`` consecutive blocks, with background eviction.

    A request names a group; the whole group is brought to the stash and its
    payload is the concatenation of the member blocks.  Whenever the data
    stash exceeds ``stash_threshold`` dummy accesses are injected until it
    drops back (bounded by ``max_dummies_per_request``).
    """

    def __init__(self, n_lines: int, cfg: OramConfig, seed: int = 0, group_len: int = 4,
                 stash_threshold: int = 1024, z_path: int = 4, max_dummies_per_request: int = 64):
        super().__init__(n_lines, cfg.with_(prefetch_len=1), seed, z_path=z_path,
                         fatal_overflow=False, group=group_len)
        self.group_len = group_len
        self.n_groups = -(-n_lines // group_len)
        self.stash_threshold = stash_threshold
        self.max_dummies = max_dummies_per_request
        self.line_bytes = cfg.block_bytes
        self.width_bytes = cfg.block_bytes * group_len

    def background(self) -> list[Stage]:
        stages = []
        stash = self.trees[0].stash
        k = 0
        while len(stash) > self.stash_threshold and k < self.max_dummies:
            stages += self.dummy_access()
            k += 1
        return stages

    def access(self, grp: int, op: str = READ, data: bytes | None = None):
        if not 0 <= grp < self.n_groups:
            raise ValueError(f"group {grp} outside protected space")
        stages = self.background()
        gid = self.requests
        first = grp * self.group_len
        result = None
        for lvl, b in reversed(list(enumerate(self.h.block_ids(first)))):
            t = self.trees[lvl]
            leaf, _ = t.lookup_and_remap(b)
            stages.append(Stage(lvl, "RP", t.read_path(leaf), gid=gid))
            if lvl == 0:
                result = self._serve_group(t, first, op, data)
            stages.append(Stage(lvl, "WB", writes=t.write_path(leaf), gid=gid))
            t.stash.observe()
        self.requests += 1
        return result, stages

    def _serve_group(self, t, first, op, data):
        entries, lb = t.stash.entries, self.line_bytes
        members = range(first, min(first + self.group_len, self.n_blocks))
        parts = []
        for i, pa in enumerate(members):
            v = entries[pa]
            parts.append(v if v is not None else _zeros(lb))
            if op == WRITE:
                entries[pa] = data[i * lb:(i + 1) * lb]
        out = b"".join(parts)
        return out + _zeros(self.width_bytes - len(out))

    @property
    def dummy_fraction(self) -> float:
        total = self.requests + self.dummy_requests
        return self.dummy_requests / total if total else 0.0
