"""Tree geometry, bucket bookkeeping, stash, position maps and the recursive hierarchy.

Nodes use heap numbering (root 0, children of ``i`` at ``2i+1`` and ``2i+2``).
Bucket slots are stored flat: slot ``off`` of node ``n`` is global slot
``n * W + off`` where ``W`` is the bucket width.  A block's location is
tracked in ``loc`` (global slot, or ``STASH`` while it is on chip or in flight).
"""

from __future__ import annotations

import hashlib
import random
from bisect import bisect_right
from dataclasses import dataclass

from .config import OramConfig, depth_for, level_block_counts
from .errors import ProtocolViolation, StashOverflow

STASH = -1


def path_nodes(leaf: int, depth: int) -> list[int]:
    """Node ids on the path of ``leaf``, leaf first, root last."""
    if not 0 <= leaf < (1 << depth):
        raise ValueError(f"leaf {leaf} out of range for depth {depth}")
    n = leaf + (1 << depth) - 1
    out = [n]
    while n:
        n = (n - 1) >> 1
        out.append(n)
    return out


def node_depth(node: int) -> int:
    return (node + 1).bit_length() - 1


def uni_rand_leaf(rng: random.Random, depth: int) -> int:
    return rng.getrandbits(depth) if depth else 0


def bit_reverse(x: int, bits: int) -> int:
    r = 0
    for _ in range(bits):
        r = (r << 1) | (x & 1)
        x >>= 1
    return r


def eviction_leaf(count: int, depth: int, order: str = "bitrev") -> int:
    """The ``count``-th leaf of the deterministic eviction sequence."""
    k = count & ((1 << depth) - 1)
    return bit_reverse(k, depth) if order == "bitrev" else k


def dummy_filler(seed: int, slot: int, epoch: int, size: int) -> bytes:
    """Deterministic filler bytes standing in for an encrypted dummy."""
    h = hashlib.blake2b(f"{seed}:{slot}:{epoch}".encode(), digest_size=min(64, size))
    return (h.digest() * (size // len(h.digest()) + 1))[:size]


class Stash:
    """On-chip block buffer keyed by block id.

    Values are payload bytes, or None for a block that has never been written.
    ``inflight`` counts blocks already pulled off the tree whose data has not
    landed yet; they are charged against capacity.
    """

    def __init__(self, capacity: int, level: int = 0, fatal: bool = True):
        self.capacity = capacity
        self.level = level
        self.fatal = fatal
        self.entries: dict[int, bytes | None] = {}
        self.inflight = 0
        self.max_seen = 0
        self.interval_max = 0

    def __len__(self):
        return len(self.entries)

    def __contains__(self, pa):
        return pa in self.entries

    @property
    def tags(self) -> int:
        return len(self.entries) + self.inflight

    def observe(self) -> int:
        t = len(self.entries) + self.inflight
        if t > self.max_seen:
            self.max_seen = t
        if t > self.interval_max:
            self.interval_max = t
        if self.fatal and t > self.capacity:
            raise StashOverflow(self.level, t, self.capacity)
        return t


@dataclass
class NodeMetadata:
    """Snapshot of one bucket's on-chip bookkeeping."""

    node: int
    perm: list[int]          # physical offset -> block id, -1 for dummy
    valid: list[bool]
    accessed: int
    real_addrs: list[int]

    @property
    def popcount(self) -> int:
        return sum(self.valid)


class RingTree:
    """Bucket storage of one RingORAM-style tree with its stash and position map.

    Every block starts mapped to a uniform leaf and placed as deep as possible
    on its path, so runs begin from a full tree.
    """

    def __init__(self, n_blocks: int, z: int, s: int, depth: int, rng: random.Random,
                 stash_capacity: int = 256, level: int = 0, fatal_overflow: bool = True,
                 eviction_order: str = "bitrev"):
        self.n_blocks = n_blocks
        self.z = z
        self.s = s
        self.W = W = z + s
        self.depth = depth
        self.n_leaves = 1 << depth
        self.n_nodes = (1 << (depth + 1)) - 1
        self.level = level
        self.rng = rng
        self.eviction_order = eviction_order
        n_slots = self.n_nodes * W
        self.blk = [-1] * n_slots
        self.valid = bytearray(b"\x01") * n_slots
        self.dummy = bytearray(b"\x01") * n_slots
        self.accessed = [0] * self.n_nodes
        self.epoch = [0] * self.n_nodes
        self.loc = [STASH] * n_blocks
        self.posmap = [0] * n_blocks
        self.payload: dict[int, bytes] = {}
        self.stash = Stash(stash_capacity, level, fatal_overflow)
        # blocks that must stay on chip (an in-flight request still needs them)
        self.hold: dict[int, int] = {}
        # blocks off the tree: on chip or in flight (used by the concurrent protocol)
        self.pending: set[int] = set()
        self.resetting: set[int] = set()
        self.evictions = 0
        self._populate()

    # -- setup -------------------------------------------------------------
    def _populate(self):
        rng, z, W, L = self.rng, self.z, self.W, self.depth
        fill = [[] for _ in range(self.n_nodes)]
        first_leaf = self.n_leaves - 1
        for pa in range(self.n_blocks):
            leaf = rng.getrandbits(L) if L else 0
            self.posmap[pa] = leaf
            n = leaf + first_leaf
            while True:
                if len(fill[n]) < z:
                    fill[n].append(pa)
                    break
                if n == 0:
                    self.stash.entries[pa] = None
                    break
                n = (n - 1) >> 1
        for n, blocks in enumerate(fill):
            if blocks:
                self._layout(n, blocks)

    def _layout(self, node: int, blocks: list[int]):
        """Install a fresh random permutation holding ``blocks`` (already off the stash)."""
        W = self.W
        base = node * W
        self.blk[base:base + W] = [-1] * W
        self.valid[base:base + W] = b"\x01" * W
        self.dummy[base:base + W] = b"\x01" * W
        if blocks:
            pos = self.rng.sample(range(W), len(blocks))
            for pa, p in zip(blocks, pos):
                g = base + p
                self.blk[g] = pa
                self.dummy[g] = 0
                self.loc[pa] = g
        self.accessed[node] = 0
        self.epoch[node] += 1

    # -- geometry / maps ---------------------------------------------------
    def path(self, leaf: int) -> list[int]:
        n = leaf + self.n_leaves - 1
        out = [n]
        while n:
            n = (n - 1) >> 1
            out.append(n)
        return out

    def rand_leaf(self) -> int:
        return self.rng.getrandbits(self.depth) if self.depth else 0

    def leaf_of(self, pa: int) -> int:
        return self.posmap[pa]

    def lookup_and_remap(self, pa: int) -> tuple[int, int]:
        if not 0 <= pa < self.n_blocks:
            raise ValueError(f"block {pa} not covered by level {self.level}")
        old = self.posmap[pa]
        new = self.rng.getrandbits(self.depth) if self.depth else 0
        self.posmap[pa] = new
        return old, new

    def on_path(self, pa: int, node: int) -> bool:
        d = (node + 1).bit_length() - 1
        return ((self.posmap[pa] | self.n_leaves) >> (self.depth - d)) == node + 1

    def meta(self, node: int) -> NodeMetadata:
        W = self.W
        base = node * W
        perm = self.blk[base:base + W]
        valid = [bool(v) for v in self.valid[base:base + W]]
        reals = [b for b, v in zip(perm, valid) if v and b >= 0]
        return NodeMetadata(node, perm, valid, self.accessed[node], reals)

    # -- bucket primitives -------------------------------------------------
    def touch_block(self, node: int, want: int = -1) -> int:
        """Select and invalidate one slot of ``node``: the real slot of ``want`` if
        resident, otherwise an unused dummy.  Returns the slot offset."""
        W = self.W
        base = node * W
        g = self.loc[want] if want >= 0 else STASH
        if g >= base and g < base + W and self.valid[g]:
            pass
        else:
            g = self.dummy.find(1, base, base + W)
            if g < 0:
                raise ProtocolViolation(
                    f"level {self.level} node {node}: no valid dummy left "
                    f"(accessed={self.accessed[node]}, s={self.s}); bucket needed a reshuffle")
            self.dummy[g] = 0
        self.valid[g] = 0
        self.accessed[node] += 1
        return g - base

    def take(self, g: int) -> int:
        """Move the real block at global slot ``g`` off the tree; returns its id or -1."""
        pa = self.blk[g]
        if pa < 0 or self.loc[pa] != g:
            return -1
        self.loc[pa] = STASH
        self.stash.entries[pa] = self.payload.pop(g, None)
        return pa

    def reset_fetch_offsets(self, node: int) -> list[int]:
        """Offsets of still-valid real blocks, padded with unused dummies to exactly z."""
        W, z = self.W, self.z
        base = node * W
        blk, valid = self.blk, self.valid
        reals = [g - base for g in range(base, base + W) if valid[g] and blk[g] >= 0]
        out = reals[:z]
        if len(out) < z:
            dummy = self.dummy
            g = base
            while len(out) < z:
                g = dummy.find(1, g, base + W)
                if g < 0:
                    break
                out.append(g - base)
                g += 1
        return out

    def reset_read(self, node: int) -> list[int]:
        """First half of ResetBucket: pull the node's valid real blocks into the stash.
        Returns the global slots read (always z of them)."""
        W = self.W
        base = node * W
        offs = self.reset_fetch_offsets(node)
        for off in offs:
            g = base + off
            if self.blk[g] >= 0 and self.valid[g]:
                self.take(g)
            self.valid[g] = 0
            self.dummy[g] = 0
        self.resetting.add(node)
        return [base + off for off in offs]

    def _compatible(self, node: int, limit: int) -> list[int]:
        d = (node + 1).bit_length() - 1
        shift = self.depth - d
        target = node + 1
        nl = self.n_leaves
        posmap, hold = self.posmap, self.hold
        out = []
        for pa in self.stash.entries:
            if ((posmap[pa] | nl) >> shift) == target and pa not in hold:
                out.append(pa)
                if len(out) == limit:
                    break
        return out

    def write_bucket(self, node: int) -> int:
        """Second half of ResetBucket: refill ``node`` with up to z compatible stash
        blocks under a fresh permutation.  Returns the number of blocks moved."""
        chosen = self._compatible(node, self.z)
        self._place(node, chosen)
        return len(chosen)

    def _place(self, node: int, chosen: list[int]):
        entries, payload, pending = self.stash.entries, self.payload, self.pending
        base = node * self.W
        self._layout(node, chosen)
        for pa in chosen:
            pl = entries.pop(pa)
            if pl is not None:
                payload[self.loc[pa]] = pl
            pending.discard(pa)
        self.resetting.discard(node)

    def reset_bucket(self, node: int) -> tuple[list[int], int]:
        reads = self.reset_read(node)
        return reads, self.write_bucket(node)

    def evict_path_read(self, leaf: int) -> list[int]:
        reads = []
        for n in self.path(leaf):
            reads += self.reset_read(n)
        return reads

    def evict_path_write(self, leaf: int) -> int:
        """Greedy leaf-to-root refill of every node on ``leaf``'s path."""
        L, z = self.depth, self.z
        pools = [[] for _ in range(L + 1)]
        posmap, hold = self.posmap, self.hold
        for pa in self.stash.entries:
            if pa in hold:
                continue
            pools[L - (posmap[pa] ^ leaf).bit_length()].append(pa)
        carry: list[int] = []
        moved = 0
        for n in self.path(leaf):
            d = (n + 1).bit_length() - 1
            carry.extend(pools[d])
            take = carry[-z:] if len(carry) > z else carry
            carry = carry[:-z] if len(carry) > z else []
            self._place(n, take)
            moved += len(take)
        self.evictions += 1
        return moved

    def next_eviction_leaf(self) -> int:
        return eviction_leaf(self.evictions, self.depth, self.eviction_order)

    # -- checks ------------------------------------------------------------
    def check_invariants(self, inflight: set[int] | frozenset = frozenset()):
        """Full scan: path invariant, location index, touch conservation."""
        W, blk, valid = self.W, self.blk, self.valid
        for pa in range(self.n_blocks):
            g = self.loc[pa]
            if g == STASH:
                if pa not in self.stash.entries and pa not in inflight:
                    raise ProtocolViolation(f"level {self.level}: block {pa} lost")
                continue
            if blk[g] != pa or not valid[g]:
                raise ProtocolViolation(f"level {self.level}: block {pa} index points at stale slot")
            if not self.on_path(pa, g // W):
                raise ProtocolViolation(f"level {self.level}: block {pa} off its path")
        for n in range(self.n_nodes):
            if n in self.resetting:
                continue
            pop = sum(valid[n * W:(n + 1) * W])
            if pop + self.accessed[n] != W:
                raise ProtocolViolation(f"level {self.level}: node {n} touch conservation broken")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.blk, bytes(self.valid), self.accessed, self.posmap)).encode())
        h.update(repr(sorted(self.stash.entries.items())).encode())
        h.update(repr(sorted(self.payload.items())).encode())
        return h.hexdigest()


class PathTree:
    """PathORAM bucket storage: ``z`` slots per node, no dummies or metadata.

    ``group`` consecutive block ids share one position-map entry (PrORAM-style
    forced mapping); ``group=1`` is plain PathORAM.
    """

    def __init__(self, n_blocks: int, z: int, depth: int, rng: random.Random,
                 stash_capacity: int = 256, level: int = 0, fatal_overflow: bool = True,
                 group: int = 1):
        self.n_blocks = n_blocks
        self.z = z
        self.W = z
        self.depth = depth
        self.n_leaves = 1 << depth
        self.n_nodes = (1 << (depth + 1)) - 1
        self.level = level
        self.rng = rng
        self.group = group
        self.n_groups = -(-n_blocks // group)
        self.blk = [-1] * (self.n_nodes * z)
        self.loc = [STASH] * n_blocks
        self.posmap = [0] * self.n_groups
        self.payload: dict[int, bytes] = {}
        self.stash = Stash(stash_capacity, level, fatal_overflow)
        self._populate()

    def _populate(self):
        rng, z, L = self.rng, self.z, self.depth
        for gid in range(self.n_groups):
            self.posmap[gid] = rng.getrandbits(L) if L else 0
        count = [0] * self.n_nodes
        first_leaf = self.n_leaves - 1
        for pa in range(self.n_blocks):
            n = self.posmap[pa // self.group] + first_leaf
            while True:
                if count[n] < z:
                    g = n * z + count[n]
                    count[n] += 1
                    self.blk[g] = pa
                    self.loc[pa] = g
                    break
                if n == 0:
                    self.stash.entries[pa] = None
                    break
                n = (n - 1) >> 1

    def path(self, leaf: int) -> list[int]:
        n = leaf + self.n_leaves - 1
        out = [n]
        while n:
            n = (n - 1) >> 1
            out.append(n)
        return out

    def rand_leaf(self) -> int:
        return self.rng.getrandbits(self.depth) if self.depth else 0

    def leaf_of(self, pa: int) -> int:
        return self.posmap[pa // self.group]

    def lookup_and_remap(self, pa: int) -> tuple[int, int]:
        if not 0 <= pa < self.n_blocks:
            raise ValueError(f"block {pa} not covered by level {self.level}")
        gid = pa // self.group
        old = self.posmap[gid]
        self.posmap[gid] = self.rand_leaf()
        return old, self.posmap[gid]

    def read_path(self, leaf: int) -> list[int]:
        """Pull every slot of the path into the stash; returns global slots read."""
        z, blk, loc, entries, payload = self.z, self.blk, self.loc, self.stash.entries, self.payload
        reads = []
        for n in self.path(leaf):
            base = n * z
            for g in range(base, base + z):
                pa = blk[g]
                if pa >= 0:
                    loc[pa] = STASH
                    entries[pa] = payload.pop(g, None)
                    blk[g] = -1
                reads.append(g)
        return reads

    def write_path(self, leaf: int) -> list[int]:
        """Greedy leaf-to-root write-back from the stash; returns global slots written."""
        L, z = self.depth, self.z
        posmap, group = self.posmap, self.group
        entries, blk, loc, payload = self.stash.entries, self.blk, self.loc, self.payload
        keys = list(entries)
        gids = keys if group == 1 else map(group.__rfloordiv__, keys)
        # blocks stably sorted by how far above the leaf they leave the path,
        # so each node sees one contiguous slice of newly eligible blocks
        diverge = list(map(int.bit_length, map(leaf.__xor__, map(posmap.__getitem__, gids))))
        idx = sorted(range(len(keys)), key=diverge.__getitem__)
        ranks = list(map(diverge.__getitem__, idx))
        order = list(map(keys.__getitem__, idx))
        lo = 0
        left: list[int] = []          # eligible but not yet placed, newest last
        writes = []
        for n in self.path(leaf):
            d = (n + 1).bit_length() - 1
            hi = bisect_right(ranks, L - d, lo)
            new = order[lo:hi]
            lo = hi
            # the z most recently eligible blocks fill this node
            if len(new) >= z:
                take = new[len(new) - z:]
                left.extend(new[:len(new) - z])
            else:
                k = z - len(new)
                take = left[-k:] + new
                del left[-k:]
            base = n * z
            for i, pa in enumerate(take):
                g = base + i
                blk[g] = pa
                loc[pa] = g
                pl = entries.pop(pa)
                if pl is not None:
                    payload[g] = pl
            writes.extend(range(base, base + z))
        return writes

    def check_invariants(self):
        z = self.z
        for pa in range(self.n_blocks):
            g = self.loc[pa]
            if g == STASH:
                if pa not in self.stash.entries:
                    raise ProtocolViolation(f"level {self.level}: block {pa} lost")
                continue
            n = g // z
            d = (n + 1).bit_length() - 1
            if self.blk[g] != pa or ((self.leaf_of(pa) | self.n_leaves) >> (self.depth - d)) != n + 1:
                raise ProtocolViolation(f"level {self.level}: block {pa} off its path")


@dataclass(frozen=True)
class LevelLayout:
    """Where one tree lives in DRAM, in block-sized units.

    The slots of all nodes come first (node-major, each slot ``width`` blocks
    wide), followed by a table of one metadata block per node.
    """

    level: int
    base: int
    slots_per_node: int
    width: int           # DRAM blocks per tree block (prefetch widening)
    n_nodes: int
    meta_blocks: int     # 1 when nodes carry a metadata block, else 0
    cached_nodes: int    # nodes below this id are served by the tree-top cache

    @property
    def meta_base(self) -> int:
        return self.base + self.n_nodes * self.slots_per_node * self.width

    @property
    def size(self) -> int:
        return self.n_nodes * (self.slots_per_node * self.width + self.meta_blocks)

    def slot_addr(self, g: int) -> int:
        return self.base + g * self.width

    def meta_addr(self, node: int) -> int:
        return self.meta_base + node


class Hierarchy:
    """The data tree plus recursive position-map trees.

    Tree ``k`` holds ``ceil(n_{k-1} / fan_in)`` blocks; block ``b`` of tree
    ``k-1`` has its leaf stored in block ``b // fan_in`` of tree ``k``.  The last
    tree's position map is on chip.  Position-map block contents are kept in
    each tree's ``posmap`` array; the trees carry the blocks themselves.
    """

    def __init__(self, n_data_blocks: int, cfg: OramConfig, seed: int, kind: str = "ring",
                 z_path: int = 4, group: int = 1, fatal_overflow: bool = True,
                 data_stash_capacity: int | None = None):
        self.cfg = cfg
        self.kind = kind
        self.seed = seed
        self.fan_in = cfg.posmap_entries_per_block
        self.group = group
        # position maps cover address groups, so the first map tree indexes groups
        n_groups = -(-max(1, n_data_blocks) // group)
        self.counts = [max(1, n_data_blocks)] + level_block_counts(n_groups, cfg.levels, self.fan_in)[1:]
        self.trees = []
        for lvl, n in enumerate(self.counts):
            rng = random.Random((seed << 8) ^ (lvl * 0x9E3779B1) ^ 0x5EED)
            cap = cfg.stash_capacity if (lvl or data_stash_capacity is None) else data_stash_capacity
            if kind == "ring":
                depth = cfg.depth if (lvl == 0 and cfg.depth is not None) else depth_for(n, cfg.z)
                self.trees.append(RingTree(n, cfg.z, cfg.s, depth, rng, cap, lvl, fatal_overflow,
                                           cfg.eviction_order))
            else:
                depth = cfg.depth if (lvl == 0 and cfg.depth is not None) else depth_for(n, z_path)
                self.trees.append(PathTree(n, z_path, depth, rng, cap, lvl, fatal_overflow,
                                           group if lvl == 0 else 1))

    @property
    def levels(self) -> int:
        return len(self.trees)

    def block_ids(self, pa: int) -> list[int]:
        """Block id of ``pa`` (data-block units) at every level, data first."""
        out = [pa]
        pa //= self.group
        for _ in range(1, self.levels):
            pa //= self.fan_in
            out.append(pa)
        return out

    def layouts(self, treetop_levels: int = 0, data_width: int = 1) -> list[LevelLayout]:
        """DRAM placement of every tree, back to back."""
        out = []
        base = 0
        meta = 1 if self.kind == "ring" else 0
        for lvl, t in enumerate(self.trees):
            width = data_width if lvl == 0 else 1
            cached_nodes = min(t.n_nodes, (1 << treetop_levels) - 1)
            lay = LevelLayout(lvl, base, t.W, width, t.n_nodes, meta, cached_nodes)
            out.append(lay)
            base += lay.size
        return out

    def stash_max(self) -> list[int]:
        return [t.stash.max_seen for t in self.trees]
