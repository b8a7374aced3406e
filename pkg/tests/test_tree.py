import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from oramsim.config import OramConfig, level_block_counts
from oramsim.errors import ProtocolViolation, StashOverflow
from oramsim.tree import (STASH, Hierarchy, PathTree, RingTree, Stash, bit_reverse, eviction_leaf,
                          path_nodes, uni_rand_leaf)


def ring(n=64, z=4, s=5, depth=3, seed=0, **kw):
    return RingTree(n, z, s, depth, random.Random(seed), **kw)


# -- geometry ---------------------------------------------------------------

@pytest.mark.parametrize("leaf,depth,expected", [(0, 2, [3, 1, 0]), (3, 2, [6, 2, 0]), (0, 0, [0])])
def test_path_nodes_examples(leaf, depth, expected):
    assert path_nodes(leaf, depth) == expected


def test_path_nodes_rejects_out_of_range_leaf():
    with pytest.raises(ValueError):
        path_nodes(4, 2)
    with pytest.raises(ValueError):
        path_nodes(-1, 2)


@given(st.integers(0, 12).flatmap(lambda d: st.tuples(st.just(d), st.integers(0, (1 << d) - 1))))
def test_path_length_and_parent_chain(dl):
    depth, leaf = dl
    p = path_nodes(leaf, depth)
    assert len(p) == depth + 1
    assert p[-1] == 0
    for child, parent in zip(p, p[1:]):
        assert (child - 1) // 2 == parent


def test_uni_rand_leaf_range_and_root_only():
    rng = random.Random(3)
    assert all(uni_rand_leaf(rng, 0) == 0 for _ in range(50))
    assert all(0 <= uni_rand_leaf(rng, 10) < 1024 for _ in range(1000))


def test_uni_rand_leaf_chi_squared():
    rng = random.Random(11)
    draws = np.array([uni_rand_leaf(rng, 10) for _ in range(1 << 16)])
    _, p = stats.chisquare(np.bincount(draws, minlength=1024))
    assert p > 0.01


def test_eviction_order_depth2_bit_reversed():
    # enumerating 2-bit reversal by hand: 00->00, 01->10, 10->01, 11->11
    assert [eviction_leaf(g, 2, "bitrev") for g in range(5)] == [0, 2, 1, 3, 0]
    assert [bit_reverse(g, 2) for g in range(4)] == [0, 2, 1, 3]


# -- bucket primitives ----------------------------------------------------------

def test_touch_block_real_offset_drops_valid_count():
    t = ring()
    pa = next(p for p in range(t.n_blocks) if t.loc[p] != STASH)
    node = t.loc[pa] // t.W
    before = sum(t.meta(node).valid)
    off = t.touch_block(node, pa)
    assert node * t.W + off == t.loc[pa]
    assert sum(t.meta(node).valid) == before - 1


def test_touch_block_dummies_distinct_then_error():
    t = ring(z=4, s=5)
    node = 0
    offs = [t.touch_block(node, -1) for _ in range(t.s)]
    assert len(set(offs)) == t.s
    with pytest.raises(ProtocolViolation):
        t.touch_block(node, -1)


def test_touch_conservation_property():
    t = ring(seed=4)
    rng = random.Random(5)
    for _ in range(200):
        node = rng.randrange(t.n_nodes)
        if t.accessed[node] < t.s:
            off = t.touch_block(node, rng.randrange(t.n_blocks))
            t.take(node * t.W + off)
        m = t.meta(node)
        assert sum(m.valid) + m.accessed == t.z + t.s
    t.check_invariants()


def _bucket_with_reals(t, k):
    """A node holding exactly k real blocks, made by resetting a leaf bucket."""
    node = t.n_nodes - 1
    t.reset_read(node)
    chosen = t._compatible(node, k) if k else []
    assert len(chosen) == k
    t._place(node, chosen)
    return node


@pytest.mark.parametrize("k,reals", [(3, 3), (0, 0), (4, 4)])
def test_reset_fetch_offsets_pads_to_z(k, reals):
    t = ring(n=64, z=4, s=5, depth=3, seed=1)
    # plenty of blocks mapped to the last leaf
    last = t.n_leaves - 1
    for pa in range(8):
        t.posmap[pa] = last
        g = t.loc[pa]
        if g != STASH:
            t.valid[g] = 0
            t.blk[g] = -1
            t.loc[pa] = STASH
            t.accessed[g // t.W] += 1
        t.stash.entries[pa] = None
    node = _bucket_with_reals(t, k)
    offs = t.reset_fetch_offsets(node)
    assert len(offs) == 4
    real_offs = [o for o in offs if t.blk[node * t.W + o] >= 0]
    assert len(real_offs) == reals


def test_write_bucket_moves_compatible_and_resets_counters():
    t = ring(n=64, z=4, s=5, depth=3, seed=2)
    node = t.n_nodes - 1
    t.reset_read(node)
    t.stash.entries.clear()
    leaf = t.n_leaves - 1
    for pa in (10, 11):
        t.posmap[pa] = leaf
        t.loc[pa] = STASH
        t.stash.entries[pa] = None
    moved = t.write_bucket(node)
    assert moved == 2
    m = t.meta(node)
    assert sorted(m.real_addrs) == [10, 11]
    assert m.accessed == 0
    assert sum(m.valid) == t.z + t.s


def test_root_accepts_every_stash_block():
    t = ring(n=64, z=4, s=5, depth=3, seed=2)
    t.reset_read(0)
    t.stash.entries.clear()
    for pa in (1, 2, 3):
        t.stash.entries[pa] = None
        t.posmap[pa] = pa % t.n_leaves
    assert t.write_bucket(0) == 3


def test_posmap_read_your_write():
    t = ring(seed=9)
    old, new = t.lookup_and_remap(5)
    again, _ = t.lookup_and_remap(5)
    assert again == new


def test_posmap_rejects_uncovered_address():
    with pytest.raises(ValueError):
        ring().lookup_and_remap(64)


def test_remap_leaves_chi_squared():
    t = ring(n=16, depth=8, seed=21)
    draws = np.array([t.lookup_and_remap(3)[1] for _ in range(1 << 14)])
    _, p = stats.chisquare(np.bincount(draws, minlength=256))
    assert p > 0.01


def test_evict_path_does_not_grow_stash():
    t = ring(n=64, z=4, s=5, depth=3, seed=6)
    for _ in range(20):
        before = len(t.stash)
        leaf = t.next_eviction_leaf()
        t.evict_path_read(leaf)
        t.evict_path_write(leaf)
        assert len(t.stash) <= before
    t.check_invariants()


# -- stash ------------------------------------------------------------------------

def test_stash_overflow_is_fatal():
    s = Stash(2, level=0)
    for pa in range(3):
        s.entries[pa] = None
    with pytest.raises(StashOverflow):
        s.observe()


def test_stash_nonfatal_tracks_max():
    s = Stash(2, level=0, fatal=False)
    for pa in range(5):
        s.entries[pa] = None
    s.observe()
    assert s.max_seen == 5


# -- path tree ------------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16), st.integers(1, 4))
def test_path_tree_read_write_keeps_invariant(seed, group):
    t = PathTree(40, 4, 3, random.Random(seed), group=group)
    rng = random.Random(seed + 1)
    for _ in range(30):
        pa = rng.randrange(40)
        leaf, _ = t.lookup_and_remap(pa)
        reads = t.read_path(leaf)
        assert len(reads) == 4 * 4
        assert pa in t.stash.entries
        writes = t.write_path(leaf)
        assert len(writes) == 4 * 4
        t.check_invariants()


# -- hierarchy --------------------------------------------------------------------

def test_hierarchy_sizing():
    cfg = OramConfig(z=4, s=5, a=3, levels=3, posmap_entries_per_block=16)
    h = Hierarchy(1000, cfg, seed=0)
    assert h.counts == [1000, 63, 4]
    assert level_block_counts(1000, 3, 16) == [1000, 63, 4]
    for k in range(1, h.levels):
        assert h.counts[k] == -(-h.counts[k - 1] // 16)
    assert h.block_ids(999) == [999, 62, 3]


def test_layouts_are_disjoint_and_metadata_follows_slots():
    cfg = OramConfig(z=4, s=5, a=3)
    h = Hierarchy(500, cfg, seed=0)
    lays = h.layouts(treetop_levels=2)
    for a, b in zip(lays, lays[1:]):
        assert a.base + a.size == b.base
    for lay in lays:
        assert lay.meta_addr(0) == lay.slot_addr(lay.n_nodes * lay.slots_per_node)
        assert lay.cached_nodes == min(lay.n_nodes, 3)


def test_determinism_digest():
    def run():
        t = ring(seed=33)
        rng = random.Random(1)
        for _ in range(100):
            node = rng.randrange(t.n_nodes)
            if t.accessed[node] < t.s:
                t.touch_block(node, rng.randrange(t.n_blocks))
        return t.digest()
    assert run() == run()
