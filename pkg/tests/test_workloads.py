import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from oramsim.errors import TraceParseError
from oramsim.workloads import (Frontend, TraceRecord, gen_rand, gen_stream, gen_zipf, generate, ingest,
                               parse_trace, reference_reads, write_trace)


def test_stream_example():
    assert gen_stream(3) == [TraceRecord("R", 0x0), TraceRecord("R", 0x40), TraceRecord("R", 0x80)]


def test_stream_wraps_in_space():
    assert [r.line for r in gen_stream(5, space_lines=3)] == [0, 1, 2, 0, 1]


@pytest.mark.parametrize("kind", ["rand", "zipf"])
def test_seeded_generators_are_deterministic(kind):
    assert generate(kind, 500, 7, 1024) == generate(kind, 500, 7, 1024)
    assert generate(kind, 500, 7, 1024) != generate(kind, 500, 8, 1024)


def test_rand_histogram_uniform():
    tr = gen_rand(1 << 16, 3, 256)
    _, p = stats.chisquare(np.bincount([r.line for r in tr], minlength=256))
    assert p > 0.01


def test_zipf_small_skew_is_near_uniform():
    tr = gen_zipf(1 << 16, 5, 256, skew=1e-6)
    _, p = stats.chisquare(np.bincount([r.line for r in tr], minlength=256))
    assert p > 0.01


def test_zipf_is_skewed():
    tr = gen_zipf(20000, 5, 4096, skew=0.99)
    counts = np.sort(np.bincount([r.line for r in tr], minlength=4096))[::-1]
    assert counts[:41].sum() > 0.3 * len(tr)


@pytest.mark.parametrize("skew", [0.0, -1.0])
def test_zipf_rejects_nonpositive_skew(skew):
    with pytest.raises(ValueError):
        gen_zipf(10, 1, 16, skew)


def test_parse_examples():
    assert parse_trace(["R 0x40\n"]) == [TraceRecord("R", 0x40)]
    assert parse_trace(["# comment\n", "\n", "W 0x80\n"]) == [TraceRecord("W", 0x80)]


def test_parse_error_carries_line_number():
    with pytest.raises(TraceParseError) as ei:
        parse_trace(["X 0x40"])
    assert ei.value.lineno == 1
    with pytest.raises(TraceParseError) as ei:
        parse_trace(["R 0x0", "# ok", "R zz"])
    assert ei.value.lineno == 3


def test_parse_rejects_address_outside_space():
    with pytest.raises(TraceParseError):
        parse_trace(["R 0x400"], space_lines=16)


def test_trace_file_round_trip(tmp_path):
    tr = [TraceRecord(r.op, r.address) for r in gen_rand(50, 1, 64)]
    path = tmp_path / "t.trace"
    write_trace(str(path), tr)
    assert ingest(str(path), 64) == tr


def drive(front, mem):
    """Serve every request immediately from a dict standing in for the ORAM."""
    width = front.group * front.lb
    while not front.exhausted():
        for req in front.next_requests():
            cur = mem.get(req.block, bytes(width))
            if req.op == "W":
                mem[req.block] = req.data
            if req.on_done is not None:
                req.on_done(cur)


def test_stream_group4_bypasses_three_quarters():
    tr = gen_stream(4000)
    f = Frontend(tr, group=4)
    drive(f, {})
    assert f.bypasses == 3000
    assert f.bypasses + f.demands == len(tr)


def test_rand_large_space_bypass_matches_collision_expectation():
    n, space, group = 4000, 1 << 20, 4
    tr = gen_rand(n, 9, space)
    f = Frontend(tr, group=group, capacity=4096)
    drive(f, {})
    g = space // group
    # record i hits when its group is among the distinct groups seen before it
    expect = sum(1 - (1 - 1 / g) ** i for i in range(n))
    assert abs(f.bypasses - expect) < 5 * math.sqrt(expect)
    assert f.bypasses / n < 0.02


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([1, 2, 4, 8]), st.sampled_from([2, 16, 4096]))
def test_frontend_results_match_flat_reference(seed, group, capacity):
    tr = gen_rand(600, seed, 128)
    f = Frontend(tr, group=group, capacity=capacity)
    drive(f, {})
    ref = reference_reads(tr)
    assert f.results == ref
    assert f.bypasses + f.demands == len(tr)
