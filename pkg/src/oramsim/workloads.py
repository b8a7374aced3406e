"""LLC-miss trace generators, trace-file ingestion and the prefetch-group front end.

A trace is a list of ``TraceRecord``.  Addresses are byte addresses of 64-byte
cache lines.  Trace files hold one record per line::

    # comment
    R 0x40
    W 0x1f80
"""

from __future__ import annotations

import random
import re
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import TraceParseError

LINE = 64


@dataclass(frozen=True)
class TraceRecord:
    op: str
    address: int
    payload: bytes | None = None

    @property
    def line(self) -> int:
        return self.address // LINE


def _payload(rng: random.Random, size: int = LINE) -> bytes:
    return rng.getrandbits(size * 8).to_bytes(size, "little")


def gen_stream(n: int, space_lines: int | None = None, start: int = 0) -> list[TraceRecord]:
    """``n`` sequential line reads, wrapping modulo the protected space."""
    out = []
    for k in range(n):
        line = start + k
        if space_lines:
            line %= space_lines
        out.append(TraceRecord("R", line * LINE))
    return out


def gen_rand(n: int, seed: int, space_lines: int, write_frac: float = 0.5) -> list[TraceRecord]:
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        line = rng.randrange(space_lines)
        if rng.random() < write_frac:
            out.append(TraceRecord("W", line * LINE, _payload(rng)))
        else:
            out.append(TraceRecord("R", line * LINE))
    return out


def gen_zipf(n: int, seed: int, space_lines: int, skew: float = 0.99,
             write_frac: float = 0.5) -> list[TraceRecord]:
    """Key-value style trace: line ranks drawn from a bounded zipf law.

    Ranks are shuffled onto lines so hot keys are scattered over the space.
    """
    if skew <= 0:
        raise ValueError("zipf skew must be > 0")
    gen = np.random.default_rng(seed)
    weights = 1.0 / np.arange(1, space_lines + 1, dtype=float) ** skew
    weights /= weights.sum()
    ranks = gen.choice(space_lines, size=n, p=weights)
    perm = gen.permutation(space_lines)
    rng = random.Random(seed)
    out = []
    for r in ranks:
        line = int(perm[r])
        if rng.random() < write_frac:
            out.append(TraceRecord("W", line * LINE, _payload(rng)))
        else:
            out.append(TraceRecord("R", line * LINE))
    return out


def generate(kind: str, n: int, seed: int, space_lines: int, skew: float = 0.99) -> list[TraceRecord]:
    if kind == "stream":
        return gen_stream(n, space_lines)
    if kind == "rand":
        return gen_rand(n, seed, space_lines)
    if kind == "zipf":
        return gen_zipf(n, seed, space_lines, skew)
    raise ValueError(f"unknown workload {kind!r}")


_LINE_RE = re.compile(r"^([RW])\s+0x([0-9a-fA-F]+)\s*$")


def parse_trace(lines, space_lines: int | None = None) -> list[TraceRecord]:
    out = []
    for no, raw in enumerate(lines, 1):
        text = raw.rstrip("\n")
        if not text.strip() or text.lstrip().startswith("#"):
            continue
        m = _LINE_RE.match(text.strip())
        if not m:
            raise TraceParseError(no, text, "expected 'R|W 0x<hex address>'")
        addr = int(m.group(2), 16)
        if space_lines is not None and addr >= space_lines * LINE:
            raise TraceParseError(no, text, f"address beyond protected space of {space_lines * LINE} bytes")
        out.append(TraceRecord(m.group(1), addr))
    return out


def ingest(path: str, space_lines: int | None = None) -> list[TraceRecord]:
    with open(path) as f:
        return parse_trace(f, space_lines)


def write_trace(path: str, trace) -> None:
    with open(path, "w") as f:
        for r in trace:
            f.write(f"{r.op} {r.address:#x}\n")


@dataclass
class OramReq:
    """One request handed to an ORAM controller."""

    block: int
    op: str
    data: bytes | None
    on_done: object = None
    kind: str = "demand"       # demand | writeback | dummy
    t_arrive: int = -1


class Frontend:
    """Turns trace records into ORAM requests through a resident-group set.

    With ``group == 1`` every record becomes one request on block ``line``.
    Otherwise ``group`` consecutive lines form one ORAM block; a record whose
    group is resident (or already being fetched) bypasses the ORAM.  The
    resident set is LRU with write-allocate; evicting a dirty group emits a
    write-back request.  ``results`` collects, per trace index, the payload
    returned to reads.
    """

    def __init__(self, trace, group: int = 1, capacity: int = 4096, line_bytes: int = LINE,
                 record_results: bool = True):
        self.trace = trace
        self.group = group
        self.capacity = capacity
        self.lb = line_bytes
        self.pos = 0
        self.results: dict[int, bytes] | None = {} if record_results else None
        self.bypasses = 0
        self.demands = 0
        self.writebacks = 0
        # group -> [lines(list of bytes) or None while pending, dirty, waiters]
        self.llc: OrderedDict[int, list] = OrderedDict()

    def exhausted(self) -> bool:
        return self.pos >= len(self.trace)

    def _result(self, idx, value):
        if self.results is not None:
            self.results[idx] = value

    def next_requests(self) -> list[OramReq]:
        """Consume trace records until one needs the ORAM; returns its requests."""
        while self.pos < len(self.trace):
            reqs = self.step()
            if reqs:
                return reqs
        return []

    def step(self) -> list[OramReq]:
        """Consume one trace record; empty list when it bypassed the ORAM."""
        idx = self.pos
        rec = self.trace[idx]
        self.pos += 1
        line = rec.address // LINE
        if self.group == 1:
            self.demands += 1
            if rec.op == "W":
                return [OramReq(line, "W", rec.payload, self._write_done(idx))]
            return [OramReq(line, "R", None, self._read_done(idx))]
        g, off = divmod(line, self.group)
        ent = self.llc.get(g)
        if ent is not None:
            self.bypasses += 1
            self.llc.move_to_end(g)
            if ent[0] is None:
                ent[2].append((idx, rec, off))
            else:
                self._apply(ent, idx, rec, off)
            return []
        self.demands += 1
        reqs = []
        if len(self.llc) >= self.capacity:
            victim = next((k for k, v in self.llc.items() if v[0] is not None), None)
            if victim is not None:
                v = self.llc.pop(victim)
                if v[1]:
                    self.writebacks += 1
                    reqs.append(OramReq(victim, "W", b"".join(v[0]), None, "writeback"))
        ent = [None, False, [(idx, rec, off)]]
        self.llc[g] = ent
        reqs.append(OramReq(g, "R", None, self._fill(ent)))
        return reqs

    def _read_done(self, idx):
        return lambda payload: self._result(idx, payload)

    def _write_done(self, idx):
        return lambda payload: None

    def _fill(self, ent):
        def done(payload):
            lb = self.lb
            ent[0] = [payload[i * lb:(i + 1) * lb] for i in range(self.group)]
            waiters, ent[2] = ent[2], []
            for idx, rec, off in waiters:
                self._apply(ent, idx, rec, off)
        return done

    def _apply(self, ent, idx, rec, off):
        if rec.op == "W":
            ent[0][off] = rec.payload if rec.payload is not None else bytes(self.lb)
            ent[1] = True
        else:
            self._result(idx, ent[0][off])


def reference_reads(trace, line_bytes: int = LINE) -> dict[int, bytes]:
    """Flat-array oracle: payload each read should return, keyed by trace index."""
    mem: dict[int, bytes] = {}
    zero = bytes(line_bytes)
    out = {}
    for i, rec in enumerate(trace):
        line = rec.address // LINE
        if rec.op == "W":
            mem[line] = rec.payload if rec.payload is not None else zero
        else:
            out[i] = mem.get(line, zero)
    return out
