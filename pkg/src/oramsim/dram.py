"""Cycle-approximate multi-channel DRAM with banks, row buffers and FR-FCFS.

Addresses are block indices (one block = ``block_bytes``).  Consecutive
blocks alternate channels; within a channel the local index splits into
row : bank : column, most significant first.

Per bank, commands are served one at a time: a row hit costs tCL, a miss
tCL + tRP + tRCD, after which the block occupies the channel data bus for
``burst`` cycles.  The command completes when its transfer ends.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .config import DramConfig
from .events import EventLoop

_NEVER = 1 << 62


class MemCommand:
    __slots__ = ("kind", "addr", "level", "phase", "gid", "cb", "channel", "bank", "row",
                 "t_enq", "t_issue", "t_done", "bypassed", "seq")

    def __init__(self, kind: str, addr: int, level: int = 0, phase: str = "", gid: int = -1, cb=None):
        self.kind = kind
        self.addr = addr
        self.level = level
        self.phase = phase
        self.gid = gid
        self.cb = cb
        self.t_enq = self.t_issue = self.t_done = -1
        self.bypassed = 0
        self.seq = -1

    @property
    def byte_address(self) -> int:
        return self.addr * 64

    def __repr__(self):
        return f"MemCommand({self.kind} {self.addr:#x} L{self.level} {self.phase} g{self.gid})"


@dataclass
class DramStats:
    reads: int = 0
    writes: int = 0
    row_hits: int = 0
    row_misses: int = 0
    busy_bytes: int = 0
    transfer_cycles: int = 0
    saturated_cycles: int = 0
    transfer_while_saturated: int = 0
    residency_cycles: int = 0     # sum over commands of (done - enqueue)
    read_residency_cycles: int = 0
    latency_cycles: int = 0       # sum over commands of (done - issue)
    queue_samples: int = 0
    queue_area: int = 0           # sum of queue depth sampled at every issue
    max_latency: int = 0
    busy_cycles: int = 0          # per channel, cycles with queued commands or a bus transfer, summed

    @property
    def completed(self) -> int:
        return self.row_hits + self.row_misses


class _Channel:
    __slots__ = ("idx", "rq", "wq", "rfront", "wfront", "open_row", "bank_free", "bus_free",
                 "wake", "addr_q", "sat_since", "draining", "acct", "booked")

    def __init__(self, idx: int, banks: int):
        self.idx = idx
        self.rq: list[MemCommand] = []
        self.wq: list[MemCommand] = []
        self.rfront: deque[MemCommand] = deque()
        self.wfront: deque[MemCommand] = deque()
        self.open_row = [-1] * banks
        self.bank_free = [0] * banks
        self.bus_free = 0
        self.wake = -1          # time of the pending scheduling decision, -1 if none
        self.addr_q: dict[int, deque] = {}   # block -> seqs of pending commands, oldest first
        self.sat_since = -1
        self.draining = False
        self.acct = 0           # busy time is accounted up to this cycle
        self.booked: deque[tuple[int, int]] = deque()   # bus transfers not yet accounted

    @property
    def queue(self) -> list[MemCommand]:
        return self.rq + self.wq


class Dram:
    """Per channel: a read queue and a write queue of ``queue_depth`` entries each.

    Reads go first (row hits before misses, then oldest).  Writes are served
    when no read can issue, or in a drain burst once the write queue reaches
    ``write_high`` of its depth, until it falls to ``write_low``.  A command that waits for an older one to
    the same block is never reordered past it.  A command bypassed
    ``age_cap`` times blocks younger commands of its queue until it issues.
    """

    def __init__(self, cfg: DramConfig, loop: EventLoop | None = None):
        self.cfg = cfg
        self.loop = loop if loop is not None else EventLoop()
        self.channels = [_Channel(i, cfg.banks_per_channel) for i in range(cfg.channels)]
        self.stats = DramStats()
        self.tCL, self.tRCD, self.tRP = cfg.tCL, cfg.tRCD, cfg.tRP
        self.tMiss = self.tCL + self.tRCD + self.tRP
        self.burst = cfg.burst
        self.bpr = cfg.blocks_per_row
        self.depth = cfg.queue_depth
        self.high = max(1, int(cfg.write_high * cfg.queue_depth))
        self.low = int(cfg.write_low * cfg.queue_depth)
        self.outstanding = 0
        self.enqueued = 0
        self.last_done = 0
        self._seq = 0

    # -- address map -------------------------------------------------------
    def map(self, addr: int) -> tuple[int, int, int]:
        c = self.cfg
        ch = addr % c.channels
        local = addr // c.channels
        bank = (local // self.bpr) % c.banks_per_channel
        row = local // (self.bpr * c.banks_per_channel)
        return ch, bank, row

    # -- admission -----------------------------------------------------------
    def _admit(self, cmd: MemCommand) -> _Channel:
        ch, bank, row = self.map(cmd.addr)
        cmd.channel, cmd.bank, cmd.row = ch, bank, row
        cmd.t_enq = self.loop.now
        cmd.seq = self._seq
        self._seq += 1
        self.outstanding += 1
        self.enqueued += 1
        chan = self.channels[ch]
        q = chan.addr_q.get(cmd.addr)
        if q is None:
            chan.addr_q[cmd.addr] = deque((cmd.seq,))
        else:
            q.append(cmd.seq)
        return chan

    def enqueue(self, cmd: MemCommand) -> bool:
        """Place ``cmd`` in its channel queue; False (back-pressure) when that queue is full."""
        ch = self.map(cmd.addr)[0]
        chan = self.channels[ch]
        if len(chan.rq if cmd.kind == "R" else chan.wq) >= self.depth:
            return False
        self._admit(cmd)
        self._push(chan, cmd)
        return True

    def submit(self, cmd: MemCommand):
        """Controller-side admission: waits in a per-channel buffer when the queue is full."""
        ch = self.map(cmd.addr)[0]
        chan = self.channels[ch]
        if cmd.kind == "R":
            full = len(chan.rq) >= self.depth or chan.rfront
        else:
            full = len(chan.wq) >= self.depth or chan.wfront
        self._admit(cmd)
        if full:
            (chan.rfront if cmd.kind == "R" else chan.wfront).append(cmd)
        else:
            self._push(chan, cmd)

    def _account(self, chan: _Channel, t: int):
        """Add the busy cycles of ``[chan.acct, t)``.  The queue state is constant
        over that span since it only changes at push and issue."""
        c = chan.acct
        if t <= c:
            return
        if chan.rq or chan.wq:
            busy = t - c
        else:
            busy = 0
            for s, e in chan.booked:
                if s >= t:
                    break
                lo = s if s > c else c
                hi = e if e < t else t
                if hi > lo:
                    busy += hi - lo
        booked = chan.booked
        while booked and booked[0][1] <= t:
            booked.popleft()
        self.stats.busy_cycles += busy
        chan.acct = t

    def _push(self, chan: _Channel, cmd: MemCommand):
        self._account(chan, self.loop.now)
        q = chan.rq if cmd.kind == "R" else chan.wq
        q.append(cmd)
        if len(q) >= self.depth and chan.sat_since < 0:
            chan.sat_since = self.loop.now
        if chan.wake < 0:
            now = self.loop.now
            chan.wake = now
            self.loop.at(now, self._decide_at, chan, now)

    # -- scheduling ----------------------------------------------------------
    def _ready_at(self, chan: _Channel, c: MemCommand) -> int:
        """Earliest cycle ``c`` may issue: its bank is free and its data would
        not reach the bus before the transfer in progress ends."""
        lat = self.tCL if chan.open_row[c.bank] == c.row else self.tMiss
        t = chan.bus_free - lat
        b = chan.bank_free[c.bank]
        return b if b > t else t

    def _scan(self, chan: _Channel, q: list, now: int):
        """FR-FCFS choice within one queue, and the earliest ready time seen.

        Returns ``(pick, next_ready)``; ``pick`` is None when nothing can
        issue at ``now``.  Commands waiting behind an older command to the
        same block are skipped (they become eligible once it issues).
        """
        nxt = _NEVER
        if not q:
            return None, nxt
        bank_free, open_row, addr_q = chan.bank_free, chan.open_row, chan.addr_q
        hit_at = chan.bus_free - self.tCL
        miss_at = chan.bus_free - self.tMiss
        oldest = q[0]
        if oldest.bypassed >= self.cfg.age_cap:
            if addr_q[oldest.addr][0] != oldest.seq:
                return None, nxt
            r = self._ready_at(chan, oldest)
            return (oldest, nxt) if r <= now else (None, r)
        first_ready = None
        for c in q:
            if addr_q[c.addr][0] != c.seq:
                continue
            bk = c.bank
            hit = open_row[bk] == c.row
            r = hit_at if hit else miss_at
            bf = bank_free[bk]
            if bf > r:
                r = bf
            if r <= now:
                if hit:
                    first_ready = c
                    break
                if first_ready is None:
                    first_ready = c
            elif r < nxt:
                nxt = r
        if first_ready is not None and first_ready is not oldest:
            oldest.bypassed += 1
        return first_ready, nxt

    def _decide_at(self, chan: _Channel, t: int):
        if chan.wake != t:
            return
        chan.wake = -1
        now = self.loop.now
        rq, wq = chan.rq, chan.wq
        if not rq and not wq:
            return
        if chan.draining:
            if len(wq) <= self.low:
                chan.draining = False
        elif len(wq) >= self.high:
            chan.draining = True
        first, second = (wq, rq) if chan.draining else (rq, wq)
        pick, n1 = self._scan(chan, first, now)
        if pick is None:
            pick, n2 = self._scan(chan, second, now)
            if pick is None:
                if n2 < n1:
                    n1 = n2
                if n1 < _NEVER:
                    self._wake(chan, max(now + 1, n1))
                return
        self._issue(chan, pick, now)
        if chan.rq or chan.wq:
            # every command's ready time is at least bus_free - tMiss
            self._wake(chan, max(now + 1, chan.bus_free - self.tMiss))

    def _wake(self, chan: _Channel, t: int):
        if chan.wake < 0 or t < chan.wake:
            chan.wake = t
            self.loop.at(t, self._decide_at, chan, t)

    def _issue(self, chan: _Channel, cmd: MemCommand, now: int):
        st = self.stats
        is_read = cmd.kind == "R"
        q = chan.rq if is_read else chan.wq
        self._account(chan, now)
        st.queue_samples += 1
        st.queue_area += len(chan.rq) + len(chan.wq)
        q.remove(cmd)
        aq = chan.addr_q[cmd.addr]
        aq.popleft()
        if not aq:
            del chan.addr_q[cmd.addr]
        saturated = chan.sat_since >= 0
        if saturated and len(chan.rq) < self.depth and len(chan.wq) < self.depth:
            st.saturated_cycles += now - chan.sat_since
            chan.sat_since = -1
        b = cmd.bank
        if chan.open_row[b] == cmd.row:
            lat = self.tCL
            st.row_hits += 1
        else:
            lat = self.tCL + self.tRP + self.tRCD
            st.row_misses += 1
            chan.open_row[b] = cmd.row
        start = now + lat
        if start < chan.bus_free:
            start = chan.bus_free
        done = start + self.burst
        chan.bus_free = done
        chan.bank_free[b] = done
        chan.booked.append((start, done))
        cmd.t_issue = now
        cmd.t_done = done
        st.transfer_cycles += self.burst
        st.busy_bytes += self.cfg.block_bytes
        if saturated:
            st.transfer_while_saturated += self.burst
        if is_read:
            st.reads += 1
            if chan.rfront:
                self._push(chan, chan.rfront.popleft())
        else:
            st.writes += 1
            if chan.wfront:
                self._push(chan, chan.wfront.popleft())
        self.loop.at(done, self._complete, cmd)

    def _complete(self, cmd: MemCommand):
        st = self.stats
        res = cmd.t_done - cmd.t_enq
        st.residency_cycles += res
        if cmd.kind == "R":
            st.read_residency_cycles += res
        lat = cmd.t_done - cmd.t_issue
        st.latency_cycles += lat
        if lat > st.max_latency:
            st.max_latency = lat
        self.outstanding -= 1
        if cmd.t_done > self.last_done:
            self.last_done = cmd.t_done
        if cmd.cb is not None:
            cmd.cb(cmd)

    # -- reporting -----------------------------------------------------------
    def close(self, now: int):
        for chan in self.channels:
            self._account(chan, now)
            if chan.sat_since >= 0:
                self.stats.saturated_cycles += now - chan.sat_since
                chan.sat_since = now

    def utilization(self, elapsed_cycles: int) -> float:
        if elapsed_cycles <= 0:
            return 0.0
        elapsed_s = elapsed_cycles / self.cfg.clock_hz
        return self.stats.busy_bytes / (elapsed_s * self.cfg.peak_bw)

    def drain(self):
        self.loop.run()
