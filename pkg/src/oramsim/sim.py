"""Timed simulation: ORAM controllers driving the DRAM model on one event timeline.

``SerialController`` runs the baseline protocols one request at a time: each
stage issues its reads, waits for all of them, posts its writes and moves on.

``MeshController`` models the rows x columns processing-element array running
the concurrent protocol.  Row ``r`` serves hierarchy level ``r`` (row 0 is the
data tree).  A PE of request ``k`` may start its LM phase once the request's
child row has returned the leaf (its RP landed) and row ``r`` of request
``k-1`` has sent its clear signal, which happens when that request's tree
window closes: after its path reads are issued, or after its eviction when
``(k-1) % a == 0``.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field

from .baselines import PathOram, PrOram, RingOram, Stage
from .config import SimOptions, default_treetop_levels
from .dram import Dram, MemCommand
from .errors import DeadlockError, OramError
from .events import EventLoop
from .palermo import PalermoOram
from .workloads import Frontend, OramReq

PROTOCOLS = ("pathoram", "ringoram", "proram", "palermo", "palermo-sw")
SERIAL = ("pathoram", "ringoram", "proram")


@dataclass
class RunLog:
    """Raw counters of one timed run, turned into a report by ``analysis``."""

    protocol: str
    elapsed: int = 0
    active_cycles: int = 0
    trace_len: int = 0
    oram_requests: int = 0
    demand_requests: int = 0
    dummy_requests: int = 0
    writebacks: int = 0
    bypasses: int = 0
    latencies: list = field(default_factory=list)      # per demand request, cycles
    stash_hit: list = field(default_factory=list)      # per demand request (concurrent protocol)
    leaves: list = field(default_factory=list)         # data-tree leaves read, in order
    issue_times: list = field(default_factory=list)
    stash_series: list = field(default_factory=list)
    stash_max: list = field(default_factory=list)
    commands: dict = field(default_factory=dict)       # "level.phase.kind" -> count
    onchip: int = 0
    cols: int = 1
    warmup_records: int = 0        # fast-forwarded without timing, excluded from the counters above
    warmup_requests: int = 0
    warmup_dummies: int = 0
    warmup_bypasses: int = 0


class _Join:
    __slots__ = ("n", "cb", "args")

    def __init__(self, n, cb, args):
        self.n = n
        self.cb = cb
        self.args = args

    def hit(self, _cmd=None):
        self.n -= 1
        if self.n == 0:
            self.cb(*self.args)


class _Base:
    def __init__(self, sim: "Simulation", hier, data_width: int):
        self.sim = sim
        self.loop = sim.loop
        self.dram = sim.dram
        mesh = sim.opts.mesh
        tt = mesh.treetop_levels
        if tt is None:
            tt = default_treetop_levels(hier.trees[0].W, sim.opts.oram.block_bytes)
        self.treetop = tt
        self.layouts = hier.layouts(tt, data_width)
        self.sram = mesh.sram_latency
        self.counts = sim.log.commands

    def _count(self, key, n):
        self.counts[key] = self.counts.get(key, 0) + n

    def issue(self, st: Stage, cb, *args):
        """Post the stage's writes after issuing its reads; ``cb(*args)`` once the reads are back."""
        lay = self.layouts[st.level]
        W, width, cached = lay.slots_per_node, lay.width, lay.cached_nodes
        base = lay.base
        addrs = []
        onchip = 0
        for n in st.meta_reads:
            if n < cached:
                onchip += 1
            else:
                addrs.append(lay.meta_addr(n))
        for g in st.reads:
            if g // W < cached:
                onchip += width
            else:
                a0 = base + g * width
                addrs.extend(range(a0, a0 + width))
        self.sim.log.onchip += onchip
        if addrs:
            self._count(f"{st.level}.{st.phase}.R", len(addrs))
            j = _Join(len(addrs), cb, args)
            submit = self.dram.submit
            lvl, ph, gid = st.level, st.phase, st.gid
            for a in addrs:
                submit(MemCommand("R", a, lvl, ph, gid, j.hit))
        else:
            self.loop.after(self.sram, cb, *args)
        if st.writes:
            self.post_writes(st)

    def post_writes(self, st: Stage):
        lay = self.layouts[st.level]
        W, width, cached = lay.slots_per_node, lay.width, lay.cached_nodes
        base = lay.base
        submit = self.dram.submit
        lvl, ph, gid = st.level, st.phase, st.gid
        n = 0
        for g in st.writes:
            if g // W < cached:
                self.sim.log.onchip += width
                continue
            a0 = base + g * width
            for a in range(a0, a0 + width):
                submit(MemCommand("W", a, lvl, ph, gid))
                n += 1
        if n:
            self._count(f"{st.level}.{st.phase}.W", n)


class SerialController(_Base):
    """One request at a time through every level of the hierarchy."""

    def __init__(self, sim, proto):
        super().__init__(sim, proto.h, proto.cfg.prefetch_len if not isinstance(proto, PrOram) else 1)
        self.proto = proto
        self.busy = False
        self.in_flight = 0

    def can_accept(self) -> bool:
        return not self.busy

    def start(self, req: OramReq):
        self.busy = True
        self.in_flight = 1
        result, stages = self.proto.access(req.block, req.op, req.data)
        self._run(req, result, stages, 0)

    def _run(self, req, result, stages, i):
        if i == len(stages):
            self.busy = False
            self.in_flight = 0
            self.sim.request_done(req)
            return
        st = stages[i]
        self.issue(st, self._after, req, result, stages, i)

    def _after(self, req, result, stages, i):
        st = stages[i]
        if st.level == 0 and st.phase == "RP" and not st.dummy:
            self.sim.served(req, result, False, -1)
        self.loop.after(self.sram, self._run, req, result, stages, i + 1)


class MeshController(_Base):
    def __init__(self, sim, oram: PalermoOram, cols: int, overlap: bool = True):
        super().__init__(sim, oram.h, oram.cfg.prefetch_len)
        self.oram = oram
        self.rows = len(oram.engines)
        self.cols = cols
        self.overlap = overlap
        self.free = deque(range(cols))
        self.cleared = [0] * self.rows          # gids below this value have cleared row r
        self.wait_lm = [dict() for _ in range(self.rows)]
        self.child_ok = [set() for _ in range(self.rows)]
        self.wait_land = [dict() for _ in range(self.rows)]
        self.active: dict[int, list] = {}      # gid -> [req, tickets, col, rows_left]
        self.clear_lat = sim.opts.mesh.clear_latency
        self.posmap_lat = sim.opts.mesh.posmap_onchip_latency
        self.in_flight = 0
        # (time, row, gid) of every LM start, used by the schedule monitor in tests
        self.lm_log = []
        self.keep_log = False

    def can_accept(self) -> bool:
        return bool(self.free)

    def start(self, req: OramReq):
        col = self.free.popleft()
        tickets = self.oram.begin(req.block, req.op, req.data)
        gid = tickets[0].gid
        self.active[gid] = [req, tickets, col, self.rows]
        self.in_flight += 1
        # CP: the query travels down the column; the top row reads the on-chip map
        top = tickets[-1]
        self.loop.after(self.posmap_lat + self.rows - 1, self._child_ready, top)

    def _child_ready(self, tk):
        r = tk.level
        if self.cleared[r] == tk.gid:
            self._lm(tk)
        else:
            self.wait_lm[r][tk.gid] = tk

    def _clear(self, r, gid):
        self.loop.after(self.clear_lat, self._clear_arrive, r, gid)

    def _clear_arrive(self, r, gid):
        self.cleared[r] = gid + 1
        tk = self.wait_lm[r].pop(gid + 1, None)
        if tk is not None:
            self._lm(tk)

    def _lm(self, tk):
        if self.keep_log:
            self.lm_log.append((self.loop.now, tk.level, tk.gid))
        e = self.oram.engines[tk.level]
        e.lock(tk)
        if tk.level == 0:
            self.sim.log.leaves.append(tk.leaf)
        self.issue(tk.stages[0], self._er, tk)

    def _er(self, tk):
        if tk.bypass:
            st = tk.stages[1]
            self.issue(st, self._er_done, tk)
        else:
            self._er_done(tk)

    def _er_done(self, tk):
        e = self.oram.engines[tk.level]
        e.reshuffle(tk)
        e.issue_rp(tk)
        if self.overlap and not tk.evict:
            self._clear(tk.level, tk.gid)
        self.issue(tk.stages[-1], self._rp_back, tk)

    def _rp_back(self, tk):
        e = self.oram.engines[tk.level]
        if e.can_land(tk):
            self._land(tk)
        else:
            self.wait_land[tk.level].setdefault(tk.block, []).append(tk)

    def _land(self, tk):
        r = tk.level
        e = self.oram.engines[r]
        e.land(tk)
        rec = self.active[tk.gid]
        if r > 0:
            self.loop.after(self.sram, self._child_ready, rec[1][r - 1])
        else:
            self.sim.served(rec[0], tk.result, tk.fake, tk.gid)
        waiting = self.wait_land[r].get(tk.block)
        if waiting:
            for i, other in enumerate(waiting):
                if e.can_land(other):
                    waiting.pop(i)
                    if not waiting:
                        del self.wait_land[r][tk.block]
                    self._land(other)
                    break
        if tk.evict:
            e.evict_read(tk)
            self.issue(tk.stages[-1], self._ep_back, tk)
        else:
            self._finalize(tk)

    def _ep_back(self, tk):
        e = self.oram.engines[tk.level]
        e.evict_write(tk)
        self.post_writes(tk.stages[-1])
        if self.overlap:
            self._clear(tk.level, tk.gid)
        self._finalize(tk)

    def _finalize(self, tk):
        if not self.overlap:
            self.oram.engines[tk.level].release(tk)
            self._clear(tk.level, tk.gid)
        rec = self.active[tk.gid]
        rec[3] -= 1
        if rec[3] == 0:
            del self.active[tk.gid]
            self.free.append(rec[2])
            self.in_flight -= 1
            self.sim.request_done(rec[0])

    def snapshot(self) -> dict:
        return {
            "cleared": list(self.cleared),
            "commit_head": [e.commit_head for e in self.oram.engines],
            "waiting_lm": {r: sorted(w) for r, w in enumerate(self.wait_lm) if w},
            "waiting_land": {r: {b: [t.gid for t in v] for b, v in w.items()}
                             for r, w in enumerate(self.wait_land) if w},
            "active": sorted(self.active),
        }


class Simulation:
    """Front end + controller + DRAM for one protocol over one trace."""

    def __init__(self, protocol: str, trace, n_lines: int, opts: SimOptions, seed: int = 0,
                 cols: int | None = None, group_len: int = 4, stash_threshold: int = 1024,
                 llc_groups: int = 4096, z_path: int = 4, stash_hit_latency_zero: bool = False,
                 record_results: bool = True, warmup: int = 0):
        if protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {protocol!r}")
        if protocol in SERIAL:
            if cols not in (None, 1):
                raise ValueError(f"{protocol} is serialized; it cannot use a mesh with {cols} columns")
            cols = 1
        elif cols is None:
            cols = opts.mesh.cols
        if cols < 1:
            raise ValueError("cols must be >= 1")
        self.protocol = protocol
        self.opts = opts
        self.loop = EventLoop()
        self.dram = Dram(opts.dram, self.loop)
        if not 0 <= warmup <= len(trace):
            raise ValueError("warmup must be within the trace")
        self.log = RunLog(protocol, trace_len=len(trace) - warmup, cols=cols)
        self.rng = random.Random(seed ^ 0xD0D0)
        oc = opts.oram
        if protocol == "proram":
            group = group_len
            proto = PrOram(n_lines, oc, seed, group_len=group_len, stash_threshold=stash_threshold,
                           z_path=z_path)
            self.n_blocks = proto.n_groups
            self.ctl = SerialController(self, proto)
        else:
            group = oc.prefetch_len
            n_blocks = -(-n_lines // group)
            self.n_blocks = n_blocks
            if protocol == "pathoram":
                proto = PathOram(n_blocks, oc, seed, z_path=z_path)
                self.ctl = SerialController(self, proto)
            elif protocol == "ringoram":
                proto = RingOram(n_blocks, oc, seed)
                self.ctl = SerialController(self, proto)
            else:
                release = "rp" if protocol == "palermo" else "manual"
                proto = PalermoOram(n_blocks, oc, seed, release_at=release)
                self.ctl = MeshController(self, proto, cols, overlap=(protocol == "palermo"))
        self.proto = proto
        self.front = Frontend(trace, group, llc_groups, oc.block_bytes, record_results)
        self.fifo: deque[OramReq] = deque()
        self.zero_stash_hits = stash_hit_latency_zero
        self._active_since = -1
        self._next_sample = 1
        self._slots = 0
        self._warm_pos = 0
        if warmup:
            self._fast_forward(warmup)

    def _fast_forward(self, k: int):
        """Run the first ``k`` trace records functionally: protocol state, front
        end and read results advance, but no time passes and nothing is counted."""
        proto, front = self.proto, self.front
        n = 0
        for _ in range(k):
            for req in front.step():
                result, _ = proto.access(req.block, req.op, req.data)
                n += 1
                if req.on_done is not None:
                    req.on_done(result)
        self.log.warmup_records = k
        self.log.warmup_requests = n
        self.log.warmup_dummies = getattr(proto, "dummy_requests", 0)
        self.log.warmup_bypasses = front.bypasses
        self._warm_pos = front.pos
        for t in proto.trees:
            t.stash.interval_max = t.stash.tags

    # -- front end ----------------------------------------------------------
    def _refill(self):
        if not self.fifo and not self.front.exhausted():
            for r in self.front.next_requests():
                r.t_arrive = self.loop.now
                self.fifo.append(r)

    def _pump(self):
        """Admit queued requests while the controller has room."""
        ctl = self.ctl
        paced = self.opts.issue.gap is None
        while ctl.can_accept():
            if paced:
                self._refill()
            if not self.fifo:
                break
            req = self.fifo.popleft()
            if req.t_arrive < 0:
                req.t_arrive = self.loop.now
            self.log.oram_requests += 1
            if req.kind == "dummy":
                self.log.dummy_requests += 1
            elif req.kind == "writeback":
                self.log.writebacks += 1
            else:
                self.log.demand_requests += 1
            self._set_active()
            ctl.start(req)

    def _tick(self):
        """Constant-rate issue: one slot every ``gap`` cycles."""
        if self.front.exhausted():
            return
        self._slots += 1
        reqs = self.front.step()
        if not reqs and self.opts.issue.pad_with_dummies:
            reqs = [OramReq(self.rng.randrange(self.n_blocks), "R", None, None, "dummy")]
        now = self.loop.now
        for r in reqs:
            r.t_arrive = now
            self.fifo.append(r)
        if reqs:
            self.log.issue_times.append(now)
        self._pump()
        self.loop.at(int(round(self._slots * self.opts.issue.gap)), self._tick)

    # -- controller callbacks ---------------------------------------------------
    def served(self, req: OramReq, result, stash_hit: bool, gid: int):
        if req.kind != "demand":
            return
        lat = self.loop.now - req.t_arrive
        if stash_hit and self.zero_stash_hits:
            lat = 0
        self.log.latencies.append(lat)
        if gid >= 0:
            self.log.stash_hit.append(stash_hit)
        if req.on_done is not None:
            req.on_done(result)

    def request_done(self, req: OramReq):
        self._sample_stash()
        self._pump()
        if self.ctl.in_flight == 0 and not self.fifo:
            self._set_idle()

    def _set_active(self):
        if self._active_since < 0:
            self._active_since = self.loop.now

    def _set_idle(self):
        if self._active_since >= 0:
            self.log.active_cycles += self.loop.now - self._active_since
            self._active_since = -1

    def _sample_stash(self):
        n = self.log.trace_len
        if not n:
            return
        done = self.front.pos - self._warm_pos
        while self._next_sample <= 100 and done * 100 >= self._next_sample * n:
            trees = self.proto.trees
            self.log.stash_series.append(max(t.stash.interval_max for t in trees))
            for t in trees:
                t.stash.interval_max = t.stash.tags
            self._next_sample += 1

    # -- run ------------------------------------------------------------------
    def run(self) -> RunLog:
        if self.opts.issue.gap is None:
            self.loop.at(0, self._pump)
        else:
            self.loop.at(0, self._tick)
        self.loop.run()
        if self.ctl.in_flight or self.fifo or not self.front.exhausted():
            snap = self.ctl.snapshot() if isinstance(self.ctl, MeshController) else {}
            raise DeadlockError(f"{self.ctl.in_flight} requests stuck with an empty event queue", snap)
        self._set_idle()
        self._sample_stash()
        log = self.log
        log.elapsed = max(self.loop.now, self.dram.last_done)
        self.dram.close(log.elapsed)
        log.bypasses = self.front.bypasses - log.warmup_bypasses
        log.stash_max = self.proto.stash_max()
        if isinstance(self.proto, PathOram):
            # background dummies are injected inside the protocol, not by the front end
            extra = self.proto.dummy_requests - log.warmup_dummies
            log.dummy_requests += extra
            log.oram_requests += extra
        return log

    @property
    def results(self):
        return self.front.results


__all__ = ["Simulation", "SerialController", "MeshController", "RunLog", "PROTOCOLS", "OramError"]
