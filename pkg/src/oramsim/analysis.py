"""Run reports, stash sampling, stall attribution and the latency side-channel statistic.

The security statistic models an attacker who labels each response latency
as longer or shorter than the median and tries to tell whether the request
was served from the stash (behaviour B=stash) or from the tree (B=tree)::

    p1 = P[longer | stash]      p2 = P[longer | tree]

``mutual_information(p1, p2)`` is the information (bits) between B and the
attacker's label when both behaviours are equally likely a priori.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as sps

from .errors import InsufficientSamples

MIN_OBSERVATIONS = 1000
LEAF_BINS = 256


def _xlog(x: float, num: float, den: float) -> float:
    # x * log2(num / den) with 0 * log(.) = 0
    if x == 0:
        return 0.0
    return x * math.log2(num / den)


def mutual_information(p1: float, p2: float) -> float:
    """Information (bits) leaked by a longer/shorter-than-median latency label."""
    for name, p in (("p1", p1), ("p2", p2)):
        if not (0.0 <= p <= 1.0) or math.isnan(p):
            raise ValueError(f"{name}={p} is not a probability")
    q1, q2 = 1.0 - p1, 1.0 - p2
    m = (_xlog(p1 / 2, 2 * p1, p1 + p2) + _xlog(p2 / 2, 2 * p2, p1 + p2)
         + _xlog(q1 / 2, 2 * q1, q1 + q2) + _xlog(q2 / 2, 2 * q2, q1 + q2))
    return max(0.0, m)


def stash_timeseries(log) -> list[int]:
    """Interval-maximum stash tag count after every 1% of the trace (empty for an empty run)."""
    if not log.trace_len:
        return []
    return list(log.stash_series)


def latency_histogram(latencies, bins: int = 32) -> dict:
    """Equal-width histogram over [0, max]; counts sum to the number of latencies."""
    lat = np.asarray(latencies, dtype=np.int64)
    if lat.size == 0:
        return {"edges": [], "counts": []}
    hi = int(lat.max()) + 1
    edges = np.linspace(0, hi, bins + 1)
    counts, _ = np.histogram(lat, bins=edges)
    return {"edges": [round(float(e), 3) for e in edges], "counts": [int(c) for c in counts]}


def stall_breakdown(log, dram) -> dict:
    """Split channel-cycles into dram-busy, oram-sync and idle.

    A channel-cycle is dram-busy while the channel holds queued commands it
    has not issued yet or moves data on its bus.  Otherwise it is oram-sync
    if at least one ORAM request is in flight: the controller has nothing to
    issue because the protocol waits on earlier reads to return.  The rest
    is idle.
    """
    channels = len(dram.channels)
    total = log.elapsed * channels
    if total <= 0:
        return {"dram_busy": 0.0, "oram_sync": 0.0, "idle": 1.0}
    busy = min(dram.stats.busy_cycles, total)
    sync = max(0, min(log.active_cycles * channels, total) - busy)
    sync = min(sync, total - busy)
    idle = total - busy - sync
    return {"dram_busy": busy / total, "oram_sync": sync / total, "idle": idle / total}


@dataclass
class SecurityReport:
    observations: int
    stash_observations: int
    p1: float
    p2: float
    mutual_information: float
    leaf_chi2: float
    leaf_p_value: float


def leaf_uniformity(leaves, depth: int, bins: int = LEAF_BINS) -> tuple[float, float]:
    """Chi-squared test of the leaf sequence against uniform, on the top bits of each leaf."""
    lv = np.asarray(leaves, dtype=np.int64)
    if lv.size == 0:
        raise InsufficientSamples("no leaves recorded")
    bits = min(depth, int(math.log2(bins)))
    hist = np.bincount(lv >> (depth - bits), minlength=1 << bits)
    if hist.size < 2:
        return 0.0, 1.0
    chi2, p = sps.chisquare(hist)
    return float(chi2), float(p)


def security_report(log, depth: int, min_observations: int = MIN_OBSERVATIONS) -> SecurityReport:
    """Median-split estimate of p1, p2 and M plus leaf uniformity.

    Latencies equal to the median count as shorter.
    """
    lat = np.asarray(log.latencies[:len(log.stash_hit)], dtype=np.int64)
    hit = np.asarray(log.stash_hit, dtype=bool)
    if lat.size < min_observations:
        raise InsufficientSamples(f"{lat.size} latency observations, need {min_observations}")
    n_hit = int(hit.sum())
    if n_hit == 0 or n_hit == lat.size:
        raise InsufficientSamples("both stash and tree observations are needed")
    longer = lat > np.median(lat)
    p1 = float(longer[hit].mean())
    p2 = float(longer[~hit].mean())
    chi2, p = leaf_uniformity(log.leaves, depth)
    return SecurityReport(int(lat.size), n_hit, p1, p2, mutual_information(p1, p2), chi2, p)


@dataclass
class RunReport:
    """Stable, serialisable summary of one run.  Field names are part of the output format."""

    protocol: str
    workload: str
    seed: int
    cols: int
    config: dict
    trace_records: int
    oram_requests: int
    demand_requests: int
    dummy_requests: int
    writeback_requests: int
    bypasses: int
    elapsed_cycles: int
    elapsed_ns: float
    throughput: float                 # trace records per simulated second
    oram_throughput: float            # ORAM requests per simulated second
    utilization: float
    avg_outstanding: float
    stall_breakdown: dict
    row_hit_fraction: float
    dummy_fraction: float
    dram_reads: int
    dram_writes: int
    onchip_blocks: int
    commands: dict
    stash_max: int
    stash_max_per_level: list
    stash_timeseries: list
    latency_mean_ns: float
    latency_histogram: dict
    mutual_information: float | None = None
    security: dict | None = field(default=None)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _r(x: float, nd: int = 6) -> float:
    return round(float(x), nd)


def build_report(sim, log, workload: str = "", seed: int = 0, config: dict | None = None,
                 security: bool = False) -> RunReport:
    dram = sim.dram
    st = dram.stats
    clock = sim.opts.dram.clock_hz
    el = log.elapsed
    secs = el / clock if el else 0.0
    done = st.completed
    sec = None
    mi = None
    if security:
        rep = security_report(log, sim.proto.trees[0].depth)
        sec = {k: (_r(v) if isinstance(v, float) else v) for k, v in asdict(rep).items()}
        mi = sec["mutual_information"]
    lat_ns = np.asarray(log.latencies, dtype=float) * 1e9 / clock
    series = stash_timeseries(log)
    return RunReport(
        protocol=log.protocol,
        workload=workload,
        seed=seed,
        cols=log.cols,
        config=config or {},
        trace_records=log.trace_len,
        oram_requests=log.oram_requests,
        demand_requests=log.demand_requests,
        dummy_requests=log.dummy_requests,
        writeback_requests=log.writebacks,
        bypasses=log.bypasses,
        elapsed_cycles=el,
        elapsed_ns=_r(el * 1e9 / clock, 3),
        throughput=_r(log.trace_len / secs, 3) if secs else 0.0,
        oram_throughput=_r(log.oram_requests / secs, 3) if secs else 0.0,
        utilization=_r(dram.utilization(el)),
        avg_outstanding=_r(st.residency_cycles / el) if el else 0.0,
        stall_breakdown={k: _r(v) for k, v in stall_breakdown(log, dram).items()},
        row_hit_fraction=_r(st.row_hits / done) if done else 0.0,
        dummy_fraction=_r(log.dummy_requests / log.oram_requests) if log.oram_requests else 0.0,
        dram_reads=st.reads,
        dram_writes=st.writes,
        onchip_blocks=log.onchip,
        commands=dict(sorted(log.commands.items())),
        stash_max=max(log.stash_max) if log.stash_max else 0,
        stash_max_per_level=list(log.stash_max),
        stash_timeseries=series,
        latency_mean_ns=_r(lat_ns.mean(), 3) if lat_ns.size else 0.0,
        latency_histogram=latency_histogram(log.latencies),
        mutual_information=mi,
        security=sec,
    )


def write_report(report: RunReport, path: str) -> None:
    with open(path, "w") as f:
        f.write(report.to_json())


def write_timeseries(report: RunReport, directory: str, stem: str | None = None) -> str:
    """Write the stash time series as ``<stem>_stash.csv``; returns the path."""
    os.makedirs(directory, exist_ok=True)
    stem = stem or f"{report.protocol}_c{report.cols}_s{report.seed}"
    path = os.path.join(directory, f"{stem}_stash.csv")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["progress_pct", "stash_max"])
        for i, v in enumerate(report.stash_timeseries, 1):
            w.writerow([i, v])
    return path
