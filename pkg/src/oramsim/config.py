"""Protocol, geometry, DRAM and mesh parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

# (Z, S, A) points used by the parameter sweep; the outer two are the shipped presets.
PRESET_SMALL = (4, 5, 3)
PRESET_PAPER = (16, 27, 20)
ZSA_SWEEP = [(4, 5, 3), (8, 12, 8), (16, 27, 20)]


def admissible(z: int, s: int, a: int) -> bool:
    """Whether (z, s, a) is a usable RingORAM point.

    A bucket must absorb ``a`` dummy reads between two evictions of the same
    path and the eviction rate cannot exceed what a path can hold.
    """
    return z >= 1 and s >= 1 and 1 <= a <= 2 * z and s >= a


def depth_for(n_blocks: int, z: int) -> int:
    """Tree depth such that leaf-level capacity roughly matches the block count."""
    ratio = max(1.0, n_blocks / z)
    return max(0, math.ceil(math.log2(ratio)))


@dataclass(frozen=True)
class OramConfig:
    z: int = 16
    s: int = 27
    a: int = 20
    depth: int | None = None
    levels: int = 3
    block_bytes: int = 64
    posmap_entries_per_block: int = 16
    prefetch_len: int = 1
    stash_capacity: int = 256
    eviction_order: str = "bitrev"
    strict_zsa: bool = True

    def __post_init__(self):
        if self.z < 1 or self.s < 1 or self.a < 1:
            raise ValueError(f"z, s, a must be >= 1, got {(self.z, self.s, self.a)}")
        if self.depth is not None and self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.prefetch_len < 1:
            raise ValueError("prefetch_len must be >= 1")
        if self.posmap_entries_per_block < 2:
            raise ValueError("posmap_entries_per_block must be >= 2")
        if self.stash_capacity < 1:
            raise ValueError("stash_capacity must be >= 1")
        if self.eviction_order not in ("bitrev", "sequential"):
            raise ValueError(f"unknown eviction order {self.eviction_order!r}")
        if self.strict_zsa and not admissible(self.z, self.s, self.a):
            raise ValueError(f"(z, s, a) = {(self.z, self.s, self.a)} is not admissible")

    @property
    def slots(self) -> int:
        return self.z + self.s

    def with_(self, **kw) -> "OramConfig":
        return replace(self, **kw)


def level_block_counts(n_data_blocks: int, levels: int, fan_in: int) -> list[int]:
    """Block count of each ORAM tree, data tree first.

    The last tree's position map (one entry per block) is kept on chip.
    """
    counts = [max(1, n_data_blocks)]
    for _ in range(1, levels):
        counts.append(-(-counts[-1] // fan_in))
    return counts


@dataclass(frozen=True)
class DramConfig:
    channels: int = 4
    banks_per_channel: int = 16
    row_bytes: int = 8192
    tCL_ns: float = 13.75
    tRCD_ns: float = 13.75
    tRP_ns: float = 13.75
    peak_bw: float = 102.4e9
    queue_depth: int = 32
    age_cap: int = 64
    write_high: float = 1.0    # write-queue fill that starts a drain burst
    write_low: float = 0.875   # fill at which the drain stops
    clock_hz: float = 1.6e9
    block_bytes: int = 64

    def __post_init__(self):
        if self.channels < 1 or self.banks_per_channel < 1 or self.queue_depth < 1:
            raise ValueError("channels, banks and queue depth must be >= 1")
        if self.row_bytes < self.block_bytes:
            raise ValueError("a row must hold at least one block")

    def cycles(self, ns: float) -> int:
        return max(1, round(ns * 1e-9 * self.clock_hz))

    @property
    def tCL(self) -> int:
        return self.cycles(self.tCL_ns)

    @property
    def tRCD(self) -> int:
        return self.cycles(self.tRCD_ns)

    @property
    def tRP(self) -> int:
        return self.cycles(self.tRP_ns)

    @property
    def channel_bw(self) -> float:
        return self.peak_bw / self.channels

    @property
    def burst(self) -> int:
        """Cycles one block occupies a channel's data bus."""
        return max(1, round(self.block_bytes / self.channel_bw * self.clock_hz))

    @property
    def blocks_per_row(self) -> int:
        return self.row_bytes // self.block_bytes


def default_treetop_levels(slots: int, block_bytes: int, budget_bytes: int = 256 * 1024) -> int:
    """Largest number of top tree levels whose buckets fit in ``budget_bytes``."""
    bucket = slots * block_bytes
    buckets = budget_bytes // bucket
    return max(0, (buckets + 1).bit_length() - 1)


@dataclass(frozen=True)
class MeshConfig:
    rows: int = 3
    cols: int = 8
    clock_hz: float = 1.6e9
    treetop_levels: int | None = None
    posmap_onchip_latency: int = 2
    sram_latency: int = 1
    clear_latency: int = 1
    intra_request_overlap: bool = True

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("mesh needs at least one row and one column")
        if self.treetop_levels is not None and self.treetop_levels < 0:
            raise ValueError("treetop_levels must be >= 0")


@dataclass
class IssuePolicy:
    """Front-end admission: ``rate`` requests per 1000 cycles, or self-paced when None."""

    rate: float | None = None
    pad_with_dummies: bool = False

    @property
    def gap(self) -> float | None:
        return None if not self.rate else 1000.0 / self.rate


@dataclass
class SimOptions:
    oram: OramConfig = field(default_factory=OramConfig)
    dram: DramConfig = field(default_factory=DramConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    issue: IssuePolicy = field(default_factory=IssuePolicy)
