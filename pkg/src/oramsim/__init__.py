"""Trace-driven tree-ORAM simulator.

PathORAM, RingORAM and PrORAM-style baselines, a concurrent RingORAM
protocol driven by a processing-element mesh, and a multi-channel DRAM
timing model, with workload generators and run analysis.
"""

from .config import DramConfig, IssuePolicy, MeshConfig, OramConfig, SimOptions
from .errors import (DeadlockError, HazardError, InsufficientSamples, OramError, OrderError,
                     ProtocolViolation, StashOverflow, TraceParseError)
from .sim import PROTOCOLS, Simulation

__version__ = "0.1.0"

__all__ = [
    "DramConfig", "IssuePolicy", "MeshConfig", "OramConfig", "SimOptions", "Simulation", "PROTOCOLS",
    "OramError", "ProtocolViolation", "StashOverflow", "HazardError", "OrderError", "DeadlockError",
    "TraceParseError", "InsufficientSamples",
]
