"""Slotted single-cell WLAN MAC simulator: DCF basic, DCF RTS/CTS and FRMA.

FRMA stations pick Transmit/Wait with a per-station deep Q-network trained on
Monte Carlo rewards; the access point federated-averages the networks.
"""

from frma.analytic import (
    AccessScheme,
    AnalyticResult,
    BackoffParams,
    PhyTimings,
    normalized_throughput,
    solve_fixed_point,
)
from frma.channel import ChannelEngine, RunMetrics, jain_index, throughput

__version__ = "0.1.0"

__all__ = [
    "AccessScheme",
    "AnalyticResult",
    "BackoffParams",
    "ChannelEngine",
    "PhyTimings",
    "RunMetrics",
    "jain_index",
    "normalized_throughput",
    "solve_fixed_point",
    "throughput",
]
