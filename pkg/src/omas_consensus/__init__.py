"""Finite-time quantized average consensus in open multi-agent systems."""

from .algorithms import AlgorithmKind, Mode
from .config import PRESET_NAMES, ScenarioConfig, preset
from .engine import Trace, build_instance, run, simulate
from .metrics import RunMetrics, aggregate
from .protocol import MassPair, NodeRecord, StateTriple, TransmissionMessage, split_mass
from .topology import Digraph, MembershipSchedule, TopologySequence, is_strongly_connected

__all__ = [
    "AlgorithmKind",
    "Digraph",
    "MassPair",
    "MembershipSchedule",
    "Mode",
    "NodeRecord",
    "PRESET_NAMES",
    "RunMetrics",
    "ScenarioConfig",
    "StateTriple",
    "TopologySequence",
    "Trace",
    "TransmissionMessage",
    "aggregate",
    "build_instance",
    "is_strongly_connected",
    "preset",
    "run",
    "simulate",
    "split_mass",
]
