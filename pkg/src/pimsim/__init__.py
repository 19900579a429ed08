"""Compiler and cycle-accurate simulator for crossbar processing-in-memory chips."""

from .config import ArchConfig, ConfigError, load_config, parse_config
from .engine import DeadlockError, SimResult, SimulationError, simulate
from .metrics import Report, finalize_report
from .nn import Network, NetworkError, load_network, parse_network, reference_inference

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "ConfigError",
    "DeadlockError",
    "Network",
    "NetworkError",
    "Report",
    "SimResult",
    "SimulationError",
    "finalize_report",
    "load_config",
    "load_network",
    "parse_config",
    "parse_network",
    "reference_inference",
    "simulate",
]
