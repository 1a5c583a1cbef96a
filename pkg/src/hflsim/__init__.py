"""Simulator for hybrid federated learning with delayed (straggler) updates."""

from .flcore import HyperParams, ProtocolError
from .harness import RunConfig, SweepSpec, parse_config, run_compare, run_sweep
from .streams import Streams

__all__ = [
    "HyperParams",
    "ProtocolError",
    "RunConfig",
    "Streams",
    "SweepSpec",
    "parse_config",
    "run_compare",
    "run_sweep",
]
__version__ = "0.1.0"
