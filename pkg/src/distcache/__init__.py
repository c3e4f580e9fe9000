"""Two-layer cache load balancing: partitioned hashing, power-of-two-choices routing,
a max-flow feasibility oracle, switch-cache models and a discrete-event simulator."""

from .config import ExperimentSpec, SystemConfig, Topology
from .hashing import Partitioner, object_key
from .oracle import MatchingInstance, solve_matching
from .routing import Policy
from .simulator import RunParams, run, saturation_throughput

__all__ = [
    "ExperimentSpec",
    "MatchingInstance",
    "Partitioner",
    "Policy",
    "RunParams",
    "SystemConfig",
    "Topology",
    "object_key",
    "run",
    "saturation_throughput",
    "solve_matching",
]

__version__ = "0.1.0"
