"""Nefele: decentralized OS-process orchestration for small clusters.

Every node runs the same agent: gossip membership, a feasibility-and-scoring
scheduler where any node can admit work, an OS-process runtime with monitors,
and location-transparent messaging between processes.
"""

from .model import (
    BadRequest,
    MalformedNpid,
    NefeleError,
    NodeId,
    NoRoute,
    NoSuchProcess,
    NPID,
    ProcessRecord,
    ProcState,
    ResourceVector,
    SpawnRequest,
    TaskSpec,
    Unreachable,
    ZeroDemand,
    format_npid,
    parse_npid,
)

__version__ = "0.1.0"

__all__ = [
    "BadRequest",
    "MalformedNpid",
    "NefeleError",
    "NodeId",
    "NoRoute",
    "NoSuchProcess",
    "NPID",
    "ProcessRecord",
    "ProcState",
    "ResourceVector",
    "SpawnRequest",
    "TaskSpec",
    "Unreachable",
    "ZeroDemand",
    "format_npid",
    "parse_npid",
    "__version__",
]
