"""Python client for nefele clusters.

Connect with a NefeleSession, then spawn processes, monitor them, exchange
messages by NPID / name / service id, and supervise children Erlang-style::

    from nefele_sdk import NefeleSession

    with NefeleSession() as s:               # finds the node via NEFELE_SOCK
        npid = s.spawn("/usr/bin/worker", cpu=500)
        s.monitor(npid)
        s.message(npid, b"job 1")
        print(s.recv(timeout=5.0))
"""

from .session import (
    BadRequest,
    Down,
    InternalError,
    MalformedNpid,
    Message,
    NefeleError,
    NefeleSession,
    NoRoute,
    NoSuchProcess,
    SessionClosed,
    SpawnRejected,
    Unreachable,
)
from .supervisor import (
    ChildSpec,
    SupervisorEscalation,
    SupervisorSpec,
    run_supervisor,
)

__all__ = [
    "BadRequest",
    "ChildSpec",
    "Down",
    "InternalError",
    "MalformedNpid",
    "Message",
    "NefeleError",
    "NefeleSession",
    "NoRoute",
    "NoSuchProcess",
    "SessionClosed",
    "SpawnRejected",
    "SupervisorEscalation",
    "SupervisorSpec",
    "Unreachable",
    "run_supervisor",
]

__version__ = "0.1.0"
