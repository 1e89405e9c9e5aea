"""Shared domain types: cluster process identity, resource vectors, specs, records.

Everything here is an immutable (or effectively immutable) value object that is
safe to copy between threads.  The canonical text form of a cluster process id
is "<node>.<incarnation>.<seq>" and is used verbatim in CLI output, HTTP JSON
and log lines.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

U32_MAX = 2**32 - 1
U48_MAX = 2**48 - 1

_NPID_RE = re.compile(r"^(0|[1-9][0-9]*)\.(0|[1-9][0-9]*)\.(0|[1-9][0-9]*)$")


class NefeleError(Exception):
    """Base class for typed errors; `code` is the wire-visible error code."""

    code = "Error"

    def __init__(self, msg: str = ""):
        super().__init__(msg or self.code)


class MalformedNpid(NefeleError, ValueError):
    code = "MalformedNpid"


class ZeroDemand(NefeleError, ValueError):
    code = "ZeroDemand"


class NoSuchProcess(NefeleError):
    code = "NoSuchProcess"


class Unreachable(NefeleError):
    code = "Unreachable"


class NoRoute(NefeleError):
    code = "NoRoute"


class BadRequest(NefeleError, ValueError):
    code = "BadRequest"


ERRORS_BY_CODE = {
    cls.code: cls
    for cls in (MalformedNpid, ZeroDemand, NoSuchProcess, Unreachable, NoRoute, BadRequest)
}


def error_from_code(code: str, msg: str = "") -> NefeleError:
    cls = ERRORS_BY_CODE.get(code)
    if cls is None:
        err = NefeleError(msg or code)
        err.code = code
        return err
    return cls(msg)


@dataclass(frozen=True, order=True, slots=True)
class NodeId:
    """Logical node number plus a restart counter.

    `id` is unique per cluster (assigned in config); `incarnation` strictly
    increases across restarts of the same id so stale identities never collide.
    """

    id: int
    incarnation: int

    def __post_init__(self):
        if not (0 <= self.id <= U32_MAX):
            raise BadRequest(f"node id out of range: {self.id}")
        if not (0 <= self.incarnation <= U32_MAX):
            raise BadRequest(f"node incarnation out of range: {self.incarnation}")

    def to_wire(self) -> dict:
        return {"id": self.id, "inc": self.incarnation}

    @classmethod
    def from_wire(cls, d: dict) -> "NodeId":
        return cls(int(d["id"]), int(d["inc"]))


@dataclass(frozen=True, order=True, slots=True)
class NPID:
    """Cluster-wide process id: (node, incarnation, per-node sequence)."""

    node: NodeId
    seq: int

    def __post_init__(self):
        if not (0 <= self.seq <= U48_MAX):
            raise BadRequest(f"npid seq out of range: {self.seq}")

    def __str__(self) -> str:
        return format_npid(self)


def format_npid(npid: NPID) -> str:
    return f"{npid.node.id}.{npid.node.incarnation}.{npid.seq}"


def parse_npid(s: str) -> NPID:
    """Parse the canonical "<node>.<incarnation>.<seq>" form.

    Raises MalformedNpid on anything else (including leading zeros, signs,
    whitespace, or out-of-range components).
    """
    if not isinstance(s, str):
        raise MalformedNpid(f"npid must be a string, got {type(s).__name__}")
    m = _NPID_RE.match(s)
    if m is None:
        raise MalformedNpid(f"malformed npid: {s!r}")
    node_id, inc, seq = (int(g) for g in m.groups())
    if node_id > U32_MAX or inc > U32_MAX or seq > U48_MAX:
        raise MalformedNpid(f"npid component out of range: {s!r}")
    return NPID(NodeId(node_id, inc), seq)


@dataclass(frozen=True, slots=True)
class ResourceVector:
    """Capacity/demand/accounting unit: CPU millicores (1000 = one core) + memory bytes."""

    cpu: int = 0
    mem: int = 0

    def __post_init__(self):
        if self.cpu < 0 or self.mem < 0:
            raise BadRequest(f"resource components must be >= 0: cpu={self.cpu} mem={self.mem}")

    def __add__(self, other: "ResourceVector") -> "ResourceVector":
        return ResourceVector(self.cpu + other.cpu, self.mem + other.mem)

    def __sub__(self, other: "ResourceVector") -> "ResourceVector":
        return ResourceVector(self.cpu - other.cpu, self.mem - other.mem)

    def scaled(self, k: int) -> "ResourceVector":
        return ResourceVector(self.cpu * k, self.mem * k)

    def is_zero(self) -> bool:
        return self.cpu == 0 and self.mem == 0

    def to_wire(self) -> dict:
        return {"cpu": self.cpu, "mem": self.mem}

    @classmethod
    def from_wire(cls, d: dict) -> "ResourceVector":
        return cls(int(d.get("cpu", 0)), int(d.get("mem", 0)))


def fits(req: ResourceVector, free: ResourceVector) -> bool:
    """Componentwise feasibility: can one unit of `req` be carved out of `free`?"""
    return req.cpu <= free.cpu and req.mem <= free.mem


def max_fit_count(req: ResourceVector, free: ResourceVector) -> int:
    """Largest k >= 0 with k*req <= free componentwise.

    Dimensions where the demand component is 0 are unconstrained.  An all-zero
    demand has no finite answer and raises ZeroDemand.
    """
    if req.is_zero():
        raise ZeroDemand("demand vector is all-zero")
    k = None
    if req.cpu > 0:
        k = free.cpu // req.cpu
    if req.mem > 0:
        k_mem = free.mem // req.mem
        k = k_mem if k is None else min(k, k_mem)
    return int(k)


@dataclass(frozen=True, slots=True)
class TaskSpec:
    """One task of a spawn request: what to run and what it claims to need.

    `name` auto-registers the process under that service name once running.
    Tasks sharing an `anti_affinity_group` must land on distinct nodes.
    `handshake` marks a binary that will synchronize with its shadow agent
    before being considered Running; unmodified binaries leave it False.
    """

    executable: str
    args: tuple[str, ...] = ()
    env: tuple[tuple[str, str], ...] = ()
    resources: ResourceVector = ResourceVector(0, 0)
    name: str | None = None
    anti_affinity_group: str | None = None
    handshake: bool = False

    def __post_init__(self):
        if not self.executable:
            raise BadRequest("task executable must be non-empty")
        if self.resources.cpu <= 0 and self.resources.mem <= 0:
            raise BadRequest("task must demand cpu or memory")

    @classmethod
    def make(cls, executable: str, args=(), env=None, resources=ResourceVector(0, 0),
             name=None, anti_affinity_group=None, handshake=False) -> "TaskSpec":
        env_items = tuple(sorted((env or {}).items()))
        return cls(executable, tuple(args), env_items, resources, name,
                   anti_affinity_group, handshake)

    @property
    def env_dict(self) -> dict[str, str]:
        return dict(self.env)

    def to_wire(self) -> dict:
        return {
            "executable": self.executable,
            "args": list(self.args),
            "env": self.env_dict,
            "resources": self.resources.to_wire(),
            "name": self.name,
            "anti_affinity_group": self.anti_affinity_group,
            "handshake": self.handshake,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "TaskSpec":
        return cls.make(
            executable=d["executable"],
            args=d.get("args") or (),
            env=d.get("env") or {},
            resources=ResourceVector.from_wire(d.get("resources") or {}),
            name=d.get("name"),
            anti_affinity_group=d.get("anti_affinity_group"),
            handshake=bool(d.get("handshake", False)),
        )


@dataclass(frozen=True, slots=True)
class SpawnRequest:
    """A gang of tasks submitted as one unit: placed entirely or rejected."""

    request_id: str
    tenant: str
    tasks: tuple[TaskSpec, ...]
    submitted_at: float = field(default_factory=time.monotonic)

    def __post_init__(self):
        if not self.tasks:
            raise BadRequest("spawn request must contain at least one task")
        if not self.tenant:
            raise BadRequest("spawn request must name a tenant")

    def to_wire(self) -> dict:
        return {
            "request_id": self.request_id,
            "tenant": self.tenant,
            "tasks": [t.to_wire() for t in self.tasks],
            "submitted_at": self.submitted_at,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "SpawnRequest":
        return cls(
            request_id=d["request_id"],
            tenant=d["tenant"],
            tasks=tuple(TaskSpec.from_wire(t) for t in d["tasks"]),
            submitted_at=float(d.get("submitted_at", 0.0)),
        )


class ProcState(str, Enum):
    STARTING = "starting"
    RUNNING = "running"
    EXITED = "exited"
    KILLED = "killed"

    @property
    def terminal(self) -> bool:
        return self in (ProcState.EXITED, ProcState.KILLED)


@dataclass(slots=True)
class ProcessRecord:
    """Lifecycle state of one managed process, owned by its node's runtime."""

    npid: NPID
    tenant: str
    os_pid: int
    node: NodeId
    spec: TaskSpec
    state: ProcState = ProcState.STARTING
    exit_status: int | None = None
    exit_signal: int | None = None
    started_at: float = 0.0
    ended_at: float | None = None
    monitors: set[NPID] = field(default_factory=set)

    def check(self) -> None:
        if self.state is ProcState.EXITED and self.exit_status is None:
            raise BadRequest("exited record lacks exit_status")
        if self.state is ProcState.KILLED and self.exit_signal is None:
            raise BadRequest("killed record lacks exit_signal")

    def snapshot(self) -> "ProcessRecord":
        return replace(self, monitors=set(self.monitors))

    def to_wire(self) -> dict:
        return {
            "npid": format_npid(self.npid),
            "tenant": self.tenant,
            "os_pid": self.os_pid,
            "node": self.node.to_wire(),
            "spec": self.spec.to_wire(),
            "state": self.state.value,
            "exit_status": self.exit_status,
            "exit_signal": self.exit_signal,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "monitors": sorted(format_npid(m) for m in self.monitors),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "ProcessRecord":
        return cls(
            npid=parse_npid(d["npid"]),
            tenant=d["tenant"],
            os_pid=int(d["os_pid"]),
            node=NodeId.from_wire(d["node"]),
            spec=TaskSpec.from_wire(d["spec"]),
            state=ProcState(d["state"]),
            exit_status=d.get("exit_status"),
            exit_signal=d.get("exit_signal"),
            started_at=float(d.get("started_at", 0.0)),
            ended_at=d.get("ended_at"),
            monitors={parse_npid(m) for m in d.get("monitors", [])},
        )


def validate_request(d: Any) -> SpawnRequest:
    """Parse and validate a wire-form spawn request, raising BadRequest with detail."""
    if not isinstance(d, dict):
        raise BadRequest("request body must be an object")
    try:
        return SpawnRequest.from_wire(d)
    except NefeleError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise BadRequest(f"invalid spawn request: {exc}") from exc
