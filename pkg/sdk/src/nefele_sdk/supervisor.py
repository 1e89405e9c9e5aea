"""Erlang-style supervision of cluster processes.

The supervisor is itself a Nefele process: it runs in the client, spawns its
children anywhere in the cluster, monitors each one, and reacts to Down
events according to the restart strategy. Children registered under a name
keep that name across restarts (the replacement re-registers at startup), so
peers addressing the name see at worst a routing gap, never a stale NPID.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

from .session import Down, NefeleError, NefeleSession, SpawnRejected

STRATEGIES = ("one_for_one", "one_for_all")
POLICIES = ("permanent", "transient")


@dataclass(frozen=True, slots=True)
class ChildSpec:
    """What to run and when to restart it.

    permanent children restart on any exit; transient ones only when the
    exit was abnormal (nonzero status, signal, or lost node).
    """

    path: str
    args: tuple[str, ...] = ()
    env: tuple[tuple[str, str], ...] = ()
    cpu: int | None = None
    mem: int | None = None
    name: str | None = None
    handshake: bool = False
    restart: str = "permanent"

    def __post_init__(self):
        if self.restart not in POLICIES:
            raise ValueError(f"restart must be one of {POLICIES}")


@dataclass(frozen=True, slots=True)
class SupervisorSpec:
    children: tuple[ChildSpec, ...] = field(default_factory=tuple)
    strategy: str = "one_for_one"
    max_restarts: int = 3
    window: float = 10.0

    def __post_init__(self):
        if not self.children:
            raise ValueError("supervisor needs at least one child")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.max_restarts < 0:
            raise ValueError("max_restarts must be >= 0")
        if self.window <= 0:
            raise ValueError("window must be positive")


class SupervisorEscalation(RuntimeError):
    """Restart budget exhausted: the failure is beyond this supervisor."""

    def __init__(self, child: ChildSpec, restarts: int, window: float):
        super().__init__(
            f"{child.path} crashed beyond {restarts} restarts in {window}s")
        self.child = child


def run_supervisor(session: NefeleSession, spec: SupervisorSpec) -> None:
    """Run the supervision loop; only returns by raising.

    Raises SupervisorEscalation when crashes exhaust the restart budget
    (remaining children are killed first) and SessionClosed when the control
    connection dies. A failed respawn counts against the same budget as the
    crash that caused it.
    """
    restarts: deque[float] = deque()
    live: dict[str, ChildSpec] = {}
    doomed: set[str] = set()   # killed by us on purpose; downs expected

    def start(child: ChildSpec) -> str:
        npid = session.spawn(child.path, args=child.args, env=dict(child.env),
                             cpu=child.cpu, mem=child.mem, name=child.name,
                             handshake=child.handshake)
        session.monitor(npid)
        return npid

    def take_down(npids) -> None:
        for npid in list(npids):
            doomed.add(npid)   # a monitored process always yields one down
            try:
                session.kill(npid)
            except NefeleError:
                pass           # already dying; the monitor still reports it

    def spend_budget(child: ChildSpec) -> None:
        now = time.monotonic()
        while restarts and now - restarts[0] > spec.window:
            restarts.popleft()
        if len(restarts) >= spec.max_restarts:
            raise SupervisorEscalation(child, spec.max_restarts, spec.window)
        restarts.append(now)

    for c in spec.children:
        live[start(c)] = c

    try:
        while True:
            item = session.recv()
            if not isinstance(item, Down):
                continue
            if item.npid in doomed:
                doomed.discard(item.npid)
                continue
            child = live.pop(item.npid, None)
            if child is None:
                continue
            if child.restart == "transient" and item.normal:
                continue

            spend_budget(child)   # one unit per handled crash, not per child
            if spec.strategy == "one_for_one":
                replace = [child]
            else:
                take_down(live)
                live.clear()
                replace = list(spec.children)

            for c in replace:
                while True:
                    try:
                        live[start(c)] = c
                        break
                    except SpawnRejected:
                        spend_budget(c)   # infeasible respawn burns more budget
    except SupervisorEscalation:
        take_down(live)
        raise
