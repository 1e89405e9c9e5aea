"""Gossip-based failure detection and membership.

The protocol follows the classic randomized probe scheme: each protocol period
one member is pinged directly; a silent member is probed indirectly through k
peers; a member that stays silent becomes Suspect and, after a refutation
window, Dead.  Membership updates ride piggybacked on every protocol message.

The `Swim` state machine is transport-free and clock-injected: callers feed it
ticks and inbound frames and send whatever frames it returns.  `SwimRunner`
drives it over UDP; `SimNetwork` drives whole clusters deterministically in
memory for tests.
"""

from __future__ import annotations

import logging
import math
import random
import socket
import threading
import time
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterable

from . import frames
from .model import NodeId

log = logging.getLogger("nefele.membership")


class Status(str, Enum):
    ALIVE = "alive"
    SUSPECT = "suspect"
    DEAD = "dead"


# Precedence for same-status_incarnation conflicts: Dead > Suspect > Alive.
_PRECEDENCE = {Status.ALIVE: 0, Status.SUSPECT: 1, Status.DEAD: 2}


@dataclass(frozen=True, slots=True)
class MemberState:
    node: NodeId
    addr: str
    status: Status
    status_inc: int   # refutation counter, distinct from NodeId.incarnation
    last_update: float

    def to_wire(self) -> dict:
        return {
            "node": self.node.to_wire(),
            "addr": self.addr,
            "status": self.status.value,
            "status_inc": self.status_inc,
        }

    @classmethod
    def from_wire(cls, d: dict, now: float) -> "MemberState":
        return cls(
            node=NodeId.from_wire(d["node"]),
            addr=str(d["addr"]),
            status=Status(d["status"]),
            status_inc=int(d["status_inc"]),
            last_update=now,
        )


@dataclass(frozen=True, slots=True)
class SwimConfig:
    protocol_period: float = 0.2
    indirect_probes: int = 3
    suspect_timeout: float = 0.6
    piggyback_limit: int = 8

    def __post_init__(self):
        if self.protocol_period <= 0:
            raise ValueError("protocol_period must be > 0")
        if self.indirect_probes < 1:
            raise ValueError("indirect_probes must be >= 1")
        if self.suspect_timeout < self.protocol_period:
            raise ValueError("suspect_timeout must be >= protocol_period")


class Swim:
    """Membership state machine for one node.

    All mutations are serialized through an internal lock; reads return
    immutable snapshots.  Dead-transition callbacks fire exactly once per
    (node id, node incarnation), outside the lock.
    """

    def __init__(self, node: NodeId, addr: str, config: SwimConfig | None = None,
                 clock: Callable[[], float] = time.monotonic,
                 rng: random.Random | None = None,
                 seeds: Iterable[str] = ()):
        self.node = node
        self.addr = addr
        self.config = config or SwimConfig()
        self._clock = clock
        self._rng = rng or random.Random()
        self._seeds = [s for s in seeds if s != addr]
        self._lock = threading.RLock()
        now = clock()
        self._members: dict[int, MemberState] = {
            node.id: MemberState(node, addr, Status.ALIVE, 0, now)
        }
        self._queue: list[list] = []          # [update wire dict, remaining transmissions]
        self._probe_seq = 0
        self._inflight: dict[int, int] = {}   # probe id -> target node id
        self._pending_direct: tuple[int, int, float] | None = None    # (target, probe, deadline)
        self._pending_indirect: tuple[int, int, float] | None = None
        self._suspect_since: dict[int, float] = {}
        self._relays: dict[int, tuple[str, int, float]] = {}  # our probe -> (origin addr, origin probe, deadline)
        self._dead_fired: set[tuple[int, int]] = set()
        self._dead_callbacks: list[Callable[[NodeId], None]] = []
        self.malformed_count = 0
        self.suspect_transitions = 0

    # -- public API ---------------------------------------------------------

    def on_member_dead(self, cb: Callable[[NodeId], None]) -> None:
        with self._lock:
            self._dead_callbacks.append(cb)

    def members(self) -> list[MemberState]:
        with self._lock:
            return sorted(self._members.values(), key=lambda m: m.node.id)

    def alive_members(self) -> list[MemberState]:
        return [m for m in self.members() if m.status is Status.ALIVE]

    def get_member(self, node_id: int) -> MemberState | None:
        with self._lock:
            return self._members.get(node_id)

    def join(self) -> list[tuple[str, dict]]:
        """Initial contact: ping every configured seed, announcing ourselves."""
        with self._lock:
            self._enqueue(self._self_update())
            out = [(seed, self._ping_frame()) for seed in self._seeds]
        if not self._seeds:
            log.info("node %s: no seeds configured, running as singleton", self.node.id)
        return out

    def leave(self) -> list[tuple[str, dict]]:
        """Broadcast a terminal self-dead update for graceful shutdown."""
        with self._lock:
            me = self._members[self.node.id]
            upd = MemberState(self.node, self.addr, Status.DEAD, me.status_inc + 1, self._clock())
            self._members[self.node.id] = upd
            self._enqueue(upd.to_wire())
            targets = [m.addr for m in self._members.values()
                       if m.status is Status.ALIVE and m.node.id != self.node.id]
            out = [(addr, self._ping_frame()) for addr in targets]
        return out

    def protocol_tick(self) -> list[tuple[str, dict]]:
        events: list[NodeId] = []
        with self._lock:
            now = self._clock()
            out: list[tuple[str, dict]] = []

            # An indirect round that stayed silent makes the target Suspect.
            # Checked before new escalations so a repeated probe of the same
            # target cannot keep resetting the indirect clock.
            if self._pending_indirect is not None:
                target_id, probe, deadline = self._pending_indirect
                if now >= deadline:
                    self._pending_indirect = None
                    target = self._members.get(target_id)
                    if target is not None and target.status is Status.ALIVE:
                        suspect = replace(target, status=Status.SUSPECT, last_update=now)
                        self._members[target_id] = suspect
                        self._suspect_since[target_id] = now
                        self.suspect_transitions += 1
                        self._enqueue(suspect.to_wire())

            # Escalate last round's silent direct probe to an indirect round.
            if self._pending_direct is not None:
                target_id, probe, deadline = self._pending_direct
                if now >= deadline:
                    self._pending_direct = None
                    target = self._members.get(target_id)
                    if target is not None and target.status is not Status.DEAD:
                        relays = self._pick_members(
                            exclude={self.node.id, target_id}, k=self.config.indirect_probes)
                        for r in relays:
                            out.append((r.addr, {
                                "t": "ping-req",
                                "probe": probe,
                                "target": {"addr": target.addr, "node": target.node.to_wire()},
                                "from": self._self_update(),
                                "updates": self._take_piggyback(),
                            }))
                        self._pending_indirect = (target_id, probe, now + self.config.protocol_period)

            # Suspects past the refutation window are declared Dead.
            for node_id, since in list(self._suspect_since.items()):
                member = self._members.get(node_id)
                if member is None or member.status is not Status.SUSPECT:
                    self._suspect_since.pop(node_id, None)
                    continue
                if now - since >= self.config.suspect_timeout:
                    self._suspect_since.pop(node_id, None)
                    dead = replace(member, status=Status.DEAD, last_update=now)
                    self._members[node_id] = dead
                    self._enqueue(dead.to_wire())
                    events.extend(self._mark_dead_fired(dead))

            # Expire stale relay bookkeeping.
            for probe, (_, _, deadline) in list(self._relays.items()):
                if now >= deadline:
                    del self._relays[probe]

            # Probe one random live member.
            candidates = self._pick_members(exclude={self.node.id}, k=1,
                                            statuses=(Status.ALIVE, Status.SUSPECT))
            if candidates:
                target = candidates[0]
                probe = self._next_probe(target.node.id)
                self._pending_direct = (target.node.id, probe, now + self.config.protocol_period)
                out.append((target.addr, self._ping_frame(probe)))
            elif self._seeds:
                # Lonely node keeps knocking on its seeds so late starters converge.
                out.append((self._rng.choice(self._seeds), self._ping_frame()))

        self._fire(events)
        return out

    def handle_gossip(self, frame: dict, from_addr: str) -> list[tuple[str, dict]]:
        events: list[NodeId] = []
        with self._lock:
            now = self._clock()
            out: list[tuple[str, dict]] = []
            t = frame.get("t")
            if t not in ("ping", "ack", "ping-req"):
                self.malformed_count += 1
                return []
            try:
                sender = frame.get("from")
                if sender:
                    events.extend(self._merge(sender, now))
                for upd in frame.get("updates", ()):
                    events.extend(self._merge(upd, now))

                if t == "ping":
                    out.append((from_addr, {
                        "t": "ack",
                        "probe": frame.get("probe"),
                        "from": self._self_update(),
                        "updates": self._take_piggyback(),
                    }))
                elif t == "ack":
                    probe = frame.get("probe")
                    if probe in self._relays:
                        origin_addr, origin_probe, _ = self._relays.pop(probe)
                        out.append((origin_addr, {
                            "t": "ack",
                            "probe": origin_probe,
                            "from": self._self_update(),
                            "updates": self._take_piggyback(),
                        }))
                    self._note_ack(probe)
                elif t == "ping-req":
                    target = frame["target"]
                    probe = self._next_probe(-1)
                    self._relays[probe] = (from_addr, int(frame["probe"]),
                                           now + 2 * self.config.protocol_period)
                    out.append((str(target["addr"]), self._ping_frame(probe)))
            except (KeyError, TypeError, ValueError):
                self.malformed_count += 1
                return []
        self._fire(events)
        return out

    # -- internals ----------------------------------------------------------

    def _self_update(self) -> dict:
        return self._members[self.node.id].to_wire()

    def _ping_frame(self, probe: int | None = None) -> dict:
        if probe is None:
            probe = self._next_probe(-1)
        return {"t": "ping", "probe": probe, "from": self._self_update(),
                "updates": self._take_piggyback()}

    def _next_probe(self, target_id: int) -> int:
        self._probe_seq += 1
        if target_id >= 0:
            self._inflight[self._probe_seq] = target_id
            if len(self._inflight) > 64:
                for k in sorted(self._inflight)[:-32]:
                    del self._inflight[k]
        return self._probe_seq

    def _note_ack(self, probe) -> None:
        target_id = self._inflight.pop(probe, None) if probe is not None else None
        if self._pending_direct is not None and probe == self._pending_direct[1]:
            self._pending_direct = None
        if self._pending_indirect is not None and probe == self._pending_indirect[1]:
            self._pending_indirect = None
        elif target_id is not None and self._pending_indirect is not None \
                and self._pending_indirect[0] == target_id:
            self._pending_indirect = None

    def _pick_members(self, exclude: set[int], k: int,
                      statuses=(Status.ALIVE,)) -> list[MemberState]:
        pool = [m for m in self._members.values()
                if m.node.id not in exclude and m.status in statuses]
        pool.sort(key=lambda m: m.node.id)
        if len(pool) <= k:
            return pool
        return self._rng.sample(pool, k)

    def _enqueue(self, update: dict) -> None:
        # Retransmission budget grows logarithmically with cluster size.
        budget = 3 * max(1, math.ceil(math.log2(len(self._members) + 2)))
        self._queue.append([update, budget])

    def _take_piggyback(self) -> list[dict]:
        taken = []
        for entry in self._queue[: self.config.piggyback_limit]:
            taken.append(entry[0])
            entry[1] -= 1
        self._queue = [e for e in self._queue if e[1] > 0]
        return taken

    def _merge(self, upd: dict, now: float) -> list[NodeId]:
        """Apply one membership update; returns dead-transition events."""
        incoming = MemberState.from_wire(upd, now)
        nid = incoming.node.id

        if nid == self.node.id:
            if incoming.node.incarnation != self.node.incarnation:
                return []
            me = self._members[nid]
            if incoming.status is not Status.ALIVE and incoming.status_inc >= me.status_inc:
                # Someone suspects us: refute with a higher refutation counter.
                refuted = replace(me, status=Status.ALIVE,
                                  status_inc=incoming.status_inc + 1, last_update=now)
                self._members[nid] = refuted
                self._enqueue(refuted.to_wire())
            return []

        cur = self._members.get(nid)
        if cur is not None:
            if incoming.node.incarnation < cur.node.incarnation:
                return []
            if incoming.node.incarnation == cur.node.incarnation:
                if cur.status is Status.DEAD:
                    return []
                newer = (incoming.status_inc > cur.status_inc or
                         (incoming.status_inc == cur.status_inc and
                          _PRECEDENCE[incoming.status] > _PRECEDENCE[cur.status]))
                if not newer:
                    return []

        if incoming.status is Status.SUSPECT and (cur is None or cur.status is not Status.SUSPECT):
            self.suspect_transitions += 1
        self._members[nid] = incoming
        if incoming.status is not Status.SUSPECT:
            self._suspect_since.pop(nid, None)
        elif nid not in self._suspect_since:
            self._suspect_since[nid] = now
        self._enqueue(incoming.to_wire())
        if incoming.status is Status.DEAD:
            return self._mark_dead_fired(incoming)
        return []

    def _mark_dead_fired(self, member: MemberState) -> list[NodeId]:
        key = (member.node.id, member.node.incarnation)
        if key in self._dead_fired:
            return []
        self._dead_fired.add(key)
        return [member.node]

    def _fire(self, events: list[NodeId]) -> None:
        if not events:
            return
        with self._lock:
            callbacks = list(self._dead_callbacks)
        for node in events:
            log.info("node %s: member %s.%s is dead", self.node.id, node.id, node.incarnation)
            for cb in callbacks:
                try:
                    cb(node)
                except Exception:
                    log.exception("member-dead callback failed")


class SwimRunner:
    """Drives a Swim state machine over a bound UDP socket."""

    def __init__(self, swim: Swim, bind_host: str, bind_port: int):
        self.swim = swim
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind((bind_host, bind_port))
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> None:
        self._send_all(self.swim.join())
        for fn, name in ((self._tick_loop, "swim-tick"), (self._recv_loop, "swim-recv")):
            t = threading.Thread(target=fn, name=f"{name}-{self.swim.node.id}", daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self, leave: bool = True) -> None:
        if leave:
            try:
                self._send_all(self.swim.leave())
            except OSError:
                pass
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        for t in self._threads:
            t.join(timeout=2)

    def _send_all(self, msgs: list[tuple[str, dict]]) -> None:
        for addr, frame in msgs:
            host, _, port = addr.rpartition(":")
            try:
                self._sock.sendto(frames.encode(frame), (host, int(port)))
            except OSError:
                pass

    def _tick_loop(self) -> None:
        period = self.swim.config.protocol_period
        while not self._stop.wait(period):
            try:
                self._send_all(self.swim.protocol_tick())
            except OSError:
                if self._stop.is_set():
                    return

    def _recv_loop(self) -> None:
        while not self._stop.is_set():
            try:
                data, (host, port) = self._sock.recvfrom(frames.MAX_FRAME + 4)
            except OSError:
                return
            try:
                frame = frames.decode(data)
            except frames.FrameError:
                self.swim.malformed_count += 1
                continue
            self._send_all(self.swim.handle_gossip(frame, f"{host}:{port}"))


class SimNetwork:
    """Deterministic in-memory cluster: a shared simulated clock, loss-free or
    selectively muted delivery, and explicit tick stepping."""

    def __init__(self, config: SwimConfig | None = None, seed: int = 0):
        self.config = config or SwimConfig()
        self.now = 0.0
        self.rng = random.Random(seed)
        self.nodes: dict[str, Swim] = {}
        self.muted: set[str] = set()
        self.dropped = 0

    def clock(self) -> float:
        return self.now

    def add_node(self, node_id: int, incarnation: int = 1, seeds: Iterable[str] = ()) -> Swim:
        addr = f"sim:{node_id}"
        swim = Swim(NodeId(node_id, incarnation), addr, self.config, clock=self.clock,
                    rng=random.Random(self.rng.randrange(2**32)), seeds=list(seeds))
        self.nodes[addr] = swim
        self._deliver(swim.join(), addr)
        return swim

    def crash(self, node_id: int) -> None:
        """Silences a node without a graceful leave (simulated power-off)."""
        self.muted.add(f"sim:{node_id}")

    def _deliver(self, msgs: list[tuple[str, dict]], sender_addr: str) -> None:
        self._pump(sender_addr, msgs)

    def step(self, periods: int = 1) -> None:
        """Advance the simulated clock and run one protocol tick on every node."""
        for _ in range(periods):
            self.now += self.config.protocol_period
            for addr, swim in self.nodes.items():
                if addr in self.muted:
                    continue
                self._pump(addr, swim.protocol_tick())

    def run(self, seconds: float) -> None:
        periods = int(round(seconds / self.config.protocol_period))
        self.step(periods)

    def _pump(self, origin: str, msgs: list[tuple[str, dict]]) -> None:
        queue = [(origin, addr, frame) for addr, frame in msgs]
        while queue:
            sender, addr, frame = queue.pop(0)
            if sender in self.muted or addr in self.muted:
                self.dropped += 1
                continue
            target = self.nodes.get(addr)
            if target is None:
                self.dropped += 1
                continue
            replies = target.handle_gossip(frames.decode(frames.encode(frame)), sender)
            queue.extend((addr, a, f) for a, f in replies)
