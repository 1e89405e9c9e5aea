"""Single IPC space: mailboxes, names, anycast failover, pub/sub.

Every process (and every connected client) owns a mailbox on its node.  Sends
address a specific NPID, a registered name or numeric service id (anycast to
the preferred live registrant, or fanout to the whole group), or a topic.
All routing is resolved at the sending node against its local replica of the
name table; there is no broker.

The name table is origin-versioned: each node owns the registrations made by
its local processes and broadcasts them with a per-key version counter.
Receivers keep the newest version per (origin, key) and merge registrant
lists across origins.  A periodic anti-entropy pass re-sends each node's own
entries so dropped broadcasts converge.

Delivery is at-most-once with per-(src, dst) FIFO: a sender-side counter
stamps msg_seq, transport keeps order, and mailbox teardown happens before
DOWN fanout so nothing lands in a dead process's mailbox afterwards.
"""

from __future__ import annotations

import logging
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from . import frames
from .model import (
    NPID,
    BadRequest,
    NodeId,
    NoRoute,
    NoSuchProcess,
    ProcessRecord,
    Unreachable,
    parse_npid,
)

log = logging.getLogger("nefele.messaging")

MAILBOX_CAP = 4096
NAME_RE = re.compile(r"^[a-z0-9._-]{1,128}$")

_CLOSED = object()


@dataclass(frozen=True, slots=True)
class Address:
    """Destination of a send: one process, a service, or a topic."""

    kind: str                   # npid | name | sid | topic | group
    tenant: str
    npid: NPID | None = None
    name: str | None = None
    sid: int | None = None
    mode: str = "any"           # for kind=group: any | all

    @classmethod
    def from_wire(cls, tenant: str, d: dict) -> "Address":
        if "npid" in d:
            return cls("npid", tenant, npid=parse_npid(d["npid"]))
        if "name" in d:
            name = str(d["name"])
            if not NAME_RE.match(name):
                raise BadRequest(f"invalid name: {name!r}")
            mode = str(d.get("mode", "any"))
            if mode == "all":
                return cls("group", tenant, name=name, mode="all")
            return cls("name", tenant, name=name)
        if "service_id" in d:
            sid = int(d["service_id"])
            if sid <= 0:
                raise BadRequest("service id must be > 0")
            return cls("sid", tenant, sid=sid)
        if "topic" in d:
            name = str(d["topic"])
            if not NAME_RE.match(name):
                raise BadRequest(f"invalid topic: {name!r}")
            return cls("topic", tenant, name=name)
        raise BadRequest("destination must give npid, name, service_id, or topic")

    def key(self) -> str:
        if self.kind in ("name", "group"):
            return f"n:{self.name}"
        if self.kind == "sid":
            return f"s:{self.sid}"
        if self.kind == "topic":
            return f"t:{self.name}"
        raise ValueError("npid address has no table key")


def name_key(key: "str | int") -> str:
    """Canonical table key for a service name or numeric service id."""
    if isinstance(key, int):
        if key <= 0:
            raise BadRequest("service id must be > 0")
        return f"s:{key}"
    if not NAME_RE.match(key):
        raise BadRequest(f"invalid name: {key!r}")
    return f"n:{key}"


class Mailbox:
    """Bounded multi-producer single-consumer queue; drops oldest on overflow."""

    def __init__(self, npid: NPID, tenant: str, cap: int = MAILBOX_CAP):
        self.npid = npid
        self.tenant = tenant
        self.cap = cap
        self.dropped = 0
        self._items: deque = deque()
        self._cond = threading.Condition()
        self._closed = False

    def put(self, item: dict) -> None:
        with self._cond:
            if self._closed:
                return
            if len(self._items) >= self.cap:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            self._cond.notify()

    def get(self, timeout: float | None):
        """Oldest item, None on timeout, or _CLOSED once torn down."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                if self._items:
                    return self._items.popleft()
                if self._closed:
                    return _CLOSED
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(remaining)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._items.clear()
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        with self._cond:
            return self._closed

    def stats(self) -> dict:
        with self._cond:
            return {"queued": len(self._items), "dropped": self.dropped}


@dataclass(slots=True)
class _OriginEntry:
    version: int
    registrants: list[tuple[NPID, float]] = field(default_factory=list)


class NameTable:
    """Replicated registry: (tenant, key) -> registrants, merged across origins."""

    def __init__(self, origin: NodeId):
        self.origin = origin
        self._lock = threading.Condition()
        # (tenant, key) -> origin node id -> _OriginEntry
        self._entries: dict[tuple[str, str], dict[int, _OriginEntry]] = {}

    def _own(self, tenant: str, key: str) -> _OriginEntry:
        per_origin = self._entries.setdefault((tenant, key), {})
        entry = per_origin.get(self.origin.id)
        if entry is None:
            entry = per_origin[self.origin.id] = _OriginEntry(version=0)
        return entry

    def _update_body(self, tenant: str, key: str, entry: _OriginEntry) -> dict:
        return {"origin": self.origin.id, "tenant": tenant, "key": key,
                "version": entry.version,
                "registrants": [[str(npid), ts] for npid, ts in entry.registrants]}

    def register_local(self, tenant: str, key: str, npid: NPID,
                       ts: float | None = None) -> dict:
        """Add a local registrant; returns the broadcast body. Idempotent."""
        with self._lock:
            entry = self._own(tenant, key)
            if not any(existing == npid for existing, _ in entry.registrants):
                entry.registrants.append((npid, ts if ts is not None else time.time()))
                entry.version += 1
            body = self._update_body(tenant, key, entry)
            self._lock.notify_all()
            return body

    def unregister_local(self, tenant: str, key: str, npid: NPID) -> dict | None:
        with self._lock:
            per_origin = self._entries.get((tenant, key))
            entry = per_origin.get(self.origin.id) if per_origin else None
            if entry is None:
                return None
            kept = [(n, ts) for n, ts in entry.registrants if n != npid]
            if len(kept) == len(entry.registrants):
                return None
            entry.registrants = kept
            entry.version += 1
            self._lock.notify_all()
            return self._update_body(tenant, key, entry)

    def revoke_npid(self, npid: NPID) -> list[dict]:
        """Remove a terminated local process everywhere; returns broadcasts."""
        bodies = []
        with self._lock:
            for (tenant, key), per_origin in self._entries.items():
                entry = per_origin.get(self.origin.id)
                if entry is None:
                    continue
                kept = [(n, ts) for n, ts in entry.registrants if n != npid]
                if len(kept) != len(entry.registrants):
                    entry.registrants = kept
                    entry.version += 1
                    bodies.append(self._update_body(tenant, key, entry))
            if bodies:
                self._lock.notify_all()
        return bodies

    def apply_update(self, body: dict) -> bool:
        """Merge a remote origin's entry; newest version wins."""
        origin = int(body["origin"])
        if origin == self.origin.id:
            return False
        tenant, key = str(body["tenant"]), str(body["key"])
        version = int(body["version"])
        registrants = [(parse_npid(n), float(ts)) for n, ts in body["registrants"]]
        with self._lock:
            per_origin = self._entries.setdefault((tenant, key), {})
            entry = per_origin.get(origin)
            if entry is not None and entry.version >= version:
                return False
            per_origin[origin] = _OriginEntry(version=version, registrants=registrants)
            self._lock.notify_all()
            return True

    def own_entries(self) -> list[dict]:
        """This node's slice of the table, for anti-entropy rebroadcast."""
        with self._lock:
            return [self._update_body(tenant, key, entry)
                    for (tenant, key), per_origin in self._entries.items()
                    for oid, entry in per_origin.items() if oid == self.origin.id]

    def purge_node(self, node_id: int) -> None:
        """Drop all registrants owned by a dead node (its origin included)."""
        with self._lock:
            changed = False
            for per_origin in self._entries.values():
                if node_id in per_origin:
                    del per_origin[node_id]
                    changed = True
                for entry in per_origin.values():
                    kept = [(n, ts) for n, ts in entry.registrants
                            if n.node.id != node_id]
                    if len(kept) != len(entry.registrants):
                        entry.registrants = kept
                        changed = True
            if changed:
                self._lock.notify_all()

    def resolve(self, tenant: str, key: str) -> list[tuple[NPID, float]]:
        """Merged registrants, preferred first: (registered_at, NPID) order."""
        with self._lock:
            per_origin = self._entries.get((tenant, key), {})
            merged = [item for entry in per_origin.values()
                      for item in entry.registrants]
        merged.sort(key=lambda item: (item[1], item[0]))
        return merged

    def wait_for(self, tenant: str, key: str, timeout: float | None,
                 accept: Callable[[NPID], bool]) -> NPID | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            while True:
                per_origin = self._entries.get((tenant, key), {})
                merged = [item for entry in per_origin.values()
                          for item in entry.registrants]
                merged.sort(key=lambda item: (item[1], item[0]))
                for npid, _ in merged:
                    if accept(npid):
                        return npid
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._lock.wait(remaining)

    def list_entries(self, tenant: str | None = None) -> list[dict]:
        out = []
        with self._lock:
            keys = sorted(self._entries)
        for t, key in keys:
            if tenant is not None and t != tenant:
                continue
            registrants = self.resolve(t, key)
            if not registrants:
                continue
            out.append({"tenant": t, "key": key,
                        "registrants": [{"npid": str(n), "registered_at": ts}
                                        for n, ts in registrants]})
        return out


class MessagingService:
    """Routing, mailboxes, and monitor bookkeeping for one node.

    The agent injects `route(node_id, frame)` for one-way delivery to a peer
    (raising Unreachable when the peer is not alive), `broadcast(frame)` for
    best-effort fanout to all alive peers, and `peer_alive(node_id)` backed
    by the membership view.
    """

    def __init__(self, node: NodeId,
                 route: Callable[[int, dict], None],
                 broadcast: Callable[[dict], None],
                 peer_alive: Callable[[int], bool]):
        self.node = node
        self._route = route
        self._broadcast = broadcast
        self._peer_alive = peer_alive
        self.table = NameTable(node)
        self._lock = threading.Lock()
        self._mailboxes: dict[NPID, Mailbox] = {}
        self._seq: dict[tuple[NPID, NPID], int] = {}
        # Remote targets monitored by local watchers, for nodedown DOWNs.
        self._remote_watch: dict[NPID, set[NPID]] = {}

    # -- mailbox lifecycle -------------------------------------------------

    def create_mailbox(self, npid: NPID, tenant: str) -> Mailbox:
        with self._lock:
            box = self._mailboxes.get(npid)
            if box is None or box.closed:
                box = Mailbox(npid, tenant)
                self._mailboxes[npid] = box
            return box

    def mailbox(self, npid: NPID) -> Mailbox | None:
        with self._lock:
            return self._mailboxes.get(npid)

    def close_mailbox(self, npid: NPID) -> None:
        with self._lock:
            box = self._mailboxes.pop(npid, None)
        if box:
            box.close()

    def stats(self, npid: NPID) -> dict | None:
        box = self.mailbox(npid)
        return box.stats() if box else None

    # -- registration ------------------------------------------------------

    def register(self, npid: NPID, tenant: str, key: "str | int") -> None:
        box = self.mailbox(npid)
        if box is None or box.closed:
            raise NoSuchProcess(f"{npid} has no live mailbox")
        body = self.table.register_local(tenant, name_key(key), npid)
        self._broadcast({"t": "name-update", **body})

    def unregister(self, npid: NPID, tenant: str, key: "str | int") -> None:
        body = self.table.unregister_local(tenant, name_key(key), npid)
        if body:
            self._broadcast({"t": "name-update", **body})

    def subscribe(self, npid: NPID, tenant: str, topic: str) -> None:
        box = self.mailbox(npid)
        if box is None or box.closed:
            raise NoSuchProcess(f"{npid} has no live mailbox")
        addr = Address.from_wire(tenant, {"topic": topic})
        body = self.table.register_local(tenant, addr.key(), npid)
        self._broadcast({"t": "sub", **body})

    def unsubscribe(self, npid: NPID, tenant: str, topic: str) -> None:
        addr = Address.from_wire(tenant, {"topic": topic})
        body = self.table.unregister_local(tenant, addr.key(), npid)
        if body:
            self._broadcast({"t": "unsub", **body})

    def resolve(self, tenant: str, key: "str | int") -> list[NPID]:
        return [npid for npid, _ in self.table.resolve(tenant, name_key(key))]

    def wait_for(self, tenant: str, key: "str | int",
                 timeout: float | None) -> NPID | None:
        return self.table.wait_for(tenant, name_key(key), timeout, self._routable)

    def antientropy_tick(self) -> None:
        """Re-broadcast our own table slice; dropped updates converge."""
        entries = self.table.own_entries()
        if entries:
            self._broadcast({"t": "name-antientropy",
                             "origin": self.node.id, "entries": entries})

    # -- sending -----------------------------------------------------------

    def _next_seq(self, src: NPID, dst: NPID) -> int:
        with self._lock:
            n = self._seq.get((src, dst), 0) + 1
            self._seq[(src, dst)] = n
            return n

    def _routable(self, npid: NPID) -> bool:
        """Cheap liveness gate used for anycast preference."""
        if npid.node.id == self.node.id:
            box = self.mailbox(npid)
            return box is not None and not box.closed
        return self._peer_alive(npid.node.id)

    def send(self, src: NPID, tenant: str, dst: Address, payload: bytes) -> None:
        if len(payload) > frames.MAX_PAYLOAD:
            raise BadRequest(f"payload exceeds {frames.MAX_PAYLOAD} bytes")
        if dst.kind == "npid":
            self._send_one(src, tenant, dst.npid, payload, strict=True)
            return
        if dst.kind == "topic":
            self.publish(src, tenant, dst.name, payload)
            return
        registrants = self.table.resolve(tenant, dst.key())
        live = [npid for npid, _ in registrants if self._routable(npid)]
        if not live:
            raise NoRoute(f"no live registrant for {dst.key()}")
        if dst.kind == "group" and dst.mode == "all":
            for npid in live:
                self._send_one(src, tenant, npid, payload, strict=False)
        else:
            self._send_one(src, tenant, live[0], payload, strict=True)

    def publish(self, src: NPID, tenant: str, topic: str, payload: bytes) -> int:
        """Fire-and-forget fanout to current subscribers; returns count tried."""
        if len(payload) > frames.MAX_PAYLOAD:
            raise BadRequest(f"payload exceeds {frames.MAX_PAYLOAD} bytes")
        addr = Address.from_wire(tenant, {"topic": topic})
        subscribers = [npid for npid, _ in self.table.resolve(tenant, addr.key())]
        for npid in subscribers:
            item = {"t": "pub", "tenant": tenant, "topic": topic,
                    "src": str(src), "dst": str(npid),
                    "seq": self._next_seq(src, npid),
                    "payload": frames.b64(payload)}
            self._dispatch(npid, item, strict=False)
        return len(subscribers)

    def _send_one(self, src: NPID, tenant: str, dst: NPID, payload: bytes,
                  strict: bool) -> None:
        frame = {"t": "msg", "tenant": tenant, "src": str(src), "dst": str(dst),
                 "seq": self._next_seq(src, dst), "payload": frames.b64(payload)}
        self._dispatch(dst, frame, strict)

    def _dispatch(self, dst: NPID, frame: dict, strict: bool) -> None:
        if dst.node.id == self.node.id:
            delivered = self._deliver_local(dst, frame)
            if not delivered and strict:
                raise NoSuchProcess(str(dst))
            return
        try:
            self._route(dst.node.id, frame)
        except Unreachable:
            if strict:
                raise
        except Exception:
            if strict:
                raise Unreachable(f"node {dst.node.id} unreachable") from None

    def _deliver_local(self, dst: NPID, frame: dict) -> bool:
        box = self.mailbox(dst)
        if box is None or box.closed or box.tenant != frame.get("tenant"):
            return False
        item = {"kind": "msg", "src": frame["src"], "seq": frame["seq"],
                "payload": frame["payload"]}
        if frame.get("t") == "pub":
            item["topic"] = frame["topic"]
        box.put(item)
        return True

    def recv(self, npid: NPID, timeout: float | None):
        """Oldest mailbox item, None on timeout; NoSuchProcess once closed."""
        box = self.mailbox(npid)
        if box is None:
            raise NoSuchProcess(str(npid))
        item = box.get(timeout)
        if item is _CLOSED:
            raise NoSuchProcess(str(npid))
        return item

    # -- monitors and DOWN -------------------------------------------------

    def watch_remote(self, watcher: NPID, target: NPID) -> None:
        """Record that a local watcher monitors a remote target (nodedown)."""
        with self._lock:
            self._remote_watch.setdefault(target, set()).add(watcher)

    def deliver_down(self, watcher: NPID, target: NPID, reason: str,
                     exit_status: int | None = None, exit_signal: int | None = None,
                     node_id: int | None = None) -> None:
        item = {"kind": "down", "npid": str(target), "reason": reason,
                "exit_status": exit_status, "exit_signal": exit_signal,
                "node": node_id if node_id is not None else target.node.id}
        if watcher.node.id == self.node.id:
            box = self.mailbox(watcher)
            if box is not None:
                box.put(item)
            return
        frame = {"t": "down", "watcher": str(watcher), **item}
        frame.pop("kind")
        try:
            self._route(watcher.node.id, frame)
        except Exception:
            pass

    def drop_endpoint(self, npid: NPID) -> None:
        """Retire an endpoint quietly: mailbox closed, names revoked
        everywhere.  Used for client sessions that have no process record."""
        self.close_mailbox(npid)
        for body in self.table.revoke_npid(npid):
            self._broadcast({"t": "name-update", **body})

    def on_process_terminal(self, record: ProcessRecord) -> None:
        """Exit hook for local processes. Order matters: the mailbox dies
        first so no message can be delivered after any watcher saw the DOWN."""
        self.drop_endpoint(record.npid)
        with self._lock:
            self._remote_watch.pop(record.npid, None)
        reason = "kill" if record.state.value == "killed" else "exit"
        for watcher in sorted(record.monitors):
            self.deliver_down(watcher, record.npid, reason,
                              exit_status=record.exit_status,
                              exit_signal=record.exit_signal,
                              node_id=self.node.id)

    def on_member_dead(self, node: NodeId) -> None:
        """Membership Dead event: purge its names, emit nodedown DOWNs."""
        self.table.purge_node(node.id)
        with self._lock:
            affected = [(target, watchers) for target, watchers
                        in self._remote_watch.items() if target.node.id == node.id]
            for target, _ in affected:
                del self._remote_watch[target]
        for target, watchers in affected:
            for watcher in sorted(watchers):
                self.deliver_down(watcher, target, "nodedown", node_id=node.id)

    # -- inbound frames ------------------------------------------------------

    def handle_frame(self, frame: dict) -> None:
        t = frame.get("t")
        if t in ("msg", "pub"):
            try:
                dst = parse_npid(frame["dst"])
            except Exception:
                return
            self._deliver_local(dst, frame)
        elif t in ("name-update", "sub", "unsub"):
            try:
                self.table.apply_update(frame)
            except (KeyError, TypeError, ValueError):
                log.warning("malformed name update dropped")
        elif t == "name-antientropy":
            for body in frame.get("entries", ()):
                try:
                    self.table.apply_update(body)
                except (KeyError, TypeError, ValueError):
                    continue
        elif t == "down":
            try:
                watcher = parse_npid(frame["watcher"])
            except Exception:
                return
            box = self.mailbox(watcher)
            if box is not None:
                box.put({"kind": "down", "npid": frame.get("npid"),
                         "reason": frame.get("reason"),
                         "exit_status": frame.get("exit_status"),
                         "exit_signal": frame.get("exit_signal"),
                         "node": frame.get("node")})
