"""Per-node composition root.

One NodeAgent owns every subsystem on a node: SWIM membership over UDP, the
TCP peer transport, the admission pipeline, the process runtime, messaging,
the resource sampler, the local control socket, and the management HTTP API.
All cross-subsystem glue lives here so each subsystem stays testable on its
own; every external entry point (peer frame, control frame, HTTP request)
funnels into the same internal operations.
"""

from __future__ import annotations

import logging
import os
import queue
import threading
import time
import uuid
from pathlib import Path
from typing import Iterable

from .config import AgentConfig, bump_incarnation
from .membership import Status, Swim, SwimRunner
from .messaging import MessagingService
from .model import (
    NPID,
    BadRequest,
    NefeleError,
    NodeId,
    NoSuchProcess,
    ProcessRecord,
    ResourceVector,
    SpawnRequest,
    TaskSpec,
    Unreachable,
    error_from_code,
    parse_npid,
)
from .peers import PeerClient, PeerServer
from .placement import AdmissionPipeline, LocalResources
from .runtime import LogRecord, ProcessRuntime

log = logging.getLogger("nefele.agent")

ANTIENTROPY_PERIOD = 1.0
LOG_BATCH_WINDOW = 0.05


def _tcp_addr(addr: str) -> tuple:
    host, _, port = addr.rpartition(":")
    return (host, int(port))


class _Transport:
    """Pipeline-facing transport: local frames short-circuit the network."""

    def __init__(self, agent: "NodeAgent"):
        self._agent = agent

    def request(self, addr: str, frame: dict, timeout: float) -> dict:
        if addr == self._agent.swim.addr:
            reply = self._agent.handle_peer_frame(dict(frame), ("local", 0))
            return reply if reply is not None else {"t": "ok"}
        return self._agent.peer_client.request(_tcp_addr(addr), frame,
                                               timeout=timeout)

    def send(self, addr: str, frame: dict) -> None:
        if addr == self._agent.swim.addr:
            self._agent.handle_peer_frame(dict(frame), ("local", 0))
            return
        self._agent.peer_client.send(_tcp_addr(addr), frame)


class NodeAgent:
    def __init__(self, config: AgentConfig):
        self.config = config.resolved()
        Path(self.config.data_dir).mkdir(parents=True, exist_ok=True)
        incarnation = bump_incarnation(self.config.data_dir)
        self.node = NodeId(self.config.node_id, incarnation)
        self.capacity = self.config.capacity

        self.runtime = ProcessRuntime(self.node,
                                      self.config.control_socket_path)
        self.runtime.on_terminal(self._process_terminal)
        self.resources = LocalResources(
            self.node, self.capacity,
            reservation_ttl=self.config.placement.reservation_ttl,
            w_strand=self.config.placement.w_strand,
            w_over=self.config.placement.w_over)
        self.swim = Swim(self.node, addr=self.config.gossip_addr,
                         config=self.config.swim, seeds=self.config.seeds)
        self.swim.on_member_dead(self._member_dead)
        self.peer_client = PeerClient(
            request_timeout=self.config.placement.commit_timeout)
        self.messaging = MessagingService(self.node, route=self._route,
                                          broadcast=self._broadcast,
                                          peer_alive=self._peer_alive)
        self.pipeline = AdmissionPipeline(self.node, self._placement_members,
                                          _Transport(self),
                                          config=self.config.placement)

        self.util_ewma = 0.0
        self.util_var_ewma = 0.0
        self._ephemeral_seq = 0

        # Remote log-follow plumbing, both directions.
        self._follow_lock = threading.Lock()
        self._inbound_follows: dict[str, queue.SimpleQueue] = {}
        self._outbound_follows: dict[str, threading.Event] = {}

        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._swim_runner: SwimRunner | None = None
        self._peer_server: PeerServer | None = None
        self._control = None
        self._http = None

    # -- lifecycle -----------------------------------------------------------

    def start(self, with_http: bool = True) -> None:
        host, port = self.config.bind_host, self.config.port
        try:
            self._peer_server = PeerServer(host, port, self.handle_peer_frame,
                                           workers=self.config.placement.workers)
        except OSError as e:
            raise RuntimeError(f"cannot bind tcp {host}:{port}: {e}") from e
        try:
            self._swim_runner = SwimRunner(self.swim, host, port)
        except OSError as e:
            self._peer_server.stop()
            raise RuntimeError(f"cannot bind udp {host}:{port}: {e}") from e
        self._peer_server.start()
        self._swim_runner.start()

        from .control import ControlServer
        self._control = ControlServer(self)
        self._control.start()

        if with_http:
            from .httpapi import ManagementServer
            self._http = ManagementServer(self, host, self.config.http_port)
            self._http.start()

        for fn, name in ((self._sampler_loop, "sampler"),
                         (self._antientropy_loop, "antientropy")):
            t = threading.Thread(target=fn, name=f"{name}-{self.node.id}",
                                 daemon=True)
            t.start()
            self._threads.append(t)
        log.info("node %s.%s up at %s (http %s)", self.node.id,
                 self.node.incarnation, self.swim.addr,
                 self.config.http_port if with_http else "off")

    def stop(self) -> None:
        if self._stop.is_set():
            return
        self._stop.set()
        killed = self.runtime.kill_all(9)
        if killed:
            deadline = time.monotonic() + 3
            while (time.monotonic() < deadline
                   and self.runtime.list_local(include_terminal=False)):
                time.sleep(0.02)
        if self._http:
            self._http.stop()
        if self._control:
            self._control.stop()
        if self._swim_runner:
            self._swim_runner.stop(leave=True)
        self.pipeline.shutdown()
        if self._peer_server:
            self._peer_server.stop()
        self.peer_client.close()
        self.runtime.shutdown()

    @property
    def http_port(self) -> int:
        return self._http.port if self._http else 0

    # -- membership glue -------------------------------------------------------

    def _members(self, statuses=(Status.ALIVE,)) -> list:
        return [m for m in self.swim.members() if m.status in statuses]

    def _placement_members(self) -> list[tuple[NodeId, str]]:
        return [(m.node, m.addr) for m in self._members()]

    def _member_addr(self, node_id: int) -> str | None:
        m = self.swim.get_member(node_id)
        if m is None or m.status is Status.DEAD:
            return None
        return m.addr

    def _peer_alive(self, node_id: int) -> bool:
        return self._member_addr(node_id) is not None

    def _route(self, node_id: int, frame: dict) -> None:
        if node_id == self.node.id:
            self.messaging.handle_frame(frame)
            return
        addr = self._member_addr(node_id)
        if addr is None:
            raise Unreachable(f"node {node_id} not alive")
        self.peer_client.send(_tcp_addr(addr), frame)

    def _broadcast(self, frame: dict) -> None:
        for m in self._members((Status.ALIVE, Status.SUSPECT)):
            if m.node.id == self.node.id:
                continue
            try:
                self.peer_client.send(_tcp_addr(m.addr), frame)
            except Unreachable:
                continue

    def _member_dead(self, node: NodeId) -> None:
        addr = None
        m = self.swim.get_member(node.id)
        if m is not None:
            addr = m.addr
        log.info("node %s: member %s declared dead", self.node.id, node.id)
        self.messaging.on_member_dead(node)
        if addr:
            self.peer_client.drop(_tcp_addr(addr))

    def _process_terminal(self, record: ProcessRecord) -> None:
        self.resources.deallocate(record.spec.resources)
        self.messaging.on_process_terminal(record)

    # -- sampling ---------------------------------------------------------------

    def _sample_once(self) -> None:
        alloc = self.resources.allocated
        u = min(1.0, alloc.cpu / self.capacity.cpu) if self.capacity.cpu else 0.0
        alpha = self.config.ewma_alpha
        diff = u - self.util_ewma
        incr = alpha * diff
        self.util_ewma += incr
        self.util_var_ewma = (1 - alpha) * (self.util_var_ewma + diff * incr)

    def _sampler_loop(self) -> None:
        while not self._stop.wait(self.config.sample_period):
            self._sample_once()

    def _antientropy_loop(self) -> None:
        while not self._stop.wait(ANTIENTROPY_PERIOD):
            try:
                self.messaging.antientropy_tick()
            except Exception:
                log.exception("anti-entropy pass failed")

    # -- peer frame dispatch ------------------------------------------------------

    def handle_peer_frame(self, frame: dict, addr: tuple) -> dict | None:
        """Single dispatcher for TCP peers and local short-circuit calls.

        Never raises: request errors come back as {"t": "error"} frames so
        the local path behaves exactly like the network path.
        """
        t = frame.get("t")
        if t in ("msg", "pub", "name-update", "sub", "unsub",
                 "name-antientropy", "down"):
            self.messaging.handle_frame(frame)
            return None
        if t == "log-rec":
            self._on_log_rec(frame)
            return None
        if t == "log-unsub":
            self._stop_outbound_follow(frame.get("sub", ""))
            return None
        try:
            return self._peer_request(t, frame)
        except NefeleError as e:
            return {"t": "error", "code": e.code, "error": str(e)}
        except Exception as e:
            log.exception("peer frame %r failed", t)
            return {"t": "error", "code": "InternalError", "error": str(e)}

    def _peer_request(self, t: str, frame: dict) -> dict:
        if t == "feas-req":
            offer = self.resources.feasibility_check(
                ResourceVector.from_wire(frame["resources"]),
                int(frame["n_wanted"]), util_var_ewma=self.util_var_ewma)
            if offer is None:
                return {"t": "offer", "max_tasks": 0}
            return offer.to_wire()
        if t == "commit":
            ok = self.resources.commit(
                frame["reservation_id"],
                ResourceVector.from_wire(frame["resources"]))
            return {"t": "commit", "ok": ok}
        if t == "release":
            if "deallocate" in frame:
                self.resources.deallocate(
                    ResourceVector.from_wire(frame["deallocate"]))
            else:
                self.resources.release(str(frame.get("reservation_id", "")))
            return {"t": "release", "ok": True}
        if t == "deploy":
            return self._handle_deploy(frame)
        if t == "kill":
            self.runtime.signal(parse_npid(frame["npid"]),
                                int(frame.get("signal", 9)))
            return {"t": "ok"}
        if t == "monitor":
            snap = self.runtime.add_monitor(parse_npid(frame["watcher"]),
                                            parse_npid(frame["npid"]))
            return {"t": "monitor", "ok": True, "noproc": snap is None}
        if t == "ps":
            records = [r.to_wire() for r in
                       self.runtime.list_local(frame.get("tenant"))]
            return {"t": "ps", "records": records}
        if t == "logs":
            return self._handle_logs_request(frame)
        raise BadRequest(f"unknown frame type {t!r}")

    def _handle_deploy(self, frame: dict) -> dict:
        tenant = str(frame.get("tenant", "default"))
        results = []
        for item in frame["tasks"]:
            spec = TaskSpec.from_wire(item["spec"])
            env = self.runtime.make_envelope(spec)
            record = self.runtime.spawn_local(env, tenant)
            ok = self.runtime.wait_running(record.npid)
            if ok:
                if spec.name:
                    self._register_named(record.npid, tenant, spec.name)
                results.append({"index": int(item["index"]), "ok": True,
                                "npid": str(record.npid)})
            else:
                final = self.runtime.get(record.npid)
                detail = "spawn failed"
                if final is not None and final.state.terminal:
                    detail = (f"exited with status {final.exit_status}"
                              if final.exit_status is not None
                              else f"killed by signal {final.exit_signal}")
                elif final is not None:
                    detail = "did not reach running before timeout"
                results.append({"index": int(item["index"]), "ok": False,
                                "error": detail})
        return {"t": "deploy-ack", "request_id": frame.get("request_id", ""),
                "results": results}

    def _register_named(self, npid: NPID, tenant: str, name: str) -> None:
        """Bind a task's declared service name once it is running.

        The exit hook revokes every binding for the NPID, so a process that
        dies mid-registration must not end up registered after the hook has
        already run; re-checking the record afterwards closes that window.
        """
        rec = self.runtime.get(npid)
        if rec is None or rec.state.terminal:
            return
        self.messaging.create_mailbox(npid, tenant)
        try:
            self.messaging.register(npid, tenant, name)
        except NefeleError:
            return
        rec = self.runtime.get(npid)
        if rec is None or rec.state.terminal:
            self.messaging.drop_endpoint(npid)

    # -- spawn/kill/ps facade (control socket + HTTP share these) ---------------

    def submit_spawn(self, req: SpawnRequest) -> str:
        return self.pipeline.submit(req)

    def build_request(self, tenant: str, tasks: Iterable[TaskSpec],
                      request_id: str | None = None) -> SpawnRequest:
        return SpawnRequest(request_id=request_id or uuid.uuid4().hex,
                            tenant=tenant, tasks=tuple(tasks),
                            submitted_at=time.time())

    def kill_npid(self, npid: NPID, signo: int = 9) -> None:
        if npid.node.id == self.node.id:
            self.runtime.signal(npid, signo)
            return
        addr = self._member_addr(npid.node.id)
        if addr is None:
            member = self.swim.get_member(npid.node.id)
            if member is None:
                raise NoSuchProcess(str(npid))
            raise Unreachable(f"owner node {npid.node.id} is dead")
        reply = self.peer_client.request(
            _tcp_addr(addr), {"t": "kill", "npid": str(npid), "signal": signo})
        if reply.get("t") == "error":
            raise error_from_code(reply.get("code", "InternalError"),
                                  reply.get("error", ""))

    def killall(self, pattern: str, signo: int = 9,
                tenant: str | None = None) -> int:
        """Signal every live process whose executable basename starts with
        `pattern`; returns how many were signaled."""
        records, _ = self.list_processes("cluster", tenant)
        count = 0
        for rec in records:
            if rec["state"] in ("exited", "killed"):
                continue
            basename = os.path.basename(rec["spec"]["executable"])
            if not basename.startswith(pattern):
                continue
            try:
                self.kill_npid(parse_npid(rec["npid"]), signo)
                count += 1
            except NefeleError:
                continue
        return count

    def list_processes(self, scope: str = "cluster",
                       tenant: str | None = None) -> tuple[list[dict], bool]:
        """Process records plus a flag for partial (some member unreachable)."""
        records = [r.to_wire() for r in self.runtime.list_local(tenant)]
        if scope == "local":
            return records, False
        partial = False
        frame = {"t": "ps"}
        if tenant is not None:
            frame["tenant"] = tenant
        for m in self._members():
            if m.node.id == self.node.id:
                continue
            try:
                reply = self.peer_client.request(_tcp_addr(m.addr), frame,
                                                 timeout=2.0)
                records.extend(reply.get("records", []))
            except Unreachable:
                partial = True
        records.sort(key=lambda r: r["npid"])
        return records, partial

    def monitor(self, watcher: NPID, target: NPID) -> None:
        """Watch target from a local watcher; immediate DOWN when it cannot
        ever terminate normally (unknown, stale incarnation, dead node)."""
        if target.node.id == self.node.id:
            snap = self.runtime.add_monitor(watcher, target)
            if snap is None:
                self.messaging.deliver_down(watcher, target, "noproc")
            return
        member = self.swim.get_member(target.node.id)
        if member is None or member.node.incarnation != target.node.incarnation:
            self.messaging.deliver_down(watcher, target, "noproc")
            return
        if member.status is Status.DEAD:
            self.messaging.deliver_down(watcher, target, "nodedown",
                                        node_id=target.node.id)
            return
        try:
            reply = self.peer_client.request(
                _tcp_addr(member.addr),
                {"t": "monitor", "watcher": str(watcher), "npid": str(target)})
        except Unreachable:
            self.messaging.deliver_down(watcher, target, "nodedown",
                                        node_id=target.node.id)
            return
        if reply.get("noproc"):
            self.messaging.deliver_down(watcher, target, "noproc")
        else:
            self.messaging.watch_remote(watcher, target)

    def nodes_wire(self) -> list[dict]:
        return [m.to_wire() for m in self.swim.members()]

    def names_wire(self, tenant: str | None = None) -> list[dict]:
        return self.messaging.table.list_entries(tenant)

    def alloc_client_npid(self) -> NPID:
        return self.runtime.next_npid()

    # -- log streaming -------------------------------------------------------------

    def tail_logs(self, npid: NPID, last_n: int | None = None) -> list[dict]:
        if npid.node.id == self.node.id:
            return [r.to_wire() for r in self.runtime.tail_logs(npid, last_n)]
        addr = self._member_addr(npid.node.id)
        if addr is None:
            return []
        frame = {"t": "logs", "npid": str(npid)}
        if last_n is not None:
            frame["last_n"] = last_n
        try:
            reply = self.peer_client.request(_tcp_addr(addr), frame, timeout=2.0)
        except Unreachable:
            return []
        return reply.get("records", [])

    def follow_logs(self, npid: NPID, last_n: int | None = None):
        """(snapshot, live queue, cancel). The queue yields lists of LogRecord
        wire dicts and a final None when the streams close."""
        if npid.node.id == self.node.id:
            snap, out, cancel = self._local_log_stream(npid)
            records = [r.to_wire() for r in snap]
            if last_n is not None:
                records = records[max(0, len(records) - last_n):]
            return records, out, cancel
        return self._remote_log_stream(npid, last_n)

    def _local_log_stream(self, npid: NPID):
        out: queue.SimpleQueue = queue.SimpleQueue()
        stop = threading.Event()
        followed = []
        snapshot: list[LogRecord] = []
        for stream in ("stdout", "stderr"):
            buf = self.runtime.log_buffer(npid, stream)
            if buf is None:
                continue
            snap, q = buf.follow()
            snapshot.extend(snap)
            followed.append((buf, q))
        snapshot.sort(key=lambda r: (r.ts, r.seq))
        state = {"open": len(followed)}
        state_lock = threading.Lock()
        if not followed:
            out.put(None)

        def pump(buf, q):
            while not stop.is_set():
                try:
                    item = q.get(timeout=0.25)
                except queue.Empty:
                    continue
                if item is None:
                    break
                out.put([item.to_wire()])
            buf.unfollow(q)
            with state_lock:
                state["open"] -= 1
                if state["open"] == 0:
                    out.put(None)

        for buf, q in followed:
            threading.Thread(target=pump, args=(buf, q), daemon=True).start()
        return snapshot, out, stop.set

    def _remote_log_stream(self, npid: NPID, last_n: int | None):
        addr = self._member_addr(npid.node.id)
        out: queue.SimpleQueue = queue.SimpleQueue()
        if addr is None:
            out.put(None)
            return [], out, lambda: None
        sub = uuid.uuid4().hex
        with self._follow_lock:
            self._inbound_follows[sub] = out
        frame = {"t": "logs", "npid": str(npid), "follow": True,
                 "sub": sub, "from": self.node.id}
        if last_n is not None:
            frame["last_n"] = last_n
        try:
            reply = self.peer_client.request(_tcp_addr(addr), frame, timeout=2.0)
        except Unreachable:
            with self._follow_lock:
                self._inbound_follows.pop(sub, None)
            out.put(None)
            return [], out, lambda: None

        def cancel():
            with self._follow_lock:
                self._inbound_follows.pop(sub, None)
            try:
                self.peer_client.send(_tcp_addr(addr),
                                      {"t": "log-unsub", "sub": sub})
            except Unreachable:
                pass

        return reply.get("records", []), out, cancel

    def _on_log_rec(self, frame: dict) -> None:
        with self._follow_lock:
            out = self._inbound_follows.get(frame.get("sub", ""))
        if out is None:
            return
        if frame.get("done"):
            with self._follow_lock:
                self._inbound_follows.pop(frame.get("sub", ""), None)
            out.put(None)
        else:
            out.put(frame.get("records", []))

    def _handle_logs_request(self, frame: dict) -> dict:
        npid = parse_npid(frame["npid"])
        last_n = frame.get("last_n")
        if not frame.get("follow"):
            records = self.runtime.tail_logs(
                npid, int(last_n) if last_n is not None else None)
            return {"t": "logs", "records": [r.to_wire() for r in records]}
        sub = str(frame.get("sub", ""))
        requester = int(frame["from"])
        snap, live, cancel = self._local_log_stream(npid)
        records = [r.to_wire() for r in snap]
        if last_n is not None:
            records = records[max(0, len(records) - int(last_n)):]
        stop = threading.Event()
        with self._follow_lock:
            self._outbound_follows[sub] = stop

        def relay():
            try:
                while not stop.is_set():
                    try:
                        batch = live.get(timeout=0.25)
                    except queue.Empty:
                        continue
                    done = batch is None
                    msg = {"t": "log-rec", "sub": sub, "done": done}
                    if not done:
                        msg["records"] = batch
                    try:
                        self._route(requester, msg)
                    except Unreachable:
                        break
                    if done:
                        break
            finally:
                cancel()
                with self._follow_lock:
                    self._outbound_follows.pop(sub, None)

        threading.Thread(target=relay, name=f"logrelay-{sub[:8]}",
                         daemon=True).start()
        return {"t": "logs", "records": records, "sub": sub}

    def _stop_outbound_follow(self, sub: str) -> None:
        with self._follow_lock:
            stop = self._outbound_follows.get(sub)
        if stop is not None:
            stop.set()
