"""Local control socket: the node's door for SDK processes and tools.

A Unix stream socket at config.control_socket_path carries the common frame
format.  Each connection is one session.  SDK processes identify themselves
with hello{token} (the spawn handshake); anonymous clients (the CLI, tests)
send hello{} and get an ephemeral NPID with a real mailbox, torn down when
the connection closes.  A session serves one frame at a time; recv blocks
the connection by design.
"""

from __future__ import annotations

import logging
import os
import select
import socket
import threading
import time
import uuid

from . import frames
from .messaging import Address
from .model import (
    NPID,
    BadRequest,
    NefeleError,
    ResourceVector,
    TaskSpec,
    parse_npid,
)

log = logging.getLogger("nefele.control")

DEFAULT_TASK_CPU = 100          # millicores
DEFAULT_TASK_MEM = 64 << 20     # bytes
SPAWN_WAIT_SLACK = 10.0


class ControlServer:
    def __init__(self, agent):
        self.agent = agent
        self.path = agent.config.control_socket_path
        self._listener: socket.socket | None = None
        self._stopped = threading.Event()
        self._conns: set[socket.socket] = set()
        self._lock = threading.Lock()

    def start(self) -> None:
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        listener = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            listener.bind(self.path)
        except OSError as e:
            raise RuntimeError(f"cannot bind control socket {self.path}: {e}") from e
        listener.listen(64)
        self._listener = listener
        threading.Thread(target=self._accept_loop, name="control-accept",
                         daemon=True).start()

    def stop(self) -> None:
        self._stopped.set()
        if self._listener is not None:
            try:
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._listener.close()
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.close()
            except OSError:
                pass
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass

    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            with self._lock:
                self._conns.add(conn)
            threading.Thread(target=self._serve, args=(conn,),
                             name="control-conn", daemon=True).start()

    def _serve(self, conn: socket.socket) -> None:
        session = _Session(self.agent, conn)
        try:
            session.run()
        except Exception:
            log.exception("control session crashed")
        finally:
            session.teardown()
            with self._lock:
                self._conns.discard(conn)
            try:
                conn.close()
            except OSError:
                pass


class _Session:
    def __init__(self, agent, conn: socket.socket):
        self.agent = agent
        self.conn = conn
        self.npid: NPID | None = None
        self.tenant = "default"
        self.ephemeral = False

    def run(self) -> None:
        while True:
            try:
                frame = frames.read_frame(self.conn)
            except (frames.FrameError, OSError):
                return
            if frame is None:
                return
            try:
                reply = self._dispatch(frame)
            except NefeleError as e:
                reply = {"t": "error", "code": e.code, "error": str(e)}
            except (KeyError, TypeError, ValueError) as e:
                reply = {"t": "error", "code": "BadRequest", "error": str(e)}
            except Exception as e:
                log.exception("control frame %r failed", frame.get("t"))
                reply = {"t": "error", "code": "InternalError", "error": str(e)}
            if reply is not None and not self._write(reply):
                return
            if reply is not None and frame.get("t") == "hello" \
                    and reply.get("t") == "error":
                return   # failed handshake closes the connection

    def teardown(self) -> None:
        if self.npid is not None and self.ephemeral:
            self.agent.messaging.drop_endpoint(self.npid)

    def _write(self, obj: dict) -> bool:
        try:
            frames.write_frame(self.conn, obj)
            return True
        except (OSError, frames.FrameError):
            return False

    def _require_session(self) -> NPID:
        if self.npid is None:
            raise BadRequest("hello required before this operation")
        return self.npid

    # -- dispatch ------------------------------------------------------------

    def _dispatch(self, frame: dict) -> dict | None:
        t = frame.get("t")
        handler = getattr(self, f"_op_{t.replace('-', '_')}", None) if t else None
        if handler is None:
            raise BadRequest(f"unknown frame type {t!r}")
        return handler(frame)

    def _op_hello(self, frame: dict) -> dict:
        token = frame.get("token")
        if token:
            npid = self.agent.runtime.complete_handshake(
                str(token), frame.get("os_pid"))
            record = self.agent.runtime.get(npid)
            self.tenant = record.tenant if record else "default"
            self.ephemeral = False
        else:
            npid = self.agent.alloc_client_npid()
            self.tenant = str(frame.get("tenant", "default"))
            self.ephemeral = True
        self.npid = npid
        self.agent.messaging.create_mailbox(npid, self.tenant)
        return {"t": "ack", "npid": str(npid)}

    # spawn family ------------------------------------------------------------

    def _task_from_frame(self, frame: dict, group: str | None = None) -> TaskSpec:
        resources = ResourceVector(cpu=int(frame.get("cpu", DEFAULT_TASK_CPU)),
                                   mem=int(frame.get("mem", DEFAULT_TASK_MEM)))
        return TaskSpec.make(str(frame["path"]),
                             args=tuple(str(a) for a in frame.get("args", ())),
                             env=frame.get("env"),
                             resources=resources,
                             name=frame.get("name"),
                             anti_affinity_group=group,
                             handshake=bool(frame.get("handshake", False)))

    def _submit_and_wait(self, tasks, request_id=None) -> dict:
        req = self.agent.build_request(self.tenant, tasks, request_id)
        self.agent.submit_spawn(req)
        timeout = (self.agent.config.placement.deploy_timeout
                   + SPAWN_WAIT_SLACK)
        st = self.agent.pipeline.wait(req.request_id, timeout=timeout)
        if st is None or st["state"] == "pending":
            return {"t": "spawn-result", "ok": False,
                    "request_id": req.request_id,
                    "reason": "InternalError", "detail": "decision timed out"}
        if st["state"] == "placed":
            return {"t": "spawn-result", "ok": True,
                    "request_id": req.request_id, "npids": st["npids"]}
        return {"t": "spawn-result", "ok": False,
                "request_id": req.request_id,
                "reason": st.get("reason", "InternalError"),
                "detail": st.get("detail", "")}

    def _op_spawn(self, frame: dict) -> dict:
        return self._submit_and_wait([self._task_from_frame(frame)],
                                     frame.get("request_id"))

    def _op_nspawn(self, frame: dict) -> dict:
        count = int(frame.get("count", 1))
        if count < 1:
            raise BadRequest("count must be >= 1")
        request_id = frame.get("request_id") or None
        group = None
        if frame.get("anti_affinity"):
            request_id = request_id or uuid.uuid4().hex
            group = f"aa-{request_id}"
        task = self._task_from_frame(frame, group=group)
        return self._submit_and_wait([task] * count, request_id)

    def _op_cspawn(self, frame: dict) -> dict:
        tasks = [TaskSpec.from_wire(w) for w in frame.get("tasks", ())]
        if not tasks:
            raise BadRequest("cspawn needs at least one task")
        return self._submit_and_wait(tasks, frame.get("request_id"))

    # process control -----------------------------------------------------------

    def _op_kill(self, frame: dict) -> dict:
        self.agent.kill_npid(parse_npid(frame["npid"]),
                             int(frame.get("signal", 9)))
        return {"t": "ok"}

    def _op_killall(self, frame: dict) -> dict:
        count = self.agent.killall(str(frame["pattern"]),
                                   int(frame.get("signal", 9)),
                                   tenant=frame.get("tenant"))
        return {"t": "ok", "count": count}

    def _op_monitor(self, frame: dict) -> dict:
        watcher = self._require_session()
        self.agent.monitor(watcher, parse_npid(frame["npid"]))
        return {"t": "ok"}

    def _op_ps(self, frame: dict) -> dict:
        records, partial = self.agent.list_processes(
            str(frame.get("scope", "cluster")), frame.get("tenant"))
        return {"t": "ps", "records": records, "partial": partial}

    def _op_logs(self, frame: dict) -> dict | None:
        npid = parse_npid(frame["npid"])
        last_n = frame.get("last_n")
        last_n = int(last_n) if last_n is not None else None
        if not frame.get("follow"):
            return {"t": "logs",
                    "records": self.agent.tail_logs(npid, last_n),
                    "done": True}
        snapshot, live, cancel = self.agent.follow_logs(npid, last_n)
        if not self._write({"t": "logs", "records": snapshot, "done": False}):
            cancel()
            return None
        try:
            while True:
                batch = live.get()
                if batch is None:
                    self._write({"t": "logs", "records": [], "done": True})
                    return None
                if not self._write({"t": "logs", "records": batch,
                                    "done": False}):
                    return None
        finally:
            cancel()

    # messaging ---------------------------------------------------------------

    def _op_send(self, frame: dict) -> dict:
        src = self._require_session()
        addr = Address.from_wire(self.tenant, frame)
        self.agent.messaging.send(src, self.tenant, addr,
                                  frames.unb64(frame["payload"]))
        return {"t": "ok"}

    def _op_publish(self, frame: dict) -> dict:
        src = self._require_session()
        n = self.agent.messaging.publish(src, self.tenant,
                                         str(frame["topic"]),
                                         frames.unb64(frame["payload"]))
        return {"t": "ok", "delivered": n}

    def _op_register(self, frame: dict) -> dict:
        npid = self._require_session()
        key = frame["name"] if "name" in frame else int(frame["service_id"])
        self.agent.messaging.register(npid, self.tenant, key)
        return {"t": "ok"}

    def _op_subscribe(self, frame: dict) -> dict:
        npid = self._require_session()
        self.agent.messaging.subscribe(npid, self.tenant, str(frame["topic"]))
        return {"t": "ok"}

    def _op_wait(self, frame: dict) -> dict:
        key = frame["name"] if "name" in frame else int(frame["service_id"])
        timeout = frame.get("timeout")
        found = self.agent.messaging.wait_for(
            self.tenant, key, float(timeout) if timeout is not None else None)
        if found is None:
            return {"t": "timeout"}
        return {"t": "ok", "npid": str(found)}

    def _op_recv(self, frame: dict) -> dict:
        npid = self._require_session()
        timeout = frame.get("timeout")
        deadline = None if timeout is None else time.monotonic() + float(timeout)
        while True:
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                return {"t": "timeout"}
            slice_t = 0.5 if remaining is None else min(0.5, remaining)
            item = self.agent.messaging.recv(npid, slice_t)
            if item is not None:
                if item["kind"] == "msg":
                    out = {"t": "msg", "src": item["src"], "seq": item["seq"],
                           "payload": item["payload"]}
                    if "topic" in item:
                        out["topic"] = item["topic"]
                    return out
                return {"t": "down", "npid": item["npid"],
                        "reason": item["reason"],
                        "exit_status": item["exit_status"],
                        "exit_signal": item["exit_signal"],
                        "node": item["node"]}
            if self._peer_gone():
                raise OSError("client went away while blocked in recv")

    def _peer_gone(self) -> bool:
        """True if the client closed while we are blocked on the mailbox."""
        try:
            r, _, _ = select.select([self.conn], [], [], 0)
            if not r:
                return False
            return self.conn.recv(1, socket.MSG_PEEK) == b""
        except OSError:
            return True
