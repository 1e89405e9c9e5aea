"""Client session against a node's control socket.

One NefeleSession per process. The constructor connects to the socket named
by NEFELE_SOCK (or an explicit path) and completes the hello handshake: a
process spawned with handshake=True authenticates with its NEFELE_TOKEN and
assumes the NPID the cluster already assigned it; anything else (scripts,
drivers, supervisors) gets a fresh client NPID with a mailbox, making it a
first-class message endpoint.

Concurrency model: a single background reader owns every read from the
socket. Calls write a frame and block on a reply box the reader fills in
FIFO order; frames that answer no outstanding call are queued for recv().
Calls themselves may come from any thread, but the session is not designed
for concurrent pipelined use.
"""

from __future__ import annotations

import os
import queue
import re
import socket
import threading
from dataclasses import dataclass

from . import wire

DEFAULT_SIGNAL = 9

# Canonical NPID string form: <node>.<incarnation>.<seq>, no leading zeros.
_NPID_RE = re.compile(r"^(0|[1-9][0-9]*)\.(0|[1-9][0-9]*)\.(0|[1-9][0-9]*)$")


# -- errors -------------------------------------------------------------------

class NefeleError(Exception):
    """Base for everything the cluster can answer with an error frame."""
    code = "Error"


class BadRequest(NefeleError, ValueError):
    code = "BadRequest"


class NoRoute(NefeleError):
    code = "NoRoute"


class Unreachable(NefeleError):
    code = "Unreachable"


class NoSuchProcess(NefeleError):
    code = "NoSuchProcess"


class MalformedNpid(NefeleError, ValueError):
    code = "MalformedNpid"


class InternalError(NefeleError):
    code = "InternalError"


class SessionClosed(NefeleError, ConnectionError):
    """The control connection is gone; every pending and future call fails."""
    code = "SessionClosed"


class SpawnRejected(NefeleError):
    """Placement turned the request down; reason/detail come from the cluster."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


_ERRORS = {cls.code: cls for cls in
           (BadRequest, NoRoute, Unreachable, NoSuchProcess, MalformedNpid,
            InternalError)}


def _error_from_frame(frame: dict) -> NefeleError:
    cls = _ERRORS.get(str(frame.get("code", "")), NefeleError)
    return cls(str(frame.get("error", "")))


# -- received items -----------------------------------------------------------

@dataclass(frozen=True, slots=True)
class Message:
    """A delivery from another process."""
    src: str
    seq: int
    payload: bytes
    topic: str | None = None


@dataclass(frozen=True, slots=True)
class Down:
    """A monitor notification: the watched process is gone."""
    npid: str
    reason: str            # exit | kill | nodedown | noproc
    exit_status: int | None
    exit_signal: int | None
    node: int | None

    @property
    def normal(self) -> bool:
        return self.reason == "exit" and self.exit_status == 0


# -- session ------------------------------------------------------------------

class NefeleSession:
    def __init__(self, sock_path: str | None = None, tenant: str = "default"):
        path = sock_path or os.environ.get("NEFELE_SOCK")
        if not path:
            raise ValueError("no socket path: pass sock_path or set NEFELE_SOCK")
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.connect(path)
        self._wlock = threading.Lock()
        self._pending: queue.SimpleQueue[queue.SimpleQueue] = queue.SimpleQueue()
        self._rx: queue.SimpleQueue = queue.SimpleQueue()
        self._closed = threading.Event()
        self._reader = threading.Thread(target=self._read_loop,
                                        name="nefele-reader", daemon=True)
        self._reader.start()

        token = os.environ.get("NEFELE_TOKEN")
        if token:
            ack = self._call({"t": "hello", "token": token, "os_pid": os.getpid()})
            expected = os.environ.get("NEFELE_NPID")
            if expected and ack["npid"] != expected:
                self.close()
                raise InternalError(
                    f"handshake npid {ack['npid']} != NEFELE_NPID {expected}")
        else:
            ack = self._call({"t": "hello", "tenant": tenant})
        self.npid: str = ack["npid"]
        self.tenant = tenant

    # -- plumbing -------------------------------------------------------------

    def _read_loop(self) -> None:
        while True:
            try:
                frame = wire.read_frame(self._sock)
            except (wire.WireError, OSError):
                frame = None
            if frame is None:
                break
            try:
                box = self._pending.get_nowait()
            except queue.Empty:
                self._rx.put(frame)   # unsolicited push (e.g. streamed records)
                continue
            box.put(frame)
        self._closed.set()
        # Fail whoever is still waiting, then wake any blocked recv().
        while True:
            try:
                self._pending.get_nowait().put(None)
            except queue.Empty:
                break
        self._rx.put(None)

    def _call(self, frame: dict) -> dict:
        if self._closed.is_set():
            raise SessionClosed("control connection is closed")
        box: queue.SimpleQueue = queue.SimpleQueue()
        with self._wlock:
            self._pending.put(box)
            try:
                wire.write_frame(self._sock, frame)
            except OSError as exc:
                raise SessionClosed(f"control connection lost: {exc}") from exc
        reply = box.get()
        if reply is None:
            raise SessionClosed("control connection closed mid-call")
        if reply.get("t") == "error":
            raise _error_from_frame(reply)
        return reply

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()
        self._closed.set()

    def __enter__(self) -> "NefeleSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- spawn family ---------------------------------------------------------

    @staticmethod
    def _task_fields(frame: dict, args, env, cpu, mem, name, handshake) -> dict:
        if args:
            frame["args"] = [str(a) for a in args]
        if env:
            frame["env"] = dict(env)
        if cpu is not None:
            frame["cpu"] = int(cpu)
        if mem is not None:
            frame["mem"] = int(mem)
        if name is not None:
            frame["name"] = name
        if handshake:
            frame["handshake"] = True
        return frame

    def _spawn_result(self, reply: dict) -> list[str]:
        if not reply.get("ok"):
            raise SpawnRejected(str(reply.get("reason", "InternalError")),
                                str(reply.get("detail", "")))
        return list(reply["npids"])

    def spawn(self, path: str, args=(), env=None, *, cpu=None, mem=None,
              name=None, handshake=False) -> str:
        """Start one process somewhere in the cluster; returns its NPID."""
        frame = self._task_fields({"t": "spawn", "path": path},
                                  args, env, cpu, mem, name, handshake)
        return self._spawn_result(self._call(frame))[0]

    def nspawn(self, path: str, count: int, args=(), env=None, *, cpu=None,
               mem=None, name=None, handshake=False,
               anti_affinity: bool = True) -> list[str]:
        """Start `count` copies as one gang, by default on distinct nodes."""
        frame = self._task_fields({"t": "nspawn", "path": path},
                                  args, env, cpu, mem, name, handshake)
        frame["count"] = int(count)
        if anti_affinity:
            frame["anti_affinity"] = True
        return self._spawn_result(self._call(frame))

    def cspawn(self, tasks) -> list[str]:
        """Start a heterogeneous gang: all tasks place together or none do.

        Each task is a dict with at least "executable" and "resources"
        ({"cpu": millicores, "mem": bytes}); optional "args", "env", "name",
        "anti_affinity_group", "handshake".
        """
        return self._spawn_result(
            self._call({"t": "cspawn", "tasks": [dict(t) for t in tasks]}))

    # -- process control ------------------------------------------------------

    def monitor(self, npid: str) -> None:
        """Watch a process; its death arrives via recv() as a Down item."""
        self._call({"t": "monitor", "npid": npid})

    def kill(self, npid: str, signal: int = DEFAULT_SIGNAL) -> None:
        self._call({"t": "kill", "npid": npid, "signal": int(signal)})

    # -- messaging ------------------------------------------------------------

    @staticmethod
    def _dest_field(dest) -> tuple[str, object]:
        """Destination dispatch: int -> service id, "N.N.N" -> NPID, else name."""
        if isinstance(dest, int):
            return "service_id", dest
        if isinstance(dest, str) and _NPID_RE.match(dest):
            return "npid", dest
        if isinstance(dest, str):
            return "name", dest
        raise TypeError(f"destination must be int or str, not {type(dest).__name__}")

    def message(self, dest, payload: bytes) -> None:
        """Send bytes to an NPID, a registered name, or a numeric service id."""
        key, value = self._dest_field(dest)
        self._call({"t": "send", key: value, "payload": wire.b64(payload)})

    def recv(self, timeout: float | None = None):
        """Next queued Message or Down, or None once `timeout` elapses."""
        try:
            item = self._rx.get_nowait()
        except queue.Empty:
            item = None
        if item is None:
            # Queue empty (or holding the close sentinel): ask the node.
            frame = {"t": "recv"}
            if timeout is not None:
                frame["timeout"] = timeout
            item = self._call(frame)
        t = item.get("t") or item.get("kind")
        if t == "timeout":
            return None
        if t == "msg":
            return Message(src=str(item["src"]), seq=int(item["seq"]),
                           payload=wire.unb64(item["payload"]),
                           topic=item.get("topic"))
        if t == "down":
            return Down(npid=str(item["npid"]), reason=str(item["reason"]),
                        exit_status=item.get("exit_status"),
                        exit_signal=item.get("exit_signal"),
                        node=item.get("node"))
        raise NefeleError(f"unexpected item {t!r} in receive stream")

    def wait(self, ident, timeout: float | None = None) -> str:
        """Block until `ident` (name or service id) resolves; returns the NPID."""
        key, value = self._dest_field(ident)
        if key == "npid":
            raise BadRequest("wait() takes a name or service id, not an NPID")
        frame = {"t": "wait", key: value}
        if timeout is not None:
            frame["timeout"] = timeout
        reply = self._call(frame)
        if reply.get("t") == "timeout":
            raise TimeoutError(f"{ident!r} not registered within {timeout}s")
        return str(reply["npid"])

    def register(self, ident) -> None:
        """Register this session's NPID under a name or numeric service id."""
        key, value = self._dest_field(ident)
        if key == "npid":
            raise BadRequest("register() takes a name or service id")
        self._call({"t": "register", key: value})

    def subscribe(self, topic: str) -> None:
        self._call({"t": "subscribe", "topic": topic})

    def publish(self, topic: str, payload: bytes) -> int:
        """Deliver to every subscriber; returns how many copies went out."""
        reply = self._call({"t": "publish", "topic": topic,
                            "payload": wire.b64(payload)})
        return int(reply.get("delivered", 0))
