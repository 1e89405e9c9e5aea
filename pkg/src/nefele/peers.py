"""Inter-node transport: persistent TCP connections carrying JSON frames.

Each node runs one PeerServer and one PeerClient.  The client keeps at most
one outbound connection per peer address, dialing lazily and redialing after
failures.  Frames with a "rid" field are requests and get a response with
the same rid; frames without one are one-way and are processed in arrival
order, which is what gives per-connection FIFO to the messaging layer.

Requests are dispatched to a worker pool so a slow handler (a deploy that
waits for a process to come up, say) does not stall the connection; one-way
frames are handled inline on the reader thread to preserve ordering.
"""

from __future__ import annotations

import itertools
import logging
import socket
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

from . import frames
from .model import NefeleError, Unreachable

log = logging.getLogger("nefele.peers")

DIAL_TIMEOUT = 1.0
REQUEST_TIMEOUT = 5.0

Handler = Callable[[dict, tuple], "dict | None"]


class PeerServer:
    """Accepts peer connections and feeds frames to a single handler.

    The handler returns a response dict for request frames and None for
    one-way frames.  Exceptions become {"t": "error"} responses carrying the
    typed code when there is one.
    """

    def __init__(self, host: str, port: int, handler: Handler, workers: int = 8):
        self._handler = handler
        self._listener = socket.create_server((host, port))
        self._pool = ThreadPoolExecutor(max_workers=workers,
                                        thread_name_prefix="peer-srv")
        self._conns: set[socket.socket] = set()
        self._lock = threading.Lock()
        self._stopped = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name="peer-accept", daemon=True)

    @property
    def port(self) -> int:
        return self._listener.getsockname()[1]

    def start(self) -> None:
        self._accept_thread.start()

    def stop(self) -> None:
        self._stopped.set()
        # shutdown() wakes a thread blocked in accept(); close() alone leaves
        # the kernel socket listening until that accept call returns.
        try:
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for sock in conns:
            try:
                sock.close()
            except OSError:
                pass
        self._pool.shutdown(wait=False)

    def _accept_loop(self) -> None:
        while not self._stopped.is_set():
            try:
                sock, addr = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._conns.add(sock)
            threading.Thread(target=self._serve_conn, args=(sock, addr),
                             name=f"peer-conn-{addr[1]}", daemon=True).start()

    def _serve_conn(self, sock: socket.socket, addr: tuple) -> None:
        wlock = threading.Lock()
        try:
            while True:
                try:
                    frame = frames.read_frame(sock)
                except (frames.FrameError, OSError):
                    return
                if frame is None:
                    return
                rid = frame.pop("rid", None)
                if rid is None:
                    try:
                        self._handler(frame, addr)
                    except Exception:
                        log.exception("one-way handler failed for %r",
                                      frame.get("t"))
                else:
                    self._pool.submit(self._answer, sock, wlock, addr,
                                      rid, frame)
        finally:
            with self._lock:
                self._conns.discard(sock)
            try:
                sock.close()
            except OSError:
                pass

    def _answer(self, sock, wlock, addr, rid, frame) -> None:
        try:
            resp = self._handler(frame, addr)
            if resp is None:
                resp = {"t": "ok"}
        except NefeleError as e:
            resp = {"t": "error", "code": e.code, "error": str(e)}
        except Exception as e:
            log.exception("request handler failed for %r", frame.get("t"))
            resp = {"t": "error", "code": "InternalError", "error": str(e)}
        resp = dict(resp)
        resp["rid"] = rid
        try:
            with wlock:
                frames.write_frame(sock, resp)
        except (OSError, frames.FrameError):
            pass


class _Waiter:
    __slots__ = ("event", "response")

    def __init__(self):
        self.event = threading.Event()
        self.response: dict | None = None


class _Conn:
    """One outbound connection: shared writer, reader thread demuxing by rid."""

    def __init__(self, addr: tuple):
        self.addr = addr
        self.sock = socket.create_connection(addr, timeout=DIAL_TIMEOUT)
        self.sock.settimeout(None)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.wlock = threading.Lock()
        self.plock = threading.Lock()
        self.pending: dict[int, _Waiter] = {}
        self.dead = False
        self._rids = itertools.count(1)
        threading.Thread(target=self._read_loop,
                         name=f"peer-cli-{addr[1]}", daemon=True).start()

    def _read_loop(self) -> None:
        try:
            while True:
                frame = frames.read_frame(self.sock)
                if frame is None:
                    return
                waiter = None
                rid = frame.pop("rid", None)
                if rid is not None:
                    with self.plock:
                        waiter = self.pending.pop(rid, None)
                if waiter is not None:
                    waiter.response = frame
                    waiter.event.set()
                # Unknown rid: a response to a timed-out request; dropped.
        except (frames.FrameError, OSError):
            pass
        finally:
            self.fail()

    def fail(self) -> None:
        with self.plock:
            if self.dead:
                return
            self.dead = True
            waiters = list(self.pending.values())
            self.pending.clear()
        try:
            self.sock.close()
        except OSError:
            pass
        for w in waiters:
            w.event.set()

    def request(self, frame: dict, timeout: float) -> dict:
        rid = next(self._rids)
        waiter = _Waiter()
        with self.plock:
            if self.dead:
                raise Unreachable(f"{self.addr} connection lost")
            self.pending[rid] = waiter
        out = dict(frame)
        out["rid"] = rid
        try:
            with self.wlock:
                frames.write_frame(self.sock, out)
        except (OSError, frames.FrameError):
            self.fail()
            raise Unreachable(f"{self.addr} send failed") from None
        if not waiter.event.wait(timeout):
            with self.plock:
                self.pending.pop(rid, None)
            raise Unreachable(f"{self.addr} request timed out")
        if waiter.response is None:
            raise Unreachable(f"{self.addr} connection lost")
        return waiter.response

    def send(self, frame: dict) -> None:
        try:
            with self.wlock:
                frames.write_frame(self.sock, frame)
        except (OSError, frames.FrameError):
            self.fail()
            raise Unreachable(f"{self.addr} send failed") from None


class PeerClient:
    """Connection cache keyed by (host, port); redials after failures."""

    def __init__(self, request_timeout: float = REQUEST_TIMEOUT):
        self.request_timeout = request_timeout
        self._conns: dict[tuple, _Conn] = {}
        self._lock = threading.Lock()

    def _get(self, addr: tuple) -> _Conn:
        with self._lock:
            conn = self._conns.get(addr)
            if conn is not None and not conn.dead:
                return conn
        try:
            conn = _Conn(addr)
        except OSError as e:
            raise Unreachable(f"{addr} dial failed: {e}") from None
        with self._lock:
            racer = self._conns.get(addr)
            if racer is not None and not racer.dead:
                conn.fail()
                return racer
            self._conns[addr] = conn
            return conn

    def request(self, addr: tuple, frame: dict,
                timeout: float | None = None) -> dict:
        return self._get(addr).request(
            frame, self.request_timeout if timeout is None else timeout)

    def send(self, addr: tuple, frame: dict) -> None:
        self._get(addr).send(frame)

    def drop(self, addr: tuple) -> None:
        """Forget a peer's connection (after its node was declared dead)."""
        with self._lock:
            conn = self._conns.pop(addr, None)
        if conn is not None:
            conn.fail()

    def close(self) -> None:
        with self._lock:
            conns = list(self._conns.values())
            self._conns.clear()
        for conn in conns:
            conn.fail()
