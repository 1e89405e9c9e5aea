"""Per-node process data plane.

Spawns real OS processes, captures their stdout/stderr into bounded in-memory
ring buffers, tracks lifecycle state, and fans DOWN notifications out to
monitors on termination.  Resource control is accounting-only: declared
demand is bookkeeping, not enforcement.

Every child gets NEFELE_NPID, NEFELE_TOKEN, and NEFELE_SOCK in its
environment.  A cooperating binary dials the control socket and handshakes
with its token to become Running and get a mailbox; a task spawned with
handshake=False (unmodified-binary mode) is Running from the start and gets
spawn/signal/monitor/logs but no mailbox.
"""

from __future__ import annotations

import logging
import os
import queue
import secrets
import subprocess
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterator

from .model import (
    NPID,
    NodeId,
    NoSuchProcess,
    ProcessRecord,
    ProcState,
    TaskSpec,
)

log = logging.getLogger("nefele.runtime")

LOG_RING_LINES = 1000
LOG_MAX_LINE = 8192


@dataclass(frozen=True, slots=True)
class SpawnEnvelope:
    npid: NPID
    spec: TaskSpec
    handshake_token: str        # single-use 128-bit secret, hex
    control_socket_path: str


@dataclass(frozen=True, slots=True)
class LogRecord:
    npid: NPID
    stream: str                 # "stdout" | "stderr"
    line: bytes
    ts: float
    seq: int

    def to_wire(self) -> dict:
        from . import frames
        return {"npid": str(self.npid), "stream": self.stream,
                "line": frames.b64(self.line), "ts": self.ts, "seq": self.seq}

    @classmethod
    def from_wire(cls, d: dict) -> "LogRecord":
        from . import frames
        from .model import parse_npid
        return cls(npid=parse_npid(d["npid"]), stream=str(d["stream"]),
                   line=frames.unb64(d["line"]), ts=float(d["ts"]), seq=int(d["seq"]))


class LogBuffer:
    """Ring of the last LOG_RING_LINES records for one (npid, stream).

    Readers either take a tail snapshot or follow live through a registered
    queue; per-stream seq is strictly increasing, assigned under the lock.
    """

    def __init__(self, npid: NPID, stream: str):
        self.npid = npid
        self.stream = stream
        self._lock = threading.Lock()
        self._ring: deque[LogRecord] = deque(maxlen=LOG_RING_LINES)
        self._seq = 0
        self._followers: list[queue.SimpleQueue] = []
        self.closed = False

    def append(self, line: bytes) -> None:
        if len(line) > LOG_MAX_LINE:
            line = line[:LOG_MAX_LINE]
        with self._lock:
            self._seq += 1
            rec = LogRecord(self.npid, self.stream, line, time.time(), self._seq)
            self._ring.append(rec)
            followers = list(self._followers)
        for q in followers:
            q.put(rec)

    def close(self) -> None:
        with self._lock:
            self.closed = True
            followers = list(self._followers)
        for q in followers:
            q.put(None)

    def tail(self, last_n: int | None = None) -> list[LogRecord]:
        with self._lock:
            records = list(self._ring)
        if last_n is not None and last_n >= 0:
            records = records[len(records) - min(last_n, len(records)):]
        return records

    def follow(self) -> tuple[list[LogRecord], queue.SimpleQueue]:
        """Tail snapshot plus a queue of subsequent records (None = closed).

        Atomic with respect to append, so the snapshot and the queue contain
        every record exactly once between them.
        """
        q: queue.SimpleQueue = queue.SimpleQueue()
        with self._lock:
            snapshot = list(self._ring)
            if self.closed:
                q.put(None)
            else:
                self._followers.append(q)
        return snapshot, q

    def unfollow(self, q: queue.SimpleQueue) -> None:
        with self._lock:
            if q in self._followers:
                self._followers.remove(q)


SPAWN_FAILURE_STATUS = 127


class ProcessRuntime:
    """Owner-node table of processes plus the machinery that runs them."""

    def __init__(self, node: NodeId, control_socket_path: str,
                 on_terminal: Callable[[ProcessRecord], None] | None = None,
                 handshake_timeout: float = 10.0):
        self.node = node
        self.control_socket_path = control_socket_path
        self.handshake_timeout = handshake_timeout
        self._lock = threading.RLock()
        self._records: dict[NPID, ProcessRecord] = {}
        self._procs: dict[NPID, subprocess.Popen] = {}
        self._tokens: dict[str, NPID] = {}
        self._logs: dict[tuple[NPID, str], LogBuffer] = {}
        self._running_events: dict[NPID, threading.Event] = {}
        # NPIDs that reached Running at least once.  A process that starts
        # cleanly and exits before anyone asks still counts as started.
        self._ever_running: set[NPID] = set()
        self._seq = 0
        self._seq_lock = threading.Lock()
        # Terminal-state listeners: allocation release, DOWN fanout, name
        # revocation are all wired here by the agent.
        self._on_terminal = [on_terminal] if on_terminal else []
        # All exits funnel through one queue so reap/signal races cannot
        # finalize a record twice.
        self._exit_queue: queue.SimpleQueue = queue.SimpleQueue()
        self._reaper = threading.Thread(target=self._reap_loop,
                                        name=f"reaper-{node.id}", daemon=True)
        self._reaper.start()
        self._stopped = False

    # -- identity ---------------------------------------------------------

    def next_npid(self) -> NPID:
        with self._seq_lock:
            self._seq += 1
            return NPID(self.node, self._seq)

    def make_envelope(self, spec: TaskSpec) -> SpawnEnvelope:
        return SpawnEnvelope(npid=self.next_npid(), spec=spec,
                             handshake_token=secrets.token_hex(16),
                             control_socket_path=self.control_socket_path)

    # -- lifecycle --------------------------------------------------------

    def on_terminal(self, cb: Callable[[ProcessRecord], None]) -> None:
        with self._lock:
            self._on_terminal.append(cb)

    def spawn_local(self, env: SpawnEnvelope, tenant: str) -> ProcessRecord:
        """Start the child. Returns the record in Starting or Running state;
        on exec failure the record is already terminal (Exited, synthetic
        status) and terminal listeners have fired."""
        spec = env.spec
        child_env = dict(os.environ)
        child_env.update(spec.env_dict)
        child_env["NEFELE_NPID"] = str(env.npid)
        child_env["NEFELE_TOKEN"] = env.handshake_token
        child_env["NEFELE_SOCK"] = env.control_socket_path

        record = ProcessRecord(npid=env.npid, tenant=tenant, os_pid=0,
                               node=self.node, spec=spec,
                               state=ProcState.STARTING, started_at=time.time())
        for stream in ("stdout", "stderr"):
            self._logs[(env.npid, stream)] = LogBuffer(env.npid, stream)
        running = threading.Event()
        with self._lock:
            self._records[env.npid] = record
            self._running_events[env.npid] = running

        try:
            proc = subprocess.Popen(
                [spec.executable, *spec.args],
                env=child_env,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                stdin=subprocess.DEVNULL,
                start_new_session=True,
            )
        except OSError as exc:
            log.info("spawn failed for %s: %s", env.npid, exc)
            self._logs[(env.npid, "stderr")].append(str(exc).encode())
            for stream in ("stdout", "stderr"):
                self._logs[(env.npid, stream)].close()
            self._finalize(env.npid, status=SPAWN_FAILURE_STATUS, signal=None)
            return record

        with self._lock:
            record.os_pid = proc.pid
            self._procs[env.npid] = proc
            if spec.handshake:
                self._tokens[env.handshake_token] = env.npid
            else:
                record.state = ProcState.RUNNING
                self._ever_running.add(env.npid)
                running.set()

        for stream_name, pipe in (("stdout", proc.stdout), ("stderr", proc.stderr)):
            t = threading.Thread(target=self._pump_logs,
                                 args=(env.npid, stream_name, pipe),
                                 name=f"logs-{env.npid}-{stream_name}", daemon=True)
            t.start()
        waiter = threading.Thread(target=self._wait_child, args=(env.npid, proc),
                                  name=f"wait-{env.npid}", daemon=True)
        waiter.start()
        return record

    def complete_handshake(self, token: str, os_pid: int | None = None) -> NPID:
        """Token-authenticated hello from the child; single use."""
        with self._lock:
            npid = self._tokens.pop(token, None)
            if npid is None:
                raise NoSuchProcess("unknown or already-used handshake token")
            record = self._records.get(npid)
            if record is None or record.state.terminal:
                raise NoSuchProcess(f"{npid} already ended")
            record.state = ProcState.RUNNING
            self._ever_running.add(npid)
            event = self._running_events.get(npid)
        if event:
            event.set()
        return npid

    def wait_running(self, npid: NPID, timeout: float | None = None) -> bool:
        """Block until the process reaches Running or ends first.

        True if it ever reached Running: a clean start followed by an instant
        exit still counts.  False if it ended before running or timed out.
        """
        if timeout is None:
            timeout = self.handshake_timeout
        deadline = time.monotonic() + timeout
        while True:
            with self._lock:
                if npid in self._ever_running:
                    return True
                record = self._records.get(npid)
                event = self._running_events.get(npid)
            if record is None or record.state.terminal or event is None:
                return False
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return False
            event.wait(min(remaining, 0.05))

    def signal(self, npid: NPID, signo: int) -> None:
        """Deliver a POSIX signal to a local process."""
        with self._lock:
            record = self._records.get(npid)
            proc = self._procs.get(npid)
            if record is None or record.state.terminal or proc is None:
                raise NoSuchProcess(str(npid))
        try:
            proc.send_signal(signo)
        except ProcessLookupError:
            raise NoSuchProcess(str(npid)) from None

    def kill_all(self, signo: int = 9) -> int:
        """Signal every non-terminal local process (agent shutdown)."""
        with self._lock:
            targets = [npid for npid, r in self._records.items()
                       if not r.state.terminal]
        count = 0
        for npid in targets:
            try:
                self.signal(npid, signo)
                count += 1
            except NoSuchProcess:
                pass
        return count

    # -- queries ----------------------------------------------------------

    def get(self, npid: NPID) -> ProcessRecord | None:
        with self._lock:
            record = self._records.get(npid)
            return record.snapshot() if record else None

    def list_local(self, tenant: str | None = None,
                   include_terminal: bool = True) -> list[ProcessRecord]:
        with self._lock:
            records = [r.snapshot() for r in self._records.values()]
        if tenant is not None:
            records = [r for r in records if r.tenant == tenant]
        if not include_terminal:
            records = [r for r in records if not r.state.terminal]
        return sorted(records, key=lambda r: r.npid.seq)

    def live_demand_total(self):
        """Sum of declared resources over non-terminal records."""
        from .model import ResourceVector
        total = ResourceVector(0, 0)
        for r in self.list_local(include_terminal=False):
            total = total + r.spec.resources
        return total

    def log_buffer(self, npid: NPID, stream: str) -> LogBuffer | None:
        return self._logs.get((npid, stream))

    def tail_logs(self, npid: NPID, last_n: int | None = None) -> list[LogRecord]:
        records: list[LogRecord] = []
        for stream in ("stdout", "stderr"):
            buf = self._logs.get((npid, stream))
            if buf:
                records.extend(buf.tail())
        records.sort(key=lambda r: (r.ts, r.seq))
        if last_n is not None and last_n >= 0:
            records = records[len(records) - min(last_n, len(records)):]
        return records

    # -- monitors ---------------------------------------------------------

    def add_monitor(self, watcher: NPID, target: NPID) -> ProcessRecord | None:
        """Register watcher for target's termination.

        Returns the target's record if the DOWN will come later; None if the
        target is unknown or already terminal (caller sends immediate DOWN).
        """
        with self._lock:
            record = self._records.get(target)
            if record is None or record.state.terminal:
                return None
            record.monitors.add(watcher)
            return record.snapshot()

    # -- internals ----------------------------------------------------------

    def _pump_logs(self, npid: NPID, stream: str, pipe) -> None:
        buf = self._logs[(npid, stream)]
        try:
            while True:
                line = pipe.readline(LOG_MAX_LINE + 1)
                if not line:
                    break
                buf.append(line.rstrip(b"\n"))
        except (OSError, ValueError):
            pass
        finally:
            try:
                pipe.close()
            except OSError:
                pass
            buf.close()

    def _wait_child(self, npid: NPID, proc: subprocess.Popen) -> None:
        code = proc.wait()
        self._exit_queue.put((npid, code))

    def _reap_loop(self) -> None:
        while True:
            item = self._exit_queue.get()
            if item is None:
                return
            npid, code = item
            if code < 0:
                self._finalize(npid, status=None, signal=-code)
            else:
                self._finalize(npid, status=code, signal=None)

    def _finalize(self, npid: NPID, status: int | None, signal: int | None) -> None:
        with self._lock:
            record = self._records.get(npid)
            if record is None or record.state.terminal:
                return
            record.state = ProcState.KILLED if signal is not None else ProcState.EXITED
            record.exit_status = status
            record.exit_signal = signal
            record.ended_at = time.time()
            self._procs.pop(npid, None)
            # A never-handshaked token must not become valid posthumously.
            for token, owner in list(self._tokens.items()):
                if owner == npid:
                    del self._tokens[token]
            event = self._running_events.pop(npid, None)
            listeners = list(self._on_terminal)
            snapshot = record.snapshot()
        if event:
            event.set()
        # Log buffers are closed by their pump threads at pipe EOF, so late
        # output (including from grandchildren) is never cut off here.
        for cb in listeners:
            try:
                cb(snapshot)
            except Exception:
                log.exception("terminal listener failed for %s", npid)

    def prune_terminal(self, keep: int = 1000) -> None:
        """Drop oldest terminal records (and their logs) beyond `keep`."""
        with self._lock:
            terminal = [r for r in self._records.values() if r.state.terminal]
            terminal.sort(key=lambda r: r.ended_at or 0)
            for r in terminal[:max(0, len(terminal) - keep)]:
                del self._records[r.npid]
                self._ever_running.discard(r.npid)
                self._logs.pop((r.npid, "stdout"), None)
                self._logs.pop((r.npid, "stderr"), None)

    def shutdown(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        self.kill_all(9)
        deadline = time.monotonic() + 2.0
        while time.monotonic() < deadline:
            if not self.list_local(include_terminal=False):
                break
            time.sleep(0.02)
        self._exit_queue.put(None)
