"""Workload generation and measurement drivers for desk-scale experiments.

The generator is deliberately self-contained: one splitmix64 stream feeds
inverse-CDF exponential draws (request interarrivals) and Box-Muller
normals (task counts and demands), so a (spec, seed) pair produces the
same trace byte for byte on any platform.  Library RNGs are avoided on
purpose; their stream layouts are not stable across versions.

Draw order per request is part of the determinism contract:

    interarrival gap, task count, then per task duration, cpu, mem.

The drivers replay a trace against a DeskCluster, pull decision
timestamps back out of the admission nodes' request tables, and reduce
them to scheduling-time percentiles, throughput, and rejection rate.
Separate entry points measure crash-detection latency and raw spawn
overhead against shell `fork+exec`.
"""

from __future__ import annotations

import csv
import math
import os
import signal
import socket
import statistics
import subprocess
import threading
import time
from dataclasses import dataclass, field

from . import frames
from .desk import DeskCluster
from .httpapi import dumps_canonical

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as tomllib

__all__ = [
    "SplitMix64", "WorkloadSpec", "TraceTask", "TraceRequest", "generate",
    "trace_bytes", "BenchRecord", "RunSummary", "write_csv", "read_csv",
    "percentile", "run_workload", "apply_background_load",
    "measure_crash_latency", "measure_spawn_baselines", "read_spec_file",
    "CrashReport", "SpawnBaselines",
]

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """splitmix64: 64-bit state, one add + two xor-multiply mixes per draw.

    random() keeps the top 53 bits, giving uniforms in [0, 1).  normal()
    uses the cosine branch of Box-Muller only; the sine twin is thrown
    away so there is no hidden cache to reason about when replaying.
    """

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53

    def exponential(self, rate: float) -> float:
        # Inverse CDF; log1p(-u) keeps precision for small u and never
        # sees log(0) because u < 1.
        return -math.log1p(-self.random()) / rate

    def normal(self, mu: float, sigma: float) -> float:
        u1 = 1.0 - self.random()          # (0, 1]: log is always finite
        u2 = self.random()
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return mu + sigma * z

    def positive_normal(self, mu: float, sigma: float) -> float:
        """Normal truncated to > 0 by resampling (clamped after 64 tries)."""
        for _ in range(64):
            x = self.normal(mu, sigma)
            if x > 0.0:
                return x
        return max(mu, 1e-9)


# -- workload spec ---------------------------------------------------------

def _pair(value, name: str) -> tuple[float, float]:
    if isinstance(value, dict):
        value = (value["mu"], value.get("sigma", 0.0))
    mu, sigma = float(value[0]), float(value[1])
    if sigma < 0:
        raise ValueError(f"{name}: sigma must be >= 0")
    return (mu, sigma)


@dataclass(frozen=True)
class WorkloadSpec:
    """Everything that determines a trace, plus how to drive it.

    The distribution fields are (mu, sigma) pairs: task counts are
    rounded and floored at 1, the rest are truncated positive.  cpu is
    in millicores, mem in bytes, durations in seconds.
    """
    seed: int
    duration: float
    arrival_rate: float
    tasks_per_request: tuple[float, float]
    task_duration: tuple[float, float]
    task_cpu: tuple[float, float]
    task_mem: tuple[float, float]
    admission_mode: str = "single"
    background_load: float = 0.0

    def __post_init__(self):
        if not 0 <= self.seed <= _MASK64:
            raise ValueError("seed must fit in 64 bits")
        if self.duration <= 0 or self.arrival_rate <= 0:
            raise ValueError("duration and arrival_rate must be positive")
        if self.admission_mode not in ("single", "round_robin"):
            raise ValueError(f"unknown admission_mode {self.admission_mode!r}")
        if not 0.0 <= self.background_load < 1.0:
            raise ValueError("background_load must be in [0, 1)")
        for name in ("tasks_per_request", "task_duration",
                     "task_cpu", "task_mem"):
            if getattr(self, name)[1] < 0:
                raise ValueError(f"{name}: sigma must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        return cls(
            seed=int(d["seed"]),
            duration=float(d["duration"]),
            arrival_rate=float(d["arrival_rate"]),
            tasks_per_request=_pair(d["tasks_per_request"], "tasks_per_request"),
            task_duration=_pair(d["task_duration"], "task_duration"),
            task_cpu=_pair(d["task_cpu"], "task_cpu"),
            task_mem=_pair(d["task_mem"], "task_mem"),
            admission_mode=str(d.get("admission_mode", "single")),
            background_load=float(d.get("background_load", 0.0)),
        )


def read_spec_file(path: str) -> tuple[WorkloadSpec, dict]:
    """Load a spec TOML; returns (spec, desk options).

    The optional [desk] table configures the cluster the run boots:
    nodes (default 5), cpu_millicores, mem_bytes.
    """
    with open(path, "rb") as f:
        data = tomllib.load(f)
    desk = data.pop("desk", {})
    return WorkloadSpec.from_dict(data), desk


# -- trace -----------------------------------------------------------------

@dataclass(frozen=True)
class TraceTask:
    duration: float
    cpu: int
    mem: int


@dataclass(frozen=True)
class TraceRequest:
    index: int
    at: float                       # submit offset from run start
    tasks: tuple[TraceTask, ...]


def generate(spec: WorkloadSpec) -> list[TraceRequest]:
    """Expand a spec into its ordered request trace."""
    rng = SplitMix64(spec.seed)
    trace: list[TraceRequest] = []
    t = 0.0
    while True:
        t += rng.exponential(spec.arrival_rate)
        if t >= spec.duration:
            return trace
        count = max(1, round(rng.normal(*spec.tasks_per_request)))
        tasks = tuple(TraceTask(
            duration=rng.positive_normal(*spec.task_duration),
            cpu=max(1, round(rng.positive_normal(*spec.task_cpu))),
            mem=max(1, round(rng.positive_normal(*spec.task_mem))),
        ) for _ in range(count))
        trace.append(TraceRequest(index=len(trace), at=t, tasks=tasks))


def trace_bytes(trace: list[TraceRequest]) -> bytes:
    """Canonical serialization, used to assert trace determinism."""
    plain = [[r.at, [[tk.duration, tk.cpu, tk.mem] for tk in r.tasks]]
             for r in trace]
    return dumps_canonical(plain).encode()


# -- records and summaries ---------------------------------------------------

_CSV_FIELDS = ["request_id", "outcome", "tasks", "admission_node",
               "submit_ts", "decided_ts", "deployed_ts", "scheduling_ms"]


@dataclass
class BenchRecord:
    """One request's fate.

    Timestamps are the admission node's monotonic clock, so they are
    only comparable to each other within one record.  scheduling_ms is
    submit to deploy-acknowledged for placed requests and submit to
    decision for rejected ones; aborted requests (driver lost the agent)
    carry no timestamps at all.
    """
    request_id: str
    outcome: str                    # placed | rejected | aborted
    tasks: int
    admission_node: int
    submit_ts: float | None = None
    decided_ts: float | None = None
    deployed_ts: float | None = None

    @property
    def scheduling_ms(self) -> float | None:
        if self.submit_ts is None:
            return None
        end = self.deployed_ts if self.outcome == "placed" else self.decided_ts
        if end is None:
            return None
        return (end - self.submit_ts) * 1000.0


def write_csv(records: list[BenchRecord], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=_CSV_FIELDS)
        w.writeheader()
        for r in records:
            ms = r.scheduling_ms
            w.writerow({
                "request_id": r.request_id,
                "outcome": r.outcome,
                "tasks": r.tasks,
                "admission_node": r.admission_node,
                "submit_ts": "" if r.submit_ts is None else repr(r.submit_ts),
                "decided_ts": "" if r.decided_ts is None else repr(r.decided_ts),
                "deployed_ts": "" if r.deployed_ts is None else repr(r.deployed_ts),
                "scheduling_ms": "" if ms is None else f"{ms:.3f}",
            })


def read_csv(path: str) -> list[BenchRecord]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(BenchRecord(
                request_id=row["request_id"],
                outcome=row["outcome"],
                tasks=int(row["tasks"]),
                admission_node=int(row["admission_node"]),
                submit_ts=float(row["submit_ts"]) if row["submit_ts"] else None,
                decided_ts=float(row["decided_ts"]) if row["decided_ts"] else None,
                deployed_ts=float(row["deployed_ts"]) if row["deployed_ts"] else None,
            ))
    return out


def percentile(values: list[float], pct: float) -> float:
    """Nearest-rank percentile; nan on empty input."""
    if not values:
        return float("nan")
    ordered = sorted(values)
    rank = math.ceil(pct / 100.0 * len(ordered))
    return ordered[min(len(ordered), max(1, rank)) - 1]


@dataclass
class RunSummary:
    submitted: int
    placed: int
    rejected: int
    aborted: int
    wall_seconds: float
    p50_ms: float
    p95_ms: float
    p99_ms: float
    partial: bool = False

    @property
    def throughput(self) -> float:
        return self.placed / self.wall_seconds if self.wall_seconds > 0 else 0.0

    @property
    def rejection_rate(self) -> float:
        return self.rejected / self.submitted if self.submitted else 0.0

    def to_dict(self) -> dict:
        return {
            "submitted": self.submitted, "placed": self.placed,
            "rejected": self.rejected, "aborted": self.aborted,
            "wall_seconds": self.wall_seconds,
            "throughput_rps": self.throughput,
            "rejection_rate": self.rejection_rate,
            "p50_ms": self.p50_ms, "p95_ms": self.p95_ms, "p99_ms": self.p99_ms,
            "partial": self.partial,
        }

    def to_text(self) -> str:
        lines = [
            f"requests   {self.submitted} submitted, {self.placed} placed, "
            f"{self.rejected} rejected, {self.aborted} aborted",
            f"wall       {self.wall_seconds:.2f}s "
            f"({self.throughput:.2f} placed/s)",
            f"rejection  {self.rejection_rate * 100.0:.1f}%",
            f"scheduling p50={self.p50_ms:.1f}ms p95={self.p95_ms:.1f}ms "
            f"p99={self.p99_ms:.1f}ms",
        ]
        if self.partial:
            lines.append("PARTIAL RESULT: run aborted before all decisions "
                         "were collected")
        return "\n".join(lines)


def summarize(records: list[BenchRecord], wall_seconds: float,
              partial: bool = False) -> RunSummary:
    placed = [r for r in records if r.outcome == "placed"]
    times = sorted(r.scheduling_ms for r in placed if r.scheduling_ms is not None)
    return RunSummary(
        submitted=len(records),
        placed=len(placed),
        rejected=sum(1 for r in records if r.outcome == "rejected"),
        aborted=sum(1 for r in records if r.outcome == "aborted"),
        wall_seconds=wall_seconds,
        p50_ms=percentile(times, 50), p95_ms=percentile(times, 95),
        p99_ms=percentile(times, 99), partial=partial)


# -- driving a cluster -------------------------------------------------------

def _task_wire(task: TraceTask) -> dict:
    return {"executable": "/bin/sleep", "args": [f"{task.duration:.3f}"],
            "resources": {"cpu": task.cpu, "mem": task.mem}}


def apply_background_load(desk: DeskCluster, fraction: float,
                          tenant: str = "bench-bg") -> list[str]:
    """Pre-fill a fraction of every node's CPU with long-lived sleepers.

    One anti-affinity gang with as many tasks as nodes lands exactly one
    sleeper per node when the cluster is idle and uniform.  The sleepers
    only hold an allocation; under allocation-based accounting that is
    indistinguishable from busy processes of the same size.
    """
    if fraction <= 0.0:
        return []
    caps = {desk.cpu_capacity(i) for i in range(desk.n)}
    if len(caps) != 1:
        raise ValueError("background load needs uniform node capacity")
    chunk = round(fraction * caps.pop())
    if chunk <= 0:
        return []
    rid = f"bg-{os.getpid()}-{time.monotonic_ns()}"
    tasks = [{"executable": "/bin/sleep", "args": ["86400"],
              "resources": {"cpu": chunk, "mem": 1 << 20},
              "anti_affinity_group": "background"}] * desk.n
    node = desk.nodes[0]
    desk.http_json(node, "POST", "/v1/spawn",
                   {"request_id": rid, "tenant": tenant, "tasks": tasks})
    deadline = time.monotonic() + 15.0
    while time.monotonic() < deadline:
        st = desk.http_json(node, "GET", f"/v1/requests/{rid}")
        if st["state"] == "placed":
            return list(st["npids"])
        if st["state"] == "rejected":
            raise RuntimeError(f"background load rejected: {st['reason']} "
                               f"({st.get('detail', '')})")
        time.sleep(0.05)
    raise RuntimeError("background load not placed in 15s")


def run_workload(spec: WorkloadSpec, desk: DeskCluster,
                 tenant: str = "bench", submit_threads: int | None = None,
                 status_period: float = 0.25,
                 drain_timeout: float = 60.0) -> tuple[list[BenchRecord], RunSummary]:
    """Replay a trace against a cluster and collect every decision.

    Submission is fire-and-forget at each request's trace offset, so the
    offered rate does not sag when the cluster queues; decisions are read
    back from the admission nodes' request tables, whose timestamps all
    come from a single clock per node.  If an agent becomes unreachable
    mid-run, submission stops and the result is flagged partial.
    """
    trace = generate(spec)
    admission = (desk.nodes if spec.admission_mode == "round_robin"
                 else desk.nodes[:1])
    if submit_threads is None:
        # Enough submitters that the offered rate holds even when each
        # POST stalls tens of ms behind a saturated agent.
        submit_threads = max(4, min(32, int(spec.arrival_rate / 10) + 1))
    if spec.background_load > 0.0:
        apply_background_load(desk, spec.background_load)

    prefix = f"b{spec.seed:x}"
    targets = {f"{prefix}-{r.index:06d}": admission[r.index % len(admission)]
               for r in trace}
    aborted: set[str] = set()
    abort = threading.Event()
    next_index = [0]
    lock = threading.Lock()
    base = time.monotonic() + 0.3    # settle before first arrival

    def submitter() -> None:
        while not abort.is_set():
            with lock:
                i = next_index[0]
                if i >= len(trace):
                    return
                next_index[0] = i + 1
            req = trace[i]
            rid = f"{prefix}-{req.index:06d}"
            delay = base + req.at - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            body = {"request_id": rid, "tenant": tenant,
                    "tasks": [_task_wire(t) for t in req.tasks]}
            try:
                desk.http_json(targets[rid], "POST", "/v1/spawn", body)
            except OSError:
                with lock:
                    aborted.add(rid)
                abort.set()
                return

    threads = [threading.Thread(target=submitter, daemon=True)
               for _ in range(submit_threads)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if abort.is_set():
        with lock:
            aborted.update(f"{prefix}-{r.index:06d}"
                           for r in trace[next_index[0]:])

    # Collect decisions until every submitted request is final.
    final: dict[str, dict] = {}
    outstanding = set(targets) - aborted
    deadline = time.monotonic() + drain_timeout
    while outstanding and time.monotonic() < deadline:
        for node in admission:
            try:
                table = desk.http_json(node, "GET", "/v1/requests", timeout=30.0)
            except OSError:
                continue
            for st in table:
                rid = st.get("request_id")
                if rid in outstanding and st.get("state") != "pending":
                    final[rid] = st
                    outstanding.discard(rid)
        if outstanding:
            time.sleep(status_period)
    wall = time.monotonic() - base

    records = []
    for req in trace:
        rid = f"{prefix}-{req.index:06d}"
        st = final.get(rid)
        if st is None:
            records.append(BenchRecord(
                request_id=rid, outcome="aborted", tasks=len(req.tasks),
                admission_node=targets[rid].node_id))
            continue
        records.append(BenchRecord(
            request_id=rid, outcome=st["state"], tasks=len(req.tasks),
            admission_node=st["admission_node"],
            submit_ts=st.get("submitted_at"), decided_ts=st.get("decided_at"),
            deployed_ts=st.get("deployed_at")))
    partial = abort.is_set() or bool(outstanding)
    return records, summarize(records, wall, partial=partial)


# -- control-socket client for the point measurements ------------------------

class _Client:
    """Minimal control-socket session for the crash and spawn drivers."""

    def __init__(self, sock_path: str, tenant: str = "bench"):
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.connect(sock_path)
        self._sock.settimeout(30.0)
        ack = self.call({"t": "hello", "tenant": tenant})
        self.npid = ack["npid"]

    def call(self, frame: dict) -> dict:
        frames.write_frame(self._sock, frame)
        reply = frames.read_frame(self._sock)
        if reply is None:
            raise ConnectionError("agent closed control connection")
        if reply.get("t") == "error":
            raise RuntimeError(f"{reply.get('code')}: {reply.get('error')}")
        return reply

    def spawn(self, path: str, args: tuple[str, ...] = (), cpu: int = 10) -> str:
        r = self.call({"t": "spawn", "path": path, "args": list(args),
                       "cpu": cpu, "mem": 1 << 20})
        if not r.get("ok"):
            raise RuntimeError(f"spawn failed: {r.get('reason')} "
                               f"({r.get('detail', '')})")
        return r["npids"][0]

    def os_pid(self, npid: str) -> int:
        r = self.call({"t": "ps", "scope": "local"})
        for rec in r["records"]:
            if rec["npid"] == npid:
                return int(rec["os_pid"])
        raise RuntimeError(f"{npid} not in process table")

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


# -- crash detection ---------------------------------------------------------

@dataclass
class CrashReport:
    detect_ms: list[float] = field(default_factory=list)
    respawn_ms: list[float] = field(default_factory=list)

    @staticmethod
    def _stats(xs: list[float]) -> tuple[float, float]:
        mean = statistics.fmean(xs) if xs else float("nan")
        sd = statistics.stdev(xs) if len(xs) > 1 else 0.0
        return mean, sd

    def to_text(self) -> str:
        dm, ds = self._stats(self.detect_ms)
        rm, rs = self._stats(self.respawn_ms)
        return (f"crash detection  mean={dm:.2f}ms sd={ds:.2f}ms "
                f"n={len(self.detect_ms)}\n"
                f"respawn on DOWN  mean={rm:.2f}ms sd={rs:.2f}ms "
                f"n={len(self.respawn_ms)}")


def measure_crash_latency(trials: int = 100, warmup: int = 3) -> CrashReport:
    """Kill monitored victims and time kill -> DOWN, then DOWN -> respawned.

    Watcher and victim share one node, so detection is the local SIGCHLD
    path: reaper, exit record, monitor fan-out, one unix-socket hop.  The
    respawn sample then times a full admission round trip for the
    replacement.  A short offer-gather window keeps the respawn number
    about the spawn path rather than admission batching.
    """
    report = CrashReport()
    with DeskCluster(1, tuning={"placement": {"gather_window": 0.02}}) as desk:
        cl = _Client(desk.nodes[0].sock)
        try:
            for trial in range(trials + warmup):
                victim = cl.spawn("/bin/sleep", ("600",))
                pid = cl.os_pid(victim)
                cl.call({"t": "monitor", "npid": victim})
                t0 = time.perf_counter()
                os.kill(pid, signal.SIGKILL)
                while True:
                    item = cl.call({"t": "recv", "timeout": 5.0})
                    if item.get("t") == "timeout":
                        raise RuntimeError("no DOWN within 5s of SIGKILL")
                    if item.get("t") == "down" and item.get("npid") == victim:
                        break
                t1 = time.perf_counter()
                replacement = cl.spawn("/bin/sleep", ("600",))
                t2 = time.perf_counter()
                cl.call({"t": "kill", "npid": replacement, "signal": 9})
                if trial >= warmup:
                    report.detect_ms.append((t1 - t0) * 1000.0)
                    report.respawn_ms.append((t2 - t1) * 1000.0)
        finally:
            cl.close()
    return report


# -- spawn baselines ----------------------------------------------------------

@dataclass
class SpawnBaselines:
    shell_ms: list[float] = field(default_factory=list)
    local_ms: list[float] = field(default_factory=list)
    remote_ms: list[float] = field(default_factory=list)

    def to_text(self) -> str:
        rows = []
        for label, xs in (("shell fork+exec", self.shell_ms),
                          ("orchestrated local", self.local_ms),
                          ("orchestrated remote", self.remote_ms)):
            mean, sd = CrashReport._stats(xs)
            rows.append(f"{label:<20} mean={mean:.2f}ms sd={sd:.2f}ms "
                        f"n={len(xs)}")
        return "\n".join(rows)


def measure_spawn_baselines(trials: int = 50, warmup: int = 5) -> SpawnBaselines:
    """Time to start a trivial process three ways.

    shell: Popen + wait of /bin/true, the floor the OS gives us.  local:
    spawn through one agent's admission path, timed to the running
    acknowledgement.  remote: two agents where the admitting node is too
    small for the task, forcing placement on its peer, so the deploy adds
    a loopback TCP round trip.  The offer-gather window is shrunk for the
    same reason as in the crash driver.
    """
    out = SpawnBaselines()
    for i in range(trials + warmup):
        t0 = time.perf_counter()
        p = subprocess.Popen(["/bin/true"], stdout=subprocess.DEVNULL,
                             stderr=subprocess.DEVNULL)
        p.wait()
        t1 = time.perf_counter()
        if i >= warmup:
            out.shell_ms.append((t1 - t0) * 1000.0)

    tuning = {"placement": {"gather_window": 0.005}}
    with DeskCluster(1, tuning=tuning) as desk:
        cl = _Client(desk.nodes[0].sock)
        try:
            for i in range(trials + warmup):
                t0 = time.perf_counter()
                cl.spawn("/bin/true", cpu=200)
                t1 = time.perf_counter()
                if i >= warmup:
                    out.local_ms.append((t1 - t0) * 1000.0)
        finally:
            cl.close()

    with DeskCluster(2, capacities=[10, 16000], tuning=tuning) as desk:
        cl = _Client(desk.nodes[0].sock)
        remote_id = desk.nodes[1].node_id
        try:
            for i in range(trials + warmup):
                t0 = time.perf_counter()
                npid = cl.spawn("/bin/true", cpu=200)
                t1 = time.perf_counter()
                owner = int(npid.split(".", 1)[0])
                if owner != remote_id:
                    raise RuntimeError(f"expected remote placement, got {npid}")
                if i >= warmup:
                    out.remote_ms.append((t1 - t0) * 1000.0)
        finally:
            cl.close()
    return out
