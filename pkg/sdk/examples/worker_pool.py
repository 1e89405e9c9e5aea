"""Worker pool: tasks flow to workers as messages, results flow back.

The coordinator spawns N copies of this same file in worker mode across the
cluster (distinct nodes when possible), registers itself under a name the
workers resolve, and deals jobs out round-robin. Workers send results to the
coordinator's NPID and get the next job. A supervisor thread keeps the pool
at full strength if a worker dies mid-job.

Run against any node:

    NEFELE_SOCK=/path/to/control.sock python3 worker_pool.py --workers 3
"""

from __future__ import annotations

import argparse
import sys
import threading

from nefele_sdk import (
    ChildSpec,
    Message,
    NefeleSession,
    SessionClosed,
    SupervisorEscalation,
    SupervisorSpec,
    run_supervisor,
)

COORDINATOR = "pool-coordinator"


def worker() -> int:
    with NefeleSession() as s:
        coord = s.wait(COORDINATOR, timeout=30.0)
        s.message(coord, b"ready")
        while True:
            item = s.recv(timeout=60.0)
            if not isinstance(item, Message):
                return 0
            if item.payload == b"stop":
                return 0
            n = int(item.payload)
            s.message(coord, b"%d" % (n * n))


def coordinator(n_workers: int, jobs: int) -> int:
    # The supervisor gets its own session: its loop consumes the receive
    # stream, which would otherwise swallow the workers' task traffic.
    with NefeleSession() as pool_session, NefeleSession() as s:
        s.register(COORDINATOR)

        spec = SupervisorSpec(
            children=tuple(
                ChildSpec(path=sys.executable,
                          args=(__file__, "--role", "worker"),
                          cpu=100, handshake=True)
                for _ in range(n_workers)),
            strategy="one_for_one", max_restarts=5, window=30.0)

        def supervise():
            try:
                run_supervisor(pool_session, spec)
            except SupervisorEscalation as exc:
                print(f"pool degraded: {exc}", file=sys.stderr)
            except SessionClosed:
                pass   # pool finished; the coordinator closed the session

        threading.Thread(target=supervise, daemon=True).start()

        idle: list[str] = []
        next_job, results = 0, []
        while len(results) < jobs:
            item = s.recv(timeout=60.0)
            if not isinstance(item, Message):
                raise SystemExit("pool stalled")
            if item.payload != b"ready":
                results.append(int(item.payload))
            if next_job < jobs:
                s.message(item.src, b"%d" % next_job)
                next_job += 1
            else:
                idle.append(item.src)
        for npid in idle:
            try:
                s.message(npid, b"stop")
            except NefeleError:
                pass   # worker died after its last result; supervisor's problem
        print(sorted(results))
    return 0


def main() -> int:
    p = argparse.ArgumentParser()
    p.add_argument("--role", choices=("coordinator", "worker"),
                   default="coordinator")
    p.add_argument("--workers", type=int, default=3)
    p.add_argument("--jobs", type=int, default=20)
    args = p.parse_args()
    if args.role == "worker":
        return worker()
    return coordinator(args.workers, args.jobs)


if __name__ == "__main__":
    sys.exit(main())
