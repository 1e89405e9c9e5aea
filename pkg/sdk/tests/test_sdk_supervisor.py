"""Supervision strategies against a live cluster.

Each test tags its children with a unique marker argument and observes the
cluster only through the management HTTP surface and a driver session, so
the restart accounting is verified from outside the supervisor loop.
"""

from __future__ import annotations

import os
import sys
import threading
import time
import uuid

import pytest

from _cluster import requires_agent
from nefele_sdk import (
    ChildSpec,
    Message,
    NefeleSession,
    NoRoute,
    SupervisorEscalation,
    SupervisorSpec,
    run_supervisor,
)

pytestmark = requires_agent

CHILD = os.path.join(os.path.dirname(__file__), "sdk_child.py")
MIB = 1 << 20


def echo_child(marker: str, **kw) -> ChildSpec:
    return ChildSpec(path=sys.executable,
                     args=(CHILD, "--echo", "--marker", marker),
                     cpu=100, mem=64 * MIB, handshake=True, **kw)


def start_supervisor(session, spec) -> dict:
    holder: dict = {}

    def body():
        try:
            run_supervisor(session, spec)
        except BaseException as exc:
            holder["exc"] = exc

    t = threading.Thread(target=body, daemon=True)
    t.start()
    holder["thread"] = t
    return holder


def records_with(cluster, text: str) -> list[dict]:
    recs = cluster.http_json(cluster.nodes[0], "GET",
                             "/v1/processes?scope=cluster")
    out = []
    for r in recs:
        hay = " ".join([r["spec"]["executable"], *r["spec"].get("args", [])])
        if text in hay:
            out.append(r)
    return out


def live(recs: list[dict]) -> list[dict]:
    return [r for r in recs if r["state"] in ("starting", "running")]


def wait_for(pred, timeout: float = 30.0, period: float = 0.05):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        got = pred()
        if got:
            return got
        time.sleep(period)
    raise AssertionError(f"condition not reached within {timeout}s: {pred}")


def reap(cluster, uid: str) -> None:
    """Kill any leftover children so the shared cluster stays clean."""
    with NefeleSession(cluster.nodes[0].sock) as s:
        for rec in live(records_with(cluster, uid)):
            try:
                s.kill(rec["npid"])
            except Exception:
                pass


def test_one_for_one_restarts_only_the_crashed_child(cluster):
    uid = uuid.uuid4().hex[:8]
    marks = [f"{uid}-w{i}" for i in (1, 2, 3)]
    sup = NefeleSession(cluster.nodes[0].sock)
    spec = SupervisorSpec(children=tuple(echo_child(m) for m in marks),
                          strategy="one_for_one",
                          max_restarts=5, window=30.0)
    holder = start_supervisor(sup, spec)
    try:
        npids = {m: wait_for(lambda m=m: live(records_with(cluster, m)))[0]
                 ["npid"] for m in marks}

        with NefeleSession(cluster.nodes[1].sock) as driver:
            driver.kill(npids[marks[1]])

        replacement = wait_for(
            lambda: [r for r in live(records_with(cluster, marks[1]))
                     if r["npid"] != npids[marks[1]]])[0]
        assert replacement["npid"] != npids[marks[1]]

        time.sleep(0.5)   # any spurious sibling restart would land here
        for m in (marks[0], marks[2]):
            recs = records_with(cluster, m)
            assert [r["npid"] for r in live(recs)] == [npids[m]]
            assert len(recs) == 1, f"sibling {m} was touched"
        assert len(records_with(cluster, marks[1])) == 2
    finally:
        sup.close()
        holder["thread"].join(timeout=10)
        reap(cluster, uid)


def test_one_for_all_replaces_every_child(cluster):
    uid = uuid.uuid4().hex[:8]
    marks = [f"{uid}-a{i}" for i in (1, 2, 3)]
    sup = NefeleSession(cluster.nodes[0].sock)
    spec = SupervisorSpec(children=tuple(echo_child(m) for m in marks),
                          strategy="one_for_all",
                          max_restarts=3, window=10.0)
    holder = start_supervisor(sup, spec)
    try:
        old = {m: wait_for(lambda m=m: live(records_with(cluster, m)))[0]
               ["npid"] for m in marks}

        with NefeleSession(cluster.nodes[2].sock) as driver:
            driver.kill(old[marks[0]])

        def all_replaced():
            new = {}
            for m in marks:
                fresh = [r for r in live(records_with(cluster, m))
                         if r["npid"] != old[m]]
                if not fresh:
                    return None
                new[m] = fresh[0]["npid"]
            return new

        new = wait_for(all_replaced)
        assert set(new) == set(old)
        assert all(new[m] != old[m] for m in marks)
        # The siblings were taken down deliberately, not left behind.
        for m in marks:
            states = {r["npid"]: r["state"] for r in records_with(cluster, m)}
            assert states[old[m]] == "killed"
    finally:
        sup.close()
        holder["thread"].join(timeout=10)
        reap(cluster, uid)


def test_escalates_after_budget_and_kills_survivors(cluster):
    uid = uuid.uuid4().hex[:8]
    crash_code = f"import sys, time\ntime.sleep(0.05)\nsys.exit(1)\n# {uid}-crash"
    crasher = ChildSpec(path=sys.executable, args=("-c", crash_code),
                        cpu=100, mem=16 * MIB)
    steady = echo_child(f"{uid}-steady")
    sup = NefeleSession(cluster.nodes[0].sock)
    spec = SupervisorSpec(children=(crasher, steady),
                          strategy="one_for_one",
                          max_restarts=3, window=10.0)
    holder = start_supervisor(sup, spec)
    try:
        holder["thread"].join(timeout=60)
        assert not holder["thread"].is_alive(), "supervisor never escalated"
        exc = holder["exc"]
        assert isinstance(exc, SupervisorEscalation)
        assert exc.child.args == ("-c", crash_code)

        # Initial spawn plus exactly max_restarts respawns, then no more.
        assert len(records_with(cluster, f"{uid}-crash")) == 4
        # Escalation tears the healthy sibling down too.
        wait_for(lambda: not live(records_with(cluster, f"{uid}-steady")))
    finally:
        sup.close()
        reap(cluster, uid)


def test_transient_child_is_not_restarted_on_clean_exit(cluster):
    uid = uuid.uuid4().hex[:8]
    quick_code = f"import time\ntime.sleep(0.5)\n# {uid}-quick"
    quick = ChildSpec(path=sys.executable, args=("-c", quick_code),
                      cpu=100, mem=16 * MIB, restart="transient")
    steady = echo_child(f"{uid}-keeper")
    sup = NefeleSession(cluster.nodes[0].sock)
    spec = SupervisorSpec(children=(quick, steady), strategy="one_for_one",
                          max_restarts=3, window=10.0)
    holder = start_supervisor(sup, spec)
    try:
        keeper = wait_for(
            lambda: live(records_with(cluster, f"{uid}-keeper")))[0]["npid"]
        wait_for(lambda: [r for r in records_with(cluster, f"{uid}-quick")
                          if r["state"] == "exited"])
        time.sleep(1.5)   # a wrongful restart would have landed by now
        assert len(records_with(cluster, f"{uid}-quick")) == 1
        assert [r["npid"] for r in
                live(records_with(cluster, f"{uid}-keeper"))] == [keeper]
    finally:
        sup.close()
        holder["thread"].join(timeout=10)
        reap(cluster, uid)


def test_name_continuity_across_supervised_restart(cluster):
    uid = uuid.uuid4().hex[:8]
    name = f"svc-{uid}"
    sup = NefeleSession(cluster.nodes[0].sock)
    spec = SupervisorSpec(children=(echo_child(f"{uid}-svc", name=name),),
                          strategy="one_for_one",
                          max_restarts=5, window=30.0)
    holder = start_supervisor(sup, spec)
    driver = NefeleSession(cluster.nodes[1].sock)
    try:
        first = driver.wait(name, timeout=15.0)

        echoes: list[Message] = []
        gaps = 0

        def pump(n: int) -> None:
            nonlocal gaps
            for _ in range(n):
                try:
                    driver.message(name, b"tick")
                except NoRoute:
                    gaps += 1
                while True:
                    got = driver.recv(timeout=0.03)
                    if got is None:
                        break
                    if isinstance(got, Message):
                        echoes.append(got)
                time.sleep(0.02)

        pump(10)
        assert {m.src for m in echoes} == {first}

        driver.kill(first)
        # Keep sending through the crash; the name must come back by itself.
        second = None
        deadline = time.monotonic() + 20.0
        while time.monotonic() < deadline:
            pump(5)
            fresh = {m.src for m in echoes} - {first}
            if fresh:
                second = fresh.pop()
                break
        assert second is not None, "name never failed over to the replacement"
        assert second != first

        pump(10)
        # Every echo came from a live incumbent of the name: the old NPID
        # before the kill, the replacement after.  A delivery to the dead
        # NPID would surface here as an echo that neither process sent.
        assert {m.src for m in echoes} <= {first, second}
        assert driver.wait(name, timeout=5.0) == second
    finally:
        driver.close()
        sup.close()
        holder["thread"].join(timeout=10)
        reap(cluster, uid)
