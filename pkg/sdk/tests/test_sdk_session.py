"""Session API against a live three-node cluster.

Everything here goes through the installed nefele-agent binary and the
public control socket; nothing reaches into server internals.
"""

from __future__ import annotations

import os
import re
import sys
import time

import pytest

from _cluster import requires_agent
from nefele_sdk import (
    BadRequest,
    Down,
    MalformedNpid,
    Message,
    NefeleSession,
    NoRoute,
    NoSuchProcess,
    SessionClosed,
    SpawnRejected,
)

pytestmark = requires_agent

CHILD = os.path.join(os.path.dirname(__file__), "sdk_child.py")
NPID_RE = re.compile(r"^\d+\.\d+\.\d+$")   # node.incarnation.seq


def node_of(npid: str) -> int:
    return int(npid.split(".")[0])


@pytest.fixture
def session(cluster):
    with NefeleSession(cluster.nodes[0].sock) as s:
        yield s


def test_handshake_assigns_client_npid(cluster, session):
    assert NPID_RE.match(session.npid)
    assert node_of(session.npid) == cluster.nodes[0].node_id


def test_spawn_monitor_kill_down_roundtrip(session):
    npid = session.spawn("/bin/sleep", args=("60",), cpu=100, mem=1 << 20)
    assert NPID_RE.match(npid)
    session.monitor(npid)
    session.kill(npid)
    down = session.recv(timeout=10.0)
    assert isinstance(down, Down)
    assert down.npid == npid
    assert down.reason == "kill" and down.exit_signal == 9
    assert not down.normal


def test_down_reports_normal_exit(session):
    npid = session.spawn(sys.executable,
                         args=("-c", "import time; time.sleep(1.0)"),
                         cpu=100, mem=1 << 20)
    session.monitor(npid)
    down = session.recv(timeout=10.0)
    assert isinstance(down, Down)
    assert (down.npid, down.reason, down.exit_status) == (npid, "exit", 0)
    assert down.normal


def test_nspawn_anti_affinity_uses_distinct_nodes(cluster, session):
    npids = session.nspawn("/bin/sleep", 3, args=("30",), cpu=100, mem=1 << 20)
    assert len(npids) == 3
    assert len({node_of(n) for n in npids}) == 3
    for n in npids:
        session.kill(n)


def test_cspawn_gang_is_atomic(session):
    small = {"executable": "/bin/sleep", "args": ["30"],
             "resources": {"cpu": 100, "mem": 1 << 20}}
    huge = {"executable": "/bin/sleep", "args": ["30"],
            "resources": {"cpu": 10 ** 9, "mem": 1 << 20}}
    with pytest.raises(SpawnRejected) as exc:
        session.cspawn([small, huge])
    assert exc.value.reason == "NoFeasibleNodes"
    # Nothing from the rejected gang may linger: the same small task fits.
    npid = session.cspawn([small])[0]
    session.kill(npid)


def test_gang_shortfall_reports_slot_arithmetic(session):
    # Three 16000-millicore nodes fit one 9000-millicore task each; a gang
    # of four must be rejected whole, naming the actual slot count.
    big = {"executable": "/bin/sleep", "args": ["30"],
           "resources": {"cpu": 9000, "mem": 1 << 20}}
    with pytest.raises(SpawnRejected) as exc:
        session.cspawn([big] * 4)
    assert exc.value.reason == "InsufficientCapacity"
    assert "slots offered for 4 tasks" in exc.value.detail


def test_spawned_child_runs_sdk_in_token_mode(session):
    npid = session.spawn(
        sys.executable, args=(CHILD, "--register", "echo-svc", "--echo"),
        cpu=100, mem=64 << 20, handshake=True)
    assert session.wait("echo-svc", timeout=10.0) == npid

    session.message("echo-svc", b"by-name")
    echo = session.recv(timeout=10.0)
    assert echo == Message(src=npid, seq=echo.seq, payload=b"by-name")

    session.message(npid, b"by-npid")
    echo = session.recv(timeout=10.0)
    assert echo.payload == b"by-npid" and echo.src == npid
    session.kill(npid)


def test_service_id_register_wait_message(session):
    npid = session.spawn(
        sys.executable, args=(CHILD, "--register-id", "404", "--echo"),
        cpu=100, mem=64 << 20, handshake=True)
    assert session.wait(404, timeout=10.0) == npid
    session.message(404, b"numeric")
    echo = session.recv(timeout=10.0)
    assert echo.payload == b"numeric" and echo.src == npid
    session.kill(npid)


def test_publish_tags_topic(cluster, session):
    with NefeleSession(cluster.nodes[1].sock) as sub:
        sub.subscribe("alerts")
        deadline = time.monotonic() + 5.0
        while time.monotonic() < deadline:
            if session.publish("alerts", b"fire") >= 1:
                break
            time.sleep(0.05)   # subscription still propagating
        got = sub.recv(timeout=10.0)
        assert isinstance(got, Message)
        assert got.topic == "alerts" and got.payload == b"fire"


def test_errors_are_typed(cluster, session):
    with pytest.raises(NoRoute):
        session.message("nobody-registered-this", b"x")
    node_prefix = session.npid.rsplit(".", 1)[0]
    with pytest.raises(NoSuchProcess):
        session.kill(f"{node_prefix}.999999")
    with pytest.raises(MalformedNpid):
        session.kill("not-an-npid")
    with pytest.raises(BadRequest):
        session.wait("1.2.3", timeout=0.1)   # NPIDs cannot be waited on
    with pytest.raises(BadRequest):
        session.register("7.7.7")
    with pytest.raises(TypeError):
        session.message(3.5, b"x")


def test_wait_times_out(session):
    with pytest.raises(TimeoutError):
        session.wait("never-registered", timeout=0.3)


def test_session_requires_a_socket_path(monkeypatch):
    monkeypatch.delenv("NEFELE_SOCK", raising=False)
    with pytest.raises(ValueError):
        NefeleSession()


def test_closed_session_fails_cleanly(cluster):
    s = NefeleSession(cluster.nodes[0].sock)
    s.close()
    with pytest.raises(SessionClosed):
        s.message("anything", b"x")
    with pytest.raises(SessionClosed):
        s.recv(timeout=0.1)
