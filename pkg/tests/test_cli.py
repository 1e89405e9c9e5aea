"""CLI tests: drive nef's main() against live agents and check output/exit codes."""

import json
import subprocess
import sys
import threading
import time

import pytest

from nefele import cli, frames
from nefele.model import ResourceVector, parse_npid

from test_agent import Ctl, cluster, http_call, spawn_sleep


def run_cli(agent, *argv, tenant=None):
    args = ["--agent", agent.config.control_socket_path]
    if tenant:
        args += ["--tenant", tenant]
    return cli.main(args + list(argv))


# -- spawn ---------------------------------------------------------------------


def test_spawn_prints_one_npid_per_line(capsys):
    with cluster(1) as (a,):
        rc = run_cli(a, "spawn", "/bin/sleep", "30")
        out = capsys.readouterr().out.splitlines()
        assert rc == 0
        assert len(out) == 1
        npid = parse_npid(out[0])          # well-formed or this raises
        assert npid.node.id == a.node.id


def test_spawn_count_prints_each_npid(capsys):
    with cluster(1) as (a,):
        rc = run_cli(a, "spawn", "--count", "3", "/bin/sleep", "30")
        out = capsys.readouterr().out.splitlines()
        assert rc == 0
        assert len(out) == 3
        assert len(set(out)) == 3


def test_spawn_rejection_exit_1_with_reason(capsys):
    with cluster(1, capacity=ResourceVector(1000, 1 << 30)) as (a,):
        rc = run_cli(a, "spawn", "--count", "3", "--cpu", "20000", "/bin/x")
        captured = capsys.readouterr()
        assert rc == 1
        assert captured.out == ""
        assert "insufficient capacity" in captured.err


def test_spawn_without_path_is_usage_error(capsys):
    with cluster(1) as (a,):
        rc = run_cli(a, "spawn")
        assert rc == 2


def test_spawn_env_and_args_reach_child(capsys):
    with cluster(1) as (a,):
        rc = run_cli(a, "spawn", "--env", "GREETING=bonjour",
                     "/bin/sh", "-c", "echo $GREETING")
        out = capsys.readouterr().out.strip()
        assert rc == 0
        npid = out
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            recs = a.runtime.tail_logs(parse_npid(npid))
            if recs:
                break
            time.sleep(0.05)
        assert recs[0].line == b"bonjour"


def test_spawn_bad_env_is_usage_error(capsys):
    with cluster(1) as (a,):
        rc = run_cli(a, "spawn", "--env", "NOEQUALS", "/bin/sleep", "1")
        assert rc == 2
        assert "K=V" in capsys.readouterr().err


# -- ps -------------------------------------------------------------------------


def test_ps_header_only_when_empty(capsys):
    with cluster(1) as (a,):
        rc = run_cli(a, "ps")
        out = capsys.readouterr().out.splitlines()
        assert rc == 0
        assert len(out) == 1
        assert out[0].split() == ["NPID", "NODE", "STATE", "CPU", "MEM",
                                  "NAME", "CMD"]


def test_ps_lists_running_rows(capsys):
    with cluster(1) as (a,):
        ctl = Ctl(a)
        npids = spawn_sleep(ctl, count=2)
        rc = run_cli(a, "ps")
        out = capsys.readouterr().out.splitlines()
        assert rc == 0
        rows = out[1:]
        assert len(rows) == 2
        for row in rows:
            cols = row.split()
            assert cols[0] in npids
            assert cols[2] == "running"
            assert cols[6] == "/bin/sleep"
        ctl.close()


def test_ps_json_matches_http_bytes(capsys):
    with cluster(1) as (a,):
        ctl = Ctl(a)
        spawn_sleep(ctl, count=2)
        rc = run_cli(a, "ps", "--json")
        cli_bytes = capsys.readouterr().out.strip()
        assert rc == 0

        import http.client
        conn = http.client.HTTPConnection("127.0.0.1", a.http_port, timeout=5)
        conn.request("GET", "/v1/processes?scope=cluster")
        http_bytes = conn.getresponse().read().decode()
        conn.close()
        assert cli_bytes == http_bytes
        ctl.close()


# -- kill / killall ---------------------------------------------------------------


def test_kill_dash_nine_form(capsys):
    with cluster(1) as (a,):
        ctl = Ctl(a)
        (npid,) = spawn_sleep(ctl)
        rc = run_cli(a, "kill", "-9", npid)
        assert rc == 0
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            if a.runtime.get(parse_npid(npid)).state.terminal:
                break
            time.sleep(0.02)
        assert a.runtime.get(parse_npid(npid)).exit_signal == 9
        ctl.close()


def test_kill_by_signal_name(capsys):
    with cluster(1) as (a,):
        ctl = Ctl(a)
        (npid,) = spawn_sleep(ctl)
        rc = run_cli(a, "kill", "-s", "term", npid)
        assert rc == 0
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            if a.runtime.get(parse_npid(npid)).state.terminal:
                break
            time.sleep(0.02)
        assert a.runtime.get(parse_npid(npid)).exit_signal == 15
        ctl.close()


def test_kill_unknown_npid_exit_1(capsys):
    with cluster(1) as (a,):
        rc = run_cli(a, "kill", "-9", f"{a.node.id}.{a.node.incarnation}.999")
        captured = capsys.readouterr()
        assert rc == 1
        assert "NoSuchProcess" in captured.err


def test_killall_across_nodes_reports_count(capsys):
    with cluster(2) as agents:
        ctl = Ctl(agents[0])
        spawn_sleep(ctl, count=2, anti_affinity=True)
        spawn_sleep(ctl, count=1)
        rc = run_cli(agents[0], "killall", "-9", "sleep")
        captured = capsys.readouterr()
        assert rc == 0
        assert captured.out.strip() == "3 signaled"
        ctl.close()


def test_killall_no_match_exit_1(capsys):
    with cluster(1) as (a,):
        rc = run_cli(a, "killall", "-9", "nothing-here")
        captured = capsys.readouterr()
        assert rc == 1
        assert "0 matched" in captured.err


# -- monitor ----------------------------------------------------------------------


def test_monitor_blocks_until_kill_then_prints_down(capsys):
    with cluster(1) as (a,):
        ctl = Ctl(a)
        (npid,) = spawn_sleep(ctl)
        result: dict = {}

        def watch():
            result["rc"] = run_cli(a, "monitor", npid)

        t = threading.Thread(target=watch, daemon=True)
        t.start()
        time.sleep(0.3)
        assert t.is_alive()                   # still blocked on the DOWN
        ctl.call({"t": "kill", "npid": npid})
        t.join(timeout=5)
        assert not t.is_alive()
        assert result["rc"] == 0
        assert capsys.readouterr().out.strip() == f"down {npid} signal 9"
        ctl.close()


def test_monitor_unknown_target_immediate_noproc(capsys):
    with cluster(1) as (a,):
        bogus = f"{a.node.id}.{a.node.incarnation}.777777"
        rc = run_cli(a, "monitor", bogus)
        assert rc == 0
        assert capsys.readouterr().out.strip() == f"down {bogus} noproc"


def test_monitor_exit_status_line(capsys):
    with cluster(1) as (a,):
        ctl = Ctl(a)
        reply = ctl.call({"t": "spawn", "path": "/bin/sh",
                          "args": ["-c", "sleep 0.4; exit 7"]})
        (npid,) = reply["npids"]
        rc = run_cli(a, "monitor", npid)
        assert rc == 0
        assert capsys.readouterr().out.strip() == f"down {npid} status 7"
        ctl.close()


# -- logs --------------------------------------------------------------------------


def _spawn_printer(ctl, lines: list[str], tail: str = "") -> str:
    script = "; ".join(f"echo {l}" for l in lines) + (f"; {tail}" if tail else "")
    reply = ctl.call({"t": "spawn", "path": "/bin/sh", "args": ["-c", script]})
    assert reply["ok"], reply
    return reply["npids"][0]


def test_logs_prints_ts_npid_stream_line(capsys):
    with cluster(1) as (a,):
        ctl = Ctl(a)
        npid = _spawn_printer(ctl, ["uno", "dos"])
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            if len(a.runtime.tail_logs(parse_npid(npid))) >= 2:
                break
            time.sleep(0.05)
        rc = run_cli(a, "logs", npid)
        out = capsys.readouterr().out.splitlines()
        assert rc == 0
        assert len(out) == 2
        ts, got_npid, stream, line = out[0].split(" ", 3)
        float(ts)
        assert got_npid == npid and stream == "stdout" and line == "uno"
        assert out[1].endswith("dos")
        ctl.close()


def test_logs_last_n_trims(capsys):
    with cluster(1) as (a,):
        ctl = Ctl(a)
        npid = _spawn_printer(ctl, ["a", "b", "c", "d"])
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            if len(a.runtime.tail_logs(parse_npid(npid))) >= 4:
                break
            time.sleep(0.05)
        rc = run_cli(a, "logs", "--last", "2", npid)
        out = capsys.readouterr().out.splitlines()
        assert rc == 0
        assert [l.rsplit(" ", 1)[1] for l in out] == ["c", "d"]
        ctl.close()


def test_logs_follow_ends_cleanly_on_exit(capsys):
    with cluster(1) as (a,):
        ctl = Ctl(a)
        npid = _spawn_printer(ctl, ["first"], tail="sleep 0.3; echo last")
        rc = run_cli(a, "logs", "--follow", npid)
        out = capsys.readouterr().out
        assert rc == 0
        assert "first" in out and "last" in out
        ctl.close()


def test_logs_json_lines_match_http_records(capsys):
    with cluster(1) as (a,):
        ctl = Ctl(a)
        npid = _spawn_printer(ctl, ["x"])
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            if a.runtime.tail_logs(parse_npid(npid)):
                break
            time.sleep(0.05)
        rc = run_cli(a, "logs", "--json", npid)
        cli_lines = capsys.readouterr().out.strip().splitlines()
        assert rc == 0

        import http.client
        conn = http.client.HTTPConnection("127.0.0.1", a.http_port, timeout=5)
        conn.request("GET", f"/v1/logs/{npid}")
        http_lines = conn.getresponse().read().decode().strip().splitlines()
        conn.close()
        assert cli_lines == http_lines
        ctl.close()


# -- plumbing -----------------------------------------------------------------------


def test_nefele_sock_env_resolution(capsys, monkeypatch):
    with cluster(1) as (a,):
        monkeypatch.setenv("NEFELE_SOCK", a.config.control_socket_path)
        rc = cli.main(["ps"])
        assert rc == 0


def test_unreachable_agent_exit_1(capsys):
    rc = cli.main(["--agent", "/tmp/definitely-not-a-socket", "ps"])
    assert rc == 1
    assert "cannot reach agent" in capsys.readouterr().err


def test_no_subcommand_usage_error(capsys):
    assert cli.main([]) == 2


def test_tenant_scopes_spawn_and_ps(capsys):
    with cluster(1) as (a,):
        rc = run_cli(a, "spawn", "/bin/sleep", "30", tenant="acme")
        npid = capsys.readouterr().out.strip()
        assert rc == 0

        rc = run_cli(a, "ps", tenant="acme")
        out = capsys.readouterr().out
        assert npid in out

        rc = run_cli(a, "ps", tenant="ghost")
        out = capsys.readouterr().out.splitlines()
        assert len(out) == 1           # header only
