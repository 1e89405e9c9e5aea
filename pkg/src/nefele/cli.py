"""Operator command line for a running agent.

Speaks the agent's local control socket. `--json` output reuses the HTTP
API's canonical serialization, so both surfaces emit identical bytes for
the same data.

Exit codes: 0 success, 1 remote/agent error, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import re
import signal as signals
import socket
import sys
from pathlib import Path

from . import frames
from .httpapi import dumps_canonical

EXIT_OK = 0
EXIT_REMOTE = 1
EXIT_USAGE = 2

_REJECTION_TEXT = {
    "NoFeasibleNodes": "insufficient capacity",
    "InsufficientCapacity": "insufficient capacity",
    "NodeLost": "a node was lost during placement",
    "DeployFailed": "deploy failed",
}


class CliError(Exception):
    """Remote failure or unreachable agent (exit 1)."""


class UsageError(Exception):
    """Bad invocation (exit 2)."""


class AgentClient:
    def __init__(self, sock_path: str, tenant: str):
        self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            self.sock.connect(sock_path)
        except OSError as e:
            raise CliError(f"cannot reach agent at {sock_path}: {e}") from e
        ack = self.call({"t": "hello", "tenant": tenant})
        if ack.get("t") != "ack":
            raise CliError(f"agent refused session: {ack.get('error', ack)}")
        self.npid = ack["npid"]

    def call(self, frame: dict) -> dict:
        frames.write_frame(self.sock, frame)
        return self.read()

    def call_checked(self, frame: dict) -> dict:
        reply = self.call(frame)
        if reply.get("t") == "error":
            raise CliError(f"{reply.get('code', 'Error')}: "
                           f"{reply.get('error', '')}")
        return reply

    def read(self) -> dict:
        try:
            reply = frames.read_frame(self.sock)
        except (OSError, frames.FrameError) as e:
            raise CliError(f"agent connection lost: {e}") from e
        if reply is None:
            raise CliError("agent closed the connection")
        return reply

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def _resolve_socket(flag_value: str | None) -> str:
    if flag_value:
        return flag_value
    env = os.environ.get("NEFELE_SOCK")
    if env:
        return env
    found = sorted(Path.home().glob(".nefele/node-*/control.sock"))
    if len(found) == 1:
        return str(found[0])
    if not found:
        raise UsageError("no agent socket found: pass --agent or set NEFELE_SOCK")
    raise UsageError(f"{len(found)} agent sockets under ~/.nefele: pass --agent")


def _parse_signal(text: str) -> int:
    if text.isdigit():
        return int(text)
    name = text.upper()
    if not name.startswith("SIG"):
        name = "SIG" + name
    try:
        return int(signals.Signals[name])
    except KeyError:
        raise UsageError(f"unknown signal {text!r}") from None


def _lift_signal_flags(tokens: list[str]) -> list[str]:
    """Rewrite `-9` style tokens to `--signal 9` for kill/killall."""
    out: list[str] = []
    for tok in tokens:
        m = re.fullmatch(r"-(\d{1,2})", tok)
        if m:
            out.extend(["--signal", m.group(1)])
        else:
            out.append(tok)
    return out


def _find_subcommand(argv: list[str]) -> int | None:
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok in ("--agent", "--tenant"):
            i += 2
            continue
        if tok.startswith("-"):
            i += 1
            continue
        return i
    return None


# -- subcommands ---------------------------------------------------------------


def cmd_spawn(client: AgentClient, args) -> int:
    env = {}
    for item in args.env:
        if "=" not in item:
            raise UsageError(f"--env expects K=V, got {item!r}")
        key, value = item.split("=", 1)
        env[key] = value
    frame = {"t": "nspawn", "path": args.path, "args": list(args.args),
             "count": args.count, "cpu": args.cpu, "mem": args.mem,
             "anti_affinity": args.anti_affinity,
             "handshake": args.handshake}
    if args.name:
        frame["name"] = args.name
    if env:
        frame["env"] = env
    reply = client.call_checked(frame)
    if not reply.get("ok"):
        reason = reply.get("reason", "")
        text = _REJECTION_TEXT.get(reason, reason or "rejected")
        detail = reply.get("detail", "")
        suffix = f" ({detail})" if detail else ""
        print(f"spawn rejected: {text}{suffix}", file=sys.stderr)
        return EXIT_REMOTE
    for npid in reply["npids"]:
        print(npid)
    return EXIT_OK


def _ps_row(rec: dict) -> list[str]:
    spec = rec["spec"]
    cmd = " ".join([spec["executable"], *spec["args"]])
    return [rec["npid"], str(rec["node"]["id"]), rec["state"],
            str(spec["resources"]["cpu"]), str(spec["resources"]["mem"]),
            spec["name"] or "-", cmd]


def _print_table(header: list[str], rows: list[list[str]]) -> None:
    widths = [len(h) for h in header]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    for line in [header, *rows]:
        print("  ".join(cell.ljust(widths[i])
                        for i, cell in enumerate(line)).rstrip())


def cmd_ps(client: AgentClient, args) -> int:
    frame = {"t": "ps", "scope": args.scope}
    if args.tenant is not None:
        frame["tenant"] = args.tenant
    reply = client.call_checked(frame)
    if reply.get("partial"):
        print("warning: some nodes unreachable, results partial",
              file=sys.stderr)
    records = reply["records"]
    if args.json:
        print(dumps_canonical(records))
        return EXIT_OK
    _print_table(["NPID", "NODE", "STATE", "CPU", "MEM", "NAME", "CMD"],
                 [_ps_row(r) for r in records])
    return EXIT_OK


def cmd_kill(client: AgentClient, args) -> int:
    signo = _parse_signal(args.signal)
    status = EXIT_OK
    for npid in args.npids:
        try:
            client.call_checked({"t": "kill", "npid": npid, "signal": signo})
        except CliError as e:
            print(f"kill {npid}: {e}", file=sys.stderr)
            status = EXIT_REMOTE
    return status


def cmd_killall(client: AgentClient, args) -> int:
    signo = _parse_signal(args.signal)
    frame = {"t": "killall", "pattern": args.pattern, "signal": signo}
    if args.tenant is not None:
        frame["tenant"] = args.tenant
    reply = client.call_checked(frame)
    count = reply["count"]
    if count == 0:
        print("0 matched", file=sys.stderr)
        return EXIT_REMOTE
    print(f"{count} signaled")
    return EXIT_OK


def _down_line(down: dict) -> str:
    npid = down["npid"]
    if down.get("exit_signal") is not None:
        return f"down {npid} signal {down['exit_signal']}"
    if down.get("exit_status") is not None:
        return f"down {npid} status {down['exit_status']}"
    return f"down {npid} {down['reason']}"


def cmd_monitor(client: AgentClient, args) -> int:
    client.call_checked({"t": "monitor", "npid": args.npid})
    while True:
        item = client.call({"t": "recv", "timeout": 60})
        if item.get("t") == "timeout":
            continue
        if item.get("t") == "error":
            raise CliError(item.get("error", "recv failed"))
        if item.get("t") == "down" and item.get("npid") == args.npid:
            print(_down_line(item))
            return EXIT_OK


def _print_log_records(records: list[dict], json_mode: bool) -> None:
    for rec in records:
        if json_mode:
            print(dumps_canonical(rec))
        else:
            line = frames.unb64(rec["line"]).decode("utf-8", "replace")
            print(f"{rec['ts']:.6f} {rec['npid']} {rec['stream']} {line}")


def cmd_logs(client: AgentClient, args) -> int:
    frame = {"t": "logs", "npid": args.npid}
    if args.last is not None:
        frame["last_n"] = args.last
    if args.follow:
        frame["follow"] = True
    reply = client.call_checked(frame)
    _print_log_records(reply["records"], args.json)
    while not reply.get("done"):
        reply = client.read()
        _print_log_records(reply.get("records", []), args.json)
    return EXIT_OK


# -- wiring ---------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nef", description="Control processes on a nefele cluster.")
    parser.add_argument("--agent", metavar="SOCK",
                        help="control socket path (default: $NEFELE_SOCK)")
    parser.add_argument("--tenant", default=None,
                        help="tenant to operate as (default: 'default')")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spawn", help="start a process somewhere in the cluster")
    p.add_argument("path")
    p.add_argument("args", nargs=argparse.REMAINDER)
    p.add_argument("--cpu", type=int, default=100, help="millicores per task")
    p.add_argument("--mem", type=int, default=64 << 20, help="bytes per task")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--name", help="service name to register at startup")
    p.add_argument("--env", action="append", default=[], metavar="K=V")
    p.add_argument("--anti-affinity", action="store_true",
                   help="place each replica on a distinct node")
    p.add_argument("--handshake", action="store_true",
                   help="wait for the child's hello before reporting Running")
    p.set_defaults(func=cmd_spawn)

    p = sub.add_parser("ps", help="list processes")
    p.add_argument("--scope", choices=("cluster", "local"), default="cluster")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ps)

    p = sub.add_parser("kill", help="signal processes by NPID")
    p.add_argument("--signal", "-s", default="9", metavar="SIGNO|NAME")
    p.add_argument("npids", nargs="+", metavar="NPID")
    p.set_defaults(func=cmd_kill)

    p = sub.add_parser("killall",
                       help="signal processes whose basename starts with PATTERN")
    p.add_argument("--signal", "-s", default="9", metavar="SIGNO|NAME")
    p.add_argument("pattern")
    p.set_defaults(func=cmd_killall)

    p = sub.add_parser("monitor", help="block until the process goes down")
    p.add_argument("npid")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("logs", help="print or follow a process's output")
    p.add_argument("npid")
    p.add_argument("--follow", "-f", action="store_true")
    p.add_argument("--last", type=int, default=None, metavar="N")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_logs)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    idx = _find_subcommand(argv)
    if idx is not None and argv[idx] in ("kill", "killall"):
        argv = argv[:idx + 1] + _lift_signal_flags(argv[idx + 1:])
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    try:
        sock_path = _resolve_socket(args.agent)
        client = AgentClient(sock_path, args.tenant or "default")
        try:
            return args.func(client, args)
        finally:
            client.close()
    except UsageError as e:
        print(f"nef: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CliError as e:
        print(f"nef: {e}", file=sys.stderr)
        return EXIT_REMOTE
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
