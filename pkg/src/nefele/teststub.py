"""Frame-speaking child process for integration tests.

Connects to the control socket named by NEFELE_SOCK, completes the spawn
handshake with NEFELE_TOKEN, then runs a small scripted behavior driven by
command-line flags.  This keeps handshake-dependent tests self-contained in
the core package: no client library required.

    python3 -m nefele.teststub --register webserver --recv-print
    python3 -m nefele.teststub --exit-after 0.1 --status 3
"""

from __future__ import annotations

import argparse
import json
import os
import socket
import sys
import time

from . import frames


def _connect() -> socket.socket:
    sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    sock.connect(os.environ["NEFELE_SOCK"])
    return sock


def _call(sock: socket.socket, frame: dict) -> dict:
    frames.write_frame(sock, frame)
    reply = frames.read_frame(sock)
    if reply is None:
        raise SystemExit("control connection closed")
    return reply


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="nefele-teststub")
    p.add_argument("--register", action="append", default=[],
                   help="register a service name after handshake")
    p.add_argument("--register-id", action="append", type=int, default=[],
                   help="register a numeric service id")
    p.add_argument("--subscribe", action="append", default=[],
                   help="subscribe to a topic")
    p.add_argument("--recv-print", action="store_true",
                   help="loop: print each received item as a JSON line")
    p.add_argument("--echo", action="store_true",
                   help="loop: send every received payload back to its source")
    p.add_argument("--print", dest="print_lines", action="append", default=[],
                   help="write a line to stdout (log-capture tests)")
    p.add_argument("--print-stderr", action="append", default=[],
                   help="write a line to stderr")
    p.add_argument("--monitor", action="append", default=[],
                   help="monitor an NPID after handshake")
    p.add_argument("--exit-after", type=float, default=None,
                   help="exit after this many seconds")
    p.add_argument("--status", type=int, default=0, help="exit status")
    p.add_argument("--skip-handshake", action="store_true",
                   help="never contact the agent (handshake-timeout tests)")
    args = p.parse_args(argv)

    if args.skip_handshake:
        time.sleep(args.exit_after if args.exit_after is not None else 3600)
        return args.status

    sock = _connect()
    ack = _call(sock, {"t": "hello", "token": os.environ["NEFELE_TOKEN"],
                       "os_pid": os.getpid()})
    if ack.get("t") != "ack":
        print(f"handshake rejected: {ack}", file=sys.stderr)
        return 111
    npid = ack["npid"]
    print(f"ready {npid}", flush=True)

    for name in args.register:
        _call(sock, {"t": "register", "name": name})
    for sid in args.register_id:
        _call(sock, {"t": "register", "service_id": sid})
    for topic in args.subscribe:
        _call(sock, {"t": "subscribe", "topic": topic})
    for target in args.monitor:
        _call(sock, {"t": "monitor", "npid": target})
    for line in args.print_lines:
        print(line, flush=True)
    for line in args.print_stderr:
        print(line, file=sys.stderr, flush=True)

    deadline = (time.monotonic() + args.exit_after
                if args.exit_after is not None else None)
    if args.recv_print or args.echo:
        while deadline is None or time.monotonic() < deadline:
            slice_t = 0.5 if deadline is None \
                else max(0.01, min(0.5, deadline - time.monotonic()))
            item = _call(sock, {"t": "recv", "timeout": slice_t})
            if item.get("t") == "timeout":
                continue
            if item.get("t") == "error":
                break
            if args.recv_print:
                out = dict(item)
                if "payload" in out:
                    out["payload"] = frames.unb64(out["payload"]).decode(
                        "utf-8", "replace")
                print(json.dumps(out, sort_keys=True), flush=True)
            if args.echo and item.get("t") == "msg":
                _call(sock, {"t": "send", "npid": item["src"],
                             "payload": item["payload"]})
    elif deadline is not None:
        time.sleep(max(0.0, deadline - time.monotonic()))
    else:
        while True:
            time.sleep(3600)
    return args.status


if __name__ == "__main__":
    sys.exit(main())
