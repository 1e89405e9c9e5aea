"""Agent daemon entry point: load config, run until SIGTERM/SIGINT."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from dataclasses import replace

from .agent import NodeAgent
from .config import AgentConfig, load_config
from .model import BadRequest


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="nefele-agent", description="Run one cluster node.")
    parser.add_argument("--config", metavar="TOML", help="config file")
    parser.add_argument("--node-id", type=int)
    parser.add_argument("--bind-host")
    parser.add_argument("--port", type=int)
    parser.add_argument("--http-port", type=int)
    parser.add_argument("--data-dir")
    parser.add_argument("--seed", action="append", default=[],
                        metavar="HOST:PORT",
                        help="existing member to join (repeatable)")
    parser.add_argument("--no-http", action="store_true")
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        if args.config:
            cfg = load_config(args.config)
        elif args.node_id is not None:
            cfg = AgentConfig(node_id=args.node_id)
        else:
            parser.error("need --config or --node-id")
        overrides: dict = {}
        for name, value in (("node_id", args.node_id),
                            ("bind_host", args.bind_host),
                            ("port", args.port),
                            ("http_port", args.http_port),
                            ("data_dir", args.data_dir)):
            if value is not None:
                overrides[name] = value
        if args.seed:
            overrides["seeds"] = tuple(args.seed)
        if overrides:
            cfg = replace(cfg, **overrides)
    except (BadRequest, OSError) as e:
        print(f"nefele-agent: {e}", file=sys.stderr)
        return 2

    agent = NodeAgent(cfg)
    try:
        agent.start(with_http=not args.no_http)
    except RuntimeError as e:
        print(f"nefele-agent: {e}", file=sys.stderr)
        return 1

    # Machine-parseable ready line: desk/bench harnesses wait for it.
    print(f"ready node={agent.node.id} addr={agent.swim.addr} "
          f"http={agent.http_port} sock={agent.config.control_socket_path}",
          flush=True)

    stopping = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stopping.set())
    signal.signal(signal.SIGINT, lambda *_: stopping.set())
    stopping.wait()
    agent.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
