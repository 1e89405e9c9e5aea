"""Management HTTP API: JSON over a threading HTTP server.

Serialization goes through dumps_canonical so the CLI's --json output and
these endpoint bodies are byte-identical for the same data.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .model import (
    BadRequest,
    MalformedNpid,
    NefeleError,
    NoSuchProcess,
    TaskSpec,
    Unreachable,
    parse_npid,
)

log = logging.getLogger("nefele.http")


def dumps_canonical(obj) -> str:
    """The one JSON presentation used for HTTP bodies and CLI --json."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


_NPID_PATH = re.compile(r"^/v1/(?:processes|logs)/([^/]+)$")


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    # The stock listen backlog of 5 drops connects under submission
    # bursts long before the admission pipeline is the bottleneck.
    request_queue_size = 128


class ManagementServer:
    def __init__(self, agent, host: str, port: int):
        self.agent = agent
        handler = _make_handler(agent)
        try:
            self._srv = _Server((host, port), handler)
        except OSError as e:
            raise RuntimeError(f"cannot bind http {host}:{port}: {e}") from e
        self._thread = threading.Thread(target=self._srv.serve_forever,
                                        name="http", daemon=True)

    @property
    def port(self) -> int:
        return self._srv.server_address[1]

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._srv.shutdown()
        self._srv.server_close()


def _make_handler(agent):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.client_address[0], *args)

        # -- helpers -------------------------------------------------------

        def _json(self, code: int, obj) -> None:
            body = dumps_canonical(obj).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _error(self, code: int, message: str) -> None:
            self._json(code, {"error": message})

        def _query(self) -> dict:
            return {k: v[-1] for k, v
                    in parse_qs(urlparse(self.path).query).items()}

        def _route(self) -> str:
            return urlparse(self.path).path.rstrip("/") or "/"

        # -- GET ------------------------------------------------------------

        def do_GET(self):
            path, q = self._route(), self._query()
            try:
                if path == "/v1/nodes":
                    return self._json(200, agent.nodes_wire())
                if path == "/v1/processes":
                    records, partial = agent.list_processes(
                        q.get("scope", "cluster"), q.get("tenant"))
                    if partial:
                        self.send_response(200)
                        self.send_header("Content-Type", "application/json")
                        self.send_header("X-Nefele-Partial", "true")
                        body = dumps_canonical(records).encode()
                        self.send_header("Content-Length", str(len(body)))
                        self.end_headers()
                        self.wfile.write(body)
                        return
                    return self._json(200, records)
                if path == "/v1/names":
                    return self._json(200, agent.names_wire(q.get("tenant")))
                if path == "/v1/requests":
                    # Full admission table in one response so pollers do not
                    # need a round trip per request id.
                    return self._json(200, agent.pipeline.statuses())
                m = re.match(r"^/v1/requests/([^/]+)$", path)
                if m:
                    st = agent.pipeline.status(m.group(1))
                    if st is None:
                        return self._error(404, "unknown request id")
                    return self._json(200, st)
                m = re.match(r"^/v1/logs/([^/]+)$", path)
                if m:
                    return self._logs(m.group(1), q)
                return self._error(404, "no such endpoint")
            except MalformedNpid as e:
                return self._error(400, str(e))
            except NefeleError as e:
                return self._error(500, str(e))

        def _logs(self, npid_text: str, q: dict) -> None:
            npid = parse_npid(npid_text)
            last_n = int(q["last_n"]) if "last_n" in q else None
            follow = q.get("follow", "").lower() in ("1", "true", "yes")
            if not follow:
                records = agent.tail_logs(npid, last_n)
                self.send_response(200)
                self.send_header("Content-Type", "application/x-ndjson")
                self.send_header("Connection", "close")
                self.end_headers()
                for rec in records:
                    self.wfile.write(dumps_canonical(rec).encode() + b"\n")
                return
            snapshot, live, cancel = agent.follow_logs(npid, last_n)
            self.send_response(200)
            self.send_header("Content-Type", "application/x-ndjson")
            self.send_header("Connection", "close")
            self.end_headers()
            try:
                for rec in snapshot:
                    self.wfile.write(dumps_canonical(rec).encode() + b"\n")
                self.wfile.flush()
                while True:
                    batch = live.get()
                    if batch is None:
                        return
                    for rec in batch:
                        self.wfile.write(dumps_canonical(rec).encode() + b"\n")
                    self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError):
                return
            finally:
                cancel()

        # -- POST -------------------------------------------------------------

        def do_POST(self):
            if self._route() != "/v1/spawn":
                return self._error(404, "no such endpoint")
            try:
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length) or b"{}")
                tasks = [TaskSpec.from_wire(w) for w in body.get("tasks", ())]
                req = agent.build_request(str(body.get("tenant", "default")),
                                          tasks, body.get("request_id"))
                agent.submit_spawn(req)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError,
                    BadRequest) as e:
                return self._error(400, str(e))
            return self._json(202, {"request_id": req.request_id})

        # -- DELETE -------------------------------------------------------------

        def do_DELETE(self):
            m = re.match(r"^/v1/processes/([^/]+)$", self._route())
            if not m:
                return self._error(404, "no such endpoint")
            q = self._query()
            try:
                npid = parse_npid(m.group(1))
                signo = int(q.get("signal", 9))
                agent.kill_npid(npid, signo)
            except MalformedNpid as e:
                return self._error(400, str(e))
            except NoSuchProcess as e:
                return self._error(404, str(e))
            except Unreachable as e:
                return self._error(503, str(e))
            return self._json(200, {"ok": True})

    return Handler
