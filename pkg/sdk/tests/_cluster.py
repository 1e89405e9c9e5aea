"""Minimal cluster harness for the SDK test suite.

Boots N agents with the installed ``nefele-agent`` binary and tears them
down afterwards.  Deliberately self-contained: the SDK talks to agents
only over their published surfaces (config file, ready line, control
socket, management HTTP), and so does this harness.
"""

from __future__ import annotations

import http.client
import json
import os
import shutil
import socket
import subprocess
import tempfile
import time
from dataclasses import dataclass, field

import pytest

READY_TIMEOUT = 15.0
CONVERGE_TIMEOUT = 10.0

requires_agent = pytest.mark.skipif(
    shutil.which("nefele-agent") is None,
    reason="nefele-agent binary not installed")


def free_ports(n: int) -> list[int]:
    """Pick n ports free for both TCP and UDP, held until all are chosen."""
    held, ports = [], []
    try:
        while len(ports) < n:
            tcp = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            tcp.bind(("127.0.0.1", 0))
            port = tcp.getsockname()[1]
            udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            try:
                udp.bind(("127.0.0.1", port))
            except OSError:
                tcp.close()
                udp.close()
                continue
            held += [tcp, udp]
            ports.append(port)
    finally:
        for s in held:
            s.close()
    return ports


@dataclass
class Node:
    node_id: int
    port: int
    http_port: int = 0
    sock: str = ""
    proc: subprocess.Popen | None = field(default=None, repr=False)


class Cluster:
    def __init__(self, n: int, cpu_millicores: int = 16000,
                 capacities: list[int] | None = None):
        self.n = n
        self.cpu = cpu_millicores
        self.capacities = capacities or []
        self.base_dir = tempfile.mkdtemp(prefix="nefele-sdk-")
        self.nodes: list[Node] = []

    def start(self) -> "Cluster":
        ports = free_ports(self.n)
        seeds = ", ".join(f'"127.0.0.1:{p}"' for p in ports)
        for i, port in enumerate(ports):
            node_id = i + 1
            data_dir = os.path.join(self.base_dir, f"node-{node_id}")
            os.makedirs(data_dir, exist_ok=True)
            cpu = self.capacities[i] if i < len(self.capacities) else self.cpu
            cfg = os.path.join(data_dir, "agent.toml")
            with open(cfg, "w") as f:
                f.write("\n".join([
                    f"node_id = {node_id}",
                    'bind_host = "127.0.0.1"',
                    f"port = {port}",
                    "http_port = 0",
                    f'data_dir = "{data_dir}"',
                    f"seeds = [{seeds}]",
                    "",
                    "[capacity]",
                    f"cpu_millicores = {cpu}",
                    f"mem_bytes = {64 << 30}",
                ]) + "\n")
            proc = subprocess.Popen(
                ["nefele-agent", "--config", cfg, "--log-level", "warning"],
                stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
                text=True, start_new_session=True)
            self.nodes.append(Node(node_id=node_id, port=port, proc=proc))
        for node in self.nodes:
            self._await_ready(node)
        self._wait_converged()
        return self

    def _await_ready(self, node: Node) -> None:
        deadline = time.monotonic() + READY_TIMEOUT
        assert node.proc is not None and node.proc.stdout is not None
        while time.monotonic() < deadline:
            line = node.proc.stdout.readline()
            if not line:
                raise RuntimeError(
                    f"node {node.node_id} exited before ready "
                    f"(rc={node.proc.poll()})")
            if line.startswith("ready "):
                fields = dict(kv.split("=", 1) for kv in line.split()[1:])
                node.http_port = int(fields["http"])
                node.sock = fields["sock"]
                return
        raise RuntimeError(f"node {node.node_id} not ready")

    def _wait_converged(self) -> None:
        deadline = time.monotonic() + CONVERGE_TIMEOUT
        while time.monotonic() < deadline:
            if all(self._alive_count(n) == self.n for n in self.nodes):
                return
            time.sleep(0.1)
        raise RuntimeError("cluster did not converge")

    def _alive_count(self, node: Node) -> int:
        try:
            members = self.http_json(node, "GET", "/v1/nodes")
        except OSError:
            return -1
        return sum(1 for m in members if m["status"] == "alive")

    def http_json(self, node: Node, method: str, path: str,
                  timeout: float = 10.0):
        conn = http.client.HTTPConnection("127.0.0.1", node.http_port,
                                          timeout=timeout)
        try:
            conn.request(method, path)
            resp = conn.getresponse()
            data = resp.read()
            if resp.status >= 400:
                raise OSError(f"{method} {path} -> {resp.status}")
            return json.loads(data) if data else None
        finally:
            conn.close()

    def kill_node(self, index: int) -> None:
        node = self.nodes[index]
        if node.proc is not None and node.proc.poll() is None:
            node.proc.kill()
            node.proc.wait()

    def stop(self) -> None:
        for node in self.nodes:
            if node.proc is not None and node.proc.poll() is None:
                node.proc.terminate()
        deadline = time.monotonic() + 10.0
        for node in self.nodes:
            if node.proc is None:
                continue
            try:
                node.proc.wait(max(0.1, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                node.proc.kill()
                node.proc.wait()
            if node.proc.stdout is not None:
                node.proc.stdout.close()
        shutil.rmtree(self.base_dir, ignore_errors=True)

    def __enter__(self) -> "Cluster":
        try:
            return self.start()
        except Exception:
            self.stop()
            raise

    def __exit__(self, *exc) -> None:
        self.stop()
