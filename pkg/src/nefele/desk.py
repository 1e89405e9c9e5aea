"""Single-host test cluster: N agents as separate OS processes.

The bench harness and the acceptance suite both need a disposable cluster
on one machine.  DeskCluster writes one config file per node, launches
``python -m nefele.agent_main`` for each, waits for the ready line, and
tears everything down on exit.  Nodes share a seed list so membership
converges without any external discovery.
"""

from __future__ import annotations

import os
import shutil
import socket
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field

from .model import ResourceVector

__all__ = ["DeskNode", "DeskCluster"]

_READY_TIMEOUT = 15.0
_CONVERGE_TIMEOUT = 10.0


def free_ports(n: int) -> list[int]:
    """Pick n distinct ports that are currently free for both TCP and UDP.

    Agents bind one port twice (stream for peer frames, datagram for
    membership), so a port is only usable if both binds succeed.  The
    sockets are held open until all n are collected to stop the kernel
    from handing the same port out twice.
    """
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
class DeskNode:
    node_id: int
    port: int
    http_port: int = 0
    sock: str = ""
    addr: str = ""
    proc: subprocess.Popen | None = field(default=None, repr=False)

    @property
    def alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None


class DeskCluster:
    """Owns the agent subprocesses for one experiment.

    `capacities` overrides per-node CPU capacity (millicores) positionally;
    unspecified nodes get `capacity`.  Extra TOML tables for every node can
    be passed through `tuning`, e.g. ``{"swim": {"protocol_period": 0.05}}``.
    """

    def __init__(self, n: int, capacity: ResourceVector | None = None,
                 capacities: list[int] | None = None,
                 tuning: dict | None = None,
                 base_dir: str | None = None):
        self.n = n
        self.capacity = capacity or ResourceVector(16000, 64 << 30)
        self.capacities = capacities or []
        self.tuning = tuning or {}
        self.base_dir = base_dir or tempfile.mkdtemp(prefix="nefele-desk-")
        self._own_dir = base_dir is None
        self.nodes: list[DeskNode] = []

    # -- lifecycle -------------------------------------------------------

    def start(self, converge: bool = True) -> "DeskCluster":
        ports = free_ports(self.n)
        seeds = [f"127.0.0.1:{p}" for p in ports]
        for i, port in enumerate(ports):
            node_id = i + 1
            cpu = (self.capacities[i] if i < len(self.capacities)
                   else self.capacity.cpu)
            cfg_path = self._write_config(node_id, port, cpu, seeds)
            proc = subprocess.Popen(
                [sys.executable, "-m", "nefele.agent_main",
                 "--config", cfg_path, "--log-level", "warning"],
                stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
                text=True, start_new_session=True)
            self.nodes.append(DeskNode(node_id=node_id, port=port, proc=proc))
        for node in self.nodes:
            self._await_ready(node)
        if converge:
            self.wait_converged()
        return self

    def _write_config(self, node_id: int, port: int, cpu_mc: int,
                      seeds: list[str]) -> str:
        data_dir = os.path.join(self.base_dir, f"node-{node_id}")
        os.makedirs(data_dir, exist_ok=True)
        lines = [
            f"node_id = {node_id}",
            'bind_host = "127.0.0.1"',
            f"port = {port}",
            "http_port = 0",
            f'data_dir = "{data_dir}"',
            "seeds = [" + ", ".join(f'"{s}"' for s in seeds) + "]",
            "",
            "[capacity]",
            f"cpu_millicores = {cpu_mc}",
            f"mem_bytes = {self.capacity.mem}",
        ]
        for table, keys in self.tuning.items():
            lines += ["", f"[{table}]"]
            lines += [f"{k} = {v}" for k, v in keys.items()]
        path = os.path.join(data_dir, "agent.toml")
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
        return path

    def _await_ready(self, node: DeskNode) -> None:
        deadline = time.monotonic() + _READY_TIMEOUT
        assert node.proc is not None and node.proc.stdout is not None
        while time.monotonic() < deadline:
            line = node.proc.stdout.readline()
            if not line:
                raise RuntimeError(
                    f"node {node.node_id} exited before ready "
                    f"(rc={node.proc.poll()})")
            if line.startswith("ready "):
                fields = dict(kv.split("=", 1) for kv in line.split()[1:])
                node.addr = fields["addr"]
                node.http_port = int(fields["http"])
                node.sock = fields["sock"]
                return
        raise RuntimeError(f"node {node.node_id} not ready in {_READY_TIMEOUT}s")

    def wait_converged(self, timeout: float = _CONVERGE_TIMEOUT) -> None:
        """Block until every node sees all n members alive."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if all(self._alive_count(n) == self.n for n in self.nodes):
                return
            time.sleep(0.1)
        raise RuntimeError(f"cluster did not converge in {timeout}s")

    def _alive_count(self, node: DeskNode) -> int:
        try:
            members = self.http_json(node, "GET", "/v1/nodes")
        except OSError:
            return -1
        return sum(1 for m in members if m["status"] == "alive")

    def cpu_capacity(self, index: int) -> int:
        """CPU millicores the node at `index` was configured with."""
        if index < len(self.capacities):
            return self.capacities[index]
        return self.capacity.cpu

    def kill_node(self, index: int) -> None:
        """SIGKILL one agent: simulates a node crash, no leave message."""
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
        if self._own_dir:
            shutil.rmtree(self.base_dir, ignore_errors=True)

    def __enter__(self) -> "DeskCluster":
        try:
            return self.start()
        except Exception:
            self.stop()
            raise

    def __exit__(self, *exc) -> None:
        self.stop()

    # -- client helpers ----------------------------------------------------

    def http_json(self, node: DeskNode, method: str, path: str,
                  body: dict | list | None = None, timeout: float = 10.0):
        """One HTTP exchange with a node's management port, JSON in and out."""
        import http.client
        import json
        conn = http.client.HTTPConnection("127.0.0.1", node.http_port,
                                          timeout=timeout)
        try:
            payload = None if body is None else json.dumps(body).encode()
            headers = {"Content-Type": "application/json"} if payload else {}
            conn.request(method, path, body=payload, headers=headers)
            resp = conn.getresponse()
            data = resp.read()
            if resp.status >= 400:
                raise OSError(f"{method} {path} -> {resp.status} {data[:200]!r}")
            return json.loads(data) if data else None
        finally:
            conn.close()


if __name__ == "__main__":  # pragma: no cover - manual smoke helper
    with DeskCluster(int(sys.argv[1]) if len(sys.argv) > 1 else 3) as desk:
        for nd in desk.nodes:
            print(f"node {nd.node_id} http={nd.http_port} sock={nd.sock}")
        print("ctrl-c to stop")
        try:
            while True:
                time.sleep(1)
        except KeyboardInterrupt:
            pass
