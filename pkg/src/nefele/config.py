"""Agent configuration: dataclass defaults plus an optional TOML file.

One `port` serves both gossip (UDP) and the inter-node transport (TCP); the
two protocols have independent port namespaces so sharing the number keeps
the member address book to a single host:port string.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:           # Python < 3.11
    import tomli as tomllib

from .membership import SwimConfig
from .model import BadRequest, ResourceVector
from .placement import PlacementConfig

DEFAULT_PORT = 7946
DEFAULT_HTTP_PORT = 8946


def detect_capacity() -> ResourceVector:
    """Host capacity: 1000 millicores per CPU, total physical memory."""
    cpus = os.cpu_count() or 1
    try:
        mem = os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError):
        mem = 8 << 30
    return ResourceVector(cpu=cpus * 1000, mem=mem)


@dataclass(frozen=True)
class AgentConfig:
    node_id: int
    bind_host: str = "127.0.0.1"
    port: int = DEFAULT_PORT              # gossip UDP + inter-node TCP
    http_port: int = DEFAULT_HTTP_PORT
    data_dir: str = ""                    # default: ~/.nefele/node-<id>
    control_socket_path: str = ""         # default: <data_dir>/control.sock
    seeds: tuple[str, ...] = ()           # "host:port" of existing members
    capacity: ResourceVector | None = None   # None: detect from the host
    swim: SwimConfig = field(default_factory=SwimConfig)
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    sample_period: float = 1.0
    ewma_alpha: float = 0.2

    def __post_init__(self):
        if not (0 < self.node_id < 2 ** 32):
            raise BadRequest(f"node_id out of range: {self.node_id}")
        if self.capacity is not None and (self.capacity.cpu <= 0
                                          or self.capacity.mem <= 0):
            raise BadRequest("capacity components must be > 0")
        if self.sample_period <= 0 or not (0 < self.ewma_alpha <= 1):
            raise BadRequest("bad sampler settings")

    def resolved(self) -> "AgentConfig":
        """Fill in derived defaults (data_dir, socket path, capacity)."""
        data_dir = self.data_dir or str(
            Path.home() / ".nefele" / f"node-{self.node_id}")
        sock = self.control_socket_path or str(Path(data_dir) / "control.sock")
        cap = self.capacity or detect_capacity()
        return replace(self, data_dir=data_dir, control_socket_path=sock,
                       capacity=cap)

    @property
    def gossip_addr(self) -> str:
        return f"{self.bind_host}:{self.port}"


def _subconfig(cls, table: dict, allowed: set[str]):
    unknown = set(table) - allowed
    if unknown:
        raise BadRequest(f"unknown config keys: {sorted(unknown)}")
    return cls(**table)


def load_config(path: "str | Path") -> AgentConfig:
    with open(path, "rb") as f:
        raw = tomllib.load(f)

    kwargs: dict = {}
    simple = {"node_id", "bind_host", "port", "http_port", "data_dir",
              "control_socket_path", "sample_period", "ewma_alpha"}
    for key in simple & set(raw):
        kwargs[key] = raw[key]
    if "seeds" in raw:
        kwargs["seeds"] = tuple(str(s) for s in raw["seeds"])
    if "capacity" in raw:
        cap = raw["capacity"]
        kwargs["capacity"] = ResourceVector(cpu=int(cap["cpu_millicores"]),
                                            mem=int(cap["mem_bytes"]))
    if "swim" in raw:
        kwargs["swim"] = _subconfig(
            SwimConfig, raw["swim"],
            {"protocol_period", "indirect_probes", "suspect_timeout",
             "piggyback_limit"})
    if "placement" in raw:
        kwargs["placement"] = _subconfig(
            PlacementConfig, raw["placement"],
            {"gather_window", "reservation_ttl", "workers", "w_strand",
             "w_over", "commit_timeout", "deploy_timeout", "table_cap",
             "admit_attempts", "retry_backoff"})
    known = simple | {"seeds", "capacity", "swim", "placement"}
    unknown = set(raw) - known
    if unknown:
        raise BadRequest(f"unknown config keys: {sorted(unknown)}")
    if "node_id" not in kwargs:
        raise BadRequest("config must set node_id")
    return AgentConfig(**kwargs)


def bump_incarnation(data_dir: "str | Path") -> int:
    """Read, increment, and persist the restart counter for this node."""
    path = Path(data_dir) / "incarnation"
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        current = int(path.read_text().strip())
    except (FileNotFoundError, ValueError):
        current = 0
    nxt = current + 1
    tmp = path.with_suffix(".tmp")
    tmp.write_text(f"{nxt}\n")
    tmp.replace(path)
    return nxt
