"""Shared test helpers: in-memory cluster transport and assignment oracle."""

from __future__ import annotations

import itertools
import threading
from collections import Counter

from nefele.model import NodeId, ResourceVector, TaskSpec
from nefele.placement import LocalResources, Offer


class FakeNode:
    """One cluster member: real reservation bookkeeping, fake process spawns."""

    def __init__(self, node_id: int, capacity: ResourceVector, clock=None,
                 reservation_ttl: float = 2.0):
        import time
        self.node = NodeId(node_id, 1)
        self.addr = f"fake:{node_id}"
        self.resources = LocalResources(self.node, capacity,
                                        clock=clock or time.monotonic,
                                        reservation_ttl=reservation_ttl)
        self._seq = 0
        self._lock = threading.Lock()
        self.spawned: list[dict] = []     # {npid, spec, killed}
        self.fail_commit = False
        self.fail_deploy = False
        self.raise_on_deploy = False    # transport-level loss, not spawn error
        self.util_var_ewma = 0.0

    def handle(self, frame: dict) -> dict:
        t = frame["t"]
        if t == "feas-req":
            offer = self.resources.feasibility_check(
                ResourceVector.from_wire(frame["resources"]),
                int(frame["n_wanted"]), util_var_ewma=self.util_var_ewma)
            if offer is None:
                return {"t": "offer", "max_tasks": 0}
            return offer.to_wire()
        if t == "commit":
            if self.fail_commit:
                return {"t": "commit", "ok": False}
            ok = self.resources.commit(frame["reservation_id"],
                                       ResourceVector.from_wire(frame["resources"]))
            return {"t": "commit", "ok": ok}
        if t == "release":
            if "deallocate" in frame:
                self.resources.deallocate(ResourceVector.from_wire(frame["deallocate"]))
            else:
                self.resources.release(frame["reservation_id"])
            return {"t": "release", "ok": True}
        if t == "deploy":
            if self.raise_on_deploy:
                raise ConnectionError(f"node {self.node.id} died mid-deploy")
            results = []
            for item in frame["tasks"]:
                spec = TaskSpec.from_wire(item["spec"])
                if self.fail_deploy:
                    self.resources.deallocate(spec.resources)
                    results.append({"index": item["index"], "ok": False,
                                    "error": "spawn failed"})
                    continue
                with self._lock:
                    self._seq += 1
                    npid = f"{self.node.id}.{self.node.incarnation}.{self._seq}"
                self.spawned.append({"npid": npid, "spec": spec, "killed": False})
                results.append({"index": item["index"], "ok": True, "npid": npid})
            return {"t": "deploy-ack", "request_id": frame["request_id"],
                    "results": results}
        if t == "kill":
            for rec in self.spawned:
                if rec["npid"] == frame["npid"] and not rec["killed"]:
                    rec["killed"] = True
                    self.resources.deallocate(rec["spec"].resources)
                    return {"t": "kill", "ok": True}
            return {"t": "kill", "ok": False}
        raise AssertionError(f"unexpected frame {t}")


class FakeCluster:
    """Implements the pipeline's transport interface over direct calls."""

    def __init__(self, capacities: dict[int, ResourceVector], clock=None,
                 reservation_ttl: float = 2.0):
        self.nodes = {
            node_id: FakeNode(node_id, cap, clock=clock, reservation_ttl=reservation_ttl)
            for node_id, cap in capacities.items()
        }
        self.down: set[int] = set()

    def members(self) -> list[tuple[NodeId, str]]:
        return [(n.node, n.addr) for nid, n in sorted(self.nodes.items())
                if nid not in self.down]

    def request(self, addr: str, frame: dict, timeout: float) -> dict:
        node_id = int(addr.split(":")[1])
        if node_id in self.down:
            raise ConnectionError(f"node {node_id} unreachable")
        return self.nodes[node_id].handle(frame)

    def send(self, addr: str, frame: dict) -> None:
        try:
            self.request(addr, frame, 1.0)
        except ConnectionError:
            pass

    def all_spawned(self) -> list[dict]:
        return [rec for n in self.nodes.values() for rec in n.spawned]

    def live_spawned(self) -> list[dict]:
        return [rec for rec in self.all_spawned() if not rec["killed"]]


def oracle_assign(offers: list[Offer], tasks_groups: list[str | None]):
    """Exhaustive-enumeration argmax: maximize summed offer score over complete
    assignments, tie-break lexicographically smallest per-task rank tuple.
    Returns the rank tuple (indices into the score-sorted offer list), or None
    if no complete assignment exists."""
    ranked = sorted(offers, key=lambda o: (-o.score, o.node.id))
    n = len(tasks_groups)
    best = None
    for combo in itertools.product(range(len(ranked)), repeat=n):
        used = Counter(combo)
        if any(used[j] > ranked[j].max_tasks for j in used):
            continue
        seen_groups = set()
        ok = True
        for i, j in enumerate(combo):
            g = tasks_groups[i]
            if g is not None:
                if (g, j) in seen_groups:
                    ok = False
                    break
                seen_groups.add((g, j))
        if not ok:
            continue
        total = sum(ranked[j].score for j in combo)
        key = (-total, combo)
        if best is None or key < best:
            best = key
    if best is None:
        return None
    return best[1]


def plan_to_ranks(plan, offers, n_tasks: int):
    """Convert a PlacementPlan to the oracle's rank-tuple form."""
    ranked = sorted(offers, key=lambda o: (-o.score, o.node.id))
    rank_of_node = {o.node.id: j for j, o in enumerate(ranked)}
    ranks = [None] * n_tasks
    for node, indices in plan.assignments:
        for i in indices:
            ranks[i] = rank_of_node[node.id]
    return tuple(ranks)
