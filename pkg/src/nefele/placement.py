"""Decentralized feasibility-and-ranking scheduler.

Any node can admit a request: it fans a feasibility query out to every alive
member, collects scored offers backed by short-lived soft reservations, then
gang-places the whole request or rejects it.  Placement is all-or-nothing; a
partially satisfiable request releases every reservation it touched.

The solver (`rank_and_assign`) is a pure function over an offer set.  The
admission pipeline drives the network phases through an injected transport so
it can be exercised hermetically in tests.
"""

from __future__ import annotations

import logging
import math
import threading
import time
import uuid
from collections import Counter, OrderedDict, deque
from concurrent import futures
from dataclasses import dataclass, field
from typing import Callable

from .model import (
    NodeId,
    ResourceVector,
    SpawnRequest,
    ZeroDemand,
    max_fit_count,
)

log = logging.getLogger("nefele.placement")


@dataclass(frozen=True, slots=True)
class NodeLoadState:
    """Snapshot of one node's headroom used as scoring input."""

    capacity: ResourceVector
    allocated: ResourceVector
    util_ewma: float = 0.0
    util_var_ewma: float = 0.0


@dataclass(frozen=True, slots=True)
class Offer:
    node: NodeId
    max_tasks: int
    score: float
    reservation_id: str
    expires_at: float   # offering node's clock; only meaningful there

    def to_wire(self) -> dict:
        return {"t": "offer", "node": self.node.to_wire(), "max_tasks": self.max_tasks,
                "score": self.score, "reservation_id": self.reservation_id,
                "expires_at": self.expires_at}

    @classmethod
    def from_wire(cls, d: dict) -> "Offer":
        return cls(node=NodeId.from_wire(d["node"]), max_tasks=int(d["max_tasks"]),
                   score=float(d["score"]), reservation_id=str(d["reservation_id"]),
                   expires_at=float(d.get("expires_at", 0.0)))


@dataclass(frozen=True, slots=True)
class PlacementPlan:
    request_id: str
    assignments: tuple[tuple[NodeId, tuple[int, ...]], ...]
    decided_at: float

    def node_for(self, task_index: int) -> NodeId:
        for node, indices in self.assignments:
            if task_index in indices:
                return node
        raise KeyError(task_index)


@dataclass(frozen=True, slots=True)
class Rejection:
    reason: str          # NoFeasibleNodes | InsufficientCapacity | NodeLost | DeployFailed
    detail: str = ""


def score(req: ResourceVector, k: int, state: NodeLoadState,
          w_strand: float = 0.5, w_over: float = 0.5) -> float:
    """Rank a node for hosting k copies of `req`.

    Per resource dimension d, the post-placement free fraction is
    f_d = (cap_d - alloc_d - k*req_d) / cap_d.  The score rewards headroom,
    penalizes imbalance between dimensions (stranding risk) and recent
    utilization variance (oversubscription risk):

        score = min_d f_d - w_strand*(max_d f_d - min_d f_d)
                          - w_over*sqrt(util_var_ewma)

    Dimensions with zero capacity are skipped.  Raises ValueError if k copies
    do not fit; callers check feasibility first.
    """
    fractions = []
    for cap, alloc, r in (
        (state.capacity.cpu, state.allocated.cpu, req.cpu),
        (state.capacity.mem, state.allocated.mem, req.mem),
    ):
        if cap == 0:
            continue
        f = (cap - alloc - k * r) / cap
        if f < 0:
            raise ValueError(f"scoring an infeasible placement (k={k})")
        fractions.append(f)
    if not fractions:
        raise ValueError("node has zero capacity in every dimension")
    lo, hi = min(fractions), max(fractions)
    return lo - w_strand * (hi - lo) - w_over * math.sqrt(state.util_var_ewma)


@dataclass(slots=True)
class _Reservation:
    vec: ResourceVector
    expires_at: float


class LocalResources:
    """Per-node capacity bookkeeping: allocations plus soft reservations.

    Reservations bridge the gap between offer and commit so concurrent
    admissions cannot double-book; they expire after `reservation_ttl` to
    survive crashed admission nodes.  The capacity-safety invariant
    (allocated + reserved <= capacity, componentwise) holds under the lock.
    """

    def __init__(self, node: NodeId, capacity: ResourceVector,
                 clock: Callable[[], float] = time.monotonic,
                 reservation_ttl: float = 2.0,
                 w_strand: float = 0.5, w_over: float = 0.5):
        self.node = node
        self.capacity = capacity
        self.reservation_ttl = reservation_ttl
        self.w_strand = w_strand
        self.w_over = w_over
        self._clock = clock
        self._lock = threading.Lock()
        self._allocated = ResourceVector(0, 0)
        self._reservations: dict[str, _Reservation] = {}

    def _prune(self, now: float) -> None:
        expired = [rid for rid, r in self._reservations.items() if r.expires_at <= now]
        for rid in expired:
            del self._reservations[rid]

    def _reserved_total(self) -> ResourceVector:
        total = ResourceVector(0, 0)
        for r in self._reservations.values():
            total = total + r.vec
        return total

    def snapshot(self) -> tuple[ResourceVector, ResourceVector]:
        """(allocated, reserved) under the lock, reservations pruned."""
        with self._lock:
            self._prune(self._clock())
            return self._allocated, self._reserved_total()

    def load_state(self, util_ewma: float = 0.0, util_var_ewma: float = 0.0) -> NodeLoadState:
        allocated, reserved = self.snapshot()
        return NodeLoadState(self.capacity, allocated + reserved, util_ewma, util_var_ewma)

    def feasibility_check(self, req: ResourceVector, n_wanted: int,
                          util_var_ewma: float = 0.0) -> Offer | None:
        """Offer up to n_wanted slots for `req`, soft-reserving them."""
        with self._lock:
            now = self._clock()
            self._prune(now)
            reserved = self._reserved_total()
            free = self.capacity - (self._allocated + reserved)
            try:
                k = min(n_wanted, max_fit_count(req, free))
            except ZeroDemand:
                return None
            if k < 1:
                return None
            state = NodeLoadState(self.capacity, self._allocated + reserved,
                                  util_var_ewma=util_var_ewma)
            s = score(req, k, state, self.w_strand, self.w_over)
            rid = uuid.uuid4().hex
            expires = now + self.reservation_ttl
            self._reservations[rid] = _Reservation(req.scaled(k), expires)
            return Offer(self.node, k, s, rid, expires)

    def release(self, reservation_id: str) -> None:
        with self._lock:
            self._reservations.pop(reservation_id, None)

    def commit(self, reservation_id: str, total: ResourceVector) -> bool:
        """Convert a live reservation into an allocation of exactly `total`.

        `total` is the summed demand of the tasks actually assigned here; it
        may be less than the reserved amount (partial use), never more.
        """
        from .model import fits
        with self._lock:
            self._prune(self._clock())
            r = self._reservations.get(reservation_id)
            if r is None or not fits(total, r.vec):
                return False
            del self._reservations[reservation_id]
            self._allocated = self._allocated + total
            return True

    def deallocate(self, vec: ResourceVector) -> None:
        with self._lock:
            cpu = self._allocated.cpu - vec.cpu
            mem = self._allocated.mem - vec.mem
            if cpu < 0 or mem < 0:
                log.warning("deallocation underflow: %s below %s", vec, self._allocated)
                cpu, mem = max(cpu, 0), max(mem, 0)
            self._allocated = ResourceVector(cpu, mem)

    @property
    def allocated(self) -> ResourceVector:
        with self._lock:
            return self._allocated


# -- assignment solver --------------------------------------------------------

class _Flow:
    """Min-cost max-flow on a tiny graph (successive shortest paths)."""

    def __init__(self, n: int):
        self.adj: list[list[list]] = [[] for _ in range(n)]

    def add(self, u: int, v: int, cap: int, cost: float) -> None:
        self.adj[u].append([v, cap, cost, len(self.adj[v])])
        self.adj[v].append([u, 0, -cost, len(self.adj[u]) - 1])

    def run(self, s: int, t: int, need: int) -> tuple[int, float]:
        flow, cost = 0, 0.0
        n = len(self.adj)
        while flow < need:
            dist = [math.inf] * n
            dist[s] = 0.0
            in_queue = [False] * n
            prev_v = [-1] * n
            prev_e = [-1] * n
            queue = deque([s])
            in_queue[s] = True
            while queue:
                u = queue.popleft()
                in_queue[u] = False
                for i, (v, cap, c, _) in enumerate(self.adj[u]):
                    if cap > 0 and dist[u] + c < dist[v] - 1e-12:
                        dist[v] = dist[u] + c
                        prev_v[v], prev_e[v] = u, i
                        if not in_queue[v]:
                            queue.append(v)
                            in_queue[v] = True
            if not math.isfinite(dist[t]):
                break
            push = need - flow
            v = t
            while v != s:
                push = min(push, self.adj[prev_v[v]][prev_e[v]][1])
                v = prev_v[v]
            v = t
            while v != s:
                edge = self.adj[prev_v[v]][prev_e[v]]
                edge[1] -= push
                self.adj[v][edge[3]][1] += push
                v = prev_v[v]
            flow += push
            cost += push * dist[t]
        return flow, cost


def _max_total(groups: list[str | None], slots: list[int], scores: list[float],
               banned: list[set[str]]) -> float | None:
    """Best achievable score sum placing every remaining task, or None.

    groups[i] is task i's anti-affinity group (None = unconstrained);
    slots[j] free capacity of ranked offer j; banned[j] groups already
    hosted on offer j.
    """
    n = len(groups)
    if n == 0:
        return 0.0
    counts = Counter(groups)
    classes = list(counts.items())        # (group-or-None, count)
    n_offers = len(slots)
    src = 0
    snk = 1 + len(classes) + n_offers
    g = _Flow(snk + 1)
    for ci, (grp, count) in enumerate(classes):
        g.add(src, 1 + ci, count, 0.0)
        for j in range(n_offers):
            if slots[j] <= 0:
                continue
            if grp is not None:
                if grp in banned[j]:
                    continue
                g.add(1 + ci, 1 + len(classes) + j, 1, -scores[j])
            else:
                g.add(1 + ci, 1 + len(classes) + j, slots[j], -scores[j])
    for j in range(n_offers):
        if slots[j] > 0:
            g.add(1 + len(classes) + j, snk, slots[j], 0.0)
    flow, cost = g.run(src, snk, n)
    if flow < n:
        return None
    return -cost


def rank_and_assign(offers: list[Offer], req: SpawnRequest,
                    now: float = 0.0) -> PlacementPlan | Rejection:
    """Choose nodes for every task of `req`, or reject.

    Offers are ranked by (score desc, node id asc).  Tasks are assigned in
    index order, each taking the best-ranked node that still allows the
    remaining tasks to reach the best achievable total score — so the result
    maximizes summed offer score over all complete assignments, breaking ties
    toward earlier tasks on better-ranked nodes.  Pure function of its inputs.
    """
    n = len(req.tasks)
    ranked = sorted(offers, key=lambda o: (-o.score, o.node.id))
    groups = [t.anti_affinity_group for t in req.tasks]
    slots = [o.max_tasks for o in ranked]
    scores = [o.score for o in ranked]

    if sum(slots) < n:
        return Rejection("InsufficientCapacity",
                         f"{sum(slots)} slots offered for {n} tasks")

    chosen: list[int] = []
    if not any(groups):
        # No anti-affinity: filling best offers first is optimal.
        j = 0
        for _ in range(n):
            while slots[j] == 0:
                j += 1
            slots[j] -= 1
            chosen.append(j)
    else:
        banned: list[set[str]] = [set() for _ in ranked]
        target = _max_total(groups, slots, scores, banned)
        if target is None:
            return Rejection("InsufficientCapacity",
                             "anti-affinity constraints unsatisfiable")
        for i, grp in enumerate(groups):
            placed = False
            for j in range(len(ranked)):
                if slots[j] == 0 or (grp is not None and grp in banned[j]):
                    continue
                slots[j] -= 1
                if grp is not None:
                    banned[j].add(grp)
                remainder = _max_total(groups[i + 1:], slots, scores, banned)
                if remainder is not None and math.isclose(
                        scores[j] + remainder, target, rel_tol=0.0, abs_tol=1e-9):
                    chosen.append(j)
                    target = remainder
                    placed = True
                    break
                slots[j] += 1
                if grp is not None:
                    banned[j].discard(grp)
            if not placed:
                return Rejection("InsufficientCapacity",
                                 "anti-affinity constraints unsatisfiable")

    by_offer: dict[int, list[int]] = {}
    for task_index, j in enumerate(chosen):
        by_offer.setdefault(j, []).append(task_index)
    assignments = tuple(
        (ranked[j].node, tuple(indices)) for j, indices in sorted(by_offer.items())
    )
    return PlacementPlan(req.request_id, assignments, decided_at=now)


# -- admission pipeline -------------------------------------------------------

@dataclass(frozen=True, slots=True)
class PlacementConfig:
    gather_window: float = 0.1
    reservation_ttl: float = 2.0
    workers: int = 8
    w_strand: float = 0.5
    w_over: float = 0.5
    commit_timeout: float = 1.0
    deploy_timeout: float = 30.0
    table_cap: int = 20000
    admit_attempts: int = 3
    retry_backoff: float = 0.025


@dataclass(slots=True)
class RequestStatus:
    request_id: str
    tenant: str
    tasks: int
    admission_node: int
    state: str = "pending"           # pending | placed | rejected
    reason: str = ""
    detail: str = ""
    npids: list[str] = field(default_factory=list)
    assignments: list = field(default_factory=list)
    submitted_at: float = 0.0
    decided_at: float | None = None
    deployed_at: float | None = None

    def to_wire(self) -> dict:
        d = {"request_id": self.request_id, "state": self.state,
             "tenant": self.tenant, "tasks": self.tasks,
             "admission_node": self.admission_node,
             "submitted_at": self.submitted_at}
        if self.state == "placed":
            d["npids"] = list(self.npids)
            d["assignments"] = list(self.assignments)
        if self.state == "rejected":
            d["reason"] = self.reason
            d["detail"] = self.detail
        if self.decided_at is not None:
            d["decided_at"] = self.decided_at
        if self.deployed_at is not None:
            d["deployed_at"] = self.deployed_at
            d["scheduling_ms"] = (self.deployed_at - self.submitted_at) * 1000.0
        return d


class AdmissionPipeline:
    """Drives a spawn request through feasibility, commit, and deploy.

    `transport.request(addr, frame, timeout)` must return the peer's reply
    dict or raise; `transport.send(addr, frame)` is one-way best-effort.
    The local node is just another peer address — the agent's transport
    short-circuits it without touching the network.
    """

    def __init__(self, node: NodeId,
                 members_fn: Callable[[], list[tuple[NodeId, str]]],
                 transport,
                 config: PlacementConfig | None = None,
                 clock: Callable[[], float] = time.monotonic):
        self.node = node
        self.config = config or PlacementConfig()
        self._members_fn = members_fn
        self._transport = transport
        self._clock = clock
        self._requests = futures.ThreadPoolExecutor(
            max_workers=self.config.workers, thread_name_prefix="admit")
        self._fanout = futures.ThreadPoolExecutor(
            max_workers=max(32, self.config.workers * 4), thread_name_prefix="fanout")
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._table: OrderedDict[str, RequestStatus] = OrderedDict()

    def shutdown(self) -> None:
        self._requests.shutdown(wait=False, cancel_futures=True)
        self._fanout.shutdown(wait=False, cancel_futures=True)

    # -- public API -----------------------------------------------------

    def submit(self, req: SpawnRequest) -> str:
        st = RequestStatus(request_id=req.request_id, tenant=req.tenant,
                           tasks=len(req.tasks), admission_node=self.node.id,
                           submitted_at=self._clock())
        with self._lock:
            if req.request_id in self._table:
                raise ValueError(f"duplicate request_id {req.request_id}")
            self._table[req.request_id] = st
            while len(self._table) > self.config.table_cap:
                self._table.popitem(last=False)
        self._requests.submit(self._run_guarded, req)
        return req.request_id

    def status(self, request_id: str) -> dict | None:
        with self._lock:
            st = self._table.get(request_id)
            return st.to_wire() if st else None

    def wait(self, request_id: str, timeout: float | None = None) -> dict | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                st = self._table.get(request_id)
                if st is None:
                    return None
                if st.state != "pending":
                    return st.to_wire()
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return st.to_wire()
                self._cond.wait(remaining)

    def statuses(self) -> list[dict]:
        with self._lock:
            return [st.to_wire() for st in self._table.values()]

    # -- pipeline --------------------------------------------------------

    def _run_guarded(self, req: SpawnRequest) -> None:
        try:
            self._run(req)
        except Exception as exc:
            log.exception("admission pipeline failed for %s", req.request_id)
            self._finish_rejected(req.request_id, "InternalError", str(exc))

    def _finish_rejected(self, request_id: str, reason: str, detail: str = "") -> None:
        with self._cond:
            st = self._table.get(request_id)
            if st is not None and st.state == "pending":
                st.state = "rejected"
                st.reason = reason
                st.detail = detail
                st.decided_at = self._clock()
            self._cond.notify_all()

    def _finish_placed(self, request_id: str, plan: PlacementPlan,
                       npids: list[str], decided_at: float) -> None:
        with self._cond:
            st = self._table.get(request_id)
            if st is not None:
                st.state = "placed"
                st.npids = npids
                st.assignments = [
                    [node.id, list(indices)] for node, indices in plan.assignments]
                st.decided_at = decided_at
                st.deployed_at = self._clock()
            self._cond.notify_all()

    def _envelope_demand(self, req: SpawnRequest) -> ResourceVector:
        cpu = max(t.resources.cpu for t in req.tasks)
        mem = max(t.resources.mem for t in req.tasks)
        return ResourceVector(cpu, mem)

    def _gather_offers(self, req: SpawnRequest,
                       peers: list[tuple[NodeId, str]]) -> list[Offer]:
        demand = self._envelope_demand(req)
        frame = {"t": "feas-req", "request_id": req.request_id, "tenant": req.tenant,
                 "resources": demand.to_wire(), "n_wanted": len(req.tasks)}
        futs = {
            self._fanout.submit(self._transport.request, addr, frame,
                                self.config.gather_window): node
            for node, addr in peers
        }
        offers: list[Offer] = []
        done, _ = futures.wait(futs, timeout=self.config.gather_window)
        for fut in done:
            try:
                reply = fut.result()
            except Exception:
                continue
            if reply and int(reply.get("max_tasks", 0)) >= 1:
                try:
                    offers.append(Offer.from_wire(reply))
                except (KeyError, TypeError, ValueError):
                    log.warning("discarding malformed offer from %s", futs[fut])
        return offers

    def _release(self, addr_by_node: dict[int, str], offers: list[Offer],
                 request_id: str) -> None:
        for offer in offers:
            addr = addr_by_node.get(offer.node.id)
            if addr is None:
                continue
            frame = {"t": "release", "request_id": request_id,
                     "reservation_id": offer.reservation_id}
            try:
                self._transport.request(addr, frame, self.config.commit_timeout)
            except Exception:
                pass  # reservation TTL is the backstop

    def _run(self, req: SpawnRequest) -> None:
        # Concurrent admissions race for the same reservations, so a slot
        # shortfall can be transient.  Re-gather after a short backoff before
        # rejecting; a genuine shortage fails identically on every attempt.
        outcome: PlacementPlan | Rejection = Rejection(
            "NoFeasibleNodes", "no alive members")
        addr_by_node: dict[int, str] = {}
        for attempt in range(max(1, self.config.admit_attempts)):
            if attempt:
                time.sleep(self.config.retry_backoff)
            peers = self._members_fn()
            if not peers:
                self._finish_rejected(req.request_id, "NoFeasibleNodes",
                                      "no alive members")
                return
            addr_by_node = {node.id: addr for node, addr in peers}
            offers = self._gather_offers(req, peers)
            if not offers:
                outcome = Rejection("NoFeasibleNodes", "no node offered capacity")
                continue
            outcome = rank_and_assign(offers, req, now=self._clock())
            if not isinstance(outcome, Rejection):
                break
            self._release(addr_by_node, offers, req.request_id)
        if isinstance(outcome, Rejection):
            self._finish_rejected(req.request_id, outcome.reason, outcome.detail)
            return
        plan = outcome

        offer_by_node = {o.node.id: o for o in offers}
        used_ids = {node.id for node, _ in plan.assignments}

        committed, failed = self._commit_phase(req, plan, offer_by_node, addr_by_node)
        if failed:
            # Unused offers are still reserved at this point, by design: the
            # one retry round re-assigns the orphaned tasks against them.
            retried = self._retry_once(req, plan, failed, offers, used_ids,
                                       addr_by_node, committed)
            if retried is None:
                self._rollback_commits(req, committed, addr_by_node)
                leftovers = [o for o in offers
                             if not any(o.node.id == n.id for n, _ in committed)]
                self._release(addr_by_node, leftovers, req.request_id)
                self._finish_rejected(req.request_id, "NodeLost",
                                      "offer lost between feasibility and commit")
                return
            plan = retried
        final_ids = {node.id for node, _ in plan.assignments}
        leftovers = [o for o in offers if o.node.id not in final_ids]
        self._release(addr_by_node, leftovers, req.request_id)
        decided_at = self._clock()

        npids, deploy_errors, lost = self._deploy_phase(req, plan, offer_by_node,
                                                        addr_by_node)
        if deploy_errors:
            self._kill_residue(npids, addr_by_node, plan)
            if lost:
                # Spawn attempts that reached a node release their allocation
                # through process-terminal events; these never got that far.
                self._rollback_commits(req, lost, addr_by_node)
            self._finish_rejected(req.request_id, "DeployFailed",
                                  "; ".join(deploy_errors[:3]))
            return
        ordered = [npid for _, npid in sorted(npids)]
        self._finish_placed(req.request_id, plan, ordered, decided_at)

    def _commit_phase(self, req, plan, offer_by_node, addr_by_node):
        """Returns (committed assignments, failed assignments)."""
        committed, failed = [], []
        for node, indices in plan.assignments:
            offer = offer_by_node[node.id]
            total = ResourceVector(0, 0)
            for i in indices:
                total = total + req.tasks[i].resources
            frame = {"t": "commit", "request_id": req.request_id,
                     "reservation_id": offer.reservation_id,
                     "k": len(indices), "resources": total.to_wire()}
            addr = addr_by_node.get(node.id)
            ok = False
            if addr is not None:
                try:
                    reply = self._transport.request(addr, frame, self.config.commit_timeout)
                    ok = bool(reply.get("ok"))
                except Exception:
                    ok = False
            (committed if ok else failed).append((node, indices))
        return committed, failed

    def _retry_once(self, req, plan, failed, offers, used_ids, addr_by_node, committed):
        """One reassignment round for tasks whose commit fell through."""
        orphan_indices = [i for _, indices in failed for i in indices]
        failed_ids = {node.id for node, _ in failed}
        remaining = [o for o in offers
                     if o.node.id not in used_ids and o.node.id not in failed_ids]
        if not remaining:
            return None
        # Anti-affinity groups already committed elsewhere stay excluded.
        group_nodes: dict[str, set[int]] = {}
        for node, indices in committed:
            for i in indices:
                grp = req.tasks[i].anti_affinity_group
                if grp:
                    group_nodes.setdefault(grp, set()).add(node.id)
        sub_tasks = tuple(req.tasks[i] for i in orphan_indices)
        sub_req = SpawnRequest(request_id=req.request_id, tenant=req.tenant,
                               tasks=sub_tasks, submitted_at=req.submitted_at)
        candidates = [o for o in remaining
                      if not any(o.node.id in group_nodes.get(t.anti_affinity_group, ())
                                 for t in sub_tasks if t.anti_affinity_group)]
        outcome = rank_and_assign(candidates, sub_req, now=self._clock())
        if isinstance(outcome, Rejection):
            return None
        offer_by_node = {o.node.id: o for o in offers}
        sub_committed, sub_failed = self._commit_phase(sub_req, outcome,
                                                       offer_by_node, addr_by_node)
        if sub_failed:
            for node, indices in sub_committed:
                committed.append((node, indices))
            return None
        # Map sub-request task positions back to original indices.
        merged: list[tuple[NodeId, tuple[int, ...]]] = list(committed)
        for node, sub_indices in outcome.assignments:
            real = tuple(orphan_indices[i] for i in sub_indices)
            merged.append((node, real))
            committed.append((node, real))
        return PlacementPlan(req.request_id, tuple(merged), decided_at=self._clock())

    def _rollback_commits(self, req, committed, addr_by_node):
        for node, indices in committed:
            total = ResourceVector(0, 0)
            for i in indices:
                total = total + req.tasks[i].resources
            addr = addr_by_node.get(node.id)
            if addr is None:
                continue
            frame = {"t": "release", "request_id": req.request_id,
                     "reservation_id": "", "deallocate": total.to_wire()}
            try:
                self._transport.request(addr, frame, self.config.commit_timeout)
            except Exception:
                pass

    def _deploy_phase(self, req, plan, offer_by_node, addr_by_node):
        """Spawns every assignment in parallel.

        Returns ([(index, npid)], errors, lost) where `lost` holds the
        assignments whose deploy request itself failed; their committed
        allocation must be rolled back since no spawn (and therefore no
        terminal event) will ever release it.
        """
        npids: list[tuple[int, str]] = []
        errors: list[str] = []
        lost: list[tuple[NodeId, tuple[int, ...]]] = []
        lock = threading.Lock()

        def deploy_one(node: NodeId, indices: tuple[int, ...]):
            addr = addr_by_node.get(node.id)
            offer = offer_by_node.get(node.id)
            frame = {"t": "deploy", "request_id": req.request_id, "tenant": req.tenant,
                     "reservation_id": offer.reservation_id if offer else "",
                     "tasks": [{"index": i, "spec": req.tasks[i].to_wire()}
                               for i in indices]}
            try:
                reply = self._transport.request(addr, frame, self.config.deploy_timeout)
            except Exception as exc:
                with lock:
                    errors.append(f"node {node.id}: {exc}")
                    lost.append((node, indices))
                return
            for result in reply.get("results", []):
                with lock:
                    if result.get("ok"):
                        npids.append((int(result["index"]), str(result["npid"])))
                    else:
                        errors.append(
                            f"task {result.get('index')}: {result.get('error', 'spawn failed')}")

        futs = [self._fanout.submit(deploy_one, node, indices)
                for node, indices in plan.assignments]
        futures.wait(futs, timeout=self.config.deploy_timeout + 5)
        return npids, errors, lost

    def _kill_residue(self, npids: list[tuple[int, str]],
                      addr_by_node: dict[int, str], plan: PlacementPlan) -> None:
        """Gang rollback: kill any siblings that did start."""
        node_by_index: dict[int, NodeId] = {}
        for node, indices in plan.assignments:
            for i in indices:
                node_by_index[i] = node
        for index, npid in npids:
            node = node_by_index.get(index)
            addr = addr_by_node.get(node.id) if node else None
            if addr is None:
                continue
            try:
                self._transport.request(addr, {"t": "kill", "npid": npid, "signal": 9},
                                        self.config.commit_timeout)
            except Exception:
                pass
