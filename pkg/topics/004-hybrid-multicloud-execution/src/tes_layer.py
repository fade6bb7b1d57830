#!/usr/bin/env python3
"""TES-subset task service per site and a federating gateway.

A :class:`TesNode` wraps any backend behind create/get/list/cancel and
service-info. A :class:`Gateway` exposes exactly the same surface and
reverse-proxies to registered endpoints, choosing the one with the fewest
remote input bytes. Because a gateway is itself an endpoint, gateways can
front gateways; an endpoint's ``sites`` coverage is what routing costs use.
"""
from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Protocol

from core import (
    DataRef,
    HybridMeshError,
    MalformedSpec,
    ResourceRequest,
    SiteId,
    TaskRegistry,
    TaskSpec,
    TaskState,
    ValidatedTask,
)
from executors import AlreadyTerminal, Backend, JobHandle
from simnet import Engine, Event, EventKind

log = logging.getLogger(__name__)

GATEWAY_LOG_PREFIX = "gateway:"
DEFAULT_PAGE_SIZE = 256


class UnknownTask(HybridMeshError):
    http_status = 404


class UnknownNode(HybridMeshError):
    http_status = 404


class NoHealthyNode(HybridMeshError):
    http_status = 503


class NodeUnreachable(HybridMeshError):
    http_status = 503


class View(str, Enum):
    MINIMAL = "MINIMAL"
    FULL = "FULL"


class CostModel(str, Enum):
    BYTES = "bytes"
    TRANSFER_TIME = "transfer_time"
    RANDOM = "random"


class Health(str, Enum):
    UP = "up"
    DOWN = "down"


@dataclass(frozen=True)
class TaskLog:
    event: str
    at: float

    def to_dict(self) -> dict[str, Any]:
        return {"event": self.event, "at": self.at}


@dataclass(frozen=True)
class TesTaskDoc:
    id: str
    name: str
    state: TaskState
    inputs: tuple[DataRef, ...]
    outputs: tuple[DataRef, ...]
    resources: ResourceRequest
    logs: tuple[TaskLog, ...]
    creation_time: float
    stale: bool = False

    def to_dict(self, view: View | str = View.FULL) -> dict[str, Any]:
        if View(view) is View.MINIMAL:
            return {"id": self.id, "state": self.state.value}
        return {
            "id": self.id,
            "name": self.name,
            "state": self.state.value,
            "inputs": [r.to_dict() for r in self.inputs],
            "outputs": [r.to_dict() for r in self.outputs],
            "resources": self.resources.to_dict(),
            "logs": [entry.to_dict() for entry in self.logs],
            "creation_time": self.creation_time,
            "stale": self.stale,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TesTaskDoc:
        try:
            return cls(
                id=data["id"],
                name=data.get("name", ""),
                state=TaskState(data["state"]),
                inputs=tuple(DataRef.from_dict(r) for r in data.get("inputs") or []),
                outputs=tuple(DataRef.from_dict(r) for r in data.get("outputs") or []),
                resources=ResourceRequest.from_dict(data.get("resources") or {}),
                logs=tuple(TaskLog(event=e["event"], at=float(e["at"])) for e in data.get("logs") or []),
                creation_time=float(data.get("creation_time", 0.0)),
                stale=bool(data.get("stale", False)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedSpec(f"bad task document: {e}") from e

    def without_gateway_logs(self) -> TesTaskDoc:
        kept = tuple(e for e in self.logs if not e.event.startswith(GATEWAY_LOG_PREFIX))
        return replace(self, logs=kept, stale=False)


class TesEndpoint(Protocol):
    @property
    def node_id(self) -> str: ...

    @property
    def sites(self) -> frozenset[SiteId]: ...

    def service_info(self) -> dict[str, Any]: ...

    def create_task(self, spec: TaskSpec | dict[str, Any]) -> str: ...

    def get_task(self, task_id: str, view: View | str = View.FULL) -> TesTaskDoc: ...

    def list_tasks(self, view: View | str = View.MINIMAL) -> list[TesTaskDoc]: ...

    def cancel_task(self, task_id: str) -> None: ...


def _as_spec(spec: TaskSpec | dict[str, Any]) -> TaskSpec:
    if isinstance(spec, TaskSpec):
        return spec
    return TaskSpec.from_dict(spec)


@dataclass
class _NodeTask:
    task_id: str
    spec: TaskSpec
    job: JobHandle
    creation_time: float
    logs: list[TaskLog] = field(default_factory=list)


class TesNode:
    """A site's task service over one backend; outputs land in the common store."""

    def __init__(self, node_id: str, *, backend: Backend, engine: Engine, common_site: SiteId) -> None:
        self._node_id = node_id
        self.backend = backend
        self.engine = engine
        self.common_site = common_site
        self._registry = TaskRegistry(engine.network)
        self._tasks: dict[str, _NodeTask] = {}
        self._counter = 0

    @property
    def node_id(self) -> str:
        return self._node_id

    @property
    def site(self) -> SiteId:
        return self.backend.site

    @property
    def sites(self) -> frozenset[SiteId]:
        return frozenset({self.site})

    def _require_up(self) -> None:
        if not self.engine.network.is_up(self.site):
            raise NodeUnreachable(f"node {self.node_id}: site {self.site} is down")

    def service_info(self) -> dict[str, Any]:
        self._require_up()
        return {"id": self.node_id, "kind": "node", "sites": sorted(self.sites)}

    def create_task(self, spec: TaskSpec | dict[str, Any]) -> str:
        self._require_up()
        client = _as_spec(spec)
        self._counter += 1
        task_id = f"{self.site}.{self._counter:06d}"
        validated = self._registry.validate(replace(client, id=task_id))
        now = self.engine.now
        logs = [TaskLog(TaskState.QUEUED.value, now)]

        def on_change(job: JobHandle) -> None:
            logs.append(TaskLog(event=job.state.value, at=self.engine.now))

        job = self.backend.submit(validated, on_change=on_change, output_sink=self.common_site)
        self._tasks[task_id] = _NodeTask(task_id=task_id, spec=client, job=job, creation_time=now, logs=logs)
        return task_id

    def _entry(self, task_id: str) -> _NodeTask:
        try:
            return self._tasks[task_id]
        except KeyError as e:
            raise UnknownTask(f"node {self.node_id}: unknown task {task_id}") from e

    def _doc(self, entry: _NodeTask) -> TesTaskDoc:
        job = entry.job
        return TesTaskDoc(
            id=entry.task_id,
            name=entry.spec.id,
            state=job.state,
            inputs=entry.spec.inputs,
            outputs=(job.output,) if job.output is not None else (),
            resources=entry.spec.resources,
            logs=tuple(entry.logs),
            creation_time=entry.creation_time,
        )

    def get_task(self, task_id: str, view: View | str = View.FULL) -> TesTaskDoc:
        self._require_up()
        View(view)
        return self._doc(self._entry(task_id))

    def list_tasks(self, view: View | str = View.MINIMAL) -> list[TesTaskDoc]:
        self._require_up()
        View(view)
        return [self._doc(self._tasks[k]) for k in sorted(self._tasks)][:DEFAULT_PAGE_SIZE]

    def cancel_task(self, task_id: str) -> None:
        self._require_up()
        entry = self._entry(task_id)
        if entry.job.state.is_terminal:
            raise AlreadyTerminal(f"task {task_id} is already {entry.job.state.value}")
        self.backend.cancel(entry.job)

    def job(self, task_id: str) -> JobHandle:
        return self._entry(task_id).job


@dataclass
class NodeRegistryEntry:
    node_id: str
    endpoint: TesEndpoint
    sites: frozenset[SiteId]
    last_heartbeat: float | None = 0.0
    health: Health = Health.UP

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id,
            "sites": sorted(self.sites),
            "health": self.health.value,
            "last_heartbeat": self.last_heartbeat,
        }


@dataclass(frozen=True)
class RoutingDecision:
    task_id: str
    name: str
    chosen_node: str
    cost_bytes_remote: int
    alternatives: tuple[tuple[str, float], ...]
    cost_model: CostModel = CostModel.BYTES

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "name": self.name,
            "chosen_node": self.chosen_node,
            "cost_bytes_remote": self.cost_bytes_remote,
            "alternatives": [[node, cost] for node, cost in self.alternatives],
            "cost_model": self.cost_model.value,
        }


def remote_bytes(spec: TaskSpec, sites: frozenset[SiteId]) -> int:
    return sum(ref.size_bytes for ref in spec.inputs if ref.home_site not in sites)


@dataclass
class _Route:
    owner: NodeRegistryEntry
    decision: RoutingDecision
    last_known: TesTaskDoc
    logs: list[TaskLog] = field(default_factory=list)
    observed: tuple[TaskState, bool] | None = None


class Gateway:
    def __init__(
        self,
        gateway_id: str,
        *,
        engine: Engine,
        cost_model: CostModel | str = CostModel.BYTES,
        heartbeat_interval_s: float = 5.0,
        heartbeat_timeout_s: float | None = None,
        seed: int = 0,
    ) -> None:
        self.gateway_id = gateway_id
        self.engine = engine
        self.cost_model = CostModel(cost_model)
        self.heartbeat_interval_s = float(heartbeat_interval_s)
        self.heartbeat_timeout_s = (
            float(heartbeat_timeout_s) if heartbeat_timeout_s is not None else 3.0 * self.heartbeat_interval_s
        )
        self.rng = random.Random(int(seed))
        self.nodes: dict[str, NodeRegistryEntry] = {}
        self.decisions: list[RoutingDecision] = []
        self._routes: dict[str, _Route] = {}
        self._last_sweep: float | None = None
        self._pending_cancels: set[str] = set()
        engine.on(EventKind.SITE_UP, self._on_site_up, first=True)

    @property
    def node_id(self) -> str:
        return self.gateway_id

    @property
    def sites(self) -> frozenset[SiteId]:
        out: frozenset[SiteId] = frozenset()
        for entry in self.nodes.values():
            out |= entry.sites
        return out

    def service_info(self) -> dict[str, Any]:
        return {"id": self.gateway_id, "kind": "gateway", "sites": sorted(self.sites)}

    # -- registry ------------------------------------------------------------

    def register(self, endpoint: TesEndpoint) -> NodeRegistryEntry:
        entry = NodeRegistryEntry(
            node_id=endpoint.node_id,
            endpoint=endpoint,
            sites=frozenset(endpoint.sites),
            last_heartbeat=self.engine.now,
        )
        self.nodes[entry.node_id] = entry
        return entry

    def _node(self, node_id: str) -> NodeRegistryEntry:
        try:
            return self.nodes[node_id]
        except KeyError as e:
            raise UnknownNode(f"gateway {self.gateway_id}: unknown node {node_id}") from e

    def refresh_health(self, now: float | None = None) -> None:
        t = self.engine.now if now is None else now
        for entry in self.nodes.values():
            stale = entry.last_heartbeat is None or t - entry.last_heartbeat > self.heartbeat_timeout_s
            entry.health = Health.DOWN if stale else Health.UP

    def heartbeat(self, node_id: str, at: float | None = None) -> Health:
        entry = self._node(node_id)
        entry.last_heartbeat = self.engine.now if at is None else float(at)
        self.refresh_health()
        self.engine.record("heartbeat", gateway=self.gateway_id, node=node_id, health=entry.health.value)
        return entry.health

    def _mark_unreachable(self, entry: NodeRegistryEntry) -> None:
        entry.last_heartbeat = None
        entry.health = Health.DOWN
        self.engine.record("heartbeat", gateway=self.gateway_id, node=entry.node_id, health=Health.DOWN.value)

    def sweep_due(self) -> bool:
        return self._last_sweep is None or self.engine.now - self._last_sweep >= self.heartbeat_interval_s

    def collect_heartbeats(self) -> dict[str, bool]:
        """Ask every node for service-info; touches no gateway state."""
        answered: dict[str, bool] = {}
        for node_id, entry in sorted(list(self.nodes.items())):
            try:
                entry.endpoint.service_info()
            except NodeUnreachable:
                answered[node_id] = False
            else:
                answered[node_id] = True
        return answered

    def apply_heartbeats(self, answered: dict[str, bool]) -> None:
        now = self.engine.now
        self._last_sweep = now
        for node_id, ok in sorted(answered.items()):
            if ok and node_id in self.nodes:
                self.nodes[node_id].last_heartbeat = now
        self.refresh_health(now)
        self.flush_cancels(frozenset(n for n, ok in answered.items() if ok))

    def sweep(self, *, force: bool = False) -> None:
        """Active fallback: heartbeat every node that answers service-info."""
        if force or self.sweep_due():
            self.apply_heartbeats(self.collect_heartbeats())

    def healthy(self) -> list[NodeRegistryEntry]:
        self.refresh_health()
        return [self.nodes[k] for k in sorted(self.nodes) if self.nodes[k].health is Health.UP]

    # -- routing -------------------------------------------------------------

    def _cost(self, spec: TaskSpec, entry: NodeRegistryEntry) -> float:
        if self.cost_model is CostModel.TRANSFER_TIME:
            network = self.engine.network
            total = 0.0
            for ref in spec.inputs:
                if ref.home_site in entry.sites:
                    continue
                total += min(network.transfer_time(ref.size_bytes, ref.home_site, s) for s in sorted(entry.sites))
            return total
        return float(remote_bytes(spec, entry.sites))

    def route(self, spec: TaskSpec | dict[str, Any], *, exclude: frozenset[str] = frozenset()) -> RoutingDecision:
        task = _as_spec(spec)
        candidates = [e for e in self.healthy() if e.node_id not in exclude]
        if not candidates:
            raise NoHealthyNode(f"gateway {self.gateway_id}: no healthy node for {task.id}")
        ranked = sorted(((e.node_id, self._cost(task, e)) for e in candidates), key=lambda p: (p[1], p[0]))
        if self.cost_model is CostModel.RANDOM:
            chosen = self.rng.choice(sorted(e.node_id for e in candidates))
        else:
            chosen = ranked[0][0]
        return RoutingDecision(
            task_id="",
            name=task.id,
            chosen_node=chosen,
            cost_bytes_remote=remote_bytes(task, self.nodes[chosen].sites),
            alternatives=tuple(ranked),
            cost_model=self.cost_model,
        )

    # -- TES surface ---------------------------------------------------------

    def create_task(self, spec: TaskSpec | dict[str, Any]) -> str:
        task = _as_spec(spec)
        tried: set[str] = set()
        while True:
            decision = self.route(task, exclude=frozenset(tried))
            entry = self.nodes[decision.chosen_node]
            try:
                task_id = entry.endpoint.create_task(task)
            except NodeUnreachable:
                log.info("gateway %s: %s unreachable, falling back", self.gateway_id, entry.node_id)
                self._mark_unreachable(entry)
                tried.add(entry.node_id)
                continue
            break
        if task_id in self._routes:
            raise MalformedSpec(f"gateway {self.gateway_id}: duplicate task id {task_id} from {entry.node_id}")
        decision = replace(decision, task_id=task_id)
        self.decisions.append(decision)
        self.engine.record("route", gateway=self.gateway_id, **decision.to_dict())
        doc = entry.endpoint.get_task(task_id)
        self._routes[task_id] = _Route(owner=entry, decision=decision, last_known=doc)
        return task_id

    def _route_of(self, task_id: str) -> _Route:
        try:
            return self._routes[task_id]
        except KeyError as e:
            raise UnknownTask(f"gateway {self.gateway_id}: task {task_id} was not routed here") from e

    def proxy_status(self, task_id: str, view: View | str = View.FULL) -> TesTaskDoc:
        route = self._route_of(task_id)
        try:
            doc = route.owner.endpoint.get_task(task_id, View.FULL)
            route.last_known = doc
            stale = False
        except NodeUnreachable:
            doc = route.last_known
            stale = True
        stale = stale or doc.stale
        if route.observed != (doc.state, stale):
            route.observed = (doc.state, stale)
            route.logs.append(TaskLog(event=f"{GATEWAY_LOG_PREFIX}{self.gateway_id}", at=self.engine.now))
        return replace(doc, logs=doc.logs + tuple(route.logs), stale=stale)

    def get_task(self, task_id: str, view: View | str = View.FULL) -> TesTaskDoc:
        View(view)
        return self.proxy_status(task_id, view)

    def list_tasks(self, view: View | str = View.MINIMAL) -> list[TesTaskDoc]:
        return [self.proxy_status(k, view) for k in sorted(self._routes)][:DEFAULT_PAGE_SIZE]

    def cancel_task(self, task_id: str) -> None:
        route = self._route_of(task_id)
        route.owner.endpoint.cancel_task(task_id)

    def abandon(self, task_id: str) -> None:
        """Cancel a task the caller gave up on, now or as soon as its node answers again."""
        self._route_of(task_id)
        self._pending_cancels.add(task_id)
        self.flush_cancels()

    def pending_cancels(self) -> list[str]:
        return sorted(self._pending_cancels)

    def flush_cancels(self, node_ids: frozenset[str] | None = None) -> None:
        for task_id in sorted(self._pending_cancels):
            owner = self._routes[task_id].owner
            if node_ids is not None and owner.node_id not in node_ids:
                continue
            try:
                owner.endpoint.cancel_task(task_id)
            except NodeUnreachable:
                continue
            except (AlreadyTerminal, UnknownTask):
                pass
            else:
                log.info("gateway %s: canceled abandoned task %s on %s", self.gateway_id, task_id, owner.node_id)
            self._pending_cancels.discard(task_id)

    def _on_site_up(self, event: Event) -> None:
        site = event.payload.get("site")
        owners = frozenset(self._routes[t].owner.node_id for t in self._pending_cancels if site in self._routes[t].owner.sites)
        if owners:
            self.flush_cancels(owners)

    def owner_of(self, task_id: str) -> str:
        return self._route_of(task_id).owner.node_id

    def decision_for(self, task_id: str) -> RoutingDecision:
        return self._route_of(task_id).decision


def oracle_best_cost(spec: TaskSpec, coverage: dict[str, frozenset[SiteId]]) -> float:
    """Exhaustive minimum of remote input bytes over the given nodes."""
    if not coverage:
        return math.inf
    return float(min(remote_bytes(spec, sites) for sites in coverage.values()))
