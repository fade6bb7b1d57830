#!/usr/bin/env python3
"""Scatter-gather driver: one dataset through any of the execution architectures.

The run is a langgraph pipeline::

    prepare -> <mode> -> consolidate -> finish

``prepare`` builds the simulated world and scatters the dataset, the mode
node drives map tasks to completion, ``consolidate`` gathers the accepted map
outputs into the common store and runs the gather task, and ``finish`` seals
the event log and builds the :class:`RunReport`.
"""
from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, TypedDict

from core import (
    Command,
    DataRef,
    MalformedSpec,
    SiteId,
    TaskRegistry,
    TaskSpec,
    TaskState,
    canonical_json,
    content_digest,
)
from executors import (
    Backend,
    BackendDescriptor,
    BackendKind,
    JobHandle,
    OverflowRouter,
    PartitionSpec,
    SlotBackend,
    build_backends,
)
from metadata_repo import (
    BatchRecord,
    BatchTag,
    Conflict,
    IllegalTag,
    LeaseExpired,
    MetadataRepository,
    NotClaimant,
    engine_repository,
)
from scenario import ScenarioConfig, WorkflowMode
from simnet import Engine, Event, EventKind, Network
from storage import Manifest, ObjectStore
from tes_layer import Gateway, NoHealthyNode, TesNode, TesTaskDoc

try:
    from langgraph.graph import END, StateGraph
except ImportError as exc:  # pragma: no cover - dependency check
    raise SystemExit("langgraph is required. Install with: pip install -r requirements.txt") from exc

log = logging.getLogger(__name__)

GATHER_TASK_ID = "gather"
GATEWAY_ID = "gw"


@dataclass(frozen=True)
class WorkflowSpec:
    dataset_id: str
    batch_count: int
    batch_size_bytes: int
    map_duration_s: float
    gather_duration_s: float
    mode: WorkflowMode = WorkflowMode.MANUAL
    retry_limit: int = 2
    output_size_bytes: int = 10**6
    gather: bool = True
    poisoned_batches: frozenset[int] = frozenset()
    homes: tuple[SiteId, ...] = ()
    multi_node_batches: frozenset[int] = frozenset()
    multi_container_batches: frozenset[int] = frozenset()
    partition_hints: tuple[tuple[int, str], ...] = ()
    pin_to_home: bool = False

    def __post_init__(self) -> None:
        if self.batch_count < 1:
            raise MalformedSpec(f"batch_count must be >= 1, got {self.batch_count}")
        if self.map_duration_s < 0 or self.gather_duration_s < 0:
            raise MalformedSpec("durations must be >= 0")
        if self.retry_limit < 0:
            raise MalformedSpec("retry_limit must be >= 0")
        object.__setattr__(self, "mode", WorkflowMode(self.mode))

    @classmethod
    def from_config(cls, config: ScenarioConfig) -> WorkflowSpec:
        wf = config.workflow
        return cls(
            dataset_id=wf.dataset_id,
            batch_count=wf.batch_count,
            batch_size_bytes=wf.batch_size_bytes,
            map_duration_s=wf.map_duration_s,
            gather_duration_s=wf.gather_duration_s,
            mode=wf.mode,
            retry_limit=wf.retry_limit,
            output_size_bytes=wf.output_size_bytes,
            gather=config.gather,
            poisoned_batches=frozenset(wf.poisoned_batches),
            homes=tuple(wf.homes),
            multi_node_batches=frozenset(wf.multi_node_batches),
            multi_container_batches=frozenset(wf.multi_container_batches),
            partition_hints=tuple(sorted((int(k), v) for k, v in wf.partition_hints.items())),
            pin_to_home=wf.pin_to_home,
        )


@dataclass(frozen=True)
class Batch:
    index: int
    batch_id: str
    ref: DataRef


def batch_id_for(dataset_id: str, index: int) -> str:
    return f"{dataset_id}-b{index:05d}"


def batch_content(dataset_id: str, index: int) -> bytes:
    return content_digest(f"{dataset_id}:{index}".encode("utf-8")).encode("ascii")


def scatter(
    dataset_id: str,
    batch_count: int,
    sites: Iterable[SiteId],
    *,
    batch_size_bytes: int = 0,
    homes: Iterable[SiteId] = (),
) -> list[DataRef]:
    """Deterministic split; homes round-robin over ``sites`` unless pinned."""
    if batch_count < 1:
        raise MalformedSpec(f"batch_count must be >= 1, got {batch_count}")
    ordered = sorted(set(sites))
    pinned = list(homes)
    if not ordered and not pinned:
        raise MalformedSpec("scatter needs at least one site")
    refs = []
    for i in range(batch_count):
        home = pinned[i % len(pinned)] if pinned else ordered[i % len(ordered)]
        refs.append(
            DataRef(
                object_id=content_digest(batch_content(dataset_id, i)),
                size_bytes=batch_size_bytes,
                home_site=home,
            )
        )
    return refs


def map_command(spec: WorkflowSpec, batch: Batch) -> Command:
    return Command(
        duration_s=spec.map_duration_s,
        digest_key=batch.batch_id,
        output_size_bytes=spec.output_size_bytes,
        poisoned=batch.index in spec.poisoned_batches,
    )


def map_task(spec: WorkflowSpec, batch: Batch, attempt: int = 0) -> TaskSpec:
    suffix = f".r{attempt}" if attempt else ""
    return TaskSpec(
        id=f"map-{batch.batch_id}{suffix}",
        command=map_command(spec, batch),
        inputs=(batch.ref,),
        node_count=2 if batch.index in spec.multi_node_batches else 1,
        executor_count=2 if batch.index in spec.multi_container_batches else 1,
    )


def gather_task(spec: WorkflowSpec, inputs: Iterable[DataRef], attempt: int = 0) -> TaskSpec:
    suffix = f".r{attempt}" if attempt else ""
    return TaskSpec(
        id=f"{GATHER_TASK_ID}{suffix}",
        command=Command(
            duration_s=spec.gather_duration_s,
            digest_key=f"gather:{spec.dataset_id}",
            combine_inputs=True,
            output_size_bytes=spec.output_size_bytes,
        ),
        inputs=tuple(sorted(inputs, key=lambda r: r.object_id)),
    )


def expected_manifest(spec: WorkflowSpec) -> Manifest:
    """Manifest of a single-site sequential run, computed without simulating."""
    pairs = []
    for i in range(spec.batch_count):
        command = Command(
            duration_s=spec.map_duration_s,
            digest_key=batch_id_for(spec.dataset_id, i),
            output_size_bytes=spec.output_size_bytes,
        )
        pairs.append((content_digest(command.output_content(())), spec.output_size_bytes))
    return Manifest.of(pairs)


def proportional_split(batch_count: int, slots: dict[SiteId, int]) -> dict[SiteId, int]:
    """Largest-remainder apportionment of batches by slots; ties go to the lower SiteId."""
    sites = sorted(slots)
    total = sum(slots[s] for s in sites)
    if total <= 0:
        raise MalformedSpec("proportional split needs slots > 0")
    shares = {s: (batch_count * slots[s]) // total for s in sites}
    remainders = {s: (batch_count * slots[s]) % total for s in sites}
    left = batch_count - sum(shares.values())
    for s in sorted(sites, key=lambda s: (-remainders[s], s))[:left]:
        shares[s] += 1
    return shares


# -- world --------------------------------------------------------------------


@dataclass
class World:
    config: ScenarioConfig
    engine: Engine
    store: ObjectStore
    backends: dict[str, Backend]
    site_backends: dict[SiteId, SlotBackend]
    registry: TaskRegistry

    @property
    def network(self) -> Network:
        return self.engine.network

    @property
    def common_site(self) -> SiteId:
        return self.store.common_site


def _default_descriptors(config: ScenarioConfig, declared: list[BackendDescriptor]) -> list[BackendDescriptor]:
    extra = []
    local_sites = {d.site for d in declared if d.kind is BackendKind.LOCAL}
    taken = {d.id for d in declared}
    for site in config.site_descriptors():
        if site.compute and site.id not in local_sites:
            extra.append(BackendDescriptor(id=f"{site.id}-local", kind=BackendKind.LOCAL, site=site.id, slots=site.slots))
    wf = config.workflow
    if wf.mode is WorkflowMode.OVERLAY and not any(d.kind is BackendKind.BATCH_CLUSTER for d in declared):
        parts = tuple(
            PartitionSpec(name=s.partition, site=s.id, slots=s.slots) for s in config.site_descriptors() if s.compute
        )
        extra.append(
            BackendDescriptor(id="overlay", kind=BackendKind.BATCH_CLUSTER, site=parts[0].site, partitions=parts)
        )
    return [d for d in extra if d.id not in taken]


def build_world(config: ScenarioConfig) -> World:
    network = Network(config.site_descriptors(), config.link_matrix())
    engine = Engine(network, seed=config.seed, jitter=config.jitter, max_events=config.max_events)
    store = ObjectStore(engine, common_site=config.common_site or min(network.site_ids))
    declared = config.backend_descriptors()
    backends = build_backends(declared + _default_descriptors(config, declared), engine=engine, store=store)
    site_backends: dict[SiteId, SlotBackend] = {}
    for bid in sorted(backends):
        b = backends[bid]
        if b.kind is BackendKind.LOCAL and isinstance(b, SlotBackend):
            site_backends.setdefault(b.site, b)

    for site in config.site_descriptors():
        for down_at, up_at in site.reliability:
            engine.inject_failure(site.id, down_at, up_at)
    for failure in config.failures:
        if failure.up_at is None:
            engine.at(failure.down_at, EventKind.SITE_DOWN, {"site": failure.site})
        else:
            engine.inject_failure(failure.site, failure.down_at, failure.up_at)
    for p in config.preemptions:
        engine.inject_preemption(p.site, p.at)
    return World(
        config=config,
        engine=engine,
        store=store,
        backends=backends,
        site_backends=site_backends,
        registry=TaskRegistry(network),
    )


# -- run bookkeeping ----------------------------------------------------------


@dataclass
class BatchOutcome:
    batch_id: str
    output: DataRef | None = None
    site: SiteId | None = None
    task_id: str | None = None
    finished_at: float | None = None
    attempts: int = 0
    failed: bool = False
    reason: str | None = None

    @property
    def done(self) -> bool:
        return self.output is not None or self.failed


@dataclass
class RunContext:
    world: World
    spec: WorkflowSpec
    batches: list[Batch]
    outcomes: dict[str, BatchOutcome]
    retries: int = 0
    gather: BatchOutcome | None = None
    repo: MetadataRepository | None = None
    gateway: Gateway | None = None
    routing: list[dict[str, Any]] = field(default_factory=list)
    placements: list[dict[str, Any]] = field(default_factory=list)
    abandoned: set[str] = field(default_factory=set)

    @property
    def engine(self) -> Engine:
        return self.world.engine

    def accept(
        self, batch: Batch, *, output: DataRef, site: SiteId, task_id: str, finished_at: float | None = None
    ) -> None:
        outcome = self.outcomes[batch.batch_id]
        if outcome.done:
            return
        outcome.output = output
        outcome.site = site
        outcome.task_id = task_id
        outcome.finished_at = self.engine.now if finished_at is None else finished_at

    def fail(self, batch: Batch, reason: str) -> None:
        outcome = self.outcomes[batch.batch_id]
        if outcome.done:
            return
        outcome.failed = True
        outcome.reason = reason
        outcome.finished_at = self.engine.now
        log.info("batch %s failed: %s", batch.batch_id, reason)

    def lose(self, batch: Batch, reason: str) -> None:
        """Revoke an accepted output whose every replica became unreachable."""
        outcome = self.outcomes[batch.batch_id]
        outcome.output = None
        outcome.failed = True
        outcome.reason = reason
        outcome.finished_at = self.engine.now
        log.warning("batch %s output lost: %s", batch.batch_id, reason)

    def map_outputs(self) -> list[DataRef]:
        return [o.output for o in self.outcomes.values() if o.output is not None]

    def map_ok(self) -> bool:
        return all(o.output is not None for o in self.outcomes.values())


class RetryingTask:
    """Submit to a backend; resubmit on SYSTEM_ERROR up to ``retry_limit`` times."""

    def __init__(
        self,
        ctx: RunContext,
        backend: Backend,
        make_spec: Callable[[int], TaskSpec],
        *,
        on_done: Callable[[JobHandle, bool], None],
        hint: str | None = None,
        output_sink: SiteId | None = None,
    ) -> None:
        self.ctx = ctx
        self.backend = backend
        self.make_spec = make_spec
        self.on_done = on_done
        self.hint = hint
        self.output_sink = output_sink
        self.attempt = 0

    def start(self) -> JobHandle:
        validated = self.ctx.world.registry.validate(self.make_spec(self.attempt))
        return self.backend.submit(validated, hint=self.hint, on_change=self._changed, output_sink=self.output_sink)

    def _changed(self, job: JobHandle) -> None:
        if not job.state.is_terminal:
            return
        if job.state is TaskState.COMPLETE:
            self.on_done(job, True)
        elif job.state is TaskState.SYSTEM_ERROR and self.attempt < self.ctx.spec.retry_limit:
            self.attempt += 1
            self.ctx.retries += 1
            self.start()
        else:
            self.on_done(job, False)


# -- modes --------------------------------------------------------------------


def _accepting(ctx: RunContext, batch: Batch) -> Callable[[JobHandle, bool], None]:
    def done(job: JobHandle, ok: bool) -> None:
        if ok and job.output is not None:
            ctx.accept(batch, output=job.output, site=job.site or "", task_id=job.task_id)
        else:
            ctx.fail(batch, f"{job.task_id} ended {job.state.value}: {job.error or ''}".strip())

    return done


def run_manual(ctx: RunContext) -> None:
    """Static proportional partition of batches over compute sites."""
    world = ctx.world
    compute = sorted(world.site_backends)
    slots = {s: sum(p.spec.slots for p in world.site_backends[s].partitions.values()) for s in compute}
    shares = proportional_split(len(ctx.batches), slots)
    cursor = 0
    for site in compute:
        backend = world.site_backends[site]
        for batch in ctx.batches[cursor : cursor + shares[site]]:
            RetryingTask(ctx, backend, lambda k, b=batch: map_task(ctx.spec, b, k), on_done=_accepting(ctx, batch)).start()
        cursor += shares[site]
    world.engine.run_until_idle()


def _overlay_hint(ctx: RunContext, backend: SlotBackend, batch: Batch) -> str | None:
    hints = dict(ctx.spec.partition_hints)
    if batch.index in hints:
        return hints[batch.index]
    if ctx.spec.pin_to_home:
        for name in sorted(backend.partitions):
            if backend.partitions[name].spec.site == batch.ref.home_site:
                return name
    return None


def run_overlay(ctx: RunContext) -> None:
    """One batch cluster spanning the sites; outputs go to the central store."""
    world = ctx.world
    cluster = next(
        b for _, b in sorted(world.backends.items()) if b.kind is BackendKind.BATCH_CLUSTER and isinstance(b, SlotBackend)
    )
    for batch in ctx.batches:
        RetryingTask(
            ctx,
            cluster,
            lambda k, b=batch: map_task(ctx.spec, b, k),
            on_done=_accepting(ctx, batch),
            hint=_overlay_hint(ctx, cluster, batch),
            output_sink=world.common_site,
        ).start()
    world.engine.run_until_idle()


def run_overflow(ctx: RunContext) -> None:
    world = ctx.world
    router = next(b for _, b in sorted(world.backends.items()) if isinstance(b, OverflowRouter))
    for batch in ctx.batches:
        RetryingTask(ctx, router, lambda k, b=batch: map_task(ctx.spec, b, k), on_done=_accepting(ctx, batch)).start()
    world.engine.run_until_idle()
    ctx.placements = [dict(r) for r in world.engine.log.of_kind("placement")]


class FederatedWorker:
    """Per-site actor: list -> claim -> stage -> run -> report, every poll interval."""

    def __init__(self, ctx: RunContext, site: SiteId, backend: SlotBackend, *, autonomous: bool = True) -> None:
        assert ctx.repo is not None
        self.ctx = ctx
        self.repo = ctx.repo
        self.site = site
        self.backend = backend
        self.autonomous = autonomous
        self.polling = False
        self.pending_claims = 0
        self.by_id = {b.batch_id: b for b in ctx.batches}
        if autonomous:
            ctx.engine.on(EventKind.SITE_UP, self._on_site_up)

    @property
    def engine(self) -> Engine:
        return self.ctx.engine

    def capacity(self) -> int:
        return max(0, self.backend.free_slots() - self.pending_claims)

    def start(self) -> None:
        if self.polling:
            return
        self.polling = True
        self.engine.after(0.0, EventKind.TIMER, {"label": "poll", "site": self.site}, action=lambda _e: self.poll())

    def _on_site_up(self, event: Event) -> None:
        if event.payload.get("site") == self.site and not self.repo.all_terminal():
            self.start()

    def poll(self) -> None:
        if not self.engine.network.is_up(self.site) or self.repo.all_terminal():
            self.polling = False
            return
        for rec in self.repo.list_batches(BatchTag.UNPROCESSED)[: self.capacity()]:
            self.request_claim(rec)
        self.engine.after(
            self.ctx.world.config.poll_interval_s,
            EventKind.TIMER,
            {"label": "poll", "site": self.site},
            action=lambda _e: self.poll(),
        )

    def request_claim(self, rec: BatchRecord) -> None:
        latency = self.ctx.world.config.repo_latency_s
        if latency <= 0:
            self.claim(rec.batch_id, rec.version)
            return
        self.pending_claims += 1

        def later(_e: Event) -> None:
            self.pending_claims -= 1
            self.claim(rec.batch_id, rec.version)

        self.engine.after(latency, EventKind.TIMER, {"label": "claim", "site": self.site, "batch_id": rec.batch_id}, action=later)

    def claim(self, batch_id: str, version: int) -> None:
        if not self.engine.network.is_up(self.site):
            return
        try:
            rec = self.repo.claim(batch_id, self.site, version, self.ctx.world.config.lease_s or 1.0)
        except Conflict as e:
            self.engine.record("claim_conflict", batch_id=batch_id, site=self.site, tag=e.current.tag.value)
            return
        self.run(rec)

    def run(self, rec: BatchRecord) -> None:
        batch = self.by_id[rec.batch_id]
        spec = map_task(self.ctx.spec, batch, rec.attempts - 1)
        validated = self.ctx.world.registry.validate(spec)
        sink = self.ctx.world.common_site if self.ctx.spec.gather else None
        self.backend.submit(validated, on_change=lambda job: self._changed(rec.batch_id, job), output_sink=sink)

    def _fenced(self, batch_id: str, job: JobHandle, reason: str) -> None:
        self.engine.record("fenced", batch_id=batch_id, site=self.site, task_id=job.task_id, reason=reason)

    def _changed(self, batch_id: str, job: JobHandle) -> None:
        state = job.state
        try:
            if state is TaskState.RUNNING:
                self.repo.report(batch_id, self.site, BatchTag.PROCESSING)
            elif state is TaskState.COMPLETE:
                assert job.output is not None
                self.repo.report(batch_id, self.site, BatchTag.SUCCEEDED, output=job.output.object_id)
                batch = self.by_id[batch_id]
                self.ctx.accept(batch, output=job.output, site=self.site, task_id=job.task_id)
            elif state is TaskState.EXECUTOR_ERROR:
                self.repo.report(batch_id, self.site, BatchTag.FAILED)
            elif state is TaskState.SYSTEM_ERROR and self.engine.network.is_up(self.site):
                self.repo.release(batch_id, self.site)
        except (NotClaimant, LeaseExpired, IllegalTag) as e:
            self._fenced(batch_id, job, str(e))
            if state.holds_slot:
                self.backend.cancel(job)


class FederationController:
    """Central-controller variant: one actor claims on behalf of every site."""

    def __init__(self, ctx: RunContext, site: SiteId, workers: dict[SiteId, FederatedWorker]) -> None:
        self.ctx = ctx
        self.site = site
        self.workers = workers
        self.polling = False
        assert ctx.repo is not None
        self.repo = ctx.repo
        ctx.engine.on(EventKind.SITE_UP, self._on_site_up)

    def start(self) -> None:
        if self.polling:
            return
        self.polling = True
        self.ctx.engine.after(0.0, EventKind.TIMER, {"label": "control", "site": self.site}, action=lambda _e: self.poll())

    def _on_site_up(self, event: Event) -> None:
        if event.payload.get("site") == self.site and not self.repo.all_terminal():
            self.start()

    def poll(self) -> None:
        network = self.ctx.engine.network
        if not network.is_up(self.site) or self.repo.all_terminal():
            self.polling = False
            return
        todo = self.repo.list_batches(BatchTag.UNPROCESSED)
        for site in sorted(self.workers):
            worker = self.workers[site]
            if not network.is_up(site):
                continue
            take, todo = todo[: worker.capacity()], todo[worker.capacity() :]
            for rec in take:
                worker.request_claim(rec)
        self.ctx.engine.after(
            self.ctx.world.config.poll_interval_s,
            EventKind.TIMER,
            {"label": "control", "site": self.site},
            action=lambda _e: self.poll(),
        )


def _init_repo(ctx: RunContext) -> MetadataRepository:
    repo = engine_repository(ctx.engine, max_retries=ctx.world.config.max_retries)
    for batch in ctx.batches:
        repo.register_batch(batch.batch_id, batch.ref)
    ctx.repo = repo
    return repo


def _settle_federated(ctx: RunContext) -> None:
    assert ctx.repo is not None
    ctx.retries = sum(max(0, rec.attempts - 1) for rec in ctx.repo.list_batches())
    for batch in ctx.batches:
        rec = ctx.repo.get(batch.batch_id)
        outcome = ctx.outcomes[batch.batch_id]
        outcome.attempts = rec.attempts
        if rec.tag is BatchTag.FAILED:
            ctx.fail(batch, f"repository tagged FAILED after {rec.attempts} attempts")


def run_federated(ctx: RunContext, *, controller: bool = False) -> None:
    world = ctx.world
    _init_repo(ctx)
    workers = {
        site: FederatedWorker(ctx, site, backend, autonomous=not controller)
        for site, backend in sorted(world.site_backends.items())
    }
    if controller:
        FederationController(ctx, world.config.controller_site or min(workers), workers).start()
    else:
        for site in sorted(workers):
            workers[site].start()
    world.engine.run_until_idle()
    _settle_federated(ctx)


def run_federated_controller(ctx: RunContext) -> None:
    run_federated(ctx, controller=True)


def completed_at(doc: TesTaskDoc) -> float | None:
    done = [e.at for e in doc.logs if e.event == TaskState.COMPLETE.value]
    return done[-1] if done else None


class GatewayDriver:
    """Submit through the gateway, poll docs, resubmit lost or failed-by-system tasks."""

    def __init__(self, ctx: RunContext, gateway: Gateway) -> None:
        self.ctx = ctx
        self.gateway = gateway
        self.outstanding: dict[str, tuple[str, Callable[[int], TaskSpec], int]] = {}
        self.unrouted: list[tuple[str, Callable[[int], TaskSpec], int]] = []
        self.handlers: dict[str, Callable[[TesTaskDoc | None, str], None]] = {}

    def submit(
        self,
        key: str,
        make_spec: Callable[[int], TaskSpec],
        on_final: Callable[[TesTaskDoc | None, str], None],
        attempt: int = 0,
    ) -> None:
        self.handlers[key] = on_final
        try:
            task_id = self.gateway.create_task(make_spec(attempt))
        except NoHealthyNode:
            self.unrouted.append((key, make_spec, attempt))
            return
        self.outstanding[task_id] = (key, make_spec, attempt)

    def _retry_or_fail(self, key: str, make_spec: Callable[[int], TaskSpec], attempt: int, doc: TesTaskDoc) -> None:
        if attempt < self.ctx.spec.retry_limit:
            self.ctx.retries += 1
            self.submit(key, make_spec, self.handlers[key], attempt + 1)
        else:
            self.handlers[key](doc, f"{doc.id} ended {doc.state.value}{' (stale)' if doc.stale else ''}")

    def poll(self) -> None:
        self.gateway.sweep()
        pending, self.unrouted = self.unrouted, []
        for key, make_spec, attempt in pending:
            self.submit(key, make_spec, self.handlers[key], attempt)
        for task_id in sorted(self.outstanding):
            key, make_spec, attempt = self.outstanding[task_id]
            doc = self.gateway.proxy_status(task_id)
            if doc.state is TaskState.COMPLETE:
                del self.outstanding[task_id]
                self.handlers[key](doc, "")
            elif doc.state.is_terminal and doc.state is not TaskState.SYSTEM_ERROR:
                del self.outstanding[task_id]
                self.handlers[key](doc, f"{doc.id} ended {doc.state.value}")
            elif doc.state is TaskState.SYSTEM_ERROR or doc.stale:
                del self.outstanding[task_id]
                if doc.stale:
                    self.ctx.abandoned.add(task_id)
                    self.gateway.abandon(task_id)
                self._retry_or_fail(key, make_spec, attempt, doc)

    def busy(self) -> bool:
        return bool(self.outstanding or self.unrouted)

    def drive(self) -> None:
        """Poll every interval until nothing is outstanding, then drain the engine."""
        engine = self.ctx.engine
        interval = self.ctx.world.config.poll_interval_s

        def tick(_e: Event) -> None:
            self.poll()
            if self.busy() and engine.pending() > 0:
                engine.after(interval, EventKind.TIMER, {"label": "gateway-poll"}, action=tick)

        engine.after(0.0, EventKind.TIMER, {"label": "gateway-poll"}, action=tick)
        engine.run_until_idle()


def build_gateway(ctx: RunContext) -> Gateway:
    world = ctx.world
    config = world.config
    gateway = Gateway(
        GATEWAY_ID,
        engine=world.engine,
        cost_model=config.cost_model,
        heartbeat_interval_s=config.heartbeat_interval_s,
        heartbeat_timeout_s=config.heartbeat_timeout_s,
        seed=config.seed,
    )
    for site in sorted(world.site_backends):
        gateway.register(TesNode(site, backend=world.site_backends[site], engine=world.engine, common_site=world.common_site))
    ctx.gateway = gateway
    return gateway


def run_gateway(ctx: RunContext) -> None:
    gateway = build_gateway(ctx)
    driver = GatewayDriver(ctx, gateway)
    for batch in ctx.batches:

        def on_final(doc: TesTaskDoc | None, reason: str, b: Batch = batch) -> None:
            if doc is not None and doc.state is TaskState.COMPLETE and doc.outputs:
                ctx.accept(
                    b,
                    output=doc.outputs[0],
                    site=gateway.owner_of(doc.id),
                    task_id=doc.id,
                    finished_at=completed_at(doc),
                )
            else:
                ctx.fail(b, reason or "no output")

        driver.submit(batch.batch_id, lambda k, b=batch: map_task(ctx.spec, b, k), on_final)
    driver.drive()

    if ctx.spec.gather and ctx.map_ok():
        inputs = ctx.map_outputs()
        ctx.gather = BatchOutcome(batch_id=GATHER_TASK_ID)

        def gather_done(doc: TesTaskDoc | None, reason: str) -> None:
            assert ctx.gather is not None
            if doc is not None and doc.state is TaskState.COMPLETE and doc.outputs:
                ctx.gather.output = doc.outputs[0]
                ctx.gather.site = gateway.owner_of(doc.id)
                ctx.gather.task_id = doc.id
                ctx.gather.finished_at = completed_at(doc)
            else:
                ctx.gather.failed = True
                ctx.gather.reason = reason

        driver.submit(GATHER_TASK_ID, lambda k: gather_task(ctx.spec, inputs, k), gather_done)
        driver.drive()
    ctx.routing = [d.to_dict() for d in gateway.decisions]


def consolidate(ctx: RunContext) -> None:
    """Gather accepted map outputs into the common store and run the gather task there."""
    world = ctx.world
    engine = world.engine
    lost = False
    for batch in ctx.batches:
        out = ctx.outcomes[batch.batch_id].output
        if out is not None and not world.store.reachable(out.object_id, world.common_site):
            ctx.lose(batch, f"every replica of {out.object_id[:12]} is on a down site")
            lost = True
    if lost:
        return
    outputs = ctx.map_outputs()
    manifest = world.store.gather([r.object_id for r in outputs], world.common_site)
    inputs = [DataRef(r.object_id, r.size_bytes, world.common_site) for r in outputs]
    backend = _gather_backend(ctx)
    ctx.gather = BatchOutcome(batch_id=GATHER_TASK_ID)

    def done(job: JobHandle, ok: bool) -> None:
        assert ctx.gather is not None
        ctx.gather.finished_at = engine.now
        ctx.gather.task_id = job.task_id
        if ok and job.output is not None:
            ctx.gather.output = job.output
            ctx.gather.site = job.site
        else:
            ctx.gather.failed = True
            ctx.gather.reason = f"{job.task_id} ended {job.state.value}"

    def launch(_e: Event) -> None:
        RetryingTask(ctx, backend, lambda k: gather_task(ctx.spec, inputs, k), on_done=done, output_sink=world.common_site).start()

    engine.at(manifest.ready_at, EventKind.SUBMIT, {"task_id": GATHER_TASK_ID}, action=launch)
    engine.run_until_idle()


def _gather_backend(ctx: RunContext) -> Backend:
    world = ctx.world
    mode = ctx.spec.mode
    if mode is WorkflowMode.OVERFLOW:
        return next(b for _, b in sorted(world.backends.items()) if isinstance(b, OverflowRouter))
    if mode is WorkflowMode.OVERLAY:
        return next(b for _, b in sorted(world.backends.items()) if b.kind is BackendKind.BATCH_CLUSTER)
    common = world.common_site
    if common in world.site_backends:
        return world.site_backends[common]
    up = [s for s in sorted(world.site_backends) if world.network.is_up(s)]
    return world.site_backends[up[0] if up else min(world.site_backends)]


# -- report -------------------------------------------------------------------


@dataclass
class RunReport:
    mode: WorkflowMode
    succeeded: bool
    makespan_s: float
    per_site: dict[SiteId, int]
    bytes_transferred_total: int
    retries: int
    starved: list[str]
    failed_batches: list[str]
    final_manifest: Manifest
    gather_output: DataRef | None
    routing_decisions: list[dict[str, Any]]
    placements: list[dict[str, Any]]
    timeline: list[tuple[float, dict[SiteId, int]]]
    repo_mutations: dict[str, int]
    batch_count: int = 0

    def to_dict(self, *, with_digest: bool = True) -> dict[str, Any]:
        out: dict[str, Any] = {
            "mode": self.mode.value,
            "succeeded": self.succeeded,
            "batch_count": self.batch_count,
            "makespan_s": self.makespan_s,
            "per_site": dict(sorted(self.per_site.items())),
            "bytes_transferred_total": self.bytes_transferred_total,
            "retries": self.retries,
            "starved": list(self.starved),
            "failed_batches": list(self.failed_batches),
            "final_manifest": self.final_manifest.to_dict(),
            "gather_output": self.gather_output.to_dict() if self.gather_output else None,
            "routing_decisions": self.routing_decisions,
            "placements": self.placements,
            "repo_mutations": dict(sorted(self.repo_mutations.items())),
        }
        if with_digest:
            out["metrics_digest"] = self.metrics_digest()
        return out

    def metrics_digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict(with_digest=False)).encode("utf-8")).hexdigest()

    def timeline_csv(self) -> str:
        sites = sorted({s for _, counts in self.timeline for s in counts} | set(self.per_site))
        lines = [",".join(["time", *sites])]
        for at, counts in self.timeline:
            lines.append(",".join([repr(float(at)), *(str(counts.get(s, 0)) for s in sites)]))
        return "\n".join(lines) + "\n"


def running_timeline(records: Iterable[dict[str, Any]]) -> list[tuple[float, dict[SiteId, int]]]:
    """Running-task count per site after every change, from task_state records."""
    running: dict[str, SiteId] = {}
    counts: Counter[SiteId] = Counter()
    rows: list[tuple[float, dict[SiteId, int]]] = []
    for rec in records:
        if rec.get("kind") != "task_state":
            continue
        task_id = rec["task_id"]
        before = dict(counts)
        if rec["state"] == TaskState.RUNNING.value and rec.get("site"):
            running[task_id] = rec["site"]
            counts[rec["site"]] += 1
        elif task_id in running and rec["state"] != TaskState.RUNNING.value:
            counts[running.pop(task_id)] -= 1
        now = {s: c for s, c in counts.items()}
        if now != before:
            if rows and rows[-1][0] == rec["at"]:
                rows[-1] = (rec["at"], now)
            else:
                rows.append((rec["at"], now))
    return rows


def _starved(ctx: RunContext) -> list[str]:
    ids = {
        job.task_id
        for b in ctx.world.backends.values()
        for job in b.jobs.values()
        if not job.state.is_terminal and job.task_id not in ctx.abandoned
    }
    if ctx.repo is not None:
        for batch in ctx.batches:
            rec = ctx.repo.get(batch.batch_id)
            if not rec.tag.is_terminal and not ctx.outcomes[batch.batch_id].done:
                ids.add(map_task(ctx.spec, batch).id)
    return sorted(ids)


def build_report(ctx: RunContext) -> RunReport:
    world = ctx.world
    engine = world.engine
    starved = _starved(ctx)
    for batch in ctx.batches:
        if not ctx.outcomes[batch.batch_id].done:
            ctx.fail(batch, "never completed")
    failed = sorted(o.batch_id for o in ctx.outcomes.values() if o.failed)
    gather_ok = not ctx.spec.gather or (ctx.gather is not None and ctx.gather.output is not None)
    succeeded = not failed and not starved and gather_ok

    per_site: Counter[SiteId] = Counter(o.site for o in ctx.outcomes.values() if o.output is not None and o.site)
    if ctx.gather is not None and ctx.gather.output is not None and ctx.gather.site:
        per_site[ctx.gather.site] += 1
    finished = [o.finished_at for o in ctx.outcomes.values() if o.output is not None and o.finished_at is not None]
    if ctx.gather is not None and ctx.gather.output is not None and ctx.gather.finished_at is not None:
        finished.append(ctx.gather.finished_at)

    manifest = Manifest.of((r.object_id, r.size_bytes) for r in ctx.map_outputs())
    mutations = {b.batch_id: ctx.repo.mutations(b.batch_id) for b in ctx.batches} if ctx.repo is not None else {}
    ledger = world.store.ledger

    engine.record(
        "run_end",
        records=len(engine.log),
        mode=ctx.spec.mode.value,
        succeeded=succeeded,
        batch_count=ctx.spec.batch_count,
        bytes_transferred_total=ledger.total_bytes,
        replica_bytes=ledger.replica_bytes,
        starved=starved,
        abandoned=sorted(ctx.abandoned),
        failed_batches=failed,
        manifest=[e.object_id for e in manifest.entries],
    )
    return RunReport(
        mode=ctx.spec.mode,
        succeeded=succeeded,
        makespan_s=max(finished, default=0.0),
        per_site=dict(per_site),
        bytes_transferred_total=ledger.total_bytes,
        retries=ctx.retries,
        starved=starved,
        failed_batches=failed,
        final_manifest=manifest,
        gather_output=ctx.gather.output if ctx.gather is not None else None,
        routing_decisions=ctx.routing,
        placements=ctx.placements,
        timeline=running_timeline(engine.log),
        repo_mutations=mutations,
        batch_count=ctx.spec.batch_count,
    )


def compare_runs(report_a: RunReport, report_b: RunReport) -> bool:
    """Equivalent iff final manifests carry the same object ids and sizes."""
    return report_a.final_manifest.same_objects(report_b.final_manifest)


# -- pipeline -----------------------------------------------------------------


class RunState(TypedDict, total=False):
    config: ScenarioConfig
    ctx: RunContext
    report: RunReport


_MODE_RUNNERS: dict[WorkflowMode, Callable[[RunContext], None]] = {
    WorkflowMode.MANUAL: run_manual,
    WorkflowMode.FEDERATED: run_federated,
    WorkflowMode.FEDERATED_CONTROLLER: run_federated_controller,
    WorkflowMode.OVERLAY: run_overlay,
    WorkflowMode.OVERFLOW: run_overflow,
    WorkflowMode.GATEWAY: run_gateway,
}


def prepare(config: ScenarioConfig) -> RunContext:
    spec = WorkflowSpec.from_config(config)
    world = build_world(config)
    compute = [s.id for s in world.network.compute_sites]
    refs = scatter(spec.dataset_id, spec.batch_count, compute, batch_size_bytes=spec.batch_size_bytes, homes=spec.homes)
    batches = []
    for i, ref in enumerate(refs):
        world.store.put(ref.home_site, batch_content(spec.dataset_id, i), size_bytes=ref.size_bytes)
        batches.append(Batch(index=i, batch_id=batch_id_for(spec.dataset_id, i), ref=ref))
    outcomes = {b.batch_id: BatchOutcome(batch_id=b.batch_id) for b in batches}
    return RunContext(world=world, spec=spec, batches=batches, outcomes=outcomes)


def _mode_node(runner: Callable[[RunContext], None]) -> Callable[[RunState], dict[str, Any]]:
    def node(state: RunState) -> dict[str, Any]:
        runner(state["ctx"])
        return {}

    return node


def build_graph() -> Any:
    def prepare_node(state: RunState) -> dict[str, Any]:
        if "ctx" in state:
            return {}
        return {"ctx": prepare(state["config"])}

    def consolidate_node(state: RunState) -> dict[str, Any]:
        consolidate(state["ctx"])
        return {}

    def finish_node(state: RunState) -> dict[str, Any]:
        return {"report": build_report(state["ctx"])}

    def pick_mode(state: RunState) -> str:
        return state["ctx"].spec.mode.value

    def after_mode(state: RunState) -> str:
        ctx = state["ctx"]
        if ctx.spec.gather and ctx.spec.mode is not WorkflowMode.GATEWAY and ctx.map_ok():
            return "consolidate"
        return "finish"

    builder = StateGraph(RunState)
    builder.add_node("prepare", prepare_node)
    for mode, runner in _MODE_RUNNERS.items():
        builder.add_node(mode.value, _mode_node(runner))
        builder.add_conditional_edges(mode.value, after_mode, {"consolidate": "consolidate", "finish": "finish"})
    builder.add_node("consolidate", consolidate_node)
    builder.add_node("finish", finish_node)

    builder.set_entry_point("prepare")
    builder.add_conditional_edges("prepare", pick_mode, {m.value: m.value for m in _MODE_RUNNERS})
    builder.add_edge("consolidate", "finish")
    builder.add_edge("finish", END)
    return builder.compile()


@dataclass
class RunResult:
    report: RunReport
    ctx: RunContext

    @property
    def world(self) -> World:
        return self.ctx.world

    @property
    def engine(self) -> Engine:
        return self.ctx.world.engine


def run_scenario(config: ScenarioConfig, *, ctx: RunContext | None = None) -> RunResult:
    """Run one scenario end to end; pass ``ctx`` from :func:`prepare` to keep a handle on a run that raises."""
    initial: RunState = {"config": config}
    if ctx is not None:
        initial["ctx"] = ctx
    state = build_graph().invoke(initial)
    return RunResult(report=state["report"], ctx=state["ctx"])


def run(config: ScenarioConfig) -> RunReport:
    return run_scenario(config).report
