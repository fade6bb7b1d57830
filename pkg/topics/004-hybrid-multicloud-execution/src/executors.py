#!/usr/bin/env python3
"""Execution backends running on the simulated network.

- ``LocalBackend``: one slot pool at one site.
- ``BatchClusterBackend``: a cluster spanning sites, one partition per site,
  FIFO without backfill, optional partition hints.
- ``OverflowRouter``: admits to an orchestrator-like primary until it is full,
  then offloads single-node single-container tasks to a batch-like secondary
  whose jobs read and write through a remote mount on the primary's site.

All state changes happen inside simnet event processing.
"""
from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, ClassVar, Iterable

from core import (
    ConfigError,
    DataRef,
    HybridMeshError,
    LifecycleEvent,
    ResourceRequest,
    SiteId,
    TaskSpec,
    TaskState,
    ValidatedTask,
    advance_state,
    content_digest,
)
from simnet import Engine, Event, EventKind
from storage import NoReachableReplica, ObjectNotFound, ObjectStore, SiteDown

log = logging.getLogger(__name__)


class NoEligiblePartition(HybridMeshError):
    http_status = 400


class AlreadyTerminal(HybridMeshError):
    http_status = 409


class BackendKind(str, Enum):
    LOCAL = "local"
    BATCH_CLUSTER = "batch_cluster"
    OVERFLOW_ROUTER = "overflow_router"


class Placement(str, Enum):
    PRIMARY = "primary"
    OFFLOADED = "offloaded"
    QUEUED_PRIMARY = "queued_primary"


@dataclass(frozen=True)
class PartitionSpec:
    name: str
    site: SiteId
    slots: int
    max_cpu_cores: int = 32
    max_ram_gb: float = 256.0
    max_disk_gb: float = 10000.0

    def __post_init__(self) -> None:
        if not self.name:
            raise ConfigError("partition name must be non-empty")
        if not isinstance(self.slots, int) or self.slots < 1:
            raise ConfigError(f"partition {self.name}: slots must be >= 1")

    def fits(self, resources: ResourceRequest) -> bool:
        return (
            resources.cpu_cores <= self.max_cpu_cores
            and resources.ram_gb <= self.max_ram_gb
            and resources.disk_gb <= self.max_disk_gb
        )


@dataclass(frozen=True)
class BackendDescriptor:
    id: str
    kind: BackendKind
    site: SiteId
    slots: int = 1
    partitions: tuple[PartitionSpec, ...] = ()
    primary: str | None = None
    secondary: str | None = None
    offload_cap: int | None = None
    max_cpu_cores: int = 32
    max_ram_gb: float = 256.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", BackendKind(self.kind))
        object.__setattr__(self, "partitions", tuple(self.partitions))
        if not isinstance(self.slots, int) or self.slots < 1:
            raise ConfigError(f"backend {self.id}: slots must be >= 1")
        names = [p.name for p in self.partitions]
        if len(names) != len(set(names)):
            raise ConfigError(f"backend {self.id}: partition names must be unique")
        if self.kind is BackendKind.BATCH_CLUSTER and not self.partitions:
            raise ConfigError(f"backend {self.id}: batch_cluster needs at least one partition")
        if self.kind is BackendKind.OVERFLOW_ROUTER and not (self.primary and self.secondary):
            raise ConfigError(f"backend {self.id}: overflow_router needs primary and secondary")
        if self.offload_cap is not None and self.offload_cap < 0:
            raise ConfigError(f"backend {self.id}: offload_cap must be >= 0")

    def partition_specs(self) -> tuple[PartitionSpec, ...]:
        if self.kind is BackendKind.LOCAL:
            return (
                PartitionSpec(
                    name=self.id,
                    site=self.site,
                    slots=self.slots,
                    max_cpu_cores=self.max_cpu_cores,
                    max_ram_gb=self.max_ram_gb,
                ),
            )
        return self.partitions


@dataclass(frozen=True)
class QueuedJob:
    task: ValidatedTask
    enqueued_at: float
    partition_hint: str | None = None


StateListener = Callable[["JobHandle"], None]


@dataclass(eq=False)
class JobHandle:
    queued: QueuedJob
    backend_id: str
    state: TaskState = TaskState.QUEUED
    site: SiteId | None = None
    partition: str | None = None
    started_at: float | None = None
    finished_at: float | None = None
    output: DataRef | None = None
    error: str | None = None
    mount_site: SiteId | None = None
    output_sink: SiteId | None = None
    placement: Placement | None = None
    token: int = 0
    listeners: list[StateListener] = field(default_factory=list)

    @property
    def task(self) -> TaskSpec:
        return self.queued.task.spec

    @property
    def task_id(self) -> str:
        return self.queued.task.id


class _Partition:
    def __init__(self, spec: PartitionSpec) -> None:
        self.spec = spec
        self.running: dict[str, JobHandle] = {}

    @property
    def free(self) -> int:
        return self.spec.slots - len(self.running)


class Backend(ABC):
    kind: ClassVar[BackendKind]

    def __init__(self, descriptor: BackendDescriptor, *, engine: Engine, store: ObjectStore) -> None:
        self.descriptor = descriptor
        self.engine = engine
        self.store = store
        self.jobs: dict[str, JobHandle] = {}

    @property
    def id(self) -> str:
        return self.descriptor.id

    @property
    def site(self) -> SiteId:
        return self.descriptor.site

    @abstractmethod
    def submit(
        self,
        task: ValidatedTask,
        *,
        hint: str | None = None,
        on_change: StateListener | None = None,
        output_sink: SiteId | None = None,
        mount_site: SiteId | None = None,
    ) -> JobHandle: ...

    @abstractmethod
    def cancel(self, job: JobHandle) -> None: ...

    @abstractmethod
    def free_slots(self) -> int: ...

    @abstractmethod
    def can_host(self, task: TaskSpec, hint: str | None = None) -> bool: ...


class SlotBackend(Backend):
    """Queue + partitions + dispatcher shared by local and batch-cluster backends."""

    def __init__(self, descriptor: BackendDescriptor, *, engine: Engine, store: ObjectStore) -> None:
        super().__init__(descriptor, engine=engine, store=store)
        self.partitions: dict[str, _Partition] = {
            p.name: _Partition(p) for p in sorted(descriptor.partition_specs(), key=lambda p: p.name)
        }
        for part in self.partitions.values():
            engine.network.site(part.spec.site)
        self.queue: deque[JobHandle] = deque()
        engine.on(EventKind.SITE_DOWN, self._on_site_down)
        engine.on(EventKind.PREEMPT, self._on_preempt)
        engine.on(EventKind.SITE_UP, lambda _e: self.dispatch())

    # -- partition selection ---------------------------------------------

    def _eligible(self, task: TaskSpec, hint: str | None) -> list[_Partition]:
        if hint is not None:
            part = self.partitions.get(hint)
            return [part] if part is not None and part.spec.fits(task.resources) else []
        return [p for p in self.partitions.values() if p.spec.fits(task.resources)]

    def select_partition(self, task: TaskSpec, hint: str | None = None) -> PartitionSpec:
        eligible = self._eligible(task, hint)
        if not eligible:
            where = f"partition {hint!r}" if hint is not None else f"backend {self.id}"
            raise NoEligiblePartition(f"task {task.id}: no partition of {where} satisfies {task.resources}")
        # most free slots first, then partition name
        best = min(eligible, key=lambda p: (-p.free, p.spec.name))
        return best.spec

    def can_host(self, task: TaskSpec, hint: str | None = None) -> bool:
        return bool(self._eligible(task, hint))

    def _pick_free(self, job: JobHandle) -> _Partition | None:
        network = self.engine.network
        candidates = [
            p
            for p in self._eligible(job.task, job.queued.partition_hint)
            if p.free > 0 and network.is_up(p.spec.site)
        ]
        if not candidates:
            return None
        return min(candidates, key=lambda p: (-p.free, p.spec.name))

    def free_slots(self) -> int:
        network = self.engine.network
        return sum(max(0, p.free) for p in self.partitions.values() if network.is_up(p.spec.site))

    def running_count(self, partition: str | None = None) -> int:
        if partition is not None:
            return len(self.partitions[partition].running)
        return sum(len(p.running) for p in self.partitions.values())

    # -- lifecycle -----------------------------------------------------------

    def _transition(self, job: JobHandle, event: LifecycleEvent) -> None:
        job.state = advance_state(job.state, event)
        slots = self.partitions[job.partition].spec.slots if job.partition else None
        self.engine.record(
            "task_state",
            task_id=job.task_id,
            backend=self.id,
            partition=job.partition,
            site=job.site,
            slots=slots,
            event=event.value,
            state=job.state.value,
            hint=job.queued.partition_hint,
        )
        for listener in list(job.listeners):
            listener(job)

    def _release(self, job: JobHandle) -> None:
        if job.partition is not None:
            self.partitions[job.partition].running.pop(job.task_id, None)

    def submit(
        self,
        task: ValidatedTask,
        *,
        hint: str | None = None,
        on_change: StateListener | None = None,
        output_sink: SiteId | None = None,
        mount_site: SiteId | None = None,
    ) -> JobHandle:
        self.select_partition(task.spec, hint)
        job = JobHandle(
            queued=QueuedJob(task=task, enqueued_at=self.engine.now, partition_hint=hint),
            backend_id=self.id,
            output_sink=output_sink,
            mount_site=mount_site,
        )
        if on_change is not None:
            job.listeners.append(on_change)
        self.jobs[job.task_id] = job
        self.queue.append(job)
        self.engine.record(
            "task_state",
            task_id=job.task_id,
            backend=self.id,
            partition=None,
            site=None,
            slots=None,
            event="submit",
            state=job.state.value,
            hint=hint,
        )
        self.dispatch()
        return job

    def dispatch(self) -> None:
        """Start every queued job, in FIFO order, that has a free eligible slot."""
        for job in list(self.queue):
            if job.state is not TaskState.QUEUED:
                continue
            part = self._pick_free(job)
            if part is None:
                continue
            self.queue.remove(job)
            self._start(job, part)

    def _start(self, job: JobHandle, part: _Partition) -> None:
        job.site = part.spec.site
        job.partition = part.spec.name
        job.started_at = self.engine.now
        part.running[job.task_id] = job
        self._transition(job, LifecycleEvent.START_INIT)
        if job.state is TaskState.INITIALIZING:
            self.stage_and_run(job)

    def stage_and_run(self, job: JobHandle) -> None:
        """Stage inputs, then run for the logical duration, then deliver the output."""
        token = job.token
        spec = job.task
        assert job.site is not None
        fetch_site = job.mount_site or job.site
        ready = self.engine.now
        try:
            for ref in spec.inputs:
                ready = max(ready, self.store.fetch(ref.object_id, fetch_site, purpose="input"))
        except (ObjectNotFound, NoReachableReplica) as e:
            self._fail(job, str(e))
            return
        if job.mount_site is not None:
            ready += sum(
                self.store.charge_mount(ref.object_id, ref.size_bytes, job.mount_site, job.site) for ref in spec.inputs
            )
        self.engine.at(
            ready,
            EventKind.TIMER,
            {"label": "staged", "task_id": job.task_id},
            action=lambda _e: self._begin_run(job, token),
        )

    def _alive(self, job: JobHandle, token: int) -> bool:
        return job.token == token and job.state.holds_slot

    def _begin_run(self, job: JobHandle, token: int) -> None:
        if not self._alive(job, token):
            return
        self._transition(job, LifecycleEvent.START_RUN)
        duration = self.engine.jittered(job.task.command.duration_s)
        self.engine.after(
            duration,
            EventKind.TIMER,
            {"label": "computed", "task_id": job.task_id},
            action=lambda _e: self._computed(job, token),
        )

    def _computed(self, job: JobHandle, token: int) -> None:
        if not self._alive(job, token):
            return
        command = job.task.command
        if command.poisoned:
            self.engine.after(
                0.0,
                EventKind.TASK_DONE,
                {"task_id": job.task_id, "ok": False},
                action=lambda _e: self._finish_error(job, token),
            )
            return
        content = command.output_content(job.task.inputs)
        size = command.output_size_bytes if command.output_size_bytes is not None else len(content)
        delay = 0.0
        if job.mount_site is not None:
            assert job.site is not None
            delay = self.store.charge_mount(content_digest(content), size, job.site, job.mount_site)
        self.engine.after(
            delay,
            EventKind.TIMER,
            {"label": "deliver", "task_id": job.task_id},
            action=lambda _e: self._deliver(job, token, content, size),
        )

    def _deliver(self, job: JobHandle, token: int, content: bytes, size: int) -> None:
        if not self._alive(job, token):
            return
        write_site = job.mount_site or job.site
        assert write_site is not None
        try:
            object_id = self.store.put(write_site, content, size_bytes=size)
        except SiteDown as e:
            self._fail(job, str(e))
            return
        home = write_site
        ready = self.engine.now
        if job.output_sink is not None and job.output_sink != write_site:
            try:
                ready = self.store.fetch(object_id, job.output_sink, purpose="output")
            except NoReachableReplica as e:
                self._fail(job, str(e))
                return
            home = job.output_sink
        ref = DataRef(object_id=object_id, size_bytes=size, home_site=home)
        self.engine.at(
            ready,
            EventKind.TASK_DONE,
            {"task_id": job.task_id, "ok": True},
            action=lambda _e: self._complete(job, token, ref),
        )

    def _complete(self, job: JobHandle, token: int, ref: DataRef) -> None:
        if not self._alive(job, token):
            return
        self._release(job)
        job.output = ref
        job.finished_at = self.engine.now
        self._transition(job, LifecycleEvent.FINISH_OK)
        self.dispatch()

    def _finish_error(self, job: JobHandle, token: int) -> None:
        if not self._alive(job, token):
            return
        self._release(job)
        job.error = "executor reported failure"
        job.finished_at = self.engine.now
        self._transition(job, LifecycleEvent.FINISH_EXECUTOR_ERR)
        self.dispatch()

    def _fail(self, job: JobHandle, reason: str) -> None:
        job.token += 1
        self._release(job)
        job.error = reason
        job.finished_at = self.engine.now
        self._transition(job, LifecycleEvent.FINISH_SYSTEM_ERR)

    def _kill_at(self, site: SiteId, reason: str) -> None:
        for part in self.partitions.values():
            if part.spec.site != site:
                continue
            for job in sorted(part.running.values(), key=lambda j: j.task_id):
                self._fail(job, reason)
        self.dispatch()

    def _on_site_down(self, event: Event) -> None:
        self._kill_at(event.payload["site"], "site down")

    def _on_preempt(self, event: Event) -> None:
        self._kill_at(event.payload["site"], "preempted")

    def cancel(self, job: JobHandle) -> None:
        if job.state.is_terminal:
            raise AlreadyTerminal(f"task {job.task_id} is already {job.state.value}")
        if job.state is TaskState.QUEUED:
            if job in self.queue:
                self.queue.remove(job)
            job.finished_at = self.engine.now
            self._transition(job, LifecycleEvent.CANCEL)
            return
        job.token += 1
        self._release(job)
        job.finished_at = self.engine.now
        self._transition(job, LifecycleEvent.CANCEL)
        self.dispatch()


class LocalBackend(SlotBackend):
    kind = BackendKind.LOCAL


class BatchClusterBackend(SlotBackend):
    kind = BackendKind.BATCH_CLUSTER


def select_partition(task: TaskSpec, backend: Backend, hint: str | None = None) -> PartitionSpec:
    if not isinstance(backend, BatchClusterBackend):
        raise NoEligiblePartition(f"backend {backend.id} is not a batch cluster")
    return backend.select_partition(task, hint)


class OverflowRouter(Backend):
    kind = BackendKind.OVERFLOW_ROUTER

    def __init__(
        self,
        descriptor: BackendDescriptor,
        *,
        engine: Engine,
        store: ObjectStore,
        primary: SlotBackend,
        secondary: Backend,
    ) -> None:
        super().__init__(descriptor, engine=engine, store=store)
        self.primary = primary
        self.secondary = secondary
        self.offload_cap = descriptor.offload_cap
        self.offloaded_active = 0

    @property
    def site(self) -> SiteId:
        return self.primary.site

    def admit_or_offload(self, task: TaskSpec) -> Placement:
        if self.primary.free_slots() > 0 and self.primary.can_host(task):
            return Placement.PRIMARY
        capped = self.offload_cap is not None and self.offloaded_active >= self.offload_cap
        if task.single_node_single_container and not capped and self.secondary.can_host(task):
            return Placement.OFFLOADED
        return Placement.QUEUED_PRIMARY

    def _offload_done(self, job: JobHandle) -> None:
        if job.state.is_terminal:
            self.offloaded_active -= 1

    def submit(
        self,
        task: ValidatedTask,
        *,
        hint: str | None = None,
        on_change: StateListener | None = None,
        output_sink: SiteId | None = None,
        mount_site: SiteId | None = None,
    ) -> JobHandle:
        placement = self.admit_or_offload(task.spec)
        target = self.secondary if placement is Placement.OFFLOADED else self.primary
        self.engine.record(
            "placement",
            task_id=task.id,
            router=self.id,
            placement=placement.value,
            target=target.id,
            node_count=task.spec.node_count,
            executor_count=task.spec.executor_count,
        )
        if placement is Placement.OFFLOADED:
            self.offloaded_active += 1
            listeners: list[StateListener] = [self._offload_done]
            if on_change is not None:
                listeners.append(on_change)
            job = self.secondary.submit(
                task,
                on_change=lambda j: [fn(j) for fn in listeners],
                output_sink=output_sink,
                mount_site=self.primary.site,
            )
        else:
            job = self.primary.submit(task, hint=hint, on_change=on_change, output_sink=output_sink)
        job.placement = placement
        self.jobs[job.task_id] = job
        return job

    def cancel(self, job: JobHandle) -> None:
        owner = self.secondary if job.backend_id == self.secondary.id else self.primary
        owner.cancel(job)

    def free_slots(self) -> int:
        return self.primary.free_slots()

    def can_host(self, task: TaskSpec, hint: str | None = None) -> bool:
        return self.primary.can_host(task, hint) or (
            task.single_node_single_container and self.secondary.can_host(task)
        )


def admit_or_offload(router: OverflowRouter, task: TaskSpec) -> Placement:
    return router.admit_or_offload(task)


_SLOT_KINDS: dict[BackendKind, type[SlotBackend]] = {
    BackendKind.LOCAL: LocalBackend,
    BackendKind.BATCH_CLUSTER: BatchClusterBackend,
}


def build_backends(
    descriptors: Iterable[BackendDescriptor], *, engine: Engine, store: ObjectStore
) -> dict[str, Backend]:
    """Instantiate slot backends first, then routers over them."""
    ordered = sorted(descriptors, key=lambda d: d.id)
    ids = [d.id for d in ordered]
    if len(ids) != len(set(ids)):
        raise ConfigError("backend ids must be unique")
    backends: dict[str, Backend] = {}
    for desc in ordered:
        if desc.kind is BackendKind.OVERFLOW_ROUTER:
            continue
        engine.network.site(desc.site)
        backends[desc.id] = _SLOT_KINDS[desc.kind](desc, engine=engine, store=store)
    for desc in ordered:
        if desc.kind is not BackendKind.OVERFLOW_ROUTER:
            continue
        primary = backends.get(desc.primary or "")
        secondary = backends.get(desc.secondary or "")
        if not isinstance(primary, SlotBackend) or secondary is None:
            raise ConfigError(f"router {desc.id}: primary/secondary must name local or batch_cluster backends")
        backends[desc.id] = OverflowRouter(desc, engine=engine, store=store, primary=primary, secondary=secondary)
    return backends
