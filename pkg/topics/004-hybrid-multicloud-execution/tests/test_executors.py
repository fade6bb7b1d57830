from __future__ import annotations

import pytest

from conftest import make_engine, make_task
from core import ConfigError, DataRef, ResourceRequest, TaskRegistry, TaskState
from executors import (
    AlreadyTerminal,
    BackendDescriptor,
    BackendKind,
    BatchClusterBackend,
    LocalBackend,
    NoEligiblePartition,
    OverflowRouter,
    PartitionSpec,
    Placement,
    admit_or_offload,
    build_backends,
    select_partition,
)
from storage import ObjectStore


def _world(slots=None, **kw):
    engine = make_engine(slots or {"a": 2, "b": 2, "c": 1}, **kw)
    return engine, ObjectStore(engine, common_site="c"), TaskRegistry(engine.network)


def _local(engine, store, site="a", slots=2, bid="loc"):
    return LocalBackend(BackendDescriptor(id=bid, kind=BackendKind.LOCAL, site=site, slots=slots), engine=engine, store=store)


def _cluster(engine, store, parts):
    desc = BackendDescriptor(
        id="cluster",
        kind=BackendKind.BATCH_CLUSTER,
        site=parts[0].site,
        partitions=tuple(parts),
    )
    return BatchClusterBackend(desc, engine=engine, store=store)


def test_local_runs_a_task_to_completion():
    engine, store, registry = _world()
    backend = _local(engine, store)
    job = backend.submit(registry.validate(make_task("t1", duration_s=5.0)))
    assert job.state is TaskState.INITIALIZING
    engine.run_until_idle()
    assert job.state is TaskState.COMPLETE
    assert job.finished_at == pytest.approx(5.0)
    assert job.output is not None and job.output.home_site == "a"
    assert store.has(job.output.object_id)


def test_fifo_and_slot_limit():
    engine, store, registry = _world()
    backend = _local(engine, store, slots=2)
    jobs = [backend.submit(registry.validate(make_task(f"t{i}", duration_s=10.0))) for i in range(5)]
    assert [j.state for j in jobs] == [TaskState.INITIALIZING] * 2 + [TaskState.QUEUED] * 3
    engine.run_until_idle()
    assert [j.finished_at for j in jobs] == pytest.approx([10.0, 10.0, 20.0, 20.0, 30.0])
    running = 0
    peak = 0
    for rec in engine.log.of_kind("task_state"):
        if rec["state"] == "INITIALIZING":
            running += 1
        elif rec["state"] == "COMPLETE":
            running -= 1
        peak = max(peak, running)
    assert peak == 2


def test_inputs_are_staged_before_running():
    engine, store, registry = _world()
    oid = store.put("b", b"input", size_bytes=10**9)
    backend = _local(engine, store, site="a")
    job = backend.submit(registry.validate(make_task("t1", duration_s=2.0, inputs=(DataRef(oid, 10**9, "b"),))))
    engine.run_until_idle()
    assert job.finished_at == pytest.approx(3.0)
    assert store.ledger.bytes_for("input") == 10**9


def test_poisoned_task_is_an_executor_error():
    engine, store, registry = _world()
    backend = _local(engine, store)
    job = backend.submit(registry.validate(make_task("bad", poisoned=True)))
    engine.run_until_idle()
    assert job.state is TaskState.EXECUTOR_ERROR
    assert job.output is None


def test_site_down_kills_running_tasks():
    engine, store, registry = _world()
    backend = _local(engine, store)
    job = backend.submit(registry.validate(make_task("t1", duration_s=10.0)))
    engine.inject_failure("a", 4.0, 50.0)
    engine.run_until_idle()
    assert job.state is TaskState.SYSTEM_ERROR
    assert job.finished_at == 4.0


def test_queued_work_waits_for_the_site_to_return():
    engine, store, registry = _world()
    backend = _local(engine, store, slots=1)
    engine.inject_failure("a", 0.0, 20.0)
    engine.run_until(1.0)
    job = backend.submit(registry.validate(make_task("t1", duration_s=5.0)))
    assert job.state is TaskState.QUEUED
    engine.run_until_idle()
    assert job.state is TaskState.COMPLETE
    assert job.started_at == 20.0


def test_preemption_kills_but_site_stays_up():
    engine, store, registry = _world(preemptible=("a",))
    backend = _local(engine, store)
    job = backend.submit(registry.validate(make_task("t1", duration_s=10.0)))
    engine.inject_preemption("a", 3.0)
    engine.run_until_idle()
    assert job.state is TaskState.SYSTEM_ERROR
    assert engine.network.is_up("a")


def test_cancel_queued_and_running():
    engine, store, registry = _world()
    backend = _local(engine, store, slots=1)
    running = backend.submit(registry.validate(make_task("t1", duration_s=10.0)))
    queued = backend.submit(registry.validate(make_task("t2", duration_s=10.0)))
    backend.cancel(queued)
    assert queued.state is TaskState.CANCELED
    engine.run_until(2.0)
    backend.cancel(running)
    assert running.state is TaskState.CANCELED
    engine.run_until_idle()
    assert running.output is None
    with pytest.raises(AlreadyTerminal):
        backend.cancel(running)


def test_hint_pins_to_partition():
    engine, store, registry = _world()
    cluster = _cluster(engine, store, [PartitionSpec("pa", "a", 2), PartitionSpec("pb", "b", 2)])
    jobs = [cluster.submit(registry.validate(make_task(f"t{i}")), hint="pb") for i in range(3)]
    engine.run_until_idle()
    assert {j.partition for j in jobs} == {"pb"}
    assert {j.site for j in jobs} == {"b"}


def test_unhinted_task_goes_to_the_freest_partition():
    engine, store, registry = _world()
    cluster = _cluster(engine, store, [PartitionSpec("pa", "a", 1), PartitionSpec("pb", "b", 2)])
    assert select_partition(make_task("x"), cluster).name == "pb"


def test_resource_limits_filter_partitions():
    engine, store, registry = _world()
    cluster = _cluster(engine, store, [PartitionSpec("small", "a", 2, max_cpu_cores=4), PartitionSpec("big", "b", 1)])
    big_task = make_task("big", resources=ResourceRequest(cpu_cores=16))
    assert cluster.select_partition(big_task).name == "big"
    with pytest.raises(NoEligiblePartition):
        cluster.select_partition(big_task, hint="small")
    with pytest.raises(NoEligiblePartition):
        cluster.submit(registry.validate(make_task("huge", resources=ResourceRequest(cpu_cores=64))))


def test_select_partition_needs_a_cluster():
    engine, store, _ = _world()
    with pytest.raises(NoEligiblePartition):
        select_partition(make_task("x"), _local(engine, store))


def _router(engine, store, *, primary_slots=2, cap=None):
    descs = [
        BackendDescriptor(id="prim", kind=BackendKind.LOCAL, site="a", slots=primary_slots),
        BackendDescriptor(
            id="batch", kind=BackendKind.BATCH_CLUSTER, site="b", partitions=(PartitionSpec("cpu", "b", 4),)
        ),
        BackendDescriptor(
            id="router", kind=BackendKind.OVERFLOW_ROUTER, site="a", primary="prim", secondary="batch", offload_cap=cap
        ),
    ]
    backends = build_backends(descs, engine=engine, store=store)
    router = backends["router"]
    assert isinstance(router, OverflowRouter)
    return router


def test_router_fills_primary_then_offloads_eligible_work():
    engine, store, registry = _world()
    router = _router(engine, store)
    placements = []
    for i in range(4):
        placements.append(router.submit(registry.validate(make_task(f"t{i}"))).placement)
    wide = router.submit(registry.validate(make_task("wide", node_count=2)))
    assert placements == [Placement.PRIMARY, Placement.PRIMARY, Placement.OFFLOADED, Placement.OFFLOADED]
    assert wide.placement is Placement.QUEUED_PRIMARY
    assert wide.backend_id == "prim"
    engine.run_until_idle()
    assert all(j.state is TaskState.COMPLETE for j in router.jobs.values())


def test_offloaded_jobs_use_the_remote_mount():
    engine, store, registry = _world()
    router = _router(engine, store, primary_slots=1)
    router.submit(registry.validate(make_task("t0")))
    job = router.submit(registry.validate(make_task("t1")))
    assert job.placement is Placement.OFFLOADED
    engine.run_until_idle()
    assert job.site == "b"
    assert job.output is not None and job.output.home_site == "a"
    assert store.ledger.bytes_for("mount") > 0
    assert store.replicas(job.output.object_id) == {"a"}


def test_offload_cap_keeps_work_on_primary():
    engine, store, registry = _world()
    router = _router(engine, store, primary_slots=1, cap=1)
    router.submit(registry.validate(make_task("t0")))
    assert router.submit(registry.validate(make_task("t1"))).placement is Placement.OFFLOADED
    assert admit_or_offload(router, make_task("t2")) is Placement.QUEUED_PRIMARY
    engine.run_until_idle()
    assert router.offloaded_active == 0
    assert admit_or_offload(router, make_task("t3")) is Placement.PRIMARY


def test_multi_container_task_is_never_offloaded():
    engine, store, registry = _world()
    router = _router(engine, store, primary_slots=1)
    router.submit(registry.validate(make_task("t0")))
    job = router.submit(registry.validate(make_task("pod", executor_count=3)))
    assert job.placement is Placement.QUEUED_PRIMARY
    records = engine.log.of_kind("placement")
    assert records[-1]["executor_count"] == 3


def test_router_needs_known_backends():
    engine, store, _ = _world()
    desc = BackendDescriptor(id="r", kind=BackendKind.OVERFLOW_ROUTER, site="a", primary="x", secondary="y")
    with pytest.raises(ConfigError):
        build_backends([desc], engine=engine, store=store)
