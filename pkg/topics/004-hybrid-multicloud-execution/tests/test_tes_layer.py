from __future__ import annotations

import pytest

from conftest import make_engine, make_task
from core import DataRef, MalformedSpec, TaskState
from executors import AlreadyTerminal, BackendDescriptor, BackendKind, LocalBackend
from storage import ObjectStore
from tes_layer import (
    GATEWAY_LOG_PREFIX,
    CostModel,
    Gateway,
    Health,
    NodeUnreachable,
    NoHealthyNode,
    TesNode,
    TesTaskDoc,
    UnknownNode,
    UnknownTask,
    View,
    oracle_best_cost,
)

GB = 10**9


@pytest.fixture
def mesh():
    """Three one-slot nodes a/b/c and a storage-only site s."""
    engine = make_engine({"a": 1, "b": 1, "c": 1, "s": 1}, storage_only=("s",))
    store = ObjectStore(engine, common_site="s")
    nodes = {}
    for site in ("a", "b", "c"):
        backend = LocalBackend(
            BackendDescriptor(id=f"{site}-local", kind=BackendKind.LOCAL, site=site, slots=1), engine=engine, store=store
        )
        nodes[site] = TesNode(site, backend=backend, engine=engine, common_site="s")
    return engine, store, nodes


def _gateway(engine, nodes, gid="gw", **kw):
    gw = Gateway(gid, engine=engine, **kw)
    for site in sorted(nodes):
        gw.register(nodes[site])
    return gw


def _input(store, site, size=GB, tag="x"):
    oid = store.put(site, f"in-{tag}-{site}".encode(), size_bytes=size)
    return DataRef(oid, size, site)


def test_node_create_get_lifecycle(mesh):
    engine, store, nodes = mesh
    node = nodes["a"]
    task_id = node.create_task(make_task("job", duration_s=5.0))
    assert task_id == "a.000001"
    assert node.get_task(task_id, View.MINIMAL).state is TaskState.INITIALIZING
    engine.run_until_idle()
    doc = node.get_task(task_id)
    assert doc.state is TaskState.COMPLETE
    assert doc.name == "job"
    assert [e.event for e in doc.logs] == ["QUEUED", "INITIALIZING", "RUNNING", "COMPLETE"]
    [out] = doc.outputs
    assert out.home_site == "s"
    assert doc.to_dict(View.MINIMAL) == {"id": task_id, "state": "COMPLETE"}


def test_node_cancel_and_unknown(mesh):
    engine, store, nodes = mesh
    node = nodes["b"]
    tid = node.create_task(make_task("job", duration_s=50.0))
    node.cancel_task(tid)
    assert node.get_task(tid).state is TaskState.CANCELED
    with pytest.raises(AlreadyTerminal):
        node.cancel_task(tid)
    with pytest.raises(UnknownTask):
        node.get_task("b.999999")


def test_node_rejects_malformed_json_spec(mesh):
    _, _, nodes = mesh
    with pytest.raises(MalformedSpec):
        nodes["a"].create_task({"id": "x", "command": {"duration_s": 1.0, "digest_key": "k"}, "extra": 1})


def test_down_node_is_unreachable(mesh):
    engine, _, nodes = mesh
    engine.network.mark_down("c")
    with pytest.raises(NodeUnreachable):
        nodes["c"].service_info()


def test_doc_round_trips_through_json(mesh):
    engine, store, nodes = mesh
    tid = nodes["a"].create_task(make_task("job", inputs=(_input(store, "a"),)))
    engine.run_until_idle()
    doc = nodes["a"].get_task(tid)
    assert TesTaskDoc.from_dict(doc.to_dict()) == doc


def test_gateway_routes_to_the_data(mesh):
    engine, store, nodes = mesh
    gw = _gateway(engine, nodes)
    spec = make_task("job", inputs=(_input(store, "b"), _input(store, "c", size=GB // 10)))
    tid = gw.create_task(spec)
    decision = gw.decision_for(tid)
    assert decision.chosen_node == "b"
    assert decision.cost_bytes_remote == GB // 10
    assert dict(decision.alternatives) == {"a": float(GB + GB // 10), "b": float(GB // 10), "c": float(GB)}
    assert decision.cost_bytes_remote == oracle_best_cost(spec, {k: n.sites for k, n in nodes.items()})
    assert gw.owner_of(tid) == "b"
    assert engine.log.of_kind("route")[-1]["chosen_node"] == "b"


def test_ties_break_by_node_id(mesh):
    engine, store, nodes = mesh
    gw = _gateway(engine, nodes)
    tid = gw.create_task(make_task("job", inputs=(_input(store, "s"),)))
    assert gw.owner_of(tid) == "a"


def test_transfer_time_cost_model(mesh):
    engine, store, nodes = mesh
    gw = _gateway(engine, nodes, cost_model=CostModel.TRANSFER_TIME)
    tid = gw.create_task(make_task("job", inputs=(_input(store, "c"),)))
    assert gw.owner_of(tid) == "c"
    assert gw.decision_for(tid).cost_model is CostModel.TRANSFER_TIME


def test_random_cost_model_is_seeded(mesh):
    engine, store, nodes = mesh
    picks = []
    for _ in range(2):
        gw = _gateway(engine, nodes, gid="r", cost_model="random", seed=3)
        picks.append([gw.route(make_task(f"t{i}")).chosen_node for i in range(8)])
    assert picks[0] == picks[1]
    assert set(picks[0]) <= {"a", "b", "c"}


def test_gateway_proxies_status_with_its_own_log_entry(mesh):
    engine, store, nodes = mesh
    gw = _gateway(engine, nodes)
    tid = gw.create_task(make_task("job", duration_s=3.0))
    engine.run_until_idle()
    doc = gw.get_task(tid)
    assert doc.state is TaskState.COMPLETE
    assert doc.logs[-1].event == f"{GATEWAY_LOG_PREFIX}gw"
    assert doc.without_gateway_logs() == nodes[gw.owner_of(tid)].get_task(tid)
    assert [d.id for d in gw.list_tasks()] == [tid]


def test_passive_fallback_skips_a_dead_node(mesh):
    engine, store, nodes = mesh
    gw = _gateway(engine, nodes)
    data = _input(store, "b")
    engine.network.mark_down("b")
    tid = gw.create_task(make_task("job", inputs=(data,)))
    assert gw.owner_of(tid) != "b"
    assert gw.nodes["b"].health is Health.DOWN
    assert [r["health"] for r in engine.log.of_kind("heartbeat")] == ["down"]


def test_missing_heartbeats_take_a_node_out(mesh):
    engine, store, nodes = mesh
    gw = _gateway(engine, nodes, heartbeat_interval_s=5.0)
    engine.run_until(20.0)
    gw.heartbeat("a")
    gw.heartbeat("c")
    assert [e.node_id for e in gw.healthy()] == ["a", "c"]
    with pytest.raises(UnknownNode):
        gw.heartbeat("zz")


def test_heartbeat_sweep_restores_health(mesh):
    engine, store, nodes = mesh
    gw = _gateway(engine, nodes, heartbeat_interval_s=5.0)
    engine.network.mark_down("a")
    engine.run_until(20.0)
    gw.sweep()
    assert [e.node_id for e in gw.healthy()] == ["b", "c"]
    engine.network.mark_up("a")
    engine.run_until(26.0)
    gw.sweep()
    assert [e.node_id for e in gw.healthy()] == ["a", "b", "c"]


def test_no_healthy_node(mesh):
    engine, _, nodes = mesh
    gw = _gateway(engine, nodes)
    for site in nodes:
        engine.network.mark_down(site)
    with pytest.raises(NoHealthyNode):
        gw.create_task(make_task("job"))


def test_status_of_an_unreachable_owner_is_stale(mesh):
    engine, store, nodes = mesh
    gw = _gateway(engine, nodes)
    tid = gw.create_task(make_task("job", inputs=(_input(store, "a"),), duration_s=30.0))
    engine.run_until(1.0)
    engine.network.mark_down("a")
    doc = gw.get_task(tid)
    assert doc.stale
    assert doc.state is not TaskState.COMPLETE


def test_gateway_of_gateways_routes_through_unchanged(mesh):
    engine, store, nodes = mesh
    inner = _gateway(engine, {"b": nodes["b"], "c": nodes["c"]}, gid="inner")
    outer = Gateway("outer", engine=engine)
    outer.register(nodes["a"])
    outer.register(inner)
    assert outer.service_info() == {"id": "outer", "kind": "gateway", "sites": ["a", "b", "c"]}

    tid = outer.create_task(make_task("job", inputs=(_input(store, "c"),), duration_s=4.0))
    assert outer.owner_of(tid) == "inner"
    assert inner.owner_of(tid) == "c"
    engine.run_until_idle()
    doc = outer.get_task(tid)
    assert doc.state is TaskState.COMPLETE
    gateway_entries = [e.event for e in doc.logs if e.event.startswith(GATEWAY_LOG_PREFIX)]
    assert gateway_entries[-1] == "gateway:outer"
    assert "gateway:inner" in gateway_entries
    assert doc.without_gateway_logs() == nodes["c"].get_task(tid)


def test_polling_logs_only_state_changes(mesh):
    engine, _, nodes = mesh
    gw = _gateway(engine, nodes)
    tid = gw.create_task(make_task("job", duration_s=3.0))

    def gateway_entries():
        return [e for e in gw.get_task(tid).logs if e.event.startswith(GATEWAY_LOG_PREFIX)]

    for _ in range(5):
        gw.get_task(tid)
    assert len(gateway_entries()) == 1
    engine.run_until_idle()
    for _ in range(5):
        gw.get_task(tid)
    assert len(gateway_entries()) == 2
    engine.network.mark_down(gw.owner_of(tid))
    assert gw.get_task(tid).stale
    assert len(gateway_entries()) == 3


def test_abandoned_task_is_canceled_before_its_node_restarts_work(mesh):
    engine, _, nodes = mesh
    gw = _gateway(engine, nodes)
    running = gw.create_task(make_task("first", duration_s=50.0))
    queued = gw.create_task(make_task("second", duration_s=50.0))
    assert gw.owner_of(running) == gw.owner_of(queued) == "a"
    engine.inject_failure("a", 1.0, 10.0)
    engine.run_until(2.0)
    assert nodes["a"].job(running).state is TaskState.SYSTEM_ERROR
    assert nodes["a"].job(queued).state is TaskState.QUEUED

    gw.abandon(running)
    gw.abandon(queued)
    assert gw.pending_cancels() == sorted([running, queued])
    engine.run_until(11.0)
    assert nodes["a"].job(queued).state is TaskState.CANCELED
    assert gw.pending_cancels() == []
    started = [r for r in engine.log.of_kind("task_state") if r["task_id"] == queued and r["state"] == "INITIALIZING"]
    assert started == []


def test_abandoning_a_reachable_task_cancels_it_at_once(mesh):
    engine, _, nodes = mesh
    gw = _gateway(engine, nodes)
    tid = gw.create_task(make_task("job", duration_s=50.0))
    gw.abandon(tid)
    assert nodes[gw.owner_of(tid)].job(tid).state is TaskState.CANCELED
    assert gw.pending_cancels() == []
    with pytest.raises(UnknownTask):
        gw.abandon("zz.000001")
