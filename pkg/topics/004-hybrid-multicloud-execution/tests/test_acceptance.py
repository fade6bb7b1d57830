"""End-to-end properties over randomized scenarios, checked against brute-force oracles."""
from __future__ import annotations

import math
import random
from collections import defaultdict
from typing import Any

import pytest

from conftest import experiment
from core import TaskState
from replay import verify_records
from scenario import parse_scenario
from tes_layer import oracle_best_cost
from workflow import WorkflowSpec, expected_manifest, map_task, run_scenario

MB = 10**6


def _sites(rng: random.Random, n: int, *, partitions: bool = False) -> list[dict[str, Any]]:
    sites: list[dict[str, Any]] = []
    for i in range(n):
        site: dict[str, Any] = {"id": f"w{i}", "slots": rng.randint(1, 3)}
        if partitions:
            site["partition"] = f"p{i}"
        sites.append(site)
    return sites


def federated_scenario(seed: int) -> dict[str, Any]:
    rng = random.Random(seed)
    n = rng.randint(2, 8)
    sites = _sites(rng, n) + [{"id": "store", "compute": False}]
    failures = []
    for site in sites[:n]:
        if rng.random() < 0.4:
            down = round(rng.uniform(0.0, 120.0), 3)
            failures.append({"site": site["id"], "down_at": down, "up_at": round(down + rng.uniform(5.0, 60.0), 3)})
    return {
        "seed": seed,
        "default_link": {"bandwidth_gbps": 10.0, "latency_s": 0.005},
        "sites": sites,
        "failures": failures,
        "poll_interval_s": 2.0,
        "repo_latency_s": round(rng.uniform(0.01, 0.5), 3),
        "max_retries": 2,
        "workflow": {
            "dataset_id": f"fed{seed}",
            "batch_count": rng.randint(50, 200),
            "batch_size_bytes": rng.randint(1, 50) * MB,
            "output_size_bytes": MB,
            "map_duration_s": round(rng.uniform(3.0, 12.0), 3),
            "gather_duration_s": 1.0,
            "mode": "federated",
            "homes": ["store"],
        },
    }


def equivalence_scenario(seed: int) -> dict[str, Any]:
    rng = random.Random(1000 + seed)
    n = rng.randint(2, 5)
    return {
        "seed": seed,
        "default_link": {"bandwidth_gbps": rng.choice([1.0, 4.0, 10.0]), "latency_s": 0.01},
        "sites": _sites(rng, n) + [{"id": "store", "compute": False}],
        "workflow": {
            "dataset_id": f"eq{seed}",
            "batch_count": rng.randint(10, 40),
            "batch_size_bytes": rng.randint(1, 200) * MB,
            "output_size_bytes": rng.randint(1, 5) * MB,
            "map_duration_s": round(rng.uniform(2.0, 20.0), 3),
            "gather_duration_s": 2.0,
        },
    }


@pytest.mark.parametrize("seed", range(100))
def test_leases_are_mutually_exclusive(seed):
    result = run_scenario(parse_scenario(federated_scenario(seed)))
    verdict = verify_records(result.engine.log)
    assert not {"lease", "exactly_once", "repository"} & verdict.checks_failed(), verdict.to_dict()
    assert verdict.ok, verdict.to_dict()
    succeeded = [r for r in result.engine.log.of_kind("repo") if r["op"] == "report" and r["tag"] == "SUCCEEDED"]
    assert len({r["batch_id"] for r in succeeded}) == len(succeeded)


def test_failover_reclaims_with_two_attempts():
    config = experiment("failover")
    result = run_scenario(config)
    assert result.report.succeeded
    log = result.engine.log
    finished_by_s2 = {
        r["batch_id"] for r in log.of_kind("repo") if r["op"] == "report" and r["site"] == "s2" and r["tag"] == "SUCCEEDED"
    }
    orphaned = {r["batch_id"] for r in log.of_kind("repo") if r["op"] == "claim" and r["site"] == "s2"} - finished_by_s2
    assert orphaned
    assert result.ctx.repo is not None
    for batch_id in sorted(orphaned):
        rec = result.ctx.repo.get(batch_id)
        assert (rec.attempts, rec.tag.value) == (2, "SUCCEEDED")
    baseline = run_scenario(config.model_copy(update={"failures": []})).report
    assert result.report.final_manifest.to_dict() == baseline.final_manifest.to_dict()


@pytest.mark.parametrize("seed", range(20))
def test_modes_agree_with_the_sequential_baseline(seed):
    data = equivalence_scenario(seed)
    baseline = expected_manifest(WorkflowSpec.from_config(parse_scenario(data)))
    for mode in ("manual", "federated", "gateway"):
        data["workflow"]["mode"] = mode
        report = run_scenario(parse_scenario(data)).report
        assert report.succeeded, (mode, report.to_dict())
        assert report.final_manifest.to_dict() == baseline.to_dict(), mode


@pytest.mark.parametrize("seed", range(10))
def test_gateway_routing_is_optimal_and_beats_random(seed):
    rng = random.Random(2000 + seed)
    data = equivalence_scenario(seed)
    compute = [s["id"] for s in data["sites"] if s.get("compute", True)]
    data["workflow"].update(mode="gateway", homes=[rng.choice(compute) for _ in range(6)])
    result = run_scenario(parse_scenario(data))
    assert result.report.succeeded
    gateway = result.ctx.gateway
    assert gateway is not None

    specs = {map_task(result.ctx.spec, b).id: map_task(result.ctx.spec, b) for b in result.ctx.batches}
    checked = 0
    for decision in gateway.decisions:
        spec = specs.get(decision.name.split(".r")[0])
        if spec is None:
            continue
        healthy = {node: gateway.nodes[node].sites for node, _ in decision.alternatives}
        assert decision.cost_bytes_remote <= oracle_best_cost(spec, healthy)
        checked += 1
    assert checked >= len(specs)

    data["cost_model"] = "random"
    randomly = run_scenario(parse_scenario(data))
    assert result.world.store.ledger.bytes_for("input") <= randomly.world.store.ledger.bytes_for("input")


def test_overflow_respects_primary_capacity_and_eligibility():
    result = run_scenario(experiment("overflow"))
    log = result.engine.log
    assert verify_records(log).ok

    running: set[str] = set()
    peak = 0
    for rec in log.of_kind("task_state"):
        if rec["backend"] != "orchestrator":
            continue
        if TaskState(rec["state"]).holds_slot:
            running.add(rec["task_id"])
        else:
            running.discard(rec["task_id"])
        peak = max(peak, len(running))
    assert peak <= 2

    placements = log.of_kind("placement")
    offloaded = [p for p in placements if p["placement"] == "offloaded"]
    assert offloaded
    assert all(p["node_count"] == 1 and p["executor_count"] == 1 for p in offloaded)

    wide = {p["task_id"] for p in placements if p["node_count"] > 1}
    assert len(wide) == 4
    on_primary = {
        r["task_id"] for r in log.of_kind("task_state") if r["backend"] == "orchestrator" and r["state"] == "RUNNING"
    }
    assert wide <= on_primary | set(result.report.starved)


@pytest.mark.parametrize("seed", range(10))
def test_cluster_capacity_and_partition_pinning(seed):
    rng = random.Random(3000 + seed)
    n = rng.randint(2, 4)
    sites = _sites(rng, n, partitions=True) + [{"id": "nfs", "compute": False}]
    batch_count = rng.randint(10, 40)
    hints = {str(i): f"p{rng.randrange(n)}" for i in range(batch_count) if rng.random() < 0.5}
    data = {
        "seed": seed,
        "common_site": "nfs",
        "default_link": {"bandwidth_gbps": 8.0, "latency_s": 0.01},
        "sites": sites,
        "workflow": {
            "dataset_id": f"ov{seed}",
            "batch_count": batch_count,
            "batch_size_bytes": rng.randint(1, 100) * MB,
            "map_duration_s": round(rng.uniform(2.0, 15.0), 3),
            "gather_duration_s": 1.0,
            "mode": "overlay",
            "partition_hints": hints,
            "pin_to_home": rng.random() < 0.5,
        },
    }
    result = run_scenario(parse_scenario(data))
    assert result.report.succeeded
    verdict = verify_records(result.engine.log)
    assert verdict.ok, verdict.to_dict()

    holding: dict[str, set[str]] = defaultdict(set)
    slots = {f"p{i}": s["slots"] for i, s in enumerate(sites[:n])}
    hinted = 0
    for rec in result.engine.log.of_kind("task_state"):
        if rec["backend"] != "overlay" or rec["partition"] is None:
            continue
        if rec["hint"] is not None:
            assert rec["partition"] == rec["hint"]
            hinted += 1
        if TaskState(rec["state"]).holds_slot:
            holding[rec["partition"]].add(rec["task_id"])
        else:
            holding[rec["partition"]].discard(rec["task_id"])
        assert len(holding[rec["partition"]]) <= slots[rec["partition"]]
    assert hinted >= len(hints)


@pytest.mark.parametrize("name", ["default", "failover", "overflow", "gateway", "overlay", "federated-controller"])
def test_runs_are_bit_identical(name):
    config = experiment(name)
    first, second = run_scenario(config), run_scenario(config)
    assert first.engine.log.to_ndjson() == second.engine.log.to_ndjson()
    assert first.report.metrics_digest() == second.report.metrics_digest()
    assert verify_records(first.engine.log).ok


@pytest.mark.parametrize("seed", range(20))
def test_repository_mutations_per_batch_are_bounded(seed):
    data = federated_scenario(seed)
    if seed % 2:
        data["workflow"]["mode"] = "federated-controller"
    report = run_scenario(parse_scenario(data)).report
    bound = (data["max_retries"] + 1) * 3 + 1
    assert len(report.repo_mutations) == data["workflow"]["batch_count"]
    assert max(report.repo_mutations.values()) <= bound, report.repo_mutations


@pytest.mark.parametrize("seed", range(10))
def test_makespan_never_beats_the_slot_bound(seed):
    data = equivalence_scenario(seed)
    wf = data["workflow"]
    slots = sum(s["slots"] for s in data["sites"] if s.get("compute", True))
    floor = math.ceil(wf["batch_count"] / slots) * wf["map_duration_s"] + wf["gather_duration_s"]
    for mode in ("manual", "federated", "overlay", "gateway"):
        data["workflow"]["mode"] = mode
        report = run_scenario(parse_scenario(data)).report
        assert report.succeeded, (mode, report.to_dict())
        assert report.makespan_s >= floor - 1e-9, (mode, report.makespan_s, floor)
