from __future__ import annotations

import copy
import json

import pytest

from conftest import experiment, scenario
from replay import CorruptLog, read_log, replay_verify, verify_records
from workflow import run_scenario


@pytest.fixture(scope="module")
def federated_records():
    result = run_scenario(scenario(workflow={"mode": "federated"}))
    return list(result.engine.log)


def _renumber(records):
    for i, rec in enumerate(records):
        rec["n"] = i
    records[-1]["records"] = len(records) - 1
    return records


@pytest.mark.parametrize("name", ["default", "failover", "overflow", "gateway", "overlay", "federated-controller"])
def test_shipped_experiments_replay_clean(name):
    result = run_scenario(experiment(name))
    verdict = verify_records(result.engine.log)
    assert verdict.ok, verdict.to_dict()
    assert verdict.records == len(result.engine.log)


def test_replay_from_disk(tmp_path):
    result = run_scenario(scenario(workflow={"mode": "manual"}))
    path = result.engine.log.write(tmp_path / "events.ndjson")
    assert replay_verify(path).ok
    assert [r["kind"] for r in read_log(path)] == [r["kind"] for r in result.engine.log]


def test_second_claim_under_a_live_lease_is_flagged(federated_records):
    records = copy.deepcopy(federated_records)
    claim = next(r for r in records if r["kind"] == "repo" and r["op"] == "claim")
    forged = dict(claim, site="intruder", version=claim["version"] + 1)
    records.insert(claim["n"] + 1, forged)
    # keep versions consecutive after the forged record
    for rec in records[claim["n"] + 2 :]:
        if rec["kind"] == "repo" and rec["batch_id"] == claim["batch_id"]:
            rec["version"] += 1
    verdict = verify_records(_renumber(records))
    assert "lease" in verdict.checks_failed()


def test_double_success_is_flagged(federated_records):
    records = copy.deepcopy(federated_records)
    done = next(r for r in records if r["kind"] == "repo" and r["op"] == "report" and r["tag"] == "SUCCEEDED")
    records.insert(done["n"] + 1, dict(done, version=done["version"] + 1))
    verdict = verify_records(_renumber(records))
    assert "exactly_once" in verdict.checks_failed()


def test_tampered_ledger_is_flagged(federated_records):
    records = copy.deepcopy(federated_records)
    transfer = next(r for r in records if r["kind"] == "transfer")
    transfer["bytes"] += 1
    verdict = verify_records(records)
    assert "ledger" in verdict.checks_failed()


def test_capacity_overrun_is_flagged(federated_records):
    records = copy.deepcopy(federated_records)
    for rec in records:
        if rec["kind"] == "task_state" and rec["slots"] is not None:
            rec["slots"] = 1
    assert "capacity" in verify_records(records).checks_failed()


def test_illegal_transition_is_flagged(federated_records):
    records = copy.deepcopy(federated_records)
    running = next(r for r in records if r["kind"] == "task_state" and r["state"] == "RUNNING")
    running["state"] = "COMPLETE"
    assert "lifecycle" in verify_records(records).checks_failed()


def test_unfinished_task_must_be_reported(federated_records):
    records = copy.deepcopy(federated_records)
    last_done = max(
        (r for r in records if r["kind"] == "task_state" and r["state"] == "COMPLETE"), key=lambda r: r["n"]
    )
    del records[last_done["n"]]
    assert "conservation" in verify_records(_renumber(records)).checks_failed()


def test_offloading_a_wide_task_is_flagged():
    records = list(run_scenario(experiment("overflow")).engine.log)
    offloaded = next(r for r in records if r["kind"] == "placement" and r["placement"] == "offloaded")
    offloaded["node_count"] = 2
    assert "offload" in verify_records(records).checks_failed()


def test_truncated_log_is_corrupt(federated_records):
    with pytest.raises(CorruptLog, match="truncated"):
        verify_records(federated_records[:-1])


def test_trailer_count_mismatch_is_corrupt(federated_records):
    records = copy.deepcopy(federated_records)
    del records[3]
    with pytest.raises(CorruptLog, match="run_end expects"):
        verify_records(records)


def test_empty_and_unparseable_logs_are_corrupt(tmp_path):
    with pytest.raises(CorruptLog):
        verify_records([])
    path = tmp_path / "events.ndjson"
    path.write_text(json.dumps({"n": 0, "at": 0.0, "kind": "put"}) + "\n{not json\n", encoding="utf-8")
    with pytest.raises(CorruptLog, match=":2:"):
        read_log(path)
    with pytest.raises(CorruptLog):
        replay_verify(tmp_path / "missing.ndjson")


@pytest.mark.parametrize(
    "damage",
    [
        lambda r: r.pop("task_id"),
        lambda r: r.update(state="WAITING"),
        lambda r: r.update(n="3"),
        lambda r: r.update(slots="two"),
        lambda r: r.update(task_id=["a", "b"]),
    ],
    ids=["missing-task-id", "unknown-state", "string-index", "string-slots", "list-task-id"],
)
def test_malformed_task_state_record_is_corrupt(federated_records, damage):
    records = copy.deepcopy(federated_records)
    damage(next(r for r in records if r["kind"] == "task_state"))
    with pytest.raises(CorruptLog, match="record"):
        verify_records(records)


def test_malformed_repo_record_is_corrupt(federated_records):
    records = copy.deepcopy(federated_records)
    claim = next(r for r in records if r["kind"] == "repo" and r["op"] == "claim")
    del claim["batch_id"]
    with pytest.raises(CorruptLog, match=f"n={claim['n']}"):
        verify_records(records)


def test_bare_record_before_a_valid_trailer_is_corrupt():
    records = [
        {"n": 0, "at": 0.0, "kind": "task_state"},
        {"n": 1, "at": 0.0, "kind": "run_end", "records": 1},
    ]
    with pytest.raises(CorruptLog, match="n=0"):
        verify_records(records)


def test_ledger_checks_sizes_even_when_the_trailer_agrees(federated_records):
    records = copy.deepcopy(federated_records)
    transfer = next(r for r in records if r["kind"] == "transfer")
    transfer["bytes"] += 1
    records[-1]["bytes_transferred_total"] += 1
    if transfer.get("replica", True):
        records[-1]["replica_bytes"] += 1
    verdict = verify_records(records)
    assert verdict.checks_failed() == {"ledger"}
    assert [v.n for v in verdict.violations] == [transfer["n"]]


def test_copy_from_a_site_that_never_held_the_object_is_flagged(federated_records):
    records = copy.deepcopy(federated_records)
    transfer = next(r for r in records if r["kind"] == "transfer" and r.get("replica", True))
    transfer["src"] = "nowhere"
    verdict = verify_records(records)
    assert verdict.checks_failed() == {"ledger"}
    assert "never held" in verdict.violations[0].message
