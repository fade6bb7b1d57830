#!/usr/bin/env python3
"""Re-check a run's invariants purely from its NDJSON event log."""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from core import HybridMeshError, IllegalTransition, TaskState, advance_state
from metadata_repo import BatchTag

log = logging.getLogger(__name__)


class CorruptLog(HybridMeshError):
    pass


@dataclass(frozen=True)
class Violation:
    check: str
    n: int | None
    message: str

    def to_dict(self) -> dict[str, Any]:
        return {"check": self.check, "n": self.n, "message": self.message}


@dataclass
class Verdict:
    records: int
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def checks_failed(self) -> set[str]:
        return {v.check for v in self.violations}

    def to_dict(self) -> dict[str, Any]:
        return {"ok": self.ok, "records": self.records, "violations": [v.to_dict() for v in self.violations]}


def read_log(path: str | Path) -> list[dict[str, Any]]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise CorruptLog(f"cannot read event log {p}: {e}") from e
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorruptLog(f"{p}:{lineno}: not JSON ({e.msg})") from e
        if not isinstance(rec, dict) or not {"n", "at", "kind"} <= rec.keys():
            raise CorruptLog(f"{p}:{lineno}: record lacks n/at/kind")
        records.append(rec)
    return records


_REQUIRED: dict[str, tuple[str, ...]] = {
    "task_state": ("task_id", "state", "event"),
    "repo": ("batch_id", "op", "tag", "version"),
    "transfer": ("object_id", "src", "dst", "bytes"),
    "put": ("object_id", "site", "bytes"),
    "placement": ("task_id", "placement"),
}
_TRAILER_LISTS = ("starved", "abandoned", "failed_batches", "manifest")
_STATES = frozenset(s.value for s in TaskState)
_ID_KEYS = ("task_id", "batch_id", "object_id", "src", "dst", "site", "state", "event", "op", "tag")


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def check_shape(records: list[dict[str, Any]]) -> None:
    """Raise CorruptLog at the first record the checks could not read."""
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise CorruptLog(f"record {i} is not an object")
        n = rec.get("n")
        if not _is_int(n):
            raise CorruptLog(f"record {i}: n must be an integer, got {n!r}")
        where = f"record n={n}"
        at = rec.get("at")
        if not isinstance(at, (int, float)) or isinstance(at, bool):
            raise CorruptLog(f"{where}: at must be a number, got {at!r}")
        kind = rec.get("kind")
        missing = [k for k in _REQUIRED.get(str(kind), ()) if k not in rec]
        if missing:
            raise CorruptLog(f"{where}: {kind} record lacks {missing}")
        for key in _ID_KEYS:
            if key in rec and rec[key] is not None and not isinstance(rec[key], str):
                raise CorruptLog(f"{where}: {key} must be a string, got {rec[key]!r}")
        for key in ("lease_expiry", "slots"):
            value = rec.get(key)
            if value is not None and (not isinstance(value, (int, float)) or isinstance(value, bool)):
                raise CorruptLog(f"{where}: {key} must be a number or null, got {value!r}")
        if kind == "task_state" and rec["state"] not in _STATES:
            raise CorruptLog(f"{where}: unknown task state {rec['state']!r}")
        if kind == "repo" and not _is_int(rec["version"]):
            raise CorruptLog(f"{where}: repo version must be an integer")
        if kind in ("transfer", "put") and not (_is_int(rec["bytes"]) and rec["bytes"] >= 0):
            raise CorruptLog(f"{where}: {kind} bytes must be a non-negative integer")
        if kind == "run_end":
            for key in _TRAILER_LISTS:
                if key in rec and not isinstance(rec[key], list):
                    raise CorruptLog(f"{where}: run_end {key} must be a list")


class _Checker:
    def __init__(self, records: list[dict[str, Any]]) -> None:
        self.records = records
        self.violations: list[Violation] = []

    def flag(self, check: str, rec: dict[str, Any] | None, message: str) -> None:
        self.violations.append(Violation(check=check, n=rec.get("n") if rec else None, message=message))

    def sequence(self) -> None:
        prev_at = float("-inf")
        for i, rec in enumerate(self.records):
            if rec["n"] != i:
                self.flag("sequence", rec, f"record index {rec['n']} at position {i}")
            if rec["at"] < prev_at:
                self.flag("clock", rec, f"time went back from {prev_at} to {rec['at']}")
            prev_at = max(prev_at, rec["at"])

    def lifecycle_and_capacity(self, trailer: dict[str, Any]) -> None:
        state: dict[str, TaskState] = {}
        holding: dict[tuple[str, str], set[str]] = defaultdict(set)
        slot_of: dict[str, tuple[str, str]] = {}
        for rec in self.records:
            if rec["kind"] != "task_state":
                continue
            task_id = rec["task_id"]
            new = TaskState(rec["state"])
            if rec["event"] == "submit":
                if task_id in state:
                    self.flag("lifecycle", rec, f"{task_id} submitted twice")
                if new is not TaskState.QUEUED:
                    self.flag("lifecycle", rec, f"{task_id} submitted in state {new.value}")
                state[task_id] = new
                continue
            prev = state.get(task_id)
            if prev is None:
                self.flag("lifecycle", rec, f"{task_id} changes state before submission")
                state[task_id] = new
                continue
            try:
                expected = advance_state(prev, rec["event"])
            except IllegalTransition as e:
                self.flag("lifecycle", rec, f"{task_id}: {e}")
                expected = new
            if expected is not new:
                self.flag(
                    "lifecycle", rec, f"{task_id}: {prev.value} --{rec['event']}--> {new.value}, expected {expected.value}"
                )
            state[task_id] = new

            hint = rec.get("hint")
            if hint is not None and rec.get("partition") is not None and rec["partition"] != hint:
                self.flag("pinning", rec, f"{task_id} hinted {hint} ran in {rec['partition']}")

            key = (rec.get("backend") or "", rec.get("partition") or "")
            if new.holds_slot and task_id not in slot_of:
                slot_of[task_id] = key
                holding[key].add(task_id)
                slots = rec.get("slots")
                if slots is not None and len(holding[key]) > slots:
                    self.flag("capacity", rec, f"{key[0]}/{key[1]} holds {len(holding[key])} tasks, {slots} slots")
            elif not new.holds_slot and task_id in slot_of:
                holding[slot_of.pop(task_id)].discard(task_id)

        excused = set(trailer.get("starved") or []) | set(trailer.get("abandoned") or [])
        for task_id in sorted(state):
            if not state[task_id].is_terminal and task_id not in excused:
                self.flag("conservation", None, f"{task_id} ended {state[task_id].value} and is not reported starved")

    def repository(self) -> None:
        versions: dict[str, int] = {}
        tags: dict[str, str] = {}
        expiry: dict[str, float | None] = {}
        holder: dict[str, str | None] = {}
        succeeded: dict[str, int] = defaultdict(int)
        for rec in self.records:
            if rec["kind"] != "repo":
                continue
            batch_id = rec["batch_id"]
            op = rec["op"]
            if op == "register":
                if batch_id in versions:
                    self.flag("repository", rec, f"{batch_id} registered twice")
            elif batch_id not in versions:
                self.flag("repository", rec, f"{batch_id} mutated before registration")
            elif rec["version"] != versions[batch_id] + 1:
                self.flag("repository", rec, f"{batch_id} version {rec['version']} after {versions[batch_id]}")

            if op == "claim":
                live = (
                    tags.get(batch_id) in (BatchTag.CLAIMED.value, BatchTag.PROCESSING.value)
                    and expiry.get(batch_id) is not None
                    and rec["at"] < (expiry[batch_id] or 0.0)
                )
                if live:
                    self.flag(
                        "lease",
                        rec,
                        f"{batch_id} claimed by {rec.get('site')} while {holder.get(batch_id)} holds an unexpired lease",
                    )
            if op == "report" and rec["tag"] == BatchTag.SUCCEEDED.value:
                succeeded[batch_id] += 1
                if succeeded[batch_id] > 1:
                    self.flag("exactly_once", rec, f"{batch_id} reported SUCCEEDED {succeeded[batch_id]} times")
                if not rec.get("output"):
                    self.flag("exactly_once", rec, f"{batch_id} SUCCEEDED without an output")

            versions[batch_id] = rec["version"]
            tags[batch_id] = rec["tag"]
            expiry[batch_id] = rec.get("lease_expiry")
            if op == "claim":
                holder[batch_id] = rec.get("site")

    def ledger(self, trailer: dict[str, Any]) -> None:
        sizes: dict[str, int] = {}
        holders: dict[str, set[str]] = defaultdict(set)
        total = replica = 0
        for rec in self.records:
            oid = rec.get("object_id")
            if rec["kind"] == "put":
                sizes.setdefault(oid, rec["bytes"])
                holders[oid].add(rec["site"])
                continue
            if rec["kind"] != "transfer":
                continue
            size = sizes.get(oid)
            if size is not None and rec["bytes"] != size:
                self.flag("ledger", rec, f"transfer of {str(oid)[:12]} moved {rec['bytes']} bytes, object has {size}")
            total += rec["bytes"]
            if rec.get("replica", True):
                replica += rec["bytes"]
                if rec["src"] not in holders[oid]:
                    self.flag("ledger", rec, f"{str(oid)[:12]} copied from {rec['src']}, which never held it")
                holders[oid].add(rec["dst"])
        if "bytes_transferred_total" in trailer and total != trailer["bytes_transferred_total"]:
            self.flag("ledger", trailer, f"transfer records sum to {total}, run reported {trailer['bytes_transferred_total']}")
        if "replica_bytes" in trailer and replica != trailer["replica_bytes"]:
            self.flag("ledger", trailer, f"replica transfers sum to {replica}, run reported {trailer['replica_bytes']}")

    def placement(self) -> None:
        for rec in self.records:
            if rec["kind"] != "placement" or rec.get("placement") != "offloaded":
                continue
            if rec.get("node_count") != 1 or rec.get("executor_count") != 1:
                self.flag(
                    "offload",
                    rec,
                    f"{rec.get('task_id')} offloaded with node_count={rec.get('node_count')} "
                    f"executor_count={rec.get('executor_count')}",
                )

    def manifest(self, trailer: dict[str, Any]) -> None:
        objects = trailer.get("manifest") or []
        if len(objects) != len(set(objects)):
            self.flag("exactly_once", trailer, "manifest lists an object twice")
        batch_count = trailer.get("batch_count")
        if batch_count is not None and len(objects) > batch_count:
            self.flag("exactly_once", trailer, f"{len(objects)} outputs for {batch_count} batches")


def verify_records(records: Iterable[dict[str, Any]]) -> Verdict:
    recs = list(records)
    if not recs:
        raise CorruptLog("event log is empty")
    check_shape(recs)
    trailer = recs[-1]
    if trailer.get("kind") != "run_end":
        raise CorruptLog(f"event log is truncated: last record is {trailer.get('kind')!r}, not run_end")
    if trailer.get("records") != len(recs) - 1:
        raise CorruptLog(f"run_end expects {trailer.get('records')} records before it, found {len(recs) - 1}")
    checker = _Checker(recs)
    checker.sequence()
    checker.lifecycle_and_capacity(trailer)
    checker.repository()
    checker.ledger(trailer)
    checker.placement()
    checker.manifest(trailer)
    verdict = Verdict(records=len(recs), violations=checker.violations)
    if not verdict.ok:
        log.warning("replay found %d violation(s): %s", len(verdict.violations), sorted(verdict.checks_failed()))
    return verdict


def replay_verify(event_log_path: str | Path) -> Verdict:
    return verify_records(read_log(event_log_path))
