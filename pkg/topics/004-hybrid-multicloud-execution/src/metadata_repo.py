#!/usr/bin/env python3
"""Lightweight central metadata repository for federated execution.

Sites never talk to each other; they only tag batches here. Every mutation is
a compare-and-set on the record's version, and a claim is a time-bounded
lease. Tag lifecycle:

    UNPROCESSED -> CLAIMED -> PROCESSING -> SUCCEEDED | FAILED
         ^            |            |
         +-- lease expiry / release (while attempts <= max_retries)

The repository is a single serialization point; callers in live mode hold a
lock around it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Callable, Protocol

from core import DataRef, HybridMeshError, MalformedSpec, SiteId
from simnet import Engine, EventKind

log = logging.getLogger(__name__)

DEFAULT_MAX_RETRIES = 2


class DuplicateBatch(HybridMeshError):
    http_status = 409


class UnknownBatch(HybridMeshError):
    http_status = 404


class NotClaimant(HybridMeshError):
    http_status = 403


class IllegalTag(HybridMeshError):
    http_status = 400


class LeaseExpired(HybridMeshError):
    http_status = 409


class Conflict(HybridMeshError):
    http_status = 409

    def __init__(self, message: str, current: BatchRecord) -> None:
        super().__init__(message)
        self.current = current


class BatchTag(str, Enum):
    UNPROCESSED = "UNPROCESSED"
    CLAIMED = "CLAIMED"
    PROCESSING = "PROCESSING"
    SUCCEEDED = "SUCCEEDED"
    FAILED = "FAILED"

    @property
    def is_terminal(self) -> bool:
        return self in (BatchTag.SUCCEEDED, BatchTag.FAILED)

    @property
    def is_held(self) -> bool:
        return self in (BatchTag.CLAIMED, BatchTag.PROCESSING)


@dataclass(frozen=True)
class Lease:
    claimant: SiteId
    granted_at: float
    duration_s: float

    @property
    def expiry(self) -> float:
        return self.granted_at + self.duration_s


@dataclass(frozen=True)
class BatchRecord:
    batch_id: str
    input: DataRef
    tag: BatchTag = BatchTag.UNPROCESSED
    version: int = 1
    claimant: SiteId | None = None
    lease: Lease | None = None
    attempts: int = 0
    output: str | None = None

    @property
    def lease_expiry(self) -> float | None:
        return self.lease.expiry if self.lease else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "batch_id": self.batch_id,
            "input": self.input.to_dict(),
            "tag": self.tag.value,
            "version": self.version,
            "claimant": self.claimant,
            "lease_expiry": self.lease_expiry,
            "attempts": self.attempts,
            "output": self.output,
        }


class Clock(Protocol):
    @property
    def now(self) -> float: ...


Journal = Callable[..., Any]


def _no_journal(kind: str, **payload: Any) -> None:
    return None


class MetadataRepository:
    def __init__(
        self,
        clock: Clock,
        *,
        max_retries: int = DEFAULT_MAX_RETRIES,
        journal: Journal | None = None,
        on_lease: Callable[[BatchRecord], None] | None = None,
    ) -> None:
        self.clock = clock
        self.max_retries = max(0, int(max_retries))
        self._journal = journal or _no_journal
        self._on_lease = on_lease
        self._records: dict[str, BatchRecord] = {}
        self._mutations: dict[str, int] = {}

    def _commit(self, op: str, rec: BatchRecord, *, site: SiteId | None = None) -> BatchRecord:
        self._records[rec.batch_id] = rec
        self._mutations[rec.batch_id] = self._mutations.get(rec.batch_id, 0) + 1
        self._journal(
            "repo",
            op=op,
            batch_id=rec.batch_id,
            site=site if site is not None else rec.claimant,
            tag=rec.tag.value,
            version=rec.version,
            attempts=rec.attempts,
            lease_expiry=rec.lease_expiry,
            output=rec.output,
        )
        if rec.lease is not None and self._on_lease is not None:
            self._on_lease(rec)
        return rec

    def get(self, batch_id: str) -> BatchRecord:
        try:
            return self._records[batch_id]
        except KeyError as e:
            raise UnknownBatch(f"unknown batch: {batch_id}") from e

    def register_batch(self, batch_id: str, input: DataRef) -> BatchRecord:
        if not batch_id:
            raise MalformedSpec("batch_id must be non-empty")
        if batch_id in self._records:
            raise DuplicateBatch(f"batch already registered: {batch_id}")
        return self._commit("register", BatchRecord(batch_id=batch_id, input=input))

    def claim(self, batch_id: str, site: SiteId, expected_version: int, lease_s: float) -> BatchRecord:
        if not lease_s > 0:
            raise MalformedSpec(f"lease_s must be > 0, got {lease_s!r}")
        rec = self.get(batch_id)
        if rec.tag is not BatchTag.UNPROCESSED:
            raise Conflict(f"{batch_id} is {rec.tag.value}, not claimable", rec)
        if rec.version != expected_version:
            raise Conflict(f"{batch_id} is at version {rec.version}, expected {expected_version}", rec)
        now = self.clock.now
        claimed = replace(
            rec,
            tag=BatchTag.CLAIMED,
            version=rec.version + 1,
            claimant=site,
            lease=Lease(claimant=site, granted_at=now, duration_s=float(lease_s)),
            attempts=rec.attempts + 1,
        )
        return self._commit("claim", claimed)

    def _check_claimant(self, rec: BatchRecord, site: SiteId) -> None:
        if not rec.tag.is_held or rec.claimant != site:
            raise NotClaimant(f"{site} does not hold {rec.batch_id} (tag {rec.tag.value}, claimant {rec.claimant})")
        expiry = rec.lease_expiry
        if expiry is not None and self.clock.now >= expiry:
            raise LeaseExpired(f"lease on {rec.batch_id} held by {site} expired at t={expiry}")

    def report(
        self,
        batch_id: str,
        site: SiteId,
        new_tag: BatchTag | str,
        output: str | None = None,
    ) -> BatchRecord:
        rec = self.get(batch_id)
        try:
            tag = BatchTag(new_tag)
        except ValueError as e:
            raise IllegalTag(f"unknown tag {new_tag!r}") from e
        self._check_claimant(rec, site)

        if tag is BatchTag.PROCESSING:
            if rec.tag is not BatchTag.CLAIMED:
                raise IllegalTag(f"{batch_id}: {rec.tag.value} -> PROCESSING")
            assert rec.lease is not None
            refreshed = Lease(claimant=site, granted_at=self.clock.now, duration_s=rec.lease.duration_s)
            return self._commit("report", replace(rec, tag=tag, version=rec.version + 1, lease=refreshed))

        if tag in (BatchTag.SUCCEEDED, BatchTag.FAILED):
            if rec.tag is not BatchTag.PROCESSING:
                raise IllegalTag(f"{batch_id}: {rec.tag.value} -> {tag.value}")
            if tag is BatchTag.SUCCEEDED and not output:
                raise IllegalTag(f"{batch_id}: SUCCEEDED requires an output object")
            done = replace(
                rec,
                tag=tag,
                version=rec.version + 1,
                claimant=None,
                lease=None,
                output=output if tag is BatchTag.SUCCEEDED else None,
            )
            return self._commit("report", done, site=site)

        raise IllegalTag(f"{batch_id}: cannot report {tag.value}")

    def _requeue(self, rec: BatchRecord, op: str, site: SiteId | None) -> BatchRecord:
        if rec.attempts <= self.max_retries:
            nxt = replace(rec, tag=BatchTag.UNPROCESSED, version=rec.version + 1, claimant=None, lease=None)
        else:
            nxt = replace(rec, tag=BatchTag.FAILED, version=rec.version + 1, claimant=None, lease=None)
        return self._commit(op, nxt, site=site)

    def release(self, batch_id: str, site: SiteId) -> BatchRecord:
        """Claimant gives the batch back after a system error on a live site."""
        rec = self.get(batch_id)
        self._check_claimant(rec, site)
        return self._requeue(rec, "release", site)

    def expire_leases(self, now: float | None = None) -> list[str]:
        t = self.clock.now if now is None else now
        reset: list[str] = []
        for batch_id in sorted(self._records):
            rec = self._records[batch_id]
            expiry = rec.lease_expiry
            if not rec.tag.is_held or expiry is None or expiry > t:
                continue
            nxt = self._requeue(rec, "expire", rec.claimant)
            if nxt.tag is BatchTag.UNPROCESSED:
                reset.append(batch_id)
            else:
                log.info("batch %s failed after %d attempts", batch_id, rec.attempts)
        return reset

    def list_batches(self, tag: BatchTag | str | None = None) -> list[BatchRecord]:
        try:
            wanted = BatchTag(tag) if tag is not None else None
        except ValueError as e:
            raise IllegalTag(f"unknown tag {tag!r}") from e
        return [self._records[k] for k in sorted(self._records) if wanted is None or self._records[k].tag is wanted]

    def counts(self) -> dict[str, int]:
        out = {t.value: 0 for t in BatchTag}
        for rec in self._records.values():
            out[rec.tag.value] += 1
        return out

    def mutations(self, batch_id: str) -> int:
        return self._mutations.get(batch_id, 0)

    def all_terminal(self) -> bool:
        return all(rec.tag.is_terminal for rec in self._records.values())

    def __len__(self) -> int:
        return len(self._records)


def engine_repository(engine: Engine, *, max_retries: int = DEFAULT_MAX_RETRIES) -> MetadataRepository:
    """Repository on a simnet engine: journal into its log, expire leases via LEASE_EXPIRED events."""

    def on_lease(rec: BatchRecord) -> None:
        if rec.lease_expiry is not None:
            engine.at(
                rec.lease_expiry,
                EventKind.LEASE_EXPIRED,
                {"batch_id": rec.batch_id, "version": rec.version},
                action=lambda _e: repo.expire_leases(),
            )

    repo = MetadataRepository(engine.clock, max_retries=max_retries, journal=engine.record, on_lease=on_lease)
    return repo
