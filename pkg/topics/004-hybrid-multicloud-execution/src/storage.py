#!/usr/bin/env python3
"""Content-addressed object storage spread over sites, plus transfer accounting.

One abstraction stands in for every storage flavour the architectures use
(FTP drop, NFS share, S3 bucket, scratch dirs): what differs between them is
where the replicas live, which is all this module tracks. The site hosting the
common store is labelled ``common``; every other store is ``site-local``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable

from core import DIGEST_ALGORITHM, DataRef, HybridMeshError, MalformedSpec, SiteId, content_digest
from simnet import Engine, Event, EventKind

log = logging.getLogger(__name__)


class SiteDown(HybridMeshError):
    http_status = 503


class ObjectNotFound(HybridMeshError):
    http_status = 404


class NoReachableReplica(HybridMeshError):
    http_status = 503


class StoreMode(str, Enum):
    COMMON = "common"
    SITE_LOCAL = "site-local"


@dataclass
class StoredObject:
    object_id: str
    size_bytes: int
    content: bytes
    replicas: set[SiteId] = field(default_factory=set)


@dataclass(frozen=True)
class LedgerEntry:
    src: SiteId
    dst: SiteId
    bytes: int
    at: float
    object_id: str
    purpose: str
    replica: bool = True


class TransferLedger:
    def __init__(self) -> None:
        self.entries: list[LedgerEntry] = []

    def append(self, entry: LedgerEntry) -> None:
        self.entries.append(entry)

    @property
    def total_bytes(self) -> int:
        return sum(e.bytes for e in self.entries)

    @property
    def replica_bytes(self) -> int:
        return sum(e.bytes for e in self.entries if e.replica)

    def bytes_for(self, purpose: str) -> int:
        return sum(e.bytes for e in self.entries if e.purpose == purpose)


@dataclass(frozen=True)
class ManifestEntry:
    object_id: str
    size_bytes: int


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]
    ready_at: float = 0.0
    digest_algorithm: str = DIGEST_ALGORITHM

    @classmethod
    def of(cls, pairs: Iterable[tuple[str, int]], *, ready_at: float = 0.0) -> Manifest:
        entries = sorted({ManifestEntry(oid, int(size)) for oid, size in pairs}, key=lambda e: e.object_id)
        return cls(entries=tuple(entries), ready_at=ready_at)

    def to_dict(self) -> dict[str, Any]:
        return {
            "digest_algorithm": self.digest_algorithm,
            "objects": [{"object_id": e.object_id, "size_bytes": e.size_bytes} for e in self.entries],
        }

    def same_objects(self, other: Manifest) -> bool:
        return self.digest_algorithm == other.digest_algorithm and self.entries == other.entries


class ObjectStore:
    def __init__(self, engine: Engine, *, common_site: SiteId) -> None:
        engine.network.site(common_site)
        self.engine = engine
        self.common_site = common_site
        self.ledger = TransferLedger()
        self._objects: dict[str, StoredObject] = {}
        self._inflight: dict[tuple[str, SiteId], float] = {}

    def mode_of(self, site: SiteId) -> StoreMode:
        return StoreMode.COMMON if site == self.common_site else StoreMode.SITE_LOCAL

    def put(self, site: SiteId, content: bytes, *, size_bytes: int | None = None) -> str:
        if not self.engine.network.is_up(site):
            raise SiteDown(f"cannot store at {site}: site is down")
        object_id = content_digest(content)
        size = len(content) if size_bytes is None else int(size_bytes)
        obj = self._objects.get(object_id)
        if obj is None:
            obj = StoredObject(object_id=object_id, size_bytes=size, content=bytes(content))
            self._objects[object_id] = obj
        elif obj.size_bytes != size:
            raise MalformedSpec(f"object {object_id[:12]} already stored with size {obj.size_bytes}, not {size}")
        if site not in obj.replicas:
            obj.replicas.add(site)
            self.engine.record("put", object_id=object_id, site=site, bytes=size)
        return object_id

    def get(self, object_id: str) -> StoredObject:
        try:
            return self._objects[object_id]
        except KeyError as e:
            raise ObjectNotFound(f"unknown object: {object_id}") from e

    def has(self, object_id: str) -> bool:
        return object_id in self._objects

    def replicas(self, object_id: str) -> frozenset[SiteId]:
        return frozenset(self.get(object_id).replicas)

    def ref(self, object_id: str, home_site: SiteId) -> DataRef:
        return DataRef(object_id=object_id, size_bytes=self.get(object_id).size_bytes, home_site=home_site)

    def reachable(self, object_id: str, to: SiteId) -> bool:
        """True if ``to`` holds or is receiving a replica, or some replica sits on an up site."""
        obj = self.get(object_id)
        if to in obj.replicas or (object_id, to) in self._inflight:
            return True
        return any(self.engine.network.is_up(s) for s in obj.replicas)

    def choose_source(self, object_id: str, to: SiteId) -> SiteId:
        """Replica minimising transfer time to ``to``; ties by SiteId."""
        obj = self.get(object_id)
        network = self.engine.network
        live = [s for s in obj.replicas if network.is_up(s)]
        if not live:
            raise NoReachableReplica(f"object {object_id[:12]}: all replicas {sorted(obj.replicas)} are down")
        return min(live, key=lambda s: (network.transfer_time(obj.size_bytes, s, to), s))

    def fetch(self, object_id: str, to: SiteId, *, purpose: str = "input") -> float:
        """Ensure a replica at ``to``; returns the time it is available there."""
        obj = self.get(object_id)
        now = self.engine.now
        if to in obj.replicas:
            return now
        pending = self._inflight.get((object_id, to))
        if pending is not None:
            return pending
        src = self.choose_source(object_id, to)
        duration = self.engine.transfer_time(obj.size_bytes, src, to)
        ready = now + duration
        self._inflight[(object_id, to)] = ready
        self.ledger.append(
            LedgerEntry(src=src, dst=to, bytes=obj.size_bytes, at=now, object_id=object_id, purpose=purpose)
        )
        self.engine.record(
            "transfer", object_id=object_id, src=src, dst=to, bytes=obj.size_bytes, purpose=purpose, replica=True
        )

        def land(_: Event) -> None:
            obj.replicas.add(to)
            self._inflight.pop((object_id, to), None)

        self.engine.at(ready, EventKind.TRANSFER_DONE, {"object_id": object_id, "dst": to}, action=land)
        return ready

    def charge_mount(self, object_id: str, size_bytes: int, src: SiteId, dst: SiteId) -> float:
        """Remote-mount traffic: ledgered, but creates no replica. Returns the traversal time."""
        if src == dst:
            return 0.0
        self.ledger.append(
            LedgerEntry(
                src=src, dst=dst, bytes=size_bytes, at=self.engine.now, object_id=object_id, purpose="mount", replica=False
            )
        )
        self.engine.record(
            "transfer", object_id=object_id, src=src, dst=dst, bytes=size_bytes, purpose="mount", replica=False
        )
        return self.engine.transfer_time(size_bytes, src, dst)

    def gather(self, object_ids: Iterable[str], common_site: SiteId | None = None) -> Manifest:
        target = common_site or self.common_site
        ids = list(object_ids)
        ready = self.engine.now
        for oid in ids:
            self.get(oid)
        for oid in sorted(set(ids)):
            ready = max(ready, self.fetch(oid, target, purpose="gather"))
        return Manifest.of(((oid, self._objects[oid].size_bytes) for oid in ids), ready_at=ready)

    def corrupted(self) -> list[str]:
        return sorted(oid for oid, obj in self._objects.items() if content_digest(obj.content) != oid)
