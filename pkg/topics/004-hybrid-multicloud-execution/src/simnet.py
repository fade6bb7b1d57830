#!/usr/bin/env python3
"""Deterministic discrete-event simulation of cloud sites and the links between them.

A single-threaded event loop ordered by ``(at, seq)``. Modules register
handlers per event kind or attach an ``action`` to an individual event; both
run while the clock sits at the event's time. Everything observable goes into
the :class:`EventLog`, which doubles as the provenance record.
"""
from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import logging
import math
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator

from core import ConfigError, HybridMeshError, SiteId, UnknownSite

log = logging.getLogger(__name__)

DEFAULT_MAX_EVENTS = 10**7


class PastEvent(HybridMeshError):
    pass


class NonTermination(HybridMeshError):
    pass


class EventKind(str, Enum):
    SUBMIT = "submit"
    TRANSFER_DONE = "transfer_done"
    TASK_DONE = "task_done"
    SITE_DOWN = "site_down"
    SITE_UP = "site_up"
    LEASE_EXPIRED = "lease_expired"
    PREEMPT = "preempt"
    TIMER = "timer"


@dataclass(order=True, frozen=True)
class Event:
    at: float
    seq: int = -1
    kind: EventKind = field(default=EventKind.TIMER, compare=False)
    payload: dict[str, Any] = field(default_factory=dict, compare=False)
    action: Callable[[Event], None] | None = field(default=None, compare=False, repr=False)


@dataclass
class SimClock:
    now: float = 0.0

    def advance_to(self, t: float) -> None:
        if t < self.now:
            raise PastEvent(f"clock cannot move back from {self.now} to {t}")
        self.now = t


@dataclass(frozen=True)
class SiteDescriptor:
    id: SiteId
    slots: int = 1
    partition: str = ""
    preemptible: bool = False
    compute: bool = True
    reliability: tuple[tuple[float, float], ...] = ()

    def __post_init__(self) -> None:
        if not self.id:
            raise ConfigError("site id must be non-empty")
        if not isinstance(self.slots, int) or self.slots < 1:
            raise ConfigError(f"site {self.id}: slots must be >= 1, got {self.slots!r}")
        if not self.partition:
            object.__setattr__(self, "partition", self.id)
        windows = tuple((float(a), float(b)) for a, b in self.reliability)
        check_windows(self.id, windows)
        object.__setattr__(self, "reliability", windows)


def check_windows(site: SiteId, windows: Iterable[tuple[float, float]]) -> None:
    """Down/up windows must be well-formed, ordered and non-overlapping."""
    prev_up = -math.inf
    for down_at, up_at in windows:
        if not (0.0 <= down_at < up_at) or not math.isfinite(up_at):
            raise ConfigError(f"site {site}: bad failure window ({down_at}, {up_at})")
        if down_at < prev_up:
            raise ConfigError(f"site {site}: overlapping failure windows at t={down_at}")
        prev_up = up_at


class LinkMatrix:
    """Bandwidth (Gbps) and latency (s) for every ordered pair of distinct sites.

    The diagonal is local access: zero latency, unbounded bandwidth.
    """

    def __init__(
        self,
        sites: Iterable[SiteId],
        bandwidth_gbps: dict[tuple[SiteId, SiteId], float],
        latency_s: dict[tuple[SiteId, SiteId], float],
    ) -> None:
        self.sites = tuple(sorted(set(sites)))
        self._bandwidth = dict(bandwidth_gbps)
        self._latency = dict(latency_s)
        self._validate()

    @classmethod
    def uniform(cls, sites: Iterable[SiteId], *, bandwidth_gbps: float, latency_s: float = 0.0) -> LinkMatrix:
        ids = sorted(set(sites))
        pairs = [(a, b) for a in ids for b in ids if a != b]
        return cls(ids, {p: bandwidth_gbps for p in pairs}, {p: latency_s for p in pairs})

    def _validate(self) -> None:
        for a in self.sites:
            for b in self.sites:
                if a == b:
                    continue
                if (a, b) not in self._bandwidth or (a, b) not in self._latency:
                    raise ConfigError(f"link matrix missing pair {a} -> {b}")
                bw = self._bandwidth[(a, b)]
                lat = self._latency[(a, b)]
                if not (math.isfinite(bw) and bw > 0):
                    raise ConfigError(f"link {a} -> {b}: bandwidth must be > 0, got {bw!r}")
                if not (math.isfinite(lat) and lat >= 0):
                    raise ConfigError(f"link {a} -> {b}: latency must be >= 0, got {lat!r}")

    def _require(self, site: SiteId) -> None:
        if site not in self.sites:
            raise UnknownSite(f"unknown site: {site!r}")

    def bandwidth(self, a: SiteId, b: SiteId) -> float:
        self._require(a)
        self._require(b)
        return math.inf if a == b else self._bandwidth[(a, b)]

    def latency(self, a: SiteId, b: SiteId) -> float:
        self._require(a)
        self._require(b)
        return 0.0 if a == b else self._latency[(a, b)]

    def transfer_time(self, size_bytes: int, src: SiteId, dst: SiteId) -> float:
        self._require(src)
        self._require(dst)
        if src == dst:
            return 0.0
        bytes_per_s = self._bandwidth[(src, dst)] * 1e9 / 8
        return self._latency[(src, dst)] + size_bytes / bytes_per_s

    def to_dict(self) -> dict[str, Any]:
        return {
            "sites": list(self.sites),
            "bandwidth_gbps": {f"{a}->{b}": v for (a, b), v in sorted(self._bandwidth.items())},
            "latency_s": {f"{a}->{b}": v for (a, b), v in sorted(self._latency.items())},
        }


class Network:
    """Sites, links and current up/down status."""

    def __init__(self, sites: Iterable[SiteDescriptor], links: LinkMatrix) -> None:
        self._sites = {s.id: s for s in sorted(sites, key=lambda s: s.id)}
        if not self._sites:
            raise ConfigError("scenario needs at least one site")
        missing = sorted(set(self._sites) - set(links.sites))
        if missing:
            raise ConfigError(f"link matrix has no entry for sites {missing}")
        self.links = links
        self._down: set[SiteId] = set()

    @property
    def site_ids(self) -> frozenset[SiteId]:
        return frozenset(self._sites)

    @property
    def compute_sites(self) -> list[SiteDescriptor]:
        return [s for s in self._sites.values() if s.compute]

    def site(self, site_id: SiteId) -> SiteDescriptor:
        try:
            return self._sites[site_id]
        except KeyError as e:
            raise UnknownSite(f"unknown site: {site_id!r}") from e

    def is_up(self, site_id: SiteId) -> bool:
        self.site(site_id)
        return site_id not in self._down

    def mark_down(self, site_id: SiteId) -> None:
        self._down.add(site_id)

    def mark_up(self, site_id: SiteId) -> None:
        self._down.discard(site_id)

    def transfer_time(self, size_bytes: int, src: SiteId, dst: SiteId) -> float:
        self.site(src)
        self.site(dst)
        return self.links.transfer_time(size_bytes, src, dst)


class EventLog:
    """Append-only record list; ``n`` is the record's position."""

    def __init__(self) -> None:
        self._records: list[dict[str, Any]] = []

    def append(self, at: float, kind: str, payload: dict[str, Any] | None = None) -> dict[str, Any]:
        rec: dict[str, Any] = {"n": len(self._records), "at": at, "kind": kind}
        for key, value in (payload or {}).items():
            if key not in rec:
                rec[key] = value
        self._records.append(rec)
        return rec

    def __iter__(self) -> Iterator[dict[str, Any]]:
        return iter(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def __getitem__(self, idx: int) -> dict[str, Any]:
        return self._records[idx]

    def of_kind(self, *kinds: str) -> list[dict[str, Any]]:
        wanted = set(kinds)
        return [r for r in self._records if r["kind"] in wanted]

    def to_ndjson(self) -> str:
        return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in self._records)

    def digest(self) -> str:
        return hashlib.sha256(self.to_ndjson().encode("utf-8")).hexdigest()

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ndjson(), encoding="utf-8")
        return path


EventHandler = Callable[[Event], None]


class Engine:
    def __init__(
        self,
        network: Network,
        *,
        seed: int = 0,
        jitter: float = 0.0,
        max_events: int = DEFAULT_MAX_EVENTS,
    ) -> None:
        self.network = network
        self.clock = SimClock()
        self.log = EventLog()
        self.rng = random.Random(int(seed))
        self.jitter = max(0.0, float(jitter))
        self.max_events = int(max_events)
        self._queue: list[Event] = []
        self._seq = itertools.count()
        self._handlers: dict[EventKind, list[EventHandler]] = {}
        self._windows: dict[SiteId, list[tuple[float, float]]] = {}
        self.processed = 0

    @property
    def now(self) -> float:
        return self.clock.now

    def schedule(self, event: Event) -> Event:
        if event.at < self.clock.now:
            raise PastEvent(f"event {event.kind.value} at t={event.at} is before now={self.clock.now}")
        stamped = replace(event, seq=next(self._seq))
        heapq.heappush(self._queue, stamped)
        return stamped

    def at(
        self,
        t: float,
        kind: EventKind,
        payload: dict[str, Any] | None = None,
        action: Callable[[Event], None] | None = None,
    ) -> Event:
        return self.schedule(Event(at=t, kind=kind, payload=dict(payload or {}), action=action))

    def after(
        self,
        delay: float,
        kind: EventKind,
        payload: dict[str, Any] | None = None,
        action: Callable[[Event], None] | None = None,
    ) -> Event:
        return self.at(self.clock.now + max(0.0, delay), kind, payload, action)

    def on(self, kind: EventKind, handler: EventHandler, *, first: bool = False) -> None:
        """Subscribe to ``kind``; ``first`` handlers run before those already registered."""
        handlers = self._handlers.setdefault(kind, [])
        if first:
            handlers.insert(0, handler)
        else:
            handlers.append(handler)

    def record(self, kind: str, **payload: Any) -> dict[str, Any]:
        return self.log.append(self.clock.now, kind, payload)

    def jittered(self, duration: float) -> float:
        if self.jitter <= 0.0 or duration <= 0.0:
            return duration
        return duration * (1.0 + self.rng.uniform(-self.jitter, self.jitter))

    def transfer_time(self, size_bytes: int, src: SiteId, dst: SiteId) -> float:
        return self.network.transfer_time(size_bytes, src, dst)

    def pending(self) -> int:
        return len(self._queue)

    def _process(self, event: Event) -> None:
        self.processed += 1
        if self.processed > self.max_events:
            raise NonTermination(f"exceeded {self.max_events} events at t={self.clock.now}")
        self.clock.advance_to(event.at)
        if event.kind is EventKind.SITE_DOWN:
            self.network.mark_down(event.payload["site"])
        elif event.kind is EventKind.SITE_UP:
            self.network.mark_up(event.payload["site"])
        self.log.append(event.at, event.kind.value, event.payload)
        if event.action is not None:
            event.action(event)
        for handler in self._handlers.get(event.kind, ()):
            handler(event)

    def run_until_idle(self) -> EventLog:
        while self._queue:
            self._process(heapq.heappop(self._queue))
        return self.log

    def run_until(self, t: float) -> int:
        """Process every event with ``at <= t`` and move the clock to ``t``."""
        n = 0
        while self._queue and self._queue[0].at <= t:
            self._process(heapq.heappop(self._queue))
            n += 1
        if t > self.clock.now:
            self.clock.advance_to(t)
        return n

    def inject_failure(self, site: SiteId, down_at: float, up_at: float) -> None:
        self.network.site(site)
        if down_at < self.clock.now:
            raise PastEvent(f"failure of {site} at t={down_at} is before now={self.clock.now}")
        windows = sorted(self._windows.get(site, []) + [(float(down_at), float(up_at))])
        check_windows(site, windows)
        self._windows[site] = windows
        self.at(down_at, EventKind.SITE_DOWN, {"site": site})
        self.at(up_at, EventKind.SITE_UP, {"site": site})
        log.debug("failure window for %s: [%s, %s)", site, down_at, up_at)

    def inject_preemption(self, site: SiteId, at: float) -> None:
        if not self.network.site(site).preemptible:
            raise ConfigError(f"site {site} is not preemptible")
        self.at(at, EventKind.PREEMPT, {"site": site})
