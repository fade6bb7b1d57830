#!/usr/bin/env python3
"""Scenario files: TOML written by people, JSON echoed back by runs.

Models reject unknown keys. Cross-references (link endpoints, backend sites,
partition hints, failure targets) are resolved after field validation, and
defaults that depend on other fields (common site, lease, controller) are
filled in so the effective config is complete and reloads to the same run.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import sys
from enum import Enum
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core import ConfigError, canonical_json
from executors import BackendDescriptor, BackendKind, PartitionSpec
from metadata_repo import DEFAULT_MAX_RETRIES
from simnet import DEFAULT_MAX_EVENTS, LinkMatrix, SiteDescriptor, check_windows
from tes_layer import CostModel

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ParseError(ConfigError):
    def __init__(self, message: str, *, line: int | None = None) -> None:
        super().__init__(message)
        self.line = line


class WorkflowMode(str, Enum):
    MANUAL = "manual"
    FEDERATED = "federated"
    FEDERATED_CONTROLLER = "federated-controller"
    OVERLAY = "overlay"
    OVERFLOW = "overflow"
    GATEWAY = "gateway"


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class SiteModel(_Model):
    id: str = Field(min_length=1)
    slots: int = Field(default=1, ge=1)
    partition: str | None = None
    preemptible: bool = False
    compute: bool = True
    down: list[tuple[float, float]] = Field(default_factory=list)


class LinkModel(_Model):
    src: str = Field(alias="from")
    dst: str = Field(alias="to")
    bandwidth_gbps: float = Field(gt=0, allow_inf_nan=False)
    latency_s: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    symmetric: bool = True


class DefaultLinkModel(_Model):
    bandwidth_gbps: float = Field(gt=0, allow_inf_nan=False)
    latency_s: float = Field(default=0.0, ge=0, allow_inf_nan=False)


class PartitionModel(_Model):
    name: str = Field(min_length=1)
    site: str
    slots: int = Field(default=1, ge=1)
    max_cpu_cores: int = Field(default=32, ge=1)
    max_ram_gb: float = Field(default=256.0, ge=0)
    max_disk_gb: float = Field(default=10000.0, ge=0)


class BackendModel(_Model):
    id: str = Field(min_length=1)
    kind: BackendKind
    site: str | None = None
    slots: int = Field(default=1, ge=1)
    partitions: list[PartitionModel] = Field(default_factory=list)
    primary: str | None = None
    secondary: str | None = None
    offload_cap: int | None = Field(default=None, ge=0)


class WorkflowModel(_Model):
    dataset_id: str = Field(default="dataset", min_length=1)
    batch_count: int = Field(default=4, ge=1)
    batch_size_bytes: int = Field(default=10**9, ge=0)
    output_size_bytes: int = Field(default=10**6, ge=0)
    map_duration_s: float = Field(default=60.0, ge=0, allow_inf_nan=False)
    gather_duration_s: float = Field(default=10.0, ge=0, allow_inf_nan=False)
    mode: WorkflowMode = WorkflowMode.MANUAL
    retry_limit: int = Field(default=2, ge=0)
    poisoned_batches: list[int] = Field(default_factory=list)
    homes: list[str] = Field(default_factory=list)
    multi_node_batches: list[int] = Field(default_factory=list)
    multi_container_batches: list[int] = Field(default_factory=list)
    partition_hints: dict[str, str] = Field(default_factory=dict)
    pin_to_home: bool = False


class FailureModel(_Model):
    site: str
    down_at: float = Field(ge=0, allow_inf_nan=False)
    up_at: float | None = Field(default=None, allow_inf_nan=False)


class PreemptionModel(_Model):
    site: str
    at: float = Field(ge=0, allow_inf_nan=False)


class EndpointModel(_Model):
    node_id: str = Field(min_length=1)
    url: str = Field(min_length=1)
    sites: list[str] = Field(default_factory=list)


class ScenarioConfig(_Model):
    seed: int
    common_site: str | None = None
    gather: bool = True
    cost_model: CostModel = CostModel.BYTES
    lease_s: float | None = Field(default=None, gt=0, allow_inf_nan=False)
    max_retries: int = Field(default=DEFAULT_MAX_RETRIES, ge=0)
    poll_interval_s: float = Field(default=1.0, gt=0, allow_inf_nan=False)
    heartbeat_interval_s: float = Field(default=5.0, gt=0, allow_inf_nan=False)
    heartbeat_timeout_s: float | None = Field(default=None, gt=0, allow_inf_nan=False)
    jitter: float = Field(default=0.0, ge=0, lt=1)
    max_events: int = Field(default=DEFAULT_MAX_EVENTS, ge=1)
    controller_site: str | None = None
    repo_latency_s: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    sites: list[SiteModel] = Field(min_length=1)
    default_link: DefaultLinkModel | None = None
    links: list[LinkModel] = Field(default_factory=list)
    backends: list[BackendModel] = Field(default_factory=list)
    workflow: WorkflowModel = Field(default_factory=WorkflowModel)
    failures: list[FailureModel] = Field(default_factory=list)
    preemptions: list[PreemptionModel] = Field(default_factory=list)
    endpoints: list[EndpointModel] = Field(default_factory=list)

    @model_validator(mode="after")
    def _cross_check(self) -> ScenarioConfig:
        ids = [s.id for s in self.sites]
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate site ids in {sorted(ids)}")
        known = set(ids)

        def need(site: str | None, where: str) -> None:
            if site is not None and site not in known:
                raise ValueError(f"{where} references unknown site {site!r}")

        compute = sorted(s.id for s in self.sites if s.compute)
        if not compute:
            raise ValueError("scenario needs at least one compute site")

        for link in self.links:
            need(link.src, "links.from")
            need(link.dst, "links.to")
            if link.src == link.dst:
                raise ValueError(f"link {link.src} -> {link.dst} must join two different sites")
        self.link_matrix()

        if self.common_site is None:
            storage_only = sorted(s.id for s in self.sites if not s.compute)
            self.common_site = storage_only[0] if storage_only else min(ids)
        need(self.common_site, "common_site")
        if self.controller_site is None:
            self.controller_site = compute[0]
        need(self.controller_site, "controller_site")
        if self.lease_s is None:
            self.lease_s = 3.0 * self.workflow.map_duration_s if self.workflow.map_duration_s > 0 else 1.0

        backend_ids = [b.id for b in self.backends]
        if len(backend_ids) != len(set(backend_ids)):
            raise ValueError("duplicate backend ids")
        by_id = {b.id: b for b in self.backends}
        for b in self.backends:
            for p in b.partitions:
                need(p.site, f"backend {b.id} partition {p.name}")
            if b.kind is BackendKind.OVERFLOW_ROUTER:
                for ref in (b.primary, b.secondary):
                    target = by_id.get(ref or "")
                    if target is None or target.kind is BackendKind.OVERFLOW_ROUTER:
                        raise ValueError(f"router {b.id} references unknown backend {ref!r}")
                if b.site is None:
                    b.site = by_id[b.primary or ""].site or by_id[b.primary or ""].partitions[0].site
            elif b.kind is BackendKind.BATCH_CLUSTER:
                if not b.partitions:
                    raise ValueError(f"batch_cluster {b.id} needs partitions")
                if b.site is None:
                    b.site = b.partitions[0].site
            elif b.site is None:
                raise ValueError(f"backend {b.id} needs a site")
            need(b.site, f"backend {b.id}")

        windows: dict[str, list[tuple[float, float]]] = {s.id: [tuple(w) for w in s.down] for s in self.sites}
        permanent: dict[str, float] = {}
        for f in self.failures:
            need(f.site, "failures")
            if f.up_at is None:
                permanent[f.site] = min(permanent.get(f.site, math.inf), f.down_at)
            else:
                windows[f.site].append((f.down_at, f.up_at))
        for site, ws in windows.items():
            try:
                check_windows(site, sorted(ws))
            except ConfigError as e:
                raise ValueError(str(e)) from e
            if site in permanent and any(b > permanent[site] for _, b in ws):
                raise ValueError(f"site {site}: failure window overlaps a permanent failure")
        site_by_id = {s.id: s for s in self.sites}
        for p in self.preemptions:
            need(p.site, "preemptions")
            if not site_by_id[p.site].preemptible:
                raise ValueError(f"preemption targets non-preemptible site {p.site}")

        wf = self.workflow
        for name in ("poisoned_batches", "multi_node_batches", "multi_container_batches"):
            for idx in getattr(wf, name):
                if not 0 <= idx < wf.batch_count:
                    raise ValueError(f"workflow.{name}: batch index {idx} out of range")
        for home in wf.homes:
            need(home, "workflow.homes")
        partitions = {p.name for b in self.backends for p in b.partitions} | {
            s.partition or s.id for s in self.sites
        }
        for key, part in wf.partition_hints.items():
            if not key.isdigit() or not 0 <= int(key) < wf.batch_count:
                raise ValueError(f"workflow.partition_hints: bad batch index {key!r}")
            if part not in partitions:
                raise ValueError(f"workflow.partition_hints references unknown partition {part!r}")
        if wf.mode is WorkflowMode.OVERFLOW and not any(
            b.kind is BackendKind.OVERFLOW_ROUTER for b in self.backends
        ):
            raise ValueError("mode overflow needs an overflow_router backend")
        for ep in self.endpoints:
            for site in ep.sites:
                need(site, f"endpoint {ep.node_id}")
        return self

    # -- domain objects -----------------------------------------------------

    def link_matrix(self) -> LinkMatrix:
        ids = sorted(s.id for s in self.sites)
        bandwidth: dict[tuple[str, str], float] = {}
        latency: dict[tuple[str, str], float] = {}
        if self.default_link is not None:
            for a in ids:
                for b in ids:
                    if a != b:
                        bandwidth[(a, b)] = self.default_link.bandwidth_gbps
                        latency[(a, b)] = self.default_link.latency_s
        for link in self.links:
            pairs = [(link.src, link.dst)] + ([(link.dst, link.src)] if link.symmetric else [])
            for pair in pairs:
                bandwidth[pair] = link.bandwidth_gbps
                latency[pair] = link.latency_s
        try:
            return LinkMatrix(ids, bandwidth, latency)
        except ConfigError as e:
            raise ValueError(str(e)) from e

    def site_descriptors(self) -> list[SiteDescriptor]:
        windows: dict[str, list[tuple[float, float]]] = {s.id: [tuple(w) for w in s.down] for s in self.sites}
        return [
            SiteDescriptor(
                id=s.id,
                slots=s.slots,
                partition=s.partition or s.id,
                preemptible=s.preemptible,
                compute=s.compute,
                reliability=tuple(sorted(windows[s.id])),
            )
            for s in sorted(self.sites, key=lambda s: s.id)
        ]

    def backend_descriptors(self) -> list[BackendDescriptor]:
        out = []
        for b in self.backends:
            out.append(
                BackendDescriptor(
                    id=b.id,
                    kind=b.kind,
                    site=b.site or "",
                    slots=b.slots,
                    partitions=tuple(
                        PartitionSpec(
                            name=p.name,
                            site=p.site,
                            slots=p.slots,
                            max_cpu_cores=p.max_cpu_cores,
                            max_ram_gb=p.max_ram_gb,
                            max_disk_gb=p.max_disk_gb,
                        )
                        for p in b.partitions
                    ),
                    primary=b.primary,
                    secondary=b.secondary,
                    offload_cap=b.offload_cap,
                )
            )
        return out

    def effective(self) -> dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)

    def effective_json(self) -> str:
        return canonical_json(self.effective())

    def digest(self) -> str:
        return hashlib.sha256(self.effective_json().encode("utf-8")).hexdigest()

    def with_overrides(self, *, seed: int | None = None, mode: WorkflowMode | str | None = None) -> ScenarioConfig:
        data = self.effective()
        if seed is not None:
            data["seed"] = int(seed)
        if mode is not None:
            data["workflow"]["mode"] = WorkflowMode(mode).value
        return parse_scenario(data)


_LINE_RE = re.compile(r"line (\d+)")


def _describe(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        where = ".".join(str(p) for p in err.get("loc", ())) or "scenario"
        parts.append(f"{where}: {err.get('msg')}")
    return "; ".join(parts)


def parse_scenario(data: dict[str, Any]) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_describe(e)) from e


def load_scenario(path: str | Path) -> ScenarioConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read scenario {p}: {e}") from e
    if p.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"{p}:{e.lineno}: {e.msg}", line=e.lineno) from e
    else:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            m = _LINE_RE.search(str(e))
            line = int(m.group(1)) if m else None
            raise ParseError(f"{p}:{line or '?'}: {e}", line=line) from e
    return parse_scenario(data)
