#!/usr/bin/env python3
"""Shared domain types, identifiers and the task lifecycle.

Every other module imports from here. All types are immutable values; their
canonical serialized form is JSON with lower_snake_case keys, and unknown keys
are rejected on decode.

Lifecycle (TES state names):

    QUEUED -> INITIALIZING -> RUNNING -> COMPLETE
                                      -> EXECUTOR_ERROR
                                      -> SYSTEM_ERROR
    any non-terminal --cancel--> CANCELED
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, ClassVar, Iterable, Protocol

SiteId = str

DIGEST_ALGORITHM = "sha256"


class HybridMeshError(RuntimeError):
    http_status: ClassVar[int] = 500


class IllegalTransition(HybridMeshError):
    http_status = 409


class UnknownSite(HybridMeshError):
    http_status = 400


class DuplicateTaskId(HybridMeshError):
    http_status = 409


class MalformedSpec(HybridMeshError):
    http_status = 400


class ConfigError(HybridMeshError):
    http_status = 400


class TaskState(str, Enum):
    QUEUED = "QUEUED"
    INITIALIZING = "INITIALIZING"
    RUNNING = "RUNNING"
    COMPLETE = "COMPLETE"
    EXECUTOR_ERROR = "EXECUTOR_ERROR"
    SYSTEM_ERROR = "SYSTEM_ERROR"
    CANCELED = "CANCELED"

    @property
    def is_terminal(self) -> bool:
        return self in _TERMINAL_STATES

    @property
    def holds_slot(self) -> bool:
        return self in (TaskState.INITIALIZING, TaskState.RUNNING)


_TERMINAL_STATES = frozenset(
    {TaskState.COMPLETE, TaskState.EXECUTOR_ERROR, TaskState.SYSTEM_ERROR, TaskState.CANCELED}
)


class LifecycleEvent(str, Enum):
    START_INIT = "start_init"
    START_RUN = "start_run"
    FINISH_OK = "finish_ok"
    FINISH_EXECUTOR_ERR = "finish_executor_err"
    FINISH_SYSTEM_ERR = "finish_system_err"
    CANCEL = "cancel"


TRANSITIONS: dict[tuple[TaskState, LifecycleEvent], TaskState] = {
    (TaskState.QUEUED, LifecycleEvent.START_INIT): TaskState.INITIALIZING,
    (TaskState.INITIALIZING, LifecycleEvent.START_RUN): TaskState.RUNNING,
    (TaskState.RUNNING, LifecycleEvent.FINISH_OK): TaskState.COMPLETE,
    (TaskState.RUNNING, LifecycleEvent.FINISH_EXECUTOR_ERR): TaskState.EXECUTOR_ERROR,
    (TaskState.RUNNING, LifecycleEvent.FINISH_SYSTEM_ERR): TaskState.SYSTEM_ERROR,
    # Failures during input staging (site loss, unreachable inputs).
    (TaskState.INITIALIZING, LifecycleEvent.FINISH_SYSTEM_ERR): TaskState.SYSTEM_ERROR,
    (TaskState.QUEUED, LifecycleEvent.CANCEL): TaskState.CANCELED,
    (TaskState.INITIALIZING, LifecycleEvent.CANCEL): TaskState.CANCELED,
    (TaskState.RUNNING, LifecycleEvent.CANCEL): TaskState.CANCELED,
}


def advance_state(current: TaskState, event: LifecycleEvent | str) -> TaskState:
    try:
        ev = LifecycleEvent(event)
    except ValueError as e:
        raise IllegalTransition(f"unknown lifecycle event: {event!r}") from e
    nxt = TRANSITIONS.get((TaskState(current), ev))
    if nxt is None:
        raise IllegalTransition(f"{TaskState(current).value} --{ev.value}--> (no transition)")
    return nxt


def content_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _check_keys(cls: type, data: dict[str, Any]) -> None:
    if not isinstance(data, dict):
        raise MalformedSpec(f"{cls.__name__}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise MalformedSpec(f"{cls.__name__}: unknown fields {unknown}")


def _finite_nonneg(name: str, value: float) -> None:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise MalformedSpec(f"{name} must be a number")
    if not math.isfinite(value) or value < 0:
        raise MalformedSpec(f"{name} must be finite and >= 0, got {value!r}")


@dataclass(frozen=True)
class ResourceRequest:
    cpu_cores: int = 1
    ram_gb: float = 0.0
    disk_gb: float = 0.0

    def __post_init__(self) -> None:
        if not isinstance(self.cpu_cores, int) or isinstance(self.cpu_cores, bool) or self.cpu_cores < 1:
            raise MalformedSpec(f"cpu_cores must be an integer >= 1, got {self.cpu_cores!r}")
        _finite_nonneg("ram_gb", self.ram_gb)
        _finite_nonneg("disk_gb", self.disk_gb)

    def to_dict(self) -> dict[str, Any]:
        return {"cpu_cores": self.cpu_cores, "ram_gb": self.ram_gb, "disk_gb": self.disk_gb}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ResourceRequest:
        _check_keys(cls, data)
        return cls(**data)


@dataclass(frozen=True)
class DataRef:
    object_id: str
    size_bytes: int
    home_site: SiteId

    def __post_init__(self) -> None:
        if not self.object_id:
            raise MalformedSpec("object_id must be non-empty")
        if not isinstance(self.size_bytes, int) or isinstance(self.size_bytes, bool) or self.size_bytes < 0:
            raise MalformedSpec(f"size_bytes must be an integer >= 0, got {self.size_bytes!r}")
        if not self.home_site:
            raise MalformedSpec("home_site must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {"object_id": self.object_id, "size_bytes": self.size_bytes, "home_site": self.home_site}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> DataRef:
        _check_keys(cls, data)
        return cls(**data)


@dataclass(frozen=True)
class Command:
    """Abstract work: a logical duration plus a deterministic output recipe.

    Outputs of a plain command depend only on ``digest_key``; a combining
    command (the gather step) also folds in the sorted input object ids.
    """

    duration_s: float
    digest_key: str
    combine_inputs: bool = False
    output_size_bytes: int | None = None
    poisoned: bool = False

    def __post_init__(self) -> None:
        _finite_nonneg("duration_s", self.duration_s)
        if not self.digest_key:
            raise MalformedSpec("digest_key must be non-empty")
        if self.output_size_bytes is not None and (
            not isinstance(self.output_size_bytes, int) or self.output_size_bytes < 0
        ):
            raise MalformedSpec(f"output_size_bytes must be an integer >= 0, got {self.output_size_bytes!r}")

    def output_content(self, inputs: Iterable[DataRef]) -> bytes:
        text = f"output:{self.digest_key}"
        if self.combine_inputs:
            text += "|" + ",".join(sorted(ref.object_id for ref in inputs))
        return content_digest(text.encode("utf-8")).encode("ascii")

    def to_dict(self) -> dict[str, Any]:
        return {
            "duration_s": self.duration_s,
            "digest_key": self.digest_key,
            "combine_inputs": self.combine_inputs,
            "output_size_bytes": self.output_size_bytes,
            "poisoned": self.poisoned,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Command:
        _check_keys(cls, data)
        return cls(**data)


@dataclass(frozen=True)
class TaskSpec:
    id: str
    command: Command
    inputs: tuple[DataRef, ...] = ()
    outputs: tuple[str, ...] = ("result",)
    resources: ResourceRequest = field(default_factory=ResourceRequest)
    node_count: int = 1
    executor_count: int = 1

    def __post_init__(self) -> None:
        if not isinstance(self.id, str) or not self.id:
            raise MalformedSpec("task id must be a non-empty string")
        for name in ("node_count", "executor_count"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise MalformedSpec(f"{name} must be an integer >= 1, got {value!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))

    @property
    def input_bytes(self) -> int:
        return sum(ref.size_bytes for ref in self.inputs)

    @property
    def single_node_single_container(self) -> bool:
        return self.node_count == 1 and self.executor_count == 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "command": self.command.to_dict(),
            "inputs": [ref.to_dict() for ref in self.inputs],
            "outputs": list(self.outputs),
            "resources": self.resources.to_dict(),
            "node_count": self.node_count,
            "executor_count": self.executor_count,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TaskSpec:
        _check_keys(cls, data)
        if "command" not in data or "id" not in data:
            raise MalformedSpec("TaskSpec requires id and command")
        try:
            return cls(
                id=data["id"],
                command=Command.from_dict(data["command"]),
                inputs=tuple(DataRef.from_dict(d) for d in data.get("inputs") or []),
                outputs=tuple(str(o) for o in data.get("outputs", ["result"])),
                resources=ResourceRequest.from_dict(data.get("resources") or {}),
                node_count=data.get("node_count", 1),
                executor_count=data.get("executor_count", 1),
            )
        except TypeError as e:
            raise MalformedSpec(str(e)) from e


@dataclass(frozen=True)
class ValidatedTask:
    spec: TaskSpec

    @property
    def id(self) -> str:
        return self.spec.id


class SiteCatalog(Protocol):
    @property
    def site_ids(self) -> frozenset[SiteId]: ...


def validate_task(spec: TaskSpec, scenario: SiteCatalog, *, seen: set[str]) -> ValidatedTask:
    """Check a spec against the scenario's sites and the ids already submitted.

    ``seen`` is updated in place on success.
    """
    if not math.isfinite(spec.command.duration_s):
        raise MalformedSpec(f"{spec.id}: duration must be finite")
    sites = scenario.site_ids
    for ref in spec.inputs:
        if ref.home_site not in sites:
            raise UnknownSite(f"{spec.id}: input {ref.object_id[:12]} homed at unknown site {ref.home_site!r}")
    if spec.id in seen:
        raise DuplicateTaskId(f"task id already submitted: {spec.id}")
    seen.add(spec.id)
    return ValidatedTask(spec=spec)


class TaskRegistry:
    """Per-run id registry; ids are unique within a run."""

    def __init__(self, scenario: SiteCatalog) -> None:
        self._scenario = scenario
        self._seen: set[str] = set()

    def validate(self, spec: TaskSpec) -> ValidatedTask:
        return validate_task(spec, self._scenario, seen=self._seen)

    def __contains__(self, task_id: object) -> bool:
        return task_id in self._seen
