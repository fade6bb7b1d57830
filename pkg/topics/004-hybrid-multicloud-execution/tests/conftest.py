from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import pytest

from core import Command, DataRef, TaskRegistry, TaskSpec
from scenario import ScenarioConfig, load_scenario, parse_scenario
from simnet import Engine, LinkMatrix, Network, SiteDescriptor
from storage import ObjectStore

EXPERIMENTS = Path(__file__).resolve().parents[1] / "experiments"

BASE_SCENARIO: dict[str, Any] = {
    "seed": 1,
    "default_link": {"bandwidth_gbps": 8.0, "latency_s": 0.01},
    "sites": [
        {"id": "s1", "slots": 2},
        {"id": "s2", "slots": 2},
        {"id": "s3", "slots": 2},
        {"id": "store", "compute": False},
    ],
    "workflow": {
        "dataset_id": "ds",
        "batch_count": 9,
        "batch_size_bytes": 100_000_000,
        "output_size_bytes": 1_000_000,
        "map_duration_s": 10.0,
        "gather_duration_s": 2.0,
    },
}


def scenario_data(**overrides: Any) -> dict[str, Any]:
    """BASE_SCENARIO with top-level keys replaced; ``workflow`` entries are merged."""
    data = copy.deepcopy(BASE_SCENARIO)
    workflow = overrides.pop("workflow", None)
    data.update(copy.deepcopy(overrides))
    if workflow:
        data["workflow"].update(workflow)
    return data


def scenario(**overrides: Any) -> ScenarioConfig:
    return parse_scenario(scenario_data(**overrides))


def experiment(name: str) -> ScenarioConfig:
    return load_scenario(EXPERIMENTS / f"{name}.toml")


def make_engine(
    slots: dict[str, int] | None = None,
    *,
    bandwidth_gbps: float = 8.0,
    latency_s: float = 0.0,
    preemptible: tuple[str, ...] = (),
    storage_only: tuple[str, ...] = (),
    seed: int = 0,
    max_events: int = 10**6,
) -> Engine:
    slots = slots or {"a": 1, "b": 1}
    sites = [
        SiteDescriptor(id=s, slots=n, preemptible=s in preemptible, compute=s not in storage_only)
        for s, n in slots.items()
    ]
    links = LinkMatrix.uniform(slots, bandwidth_gbps=bandwidth_gbps, latency_s=latency_s)
    return Engine(Network(sites, links), seed=seed, max_events=max_events)


def make_task(
    task_id: str,
    *,
    duration_s: float = 10.0,
    inputs: tuple[DataRef, ...] = (),
    node_count: int = 1,
    executor_count: int = 1,
    poisoned: bool = False,
    **kwargs: Any,
) -> TaskSpec:
    return TaskSpec(
        id=task_id,
        command=Command(duration_s=duration_s, digest_key=task_id, output_size_bytes=1000, poisoned=poisoned),
        inputs=inputs,
        node_count=node_count,
        executor_count=executor_count,
        **kwargs,
    )


@pytest.fixture
def engine() -> Engine:
    return make_engine({"a": 2, "b": 2, "c": 1})


@pytest.fixture
def store(engine: Engine) -> ObjectStore:
    return ObjectStore(engine, common_site="c")


@pytest.fixture
def registry(engine: Engine) -> TaskRegistry:
    return TaskRegistry(engine.network)


@pytest.fixture
def out_dir(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    monkeypatch.delenv("HYBRIDMESH_OUT_DIR", raising=False)
    monkeypatch.chdir(tmp_path)
    return tmp_path / "out"
