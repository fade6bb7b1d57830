from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_engine, make_task
from core import (
    Command,
    DataRef,
    DuplicateTaskId,
    IllegalTransition,
    LifecycleEvent,
    MalformedSpec,
    ResourceRequest,
    TaskRegistry,
    TaskSpec,
    TRANSITIONS,
    TaskState,
    UnknownSite,
    advance_state,
    canonical_json,
)


def test_happy_path_reaches_complete():
    state = TaskState.QUEUED
    for event in ("start_init", "start_run", "finish_ok"):
        state = advance_state(state, event)
    assert state is TaskState.COMPLETE


def test_cancel_from_queued():
    assert advance_state(TaskState.QUEUED, LifecycleEvent.CANCEL) is TaskState.CANCELED


def test_staging_failure_is_a_system_error():
    assert advance_state(TaskState.INITIALIZING, "finish_system_err") is TaskState.SYSTEM_ERROR


LIFECYCLE = {
    (TaskState.QUEUED, LifecycleEvent.START_INIT): TaskState.INITIALIZING,
    (TaskState.QUEUED, LifecycleEvent.CANCEL): TaskState.CANCELED,
    (TaskState.INITIALIZING, LifecycleEvent.START_RUN): TaskState.RUNNING,
    (TaskState.INITIALIZING, LifecycleEvent.FINISH_SYSTEM_ERR): TaskState.SYSTEM_ERROR,
    (TaskState.INITIALIZING, LifecycleEvent.CANCEL): TaskState.CANCELED,
    (TaskState.RUNNING, LifecycleEvent.FINISH_OK): TaskState.COMPLETE,
    (TaskState.RUNNING, LifecycleEvent.FINISH_EXECUTOR_ERR): TaskState.EXECUTOR_ERROR,
    (TaskState.RUNNING, LifecycleEvent.FINISH_SYSTEM_ERR): TaskState.SYSTEM_ERROR,
    (TaskState.RUNNING, LifecycleEvent.CANCEL): TaskState.CANCELED,
}


@pytest.mark.parametrize("state", list(TaskState))
@pytest.mark.parametrize("event", list(LifecycleEvent))
def test_every_state_event_pair_matches_the_lifecycle_table(state, event):
    expected = LIFECYCLE.get((state, event))
    if expected is None:
        with pytest.raises(IllegalTransition):
            advance_state(state, event)
    else:
        assert advance_state(state, event) is expected
        assert advance_state(state.value, event.value) is expected


def test_transition_table_has_no_undocumented_edges():
    assert TRANSITIONS == LIFECYCLE


@pytest.mark.parametrize("terminal", [s for s in TaskState if s.is_terminal])
@pytest.mark.parametrize("event", list(LifecycleEvent))
def test_terminal_states_accept_no_event(terminal, event):
    with pytest.raises(IllegalTransition):
        advance_state(terminal, event)


def test_unknown_event_is_illegal():
    with pytest.raises(IllegalTransition):
        advance_state(TaskState.QUEUED, "teleport")


@settings(max_examples=200)
@given(st.lists(st.sampled_from(list(LifecycleEvent)), max_size=12))
def test_any_event_sequence_stays_on_the_state_machine(events):
    state = TaskState.QUEUED
    seen_terminal = False
    for event in events:
        try:
            nxt = advance_state(state, event)
        except IllegalTransition:
            continue
        assert not seen_terminal
        state = nxt
        seen_terminal = state.is_terminal
    assert state.holds_slot == (state in (TaskState.INITIALIZING, TaskState.RUNNING))


def test_dataref_rejects_negative_size():
    with pytest.raises(MalformedSpec):
        DataRef(object_id="x", size_bytes=-1, home_site="a")


def test_resource_request_needs_a_core():
    with pytest.raises(MalformedSpec):
        ResourceRequest(cpu_cores=0)


def test_taskspec_round_trip_is_canonical():
    spec = make_task("t1", inputs=(DataRef("obj", 5, "a"),), resources=ResourceRequest(cpu_cores=4, ram_gb=8.0))
    again = TaskSpec.from_dict(spec.to_dict())
    assert again == spec
    assert canonical_json(again.to_dict()) == canonical_json(spec.to_dict())


def test_taskspec_rejects_unknown_fields():
    data = make_task("t1").to_dict()
    data["priority"] = 3
    with pytest.raises(MalformedSpec, match="unknown fields"):
        TaskSpec.from_dict(data)


def test_taskspec_needs_positive_counts():
    with pytest.raises(MalformedSpec):
        make_task("t1", node_count=0)


def test_command_rejects_infinite_duration():
    with pytest.raises(MalformedSpec):
        Command(duration_s=float("inf"), digest_key="k")


def test_combining_command_depends_on_inputs_only_through_their_ids():
    cmd = Command(duration_s=1.0, digest_key="g", combine_inputs=True)
    a = (DataRef("o1", 1, "a"), DataRef("o2", 1, "b"))
    b = (DataRef("o2", 9, "c"), DataRef("o1", 9, "c"))
    assert cmd.output_content(a) == cmd.output_content(b)
    assert cmd.output_content(a) != cmd.output_content(a[:1])


def test_validate_rejects_unknown_input_site():
    registry = TaskRegistry(make_engine().network)
    with pytest.raises(UnknownSite):
        registry.validate(make_task("t1", inputs=(DataRef("obj", 1, "mars"),)))


def test_validate_rejects_duplicate_ids():
    registry = TaskRegistry(make_engine().network)
    registry.validate(make_task("t1"))
    assert "t1" in registry
    with pytest.raises(DuplicateTaskId):
        registry.validate(make_task("t1"))
