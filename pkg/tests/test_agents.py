from __future__ import annotations

import json

import pytest

from agentmesh.agents import (
    Agent,
    FailureMode,
    StubBehavior,
    build_agents,
    compliance_check_jd,
    match_profile,
    profile_corpus,
    calendar_fixture,
)
from agentmesh.guard import load_policy
from agentmesh.protocol import ExecutionCommand, Outcome
from agentmesh.registry import Registry
from agentmesh.transport import DeadlineExceeded, LocalTransport


@pytest.fixture(scope="module")
def agents():
    return build_agents()


def _cmd(agent_name, inputs, deadline_ms=30_000):
    return ExecutionCommand(
        command_id="c1", resource_id=agent_name,
        endpoint=f"local://{agent_name}", inputs=inputs, deadline_ms=deadline_ms)


def _invoke(agent: Agent, inputs: dict):
    return agent.handle(_cmd(agent.name, inputs))


# --- individual agents -------------------------------------------------------

def test_profile_search_matches_brute_force_oracle(agents):
    inputs = {"title": "ML Engineer", "skills": "python,ml", "location": "remote"}
    result = _invoke(agents["profile_search"], inputs)
    assert result.outcome is Outcome.OK

    # independent linear scan over the bundled corpus
    expected = sorted(
        p["id"] for p in profile_corpus()
        if p["title"].lower() == "ml engineer"
        and p["location"].lower() == "remote"
        and {"python", "ml"} <= {s.lower() for s in p["skills"]}
    )
    got = [x for x in result.payload["candidate_ids"].split(",") if x]
    assert got == expected
    assert result.payload["count"] == len(expected)
    assert len(expected) > 0
    assert result.payload["top_candidate"] == expected[0]


def test_profile_search_deterministic(agents):
    inputs = {"title": "Data Scientist", "skills": "sql", "location": "london"}
    a = _invoke(agents["profile_search"], inputs)
    b = _invoke(agents["profile_search"], inputs)
    assert a.payload == b.payload


def test_schedule_interviews_unique_common_slot():
    # three calendars sharing exactly one slot force the answer
    agents = build_agents()
    agent = agents["schedule_interviews"]
    import agentmesh.agents as agents_mod
    only = {"interviewers": {
        "i-01": ["2026-03-02T09:00", "2026-03-04T14:00"],
        "i-02": ["2026-03-04T14:00", "2026-03-05T11:00"],
        "i-03": ["2026-03-03T10:00", "2026-03-04T14:00"],
    }}
    original = agents_mod.calendar_fixture
    agents_mod.calendar_fixture = lambda: only
    try:
        result = _invoke(agent, {"candidate_ids": "p-0001", "panel_size": 3})
    finally:
        agents_mod.calendar_fixture = original
    assert result.payload["slot"] == "2026-03-04T14:00"
    assert result.payload["booked"] is True


def test_schedule_interviews_bundled_calendars(agents):
    result = _invoke(agents["schedule_interviews"], {"candidate_ids": "p-0001", "panel_size": 3})
    cal = calendar_fixture()["interviewers"]
    panel = result.payload["panel"].split(",")
    assert len(panel) == 3
    for member in panel:
        assert result.payload["slot"] in cal[member]


def test_jd_write_contains_all_policy_sections(agents):
    policy = load_policy()
    result = _invoke(agents["jd_write"], {
        "role_title": "ML Engineer", "level": "senior",
        "location": "remote", "skills": "python,ml"})
    assert result.outcome is Outcome.OK
    assert compliance_check_jd(result.payload, policy) is None
    assert "## Equal Opportunity" in result.payload["document"]


def test_jd_compliance_check_flags_missing_section():
    policy = load_policy()
    violation = compliance_check_jd({"document": "## Responsibilities\nstuff"}, policy)
    assert violation is not None
    assert "Equal Opportunity" in violation


def test_collect_feedback_aggregates(agents):
    search = _invoke(agents["profile_search"],
                     {"title": "ML Engineer", "skills": "", "location": ""})
    ids = search.payload["candidate_ids"].split(",")[:3]
    result = _invoke(agents["collect_feedback"], {"candidate_ids": ",".join(ids)})
    assert result.outcome is Outcome.OK
    assert result.payload["count"] >= 0
    assert "Average rating" in result.payload["document"]


def test_hiring_decision_pass_through(agents):
    result = _invoke(agents["hiring_decision"], {"document": "summary body"})
    assert result.payload["decision"] == "forwarded"
    assert result.payload["document"].startswith("summary body")


def test_onboarding_checklist_by_level(agents):
    senior = _invoke(agents["onboarding"], {"level": "senior", "candidate_id": "p-0001"})
    junior = _invoke(agents["onboarding"], {"level": "junior", "candidate_id": "p-0001"})
    assert senior.payload["items"] > 0
    assert senior.payload["checklist"] != junior.payload["checklist"]
    unknown = _invoke(agents["onboarding"], {"level": "mystery", "candidate_id": ""})
    assert unknown.payload == dict(unknown.payload) and unknown.outcome is Outcome.OK


def test_calculator(agents):
    result = _invoke(agents["calculator"], {"op": "add", "a": 2, "b": 3})
    assert result.payload == {"result": 5.0}
    assert _invoke(agents["calculator"], {"op": "div", "a": 1, "b": 0}).payload == {"result": 0.0}


def test_lookup_and_echo(agents):
    found = _invoke(agents["lookup"], {"key": "jd.required_sections"})
    assert found.payload["found"] is True
    missing = _invoke(agents["lookup"], {"key": "nope"})
    assert missing.payload == {"value": "", "found": False}
    assert _invoke(agents["echo"], {"text": "hi"}).payload == {"text": "hi"}


# --- behavior wrapper ----------------------------------------------------------

def test_schema_violation_rejected_before_fn(agents):
    result = _invoke(agents["calculator"], {"op": "add", "a": 2})
    assert result.outcome is Outcome.ERROR
    assert "schema_violation" in result.error_message
    assert "missing required field: b" in result.error_message


def test_error_once_then_recovers(agents):
    agent = agents["echo"]
    agent.behavior = StubBehavior(failure_mode=FailureMode.ERROR_ONCE)
    first = _invoke(agent, {"text": "x"})
    second = _invoke(agent, {"text": "x"})
    assert first.outcome is Outcome.ERROR
    assert second.outcome is Outcome.OK


def test_always_error():
    agent = build_agents()["echo"]
    agent.behavior = StubBehavior(failure_mode=FailureMode.ALWAYS_ERROR)
    for _ in range(3):
        assert _invoke(agent, {"text": "x"}).outcome is Outcome.ERROR


def test_slow_mode_exceeds_deadline_via_transport():
    agent = build_agents()["echo"]
    agent.behavior = StubBehavior(failure_mode=FailureMode.SLOW, slow_latency_ms=60_000)
    transport = LocalTransport()
    transport.mount("echo", agent.handle)
    with pytest.raises(DeadlineExceeded):
        transport.invoke(_cmd("echo", {"text": "x"}, deadline_ms=100))


def test_poisoned_output_appends_injection(agents):
    agent = build_agents()["echo"]
    agent.behavior = StubBehavior(failure_mode=FailureMode.POISONED_OUTPUT)
    result = _invoke(agent, {"text": "clean"})
    assert "ignore previous instructions" in result.payload["text"]


def test_canned_outputs_take_priority():
    agent = build_agents()["echo"]
    fingerprint = agent.behavior.fingerprint({"text": "x"})
    agent.behavior = StubBehavior(canned_outputs={fingerprint: {"text": "canned"}})
    assert _invoke(agent, {"text": "x"}).payload == {"text": "canned"}


# --- conformance ---------------------------------------------------------------

def test_every_agent_passes_registry_validation(agents):
    transport = LocalTransport()
    registry = Registry(transport=transport)
    for agent in agents.values():
        transport.mount(agent.name, agent.handle)
        registry.register(agent.manifest.copy())
    for name in agents:
        report = registry.validate(name)
        assert report.overall, f"{name}: {[c.detail for c in report.failures()]}"


def test_match_profile_rule():
    profile = {"title": "ML Engineer", "skills": ["Python", "ML"], "location": "Remote"}
    assert match_profile(profile, "ml engineer", ["python"], "remote")
    assert not match_profile(profile, "ml engineer", ["cobol"], "remote")
    assert match_profile(profile, "", [], "")  # empty filters match everything
