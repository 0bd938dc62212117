from __future__ import annotations

import math
import random

import pytest

from agentmesh.protocol import (
    ExecutionCommand,
    ExecutionResult,
    FieldType,
    Outcome,
    ResourceMetrics,
    SchemaField,
    error_result,
    ok_result,
)
from agentmesh.registry import (
    Registry,
    RegistryError,
    ValidationState,
    sample_inputs,
)
from agentmesh.retrieval import SearchIndex, retrieve
from agentmesh.transport import LocalTransport

from helpers import make_manifest


def _echo_handler(command: ExecutionCommand) -> ExecutionResult:
    return ok_result(command.command_id, {"text": "echoed"}, elapsed_ms=1)


@pytest.fixture
def transport():
    t = LocalTransport()
    t.mount("res", _echo_handler)
    return t


def _registry(transport=None, path=None):
    return Registry(snapshot_path=path, transport=transport, clock=lambda: 1000)


def _manifest(rid="res-a", **kw):
    kw.setdefault("endpoint", "local://res")
    return make_manifest(rid, **kw)


# --- register ----------------------------------------------------------------

def test_register_starts_unvalidated_and_invisible(transport):
    reg = _registry(transport)
    entry = reg.register(_manifest())
    assert entry.validation is ValidationState.UNVALIDATED
    assert reg.visible_manifests() == []


def test_duplicate_id_rejected(transport):
    reg = _registry(transport)
    reg.register(_manifest("dup"))
    with pytest.raises(RegistryError) as e:
        reg.register(_manifest("dup"))
    assert e.value.code == "duplicate_id"


def test_invalid_manifest_rejected(transport):
    reg = _registry(transport)
    bad = _manifest("bad", description=" ")
    with pytest.raises(RegistryError) as e:
        reg.register(bad)
    assert e.value.code == "invalid_manifest"
    assert "description empty" in str(e.value)


# --- validate ----------------------------------------------------------------

def test_conforming_resource_passes_validation(transport):
    reg = _registry(transport)
    reg.register(_manifest())
    report = reg.validate("res-a")
    assert report.overall
    assert {c.name for c in report.checks} == {"connectivity", "schema_echo",
                                               "description_consistency"}
    entry = reg.get("res-a")
    assert entry.validation is ValidationState.PASSED
    assert not entry.suspended
    assert entry.manifest.metrics.last_validated_at is not None
    assert [m.resource_id for m in reg.visible_manifests()] == ["res-a"]


def test_missing_output_field_fails_and_suspends():
    t = LocalTransport()
    t.mount("res", lambda c: ok_result(c.command_id, {"wrong_field": "x"}))
    reg = _registry(t)
    reg.register(_manifest())
    report = reg.validate("res-a")
    assert not report.overall
    entry = reg.get("res-a")
    assert entry.suspended
    assert "output schema mismatch" in entry.suspension_reason


def test_unreachable_endpoint_fails_connectivity():
    reg = _registry(LocalTransport())  # nothing mounted
    reg.register(_manifest())
    report = reg.validate("res-a")
    failed = {c.name for c in report.failures()}
    assert "connectivity" in failed
    assert reg.get("res-a").suspended


def test_validate_unknown_resource(transport):
    with pytest.raises(RegistryError) as e:
        _registry(transport).validate("ghost")
    assert e.value.code == "unknown_resource"


def test_sample_inputs_cover_required_fields():
    schema = [
        SchemaField("s", FieldType.STRING),
        SchemaField("n", FieldType.INT),
        SchemaField("x", FieldType.FLOAT),
        SchemaField("b", FieldType.BOOL),
        SchemaField("opt", FieldType.STRING, required=False),
    ]
    assert sample_inputs(schema) == {"s": "sample", "n": 1, "x": 1.0, "b": True}


# --- metrics -----------------------------------------------------------------

def test_percentiles_hand_example(transport):
    reg = _registry(transport)
    reg.register(_manifest())
    for ms in [10, 20, 30, 40, 50, 60, 70, 80, 90, 100]:
        reg.record_outcome("res-a", ok_result("c", {"text": "x"}, elapsed_ms=ms))
    metrics = reg.get("res-a").manifest.metrics
    assert metrics.p50_ms == 50
    assert metrics.p90_ms == 90


def test_completion_rate(transport):
    reg = _registry(transport)
    reg.register(_manifest())
    metrics = reg.get("res-a").manifest.metrics
    assert metrics.completion_rate == 1.0  # zero outcomes
    for _ in range(3):
        reg.record_outcome("res-a", ok_result("c", {"text": "x"}))
    reg.record_outcome("res-a", error_result("c", "boom"))
    assert metrics.completion_rate == 0.75


def _nearest_rank_oracle(samples: list[int], pct: float) -> int:
    srt = sorted(samples)
    rank = math.ceil(pct * len(srt))
    return srt[max(rank, 1) - 1]


def test_percentiles_match_sort_oracle_random():
    rng = random.Random(3)
    for _ in range(300):
        samples = [rng.randint(0, 5000) for _ in range(rng.randint(1, 80))]
        m = ResourceMetrics(latency_samples_ms=list(samples))
        assert m.p50_ms == _nearest_rank_oracle(samples, 0.50)
        assert m.p90_ms == _nearest_rank_oracle(samples, 0.90)
        assert m.p50_ms <= m.p90_ms


def test_latency_ring_bounded(transport):
    reg = _registry(transport)
    reg.register(_manifest())
    for i in range(1100):
        reg.record_outcome("res-a", ok_result("c", {"text": "x"}, elapsed_ms=i))
    metrics = reg.get("res-a").manifest.metrics
    assert len(metrics.latency_samples_ms) == 1024
    assert metrics.latency_samples_ms[0] == 76  # oldest samples dropped
    assert metrics.success_count == 1100  # counters unaffected by ring cap


def test_counters_never_decrease(transport):
    reg = _registry(transport)
    reg.register(_manifest())
    rng = random.Random(5)
    last = (0, 0)
    for _ in range(200):
        if rng.random() < 0.6:
            reg.record_outcome("res-a", ok_result("c", {"text": "x"}))
        else:
            reg.record_outcome("res-a", error_result("c", "no"))
        m = reg.get("res-a").manifest.metrics
        assert (m.success_count, m.failure_count) >= last
        assert 0.0 <= m.completion_rate <= 1.0
        last = (m.success_count, m.failure_count)


# --- suspend / reinstate -------------------------------------------------------

def test_suspend_hides_from_search(transport):
    reg = _registry(transport)
    reg.register(_manifest(description="translate documents quickly"))
    reg.validate("res-a")
    assert len(reg.visible_manifests()) == 1
    reg.suspend("res-a", "operator request")
    assert reg.visible_manifests() == []
    index = SearchIndex(reg.visible_manifests())
    assert retrieve(index, "translate documents", 5).items == []


def test_reinstate_requires_fresh_validation(transport):
    reg = _registry(transport)
    reg.register(_manifest())
    reg.validate("res-a")
    reg.suspend("res-a", "maintenance")
    with pytest.raises(RegistryError) as e:
        reg.reinstate("res-a")
    assert e.value.code == "reinstate_without_validation"
    reg.validate("res-a")  # passes, reactivates
    entry = reg.reinstate("res-a")  # now a no-op success
    assert not entry.suspended
    assert len(reg.visible_manifests()) == 1


def test_reinstate_while_validation_failed():
    t = LocalTransport()
    t.mount("res", lambda c: ok_result(c.command_id, {"bogus": 1}))
    reg = _registry(t)
    reg.register(_manifest())
    reg.validate("res-a")
    assert reg.get("res-a").validation is ValidationState.FAILED
    with pytest.raises(RegistryError) as e:
        reg.reinstate("res-a")
    assert e.value.code == "reinstate_without_validation"


# --- invariants ----------------------------------------------------------------

def test_no_suspended_entry_ever_searchable(transport):
    """Random interleaving of register/validate/suspend/reinstate/search."""
    rng = random.Random(17)
    reg = _registry(transport)
    ids = [f"res-{i}" for i in range(12)]
    suspended: set[str] = set()
    registered: set[str] = set()
    validated: set[str] = set()
    for step in range(400):
        op = rng.choice(["register", "validate", "suspend", "reinstate", "search"])
        rid = rng.choice(ids)
        if op == "register" and rid not in registered:
            reg.register(_manifest(rid, description=f"shared corpus words plus {rid}"))
            registered.add(rid)
        elif op == "validate" and rid in registered:
            reg.validate(rid)
            validated.add(rid)
            suspended.discard(rid)
        elif op == "suspend" and rid in registered:
            reg.suspend(rid, "test")
            suspended.add(rid)
        elif op == "reinstate" and rid in registered:
            try:
                reg.reinstate(rid)
                suspended.discard(rid)
            except RegistryError:
                pass
        elif op == "search":
            index = SearchIndex(reg.visible_manifests())
            out = retrieve(index, "shared corpus words", 10)
            hit_ids = set(out.ids())
            assert not hit_ids & suspended
            assert hit_ids <= validated
            for rid_hit in hit_ids:
                assert not reg.get(rid_hit).suspended


# --- persistence ---------------------------------------------------------------

def test_snapshot_round_trip(tmp_path, transport):
    path = tmp_path / "registry.json"
    reg = Registry(snapshot_path=path, transport=transport, clock=lambda: 7)
    reg.register(_manifest("keep", description="a resource that persists"))
    reg.validate("keep")
    reg.record_outcome("keep", ok_result("c", {"text": "x"}, elapsed_ms=42))
    reg.suspend("keep", "later")

    reloaded = Registry(snapshot_path=path, transport=transport)
    entry = reloaded.get("keep")
    assert entry.suspended
    assert entry.suspension_reason == "later"
    assert entry.validation is ValidationState.PASSED
    assert entry.manifest.metrics.latency_samples_ms == [42]
    # revision markers survive: reinstate still demands a fresh validation
    with pytest.raises(RegistryError):
        reloaded.reinstate("keep")
