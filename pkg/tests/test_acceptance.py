"""Acceptance criteria, one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines alongside the pytest verdicts. Oracles here are deliberately
re-implemented from definitions and never call back into the code paths
they check.
"""
from __future__ import annotations

import itertools
import json
import math
import random
import time
from collections import Counter

import pytest
from click.testing import CliRunner

from agentmesh._util import tokens
from agentmesh.cli import build_hr_demo, main
from agentmesh.evalharness import (
    CasePlaybackProvider,
    drop_one_task,
    drop_one_with_probability,
    generate_cases,
    generate_ir_corpus,
    run_ir_eval,
    run_planner_eval,
)
from agentmesh.guard import Decision
from agentmesh.orchestrator import (
    Orchestrator,
    RandomPolicy,
    WorkflowStatus,
    WorkflowStore,
)
from agentmesh.principal import GatewayRoster, LocalResourcePool
from agentmesh.protocol import (
    Mode,
    ProtocolError,
    ResourceMetrics,
    decode,
    encode,
)
from agentmesh.retrieval import ndcg_at_k, recall_at_k

from golden_messages import GOLDEN, calculator_manifest, sample_query
from helpers import make_manifest
from test_orchestrator import ScriptedExecutor, _graph, _record
from test_protocol import _mutations


def _pass(name: str) -> None:
    print(f"ACCEPTANCE {name}: PASS")


# -------------------------------------------------------------------------------
# 1. End-to-end HR demo
# -------------------------------------------------------------------------------

def test_acceptance_hr_demo_end_to_end():
    started = time.time()
    result = CliRunner().invoke(main, ["demo", "hr", "--mode", "llm_agent"])
    elapsed = time.time() - started
    assert result.exit_code == 0, result.output
    assert elapsed < 10.0, f"demo took {elapsed:.1f}s"
    assert "status: completed" in result.output

    outputs = [l for l in result.output.splitlines() if l.strip().startswith("output ")]
    assert len(outputs) == 6 and all(": ok [" in l for l in outputs)

    # independently re-run the same stack to inspect the record object
    service, gateways, _ = build_hr_demo(Mode.LLM_AGENT)
    from agentmesh.planner import Intent
    from agentmesh.cli import HR_DEMO_PREFERENCES

    workflow_id = service.submit_intent(Intent(
        "i-acc", "please hire a new ml engineer", "u", "t", Mode.LLM_AGENT,
        preferences=dict(HR_DEMO_PREFERENCES)))
    record = service.approve_graph(workflow_id)
    assert record.status is WorkflowStatus.COMPLETED
    assert len(record.node_outputs) == 6
    owners = {n.assignment.gateway_id for n in record.graph.nodes if n.assignment}
    assert owners == {"gw-east", "gw-west"}  # both gateways participated

    transitions = [(e.task_id, e.from_status, e.to_status)
                   for e in record.audit if e.kind == "node_status"]
    assert len(transitions) == len(set(transitions)), "duplicate transition records"
    assert len(transitions) == 12  # 6 nodes x (pending->running, running->succeeded)
    _pass("hr-demo-end-to-end")


# -------------------------------------------------------------------------------
# 2. FSM ordering on random DAGs with randomized delivery
# -------------------------------------------------------------------------------

def _random_edges(rng: random.Random, n: int) -> dict[str, list[str]]:
    ids = [f"n{i}" for i in range(n)]
    return {ids[j]: [ids[i] for i in range(j) if rng.random() < 0.4]
            for j in range(n)}


def test_acceptance_fsm_ordering_random_dags():
    rng = random.Random(2024)
    violations = 0
    for case in range(1000):
        edges = _random_edges(rng, rng.randint(2, 10))
        store = WorkflowStore()
        engine = Orchestrator(store, ScriptedExecutor(),
                              clock=itertools.count(1).__next__,
                              policy=RandomPolicy(rng))
        record = _record(_graph(edges), workflow_id=f"wf-{case}")
        engine.start(record)
        final = engine.run(f"wf-{case}")
        assert final.status is WorkflowStatus.COMPLETED

        succeeded_at: dict[str, int] = {}
        for pos, event in enumerate(final.audit):
            if event.kind != "node_status":
                continue
            if event.to_status == "succeeded":
                succeeded_at[event.task_id] = pos
            elif event.to_status == "running":
                for pred in final.graph.predecessors(event.task_id):
                    if pred not in succeeded_at or succeeded_at[pred] >= pos:
                        violations += 1
    assert violations == 0
    _pass("fsm-ordering-1000-dags")


# -------------------------------------------------------------------------------
# 3. Crash-resume equivalence
# -------------------------------------------------------------------------------

def test_acceptance_crash_resume_equivalence(tmp_path):
    rng = random.Random(77)
    diffs = 0
    for case in range(50):
        edges = _random_edges(rng, rng.randint(3, 8))
        graph_bytes = encode(_graph(edges, graph_id=f"g{case}"))

        base_engine = Orchestrator(WorkflowStore(tmp_path / f"b{case}"),
                                   ScriptedExecutor(),
                                   clock=itertools.count(1).__next__)
        base_engine.start(_record(decode(graph_bytes), workflow_id=f"wf-{case}"))
        baseline = base_engine.run(f"wf-{case}")
        assert baseline.status is WorkflowStatus.COMPLETED

        store_dir = tmp_path / f"p{case}"
        engine = Orchestrator(WorkflowStore(store_dir), ScriptedExecutor(),
                              clock=itertools.count(1).__next__)
        pause_after = rng.randint(0, 2 * len(edges) - 1)
        counter = itertools.count()

        def sink(rec, event, _stop=pause_after, _c=counter):
            if event.kind == "node_status" and next(_c) == _stop:
                rec.paused = True

        engine.on_event = sink
        engine.start(_record(decode(graph_bytes), workflow_id=f"wf-{case}"))
        engine.run(f"wf-{case}")

        resumed_engine = Orchestrator(WorkflowStore(store_dir), ScriptedExecutor(),
                                      clock=itertools.count(1).__next__)
        resumed = resumed_engine.resume(f"wf-{case}")
        assert resumed.status is WorkflowStatus.COMPLETED
        a = {t: r.payload for t, r in baseline.node_outputs.items()}
        b = {t: r.payload for t, r in resumed.node_outputs.items()}
        if a != b:
            diffs += 1
    assert diffs == 0
    _pass("crash-resume-50-workflows")


# -------------------------------------------------------------------------------
# 4. IR oracle equivalence on the seed-7 corpus
# -------------------------------------------------------------------------------

def _oracle_ndcg(ranking, relevant, k):
    dcg = sum((1.0 if r in relevant else 0.0) / math.log2(i + 2)
              for i, r in enumerate(ranking[:k]))
    ideal = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(relevant))))
    return dcg / ideal if ideal > 0 else 0.0


def _oracle_recall(ranking, relevant, k):
    return len(set(ranking[:k]) & relevant) / len(relevant) if relevant else 1.0


def test_acceptance_ir_oracle_equivalence():
    started = time.time()
    corpus = generate_ir_corpus(7, n_agents=200, n_queries=1000)
    report = run_ir_eval(corpus)

    # independent path: cosine from raw token counts, full sort, same tie-break
    from agentmesh.retrieval import _bucket

    def counts(text):
        c = Counter()
        for t in tokens(text):
            c[_bucket(t)] += 1
        return c, math.sqrt(sum(v * v for v in c.values()))

    docs = {m.resource_id: counts(m.search_text()) for m in corpus.manifests}
    sums = {k: 0.0 for k in ("ndcg@1", "ndcg@3", "recall@1", "recall@3", "recall@5")}
    for q in corpus.queries:
        qc, qn = counts(q.text)
        scored = []
        for rid, (dc, dn) in docs.items():
            dot = sum(v * dc[b] for b, v in qc.items())
            # quantized at the same granularity the search path documents,
            # so mathematically equal cosines tie on id in both paths
            scored.append((round(dot / (qn * dn), 12) if qn and dn else 0.0, rid))
        scored.sort(key=lambda p: (-p[0], p[1]))
        ranking = [rid for _, rid in scored[:5]]
        sums["ndcg@1"] += _oracle_ndcg(ranking, q.relevant_ids, 1)
        sums["ndcg@3"] += _oracle_ndcg(ranking, q.relevant_ids, 3)
        sums["recall@1"] += _oracle_recall(ranking, q.relevant_ids, 1)
        sums["recall@3"] += _oracle_recall(ranking, q.relevant_ids, 3)
        sums["recall@5"] += _oracle_recall(ranking, q.relevant_ids, 5)
    n = len(corpus.queries)
    for key, total in sums.items():
        assert abs(report.stage1[key] - total / n) <= 1e-9, key
    elapsed = time.time() - started
    assert elapsed < 60.0, f"IR acceptance took {elapsed:.1f}s"
    _pass(f"ir-oracle-equivalence ({elapsed:.1f}s)")


# -------------------------------------------------------------------------------
# 5. Metric correctness against definitional oracles
# -------------------------------------------------------------------------------

def test_acceptance_metric_correctness():
    rng = random.Random(5)
    for _ in range(1200):
        n = rng.randint(1, 9)
        ids = [f"d{i}" for i in range(n)]
        rng.shuffle(ids)
        grades = {i: rng.choice([0, 0, 1, 2, 3]) for i in ids}
        relevant = {i for i, g in grades.items() if g > 0}
        k = rng.randint(1, n + 2)

        dcg = sum((2 ** grades.get(r, 0) - 1) / math.log2(i + 2)
                  for i, r in enumerate(ids[:k]))
        idcg = sum((2 ** g - 1) / math.log2(i + 2)
                   for i, g in enumerate(sorted(grades.values(), reverse=True)[:k]))
        expected_ndcg = dcg / idcg if idcg > 0 else 0.0
        assert abs(ndcg_at_k(ids, grades, k) - expected_ndcg) <= 1e-12

        expected_recall = (len(set(ids[:k]) & relevant) / len(relevant)
                           if relevant else 1.0)
        assert abs(recall_at_k(ids, relevant, k) - expected_recall) <= 1e-12

    hand = ndcg_at_k(["b", "a", "c"], {"a": 1, "b": 0, "c": 0}, 3)
    assert round(hand, 4) == 0.6309
    _pass("metric-correctness-1200-cases")


# -------------------------------------------------------------------------------
# 6. Planner-eval sanity bounds
# -------------------------------------------------------------------------------

def test_acceptance_planner_eval_bounds():
    cases = generate_cases(7)
    perfect = run_planner_eval(CasePlaybackProvider(cases), cases, repeats=5)
    assert perfect.success_rate == 1.0

    dropper = CasePlaybackProvider(cases, seed=1, mutate=drop_one_task)
    assert run_planner_eval(dropper, cases, repeats=5).success_rate == 0.0

    noisy = CasePlaybackProvider(cases, seed=42,
                                 mutate=drop_one_with_probability(0.25))
    report = run_planner_eval(noisy, cases, repeats=20)
    assert report.trials == 200
    assert report.success_rate == pytest.approx(0.72)  # frozen measurement, seed 42
    assert abs(report.success_rate - 0.75) <= 0.1
    _pass("planner-eval-sanity")


# -------------------------------------------------------------------------------
# 7. LRU pool vs recency-list oracle, 10^5 operations
# -------------------------------------------------------------------------------

def test_acceptance_lru_oracle_100k_ops():
    from test_principal import RecencyOracle

    rng = random.Random(99)
    builtin = make_manifest("builtin", owner_gateway="")
    pool = LocalResourcePool([builtin], capacity=32)
    oracle = RecencyOracle(32)
    keys = [f"r{i}" for i in range(128)]
    manifests = {k: make_manifest(k) for k in keys}
    for _ in range(100_000):
        key = rng.choice(keys)
        if rng.random() < 0.5:
            got = pool.pool_get(key)
            assert (got is not None) == oracle.get(key)
        else:
            pool.pool_put(manifests[key])
            oracle.put(key)
    assert pool.evictions == oracle.evictions
    assert pool.pool_get("builtin") is builtin
    _pass(f"lru-oracle-100k ({len(pool.evictions)} evictions)")


# -------------------------------------------------------------------------------
# 8. Registry/guard safety
# -------------------------------------------------------------------------------

def test_acceptance_registry_guard_safety(tmp_path):
    from agentmesh.retrieval import SearchIndex, retrieve
    from agentmesh.registry import Registry, RegistryError
    from agentmesh.transport import LocalTransport
    from agentmesh.protocol import ok_result

    # (a) interleaved register/validate/suspend/search: suspended never offered
    transport = LocalTransport()
    transport.mount("res", lambda c: ok_result(c.command_id, {"text": "x"}))
    registry = Registry(transport=transport, clock=itertools.count(1).__next__)
    rng = random.Random(4)
    suspended: set[str] = set()
    registered: set[str] = set()
    for step in range(600):
        rid = f"res-{rng.randrange(16)}"
        op = rng.choice(["register", "validate", "suspend", "reinstate", "search"])
        if op == "register" and rid not in registered:
            registry.register(make_manifest(rid, description=f"common words {rid}",
                                            endpoint="local://res"))
            registered.add(rid)
        elif op == "validate" and rid in registered:
            registry.validate(rid)
            suspended.discard(rid)
        elif op == "suspend" and rid in registered:
            registry.suspend(rid, "drill")
            suspended.add(rid)
        elif op == "reinstate" and rid in registered:
            try:
                registry.reinstate(rid)
                suspended.discard(rid)
            except RegistryError:
                pass
        else:
            hits = retrieve(SearchIndex(registry.visible_manifests()),
                            "common words", 10).ids()
            assert not set(hits) & suspended

    # (b) full-stack run: every boundary message screened once per direction,
    #     and the poisoned stub yields exactly one attributed block event
    service, gateways, agents = build_hr_demo(Mode.LLM_AGENT, workflow_dir=tmp_path)
    from agentmesh.planner import Intent
    from agentmesh.cli import HR_DEMO_PREFERENCES
    from agentmesh.agents import FailureMode, StubBehavior

    workflow_id = service.submit_intent(Intent(
        "i-1", "please hire a new ml engineer", "u", "t", Mode.LLM_AGENT,
        preferences=dict(HR_DEMO_PREFERENCES)))
    record = service.approve_graph(workflow_id)
    assert record.status is WorkflowStatus.COMPLETED
    commands = service._workflow_commands[workflow_id]
    principal_dirs: dict[str, list[str]] = {}
    for e in service.guard_log.trace(workflow_id):
        if e.command_id in commands:
            principal_dirs.setdefault(e.command_id, []).append(e.direction.value)
    assert len(principal_dirs) == 5  # five executed commands
    assert all(sorted(v) == ["inbound", "outbound"] for v in principal_dirs.values())
    for g in gateways:
        gateway_dirs: dict[str, list[str]] = {}
        for e in g.guard_events(commands):
            gateway_dirs.setdefault(e.command_id, []).append(e.direction.value)
        assert all(sorted(v) == ["inbound", "outbound"] for v in gateway_dirs.values())
    assert not any(e.decision is Decision.BLOCK
                   for e in service.guard_log.trace(workflow_id))

    # poisoned stub: the schedule_interviews agent starts emitting an injection
    service2, (g1, g2), agents2 = build_hr_demo(Mode.LLM_AGENT)
    poisoned = agents2["schedule_interviews"]
    poisoned.behavior = StubBehavior(failure_mode=FailureMode.POISONED_OUTPUT)
    g1.transport.mount("schedule_interviews", poisoned.handle)
    wf2 = service2.submit_intent(Intent(
        "i-2", "please hire a new ml engineer", "u", "t", Mode.LLM_AGENT,
        preferences=dict(HR_DEMO_PREFERENCES)))
    record2 = service2.approve_graph(wf2)
    assert record2.status is WorkflowStatus.FAILED

    all_blocks = [e for g in (g1, g2) for e in g.guard_events()
                  if e.decision is Decision.BLOCK]
    all_blocks += [e for e in service2.guard_log.all_events()
                   if e.decision is Decision.BLOCK]
    assert len(all_blocks) == 1
    block = all_blocks[0]
    assert block.peer_id == "schedule_interviews"
    assert block.command_id.split(":")[1] == "schedule_interviews"
    assert block.rule_id == "injection.override"

    # blocked payload never reached node_outputs
    result = record2.node_outputs["schedule_interviews"]
    assert result.payload is None
    assert "ignore previous instructions" not in (result.error_message or "")
    for stored in record2.node_outputs.values():
        for value in (stored.payload or {}).values():
            assert "ignore previous instructions" not in str(value)
    _pass("registry-guard-safety")


# -------------------------------------------------------------------------------
# 9. Percentiles and ratings
# -------------------------------------------------------------------------------

def test_acceptance_percentiles_and_ratings():
    rng = random.Random(6)
    for _ in range(500):
        samples = [rng.randint(0, 10_000) for _ in range(rng.randint(1, 200))]
        metrics = ResourceMetrics(latency_samples_ms=list(samples))
        ordered = sorted(samples)
        p50 = ordered[max(1, math.ceil(0.5 * len(ordered))) - 1]
        p90 = ordered[max(1, math.ceil(0.9 * len(ordered))) - 1]
        assert metrics.p50_ms == p50 and metrics.p90_ms == p90
        assert metrics.p50_ms <= metrics.p90_ms

    from agentmesh.gateway import GatewayIdentity

    roster = GatewayRoster(clock=itertools.count(1).__next__)
    roster.add(GatewayIdentity("gw"), object())
    single = roster.update_rating("gw", 1.0)
    assert single == (1 - 0.2) * 0.5 + 0.2 * 1.0  # the exact formula value
    assert single == pytest.approx(0.6, abs=1e-12)

    for _ in range(10_000):
        rating = roster.update_rating("gw", rng.uniform(-1, 2))
        assert 0.0 <= rating <= 1.0
    _pass("percentiles-and-ratings")


# -------------------------------------------------------------------------------
# 10. Protocol golden fixtures and malformed corpus
# -------------------------------------------------------------------------------

def test_acceptance_protocol_round_trip_and_malformed():
    from pathlib import Path

    golden_dir = Path(__file__).parent / "golden"
    for name, build in GOLDEN.items():
        frozen = (golden_dir / f"{name}.json").read_bytes()
        assert encode(build()) == frozen, f"{name} drifted"
        assert encode(decode(frozen)) == frozen
        assert decode(frozen) == build()

    corpus = _mutations(encode(calculator_manifest()))
    corpus += _mutations(encode(sample_query()))
    assert len(corpus) >= 50
    for raw in corpus:
        try:
            decode(raw)
        except ProtocolError:
            continue
        else:
            raise AssertionError(f"malformed input decoded: {raw[:60]!r}")
    _pass(f"protocol-golden-and-malformed ({len(corpus)} malformed cases)")
