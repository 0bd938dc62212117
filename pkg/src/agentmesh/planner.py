"""Intent planning and task-graph composition.

Planning runs a pluggable reasoning provider under one of three control-flow
skeletons: interleaved think/act/observe (the default), one-shot full
planning, and branch-and-score tree exploration (breadth 3, depth 2). Only
the skeletons live here; deterministic scripted providers drive every test,
and a live model can be slotted in behind the same interface.

Composition assigns each agentic task the globally best-scoring resource
across gateway offers and the local pool, deduplicating by resource id
first. The composite score is fixed and documented:

    0.7 * offer score + 0.2 * owner-gateway rating + 0.1 * completion rate
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

from ._util import new_id, tokens
from .protocol import (
    Assignment,
    Mode,
    NodeKind,
    ResourceQuery,
    ScoredManifest,
    TaskGraph,
    TaskNode,
    TaskSpec,
    check_dag,
    validate_tasks,
)

logger = logging.getLogger(__name__)

STEP_BUDGET = 32
MAX_CANDIDATES_PER_PROMPT = 10
MAX_REPLAN_ROUNDS = 3

OFFER_WEIGHT = 0.7
RATING_WEIGHT = 0.2
COMPLETION_WEIGHT = 0.1
LOCAL_POOL_RATING = 1.0  # the local pool has no owning gateway to rate


class PlanAction(str, Enum):
    EMIT_TASK = "emit_task"
    REQUEST_RESOURCES = "request_resources"
    REVISE_PLAN = "revise_plan"
    FINISH = "finish"


@dataclass
class PlanStep:
    step_no: int
    thought: str
    action: PlanAction
    action_payload: dict
    observation: str = ""


@dataclass
class Intent:
    intent_id: str
    text: str
    user_id: str
    tenant_id: str
    mode: Mode
    preferences: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("intent text must be non-empty")


class PlanningError(Exception):
    def __init__(self, code: str, message: str | None = None, cycle: list[str] | None = None):
        super().__init__(message or code)
        self.code = code
        self.cycle = cycle or []


@dataclass
class ProviderAction:
    thought: str
    action: PlanAction
    payload: dict = field(default_factory=dict)


class ReasoningProvider:
    """Base reasoning provider; subclasses supply the actual decisions.

    ``next_action`` must be a pure function of (prompt, trace) for a
    deterministic provider.
    """

    name = "base"
    deterministic = True

    def next_action(self, prompt: str, trace: Sequence[PlanStep]) -> ProviderAction:
        raise NotImplementedError

    def full_plan(self, prompt: str) -> list[ProviderAction]:
        """One-shot planning; default drives next_action to a finish."""
        actions: list[ProviderAction] = []
        trace: list[PlanStep] = []
        for step_no in range(1, STEP_BUDGET + 1):
            action = self.next_action(prompt, trace)
            actions.append(action)
            trace.append(PlanStep(step_no, action.thought, action.action, action.payload))
            if action.action is PlanAction.FINISH:
                break
        return actions

    def propose_branches(self, prompt: str, trace: Sequence[PlanStep],
                         breadth: int) -> list[ProviderAction]:
        return [self.next_action(prompt, trace)]

    def score_branch(self, prompt: str, trace: Sequence[PlanStep]) -> float:
        return 0.5


class ScriptedProvider(ReasoningProvider):
    """Replays canned step scripts keyed by intent keywords.

    Script documents map match tokens to an ordered action list; the first
    plan whose tokens all appear in the prompt wins. See
    ``data/scripts/*.json`` for the shipped scripts.
    """

    deterministic = True

    def __init__(self, doc: dict):
        self.name = doc.get("name", "scripted")
        self._plans = doc["plans"]

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedProvider":
        return cls(json.loads(Path(path).read_text("utf-8")))

    def _script_for(self, prompt: str) -> list[dict]:
        words = set(tokens(prompt))
        for plan in self._plans:
            needed = set(plan.get("match_tokens", []))
            if needed and needed <= words:
                return plan["steps"]
        for plan in self._plans:
            if not plan.get("match_tokens"):
                return plan["steps"]
        raise PlanningError("provider_failure", f"no script matches prompt: {prompt[:80]!r}")

    def next_action(self, prompt: str, trace: Sequence[PlanStep]) -> ProviderAction:
        steps = self._script_for(prompt)
        index = len(trace)
        if index >= len(steps):
            return ProviderAction("script exhausted", PlanAction.FINISH)
        raw = steps[index]
        return ProviderAction(
            thought=raw.get("thought", ""),
            action=PlanAction(raw["action"]),
            payload=raw.get("payload", {}),
        )

    def propose_branches(self, prompt, trace, breadth):
        steps = self._script_for(prompt)
        index = len(trace)
        if index >= len(steps):
            return [ProviderAction("script exhausted", PlanAction.FINISH)]
        raw = steps[index]
        branches = raw.get("branches")
        if not branches:
            return [self.next_action(prompt, trace)]
        return [
            ProviderAction(b.get("thought", ""), PlanAction(b["action"]), b.get("payload", {}))
            for b in branches[:breadth]
        ]

    def score_branch(self, prompt, trace):
        if trace and "score" in trace[-1].action_payload:
            return float(trace[-1].action_payload["score"])
        return 0.5


def load_packaged_scripts(*names: str) -> ScriptedProvider:
    """Build one scripted provider from bundled script files under data/scripts."""
    from importlib import resources

    plans: list[dict] = []
    labels = []
    for name in names:
        doc = json.loads(
            resources.files("agentmesh.data.scripts").joinpath(name).read_text("utf-8"))
        plans.extend(doc["plans"])
        labels.append(doc.get("name", name))
    return ScriptedProvider({"name": "+".join(labels), "plans": plans})


@dataclass
class PlanOutcome:
    tasks: list[TaskSpec]
    trace: list[PlanStep]
    task_inputs: dict[str, dict] = field(default_factory=dict)


Strategy = str  # "react" | "rewoo" | "tot"


def plan(
    intent: Intent,
    provider: ReasoningProvider,
    strategy: Strategy = "react",
    *,
    step_budget: int = STEP_BUDGET,
    scratchpad: Callable[[PlanStep], None] | None = None,
) -> PlanOutcome:
    """Turn an intent into a validated task list plus the reasoning trace."""
    if intent.mode is Mode.NO_LLM:
        raise PlanningError("mode", "no_llm workflows are authored by hand, not planned")

    prompt = _plan_prompt(intent)
    trace: list[PlanStep] = []
    tasks: list[TaskSpec] = []
    task_inputs: dict[str, dict] = {}
    finished = False

    def record(action: ProviderAction, observation: str) -> None:
        step = PlanStep(len(trace) + 1, action.thought, action.action,
                        action.payload, observation)
        trace.append(step)
        if scratchpad is not None:
            scratchpad(step)

    def apply(action: ProviderAction) -> str:
        nonlocal finished
        if action.action is PlanAction.EMIT_TASK:
            spec, inputs = _parse_task(action.payload)
            tasks.append(spec)
            if inputs:
                task_inputs[spec.task_id] = inputs
            return f"task {spec.task_id} recorded"
        if action.action is PlanAction.REVISE_PLAN:
            dropped = [tid for tid in action.payload.get("drop", [])]
            tasks[:] = [t for t in tasks if t.task_id not in dropped]
            task_inputs_keys = set(task_inputs) - set(dropped)
            for tid in list(task_inputs):
                if tid not in task_inputs_keys:
                    del task_inputs[tid]
            return f"dropped {len(dropped)} task(s)"
        if action.action is PlanAction.REQUEST_RESOURCES:
            return "resource requests happen after composition"
        finished = True
        return "plan complete"

    if strategy == "rewoo":
        try:
            actions = provider.full_plan(prompt)
        except PlanningError:
            raise
        except Exception as exc:
            raise PlanningError("provider_failure", str(exc)) from exc
        if len(actions) > step_budget:
            raise PlanningError("step_budget_exceeded", f"{len(actions)} steps > {step_budget}")
        for action in actions:
            record(action, apply(action))
            if finished:
                break
    else:
        tot_depth = 2 if strategy == "tot" else 0
        for step_no in range(step_budget):
            try:
                if step_no < tot_depth:
                    action = _best_branch(provider, prompt, trace)
                else:
                    action = provider.next_action(prompt, trace)
            except PlanningError:
                raise
            except Exception as exc:
                raise PlanningError("provider_failure", str(exc)) from exc
            record(action, apply(action))
            if finished:
                break
        if not finished:
            raise PlanningError("step_budget_exceeded",
                                f"no finish within {step_budget} steps")

    if not tasks:
        raise PlanningError("empty_plan", "provider finished without emitting tasks")
    violations = validate_tasks(tasks)
    if violations:
        raise PlanningError("provider_failure", "invalid task list: " + "; ".join(violations))
    cycle = check_dag(tasks)
    if not cycle.ok:
        raise PlanningError("cycle", f"task dependencies form a cycle: {cycle.cycle}",
                            cycle=cycle.cycle)
    return PlanOutcome(tasks=tasks, trace=trace, task_inputs=task_inputs)


def _best_branch(provider: ReasoningProvider, prompt: str,
                 trace: list[PlanStep]) -> ProviderAction:
    """Breadth-3 branch-and-score step for tree-style exploration."""
    branches = provider.propose_branches(prompt, trace, breadth=3)
    if not branches:
        raise PlanningError("provider_failure", "provider proposed no branches")
    best, best_score = None, float("-inf")
    for candidate in branches:
        hypothetical = trace + [PlanStep(len(trace) + 1, candidate.thought,
                                         candidate.action, candidate.payload)]
        score = provider.score_branch(prompt, hypothetical)
        if score > best_score:
            best, best_score = candidate, score
    return best


def _plan_prompt(intent: Intent) -> str:
    prefs = "; ".join(f"{k}={v}" for k, v in sorted(intent.preferences.items()))
    return f"{intent.text}\npreferences: {prefs}" if prefs else intent.text


def _parse_task(payload: dict) -> tuple[TaskSpec, dict]:
    try:
        spec = TaskSpec(
            task_id=payload["task_id"],
            description=payload["description"],
            depends_on=list(payload.get("depends_on", [])),
            node_kind=NodeKind(payload.get("node_kind", "agentic")),
        )
    except (KeyError, ValueError) as exc:
        raise PlanningError("provider_failure", f"bad emit_task payload: {exc}") from exc
    return spec, dict(payload.get("inputs", {}))


# --- composition ---------------------------------------------------------------


@dataclass
class Candidate:
    resource_id: str
    endpoint: str
    gateway_id: str  # "" for local pool
    offer_score: float
    rating: float
    completion_rate: float

    @property
    def composite(self) -> float:
        return (OFFER_WEIGHT * self.offer_score
                + RATING_WEIGHT * self.rating
                + COMPLETION_WEIGHT * self.completion_rate)


@dataclass
class ComposeResult:
    graph: TaskGraph
    unassigned: list[str]
    considered: dict[str, list[Candidate]]  # per task, capped candidate slate


def compose(
    tasks: Sequence[TaskSpec],
    offers: Sequence,
    local_hits: dict[str, ScoredManifest] | None = None,
    *,
    ratings: dict[str, float] | None = None,
    preassigned: dict[str, Assignment] | None = None,
    task_inputs: dict[str, dict] | None = None,
    mode: Mode = Mode.LLM_AGENT,
    graph_id: str | None = None,
    gate_tasks: list[str] | None = None,
) -> ComposeResult:
    """Assign resources to tasks and build the executable graph.

    Gateway offers and local-pool hits compete on the composite score after
    per-resource deduplication; non-agentic tasks take only explicit
    pre-assignments. Tasks left without any candidate are reported for the
    re-plan loop.
    """
    dag = check_dag(list(tasks))
    if not dag.ok:
        raise PlanningError("cycle", f"cannot compose cyclic tasks: {dag.cycle}", cycle=dag.cycle)
    ratings = ratings or {}
    local_hits = local_hits or {}
    preassigned = preassigned or {}
    task_inputs = task_inputs or {}

    per_task: dict[str, list[Candidate]] = {t.task_id: [] for t in tasks}
    for offer in offers:
        for tid, scored_list in offer.per_task.items():
            if tid not in per_task:
                continue
            for scored in scored_list:
                m = scored.manifest
                per_task[tid].append(Candidate(
                    resource_id=m.resource_id,
                    endpoint=m.endpoint,
                    gateway_id=m.owner_gateway,
                    offer_score=scored.score,
                    rating=ratings.get(m.owner_gateway, 0.5),
                    completion_rate=m.metrics.completion_rate,
                ))
    for tid, scored in local_hits.items():
        if tid in per_task:
            m = scored.manifest
            # cached gateway references keep their provenance; builtins are ""
            per_task[tid].append(Candidate(
                resource_id=m.resource_id,
                endpoint=m.endpoint,
                gateway_id=m.owner_gateway,
                offer_score=scored.score,
                rating=ratings.get(m.owner_gateway, LOCAL_POOL_RATING)
                if m.owner_gateway else LOCAL_POOL_RATING,
                completion_rate=m.metrics.completion_rate,
            ))

    considered: dict[str, list[Candidate]] = {}
    nodes: list[TaskNode] = []
    unassigned: list[str] = []
    for t in tasks:
        node = TaskNode(spec=t, inputs=dict(task_inputs.get(t.task_id, {})))
        if t.task_id in preassigned:
            node.assignment = preassigned[t.task_id]
        elif t.node_kind is NodeKind.AGENTIC:
            slate = _dedup_rank(per_task[t.task_id])[:MAX_CANDIDATES_PER_PROMPT]
            considered[t.task_id] = slate
            if slate:
                best = slate[0]
                node.assignment = Assignment(best.resource_id, best.endpoint, best.gateway_id)
            else:
                unassigned.append(t.task_id)
        nodes.append(node)

    graph = TaskGraph(graph_id=graph_id or new_id("g"), nodes=nodes, mode=mode,
                      gate_tasks=gate_tasks)
    return ComposeResult(graph=graph, unassigned=unassigned, considered=considered)


def _dedup_rank(candidates: list[Candidate]) -> list[Candidate]:
    """Best instance per resource_id, ranked composite > rating > id."""
    ordered = sorted(candidates,
                     key=lambda c: (-c.composite, -c.rating, c.resource_id, c.gateway_id))
    seen: set[str] = set()
    out = []
    for c in ordered:
        if c.resource_id in seen:
            continue
        seen.add(c.resource_id)
        out.append(c)
    return out


def replan(
    graph: TaskGraph,
    unassigned: Sequence[str],
    provider: ReasoningProvider | None = None,
    *,
    round_no: int,
    context_summary: str = "",
    max_rounds: int = MAX_REPLAN_ROUNDS,
    query_id: str | None = None,
) -> ResourceQuery:
    """Narrow a follow-up query to the still-unassigned tasks.

    ``round_no`` is 1-based; exceeding ``max_rounds`` fails the workflow with
    an explicit unfulfilled report rather than retrying forever. The provider
    is accepted for strategies that rewrite task descriptions between rounds;
    the shipped providers leave them unchanged.
    """
    if not unassigned:
        raise ValueError("replan requires at least one unassigned task")
    if round_no > max_rounds:
        raise PlanningError(
            "replan_budget_exhausted",
            f"unfulfilled after {max_rounds} rounds: {sorted(unassigned)}")
    wanted = set(unassigned)
    subtasks = [n.spec for n in graph.nodes if n.spec.task_id in wanted]
    return ResourceQuery(
        query_id=query_id or new_id("q"),
        subtasks=subtasks,
        context_summary=context_summary,
    )
