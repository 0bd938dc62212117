"""Task-graph execution as a finite state machine.

One engine owns many workflows; within a workflow every state mutation goes
through this module, is audited exactly once, and is snapshotted to disk, so
a paused or crashed workflow resumes from its exact frontier. Execution is
modeled as start/deliver events: starting a node produces its result eagerly
(executors are synchronous at desk scale) but delivery is a separate step,
which lets tests interleave completions in any order while the dependency
rules stay enforced.

Failure handling per node: one re-execution against the same resource, then
one substitute found through the recovery hook (spending re-plan budget),
then the node and the workflow fail with an explicit unfulfilled report.
"""
from __future__ import annotations

import json
import logging
import random
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Protocol

from ._util import now_ms, write_json_atomic
from .protocol import (
    Assignment,
    ExecutionCommand,
    ExecutionResult,
    Mode,
    NodeKind,
    NodeStatus,
    Outcome,
    TaskGraph,
    check_dag,
    error_result,
    from_payload,
    ok_result,
    to_payload,
    validate_tasks,
)

logger = logging.getLogger(__name__)

DEFAULT_NODE_DEADLINE_MS = 30_000
MAX_PARALLEL_NODES = 4
SNAPSHOT_VERSION = 1


class WorkflowStatus(str, Enum):
    COMPOSING = "composing"
    RUNNING = "running"
    AWAITING_HUMAN = "awaiting_human"
    FAILED = "failed"
    COMPLETED = "completed"


class GateChoice(str, Enum):
    APPROVE = "approve"
    REJECT = "reject"
    EDIT = "edit"


class OrchestratorError(Exception):
    def __init__(self, code: str, message: str | None = None):
        super().__init__(message or code)
        self.code = code


@dataclass
class AuditEvent:
    at: int
    kind: str  # node_status | workflow_status | retry | recovery | gate_decision | ...
    task_id: str | None = None
    from_status: str | None = None
    to_status: str | None = None
    detail: str = ""
    actor: str = ""

    def to_dict(self) -> dict:
        return {"at": self.at, "kind": self.kind, "task_id": self.task_id,
                "from": self.from_status, "to": self.to_status,
                "detail": self.detail, "actor": self.actor}


@dataclass
class GateDecision:
    workflow_id: str
    task_id: str
    decision: GateChoice
    actor: str = ""
    note: str = ""
    inputs: dict[str, Any] = field(default_factory=dict)  # for edit


@dataclass
class WorkflowRecord:
    """Persistent global state of one workflow."""

    workflow_id: str
    tenant_id: str
    user_id: str
    intent_id: str
    intent_text: str
    graph: TaskGraph | None  # None only while composition is in progress
    preferences: dict[str, str] = field(default_factory=dict)
    node_outputs: dict[str, ExecutionResult] = field(default_factory=dict)
    pending_gates: list[str] = field(default_factory=list)
    decided_gates: list[str] = field(default_factory=list)
    audit: list[AuditEvent] = field(default_factory=list)
    status: WorkflowStatus = WorkflowStatus.COMPOSING
    graph_approved: bool = False
    paused: bool = False
    replan_rounds_used: int = 0
    node_attempts: dict[str, int] = field(default_factory=dict)
    node_recovered: dict[str, bool] = field(default_factory=dict)
    failure_reason: str | None = None
    unfulfilled: list[str] = field(default_factory=list)
    created_at: int = 0
    updated_at: int = 0

    def node(self, task_id: str):
        return self.graph.node(task_id)

    def gateway_of(self, task_id: str) -> str | None:
        node = self.node(task_id)
        return node.assignment.gateway_id if node.assignment else None


# --- persistence -------------------------------------------------------------


class WorkflowStore:
    """One JSON snapshot file per workflow, written on every transition."""

    def __init__(self, directory: str | Path | None = None):
        self._dir = Path(directory) if directory else None
        if self._dir:
            self._dir.mkdir(parents=True, exist_ok=True)

    def path_for(self, workflow_id: str) -> Path | None:
        return self._dir / f"{workflow_id}.json" if self._dir else None

    def save(self, record: WorkflowRecord) -> None:
        path = self.path_for(record.workflow_id)
        if path is None:
            return
        write_json_atomic(path, {"v": SNAPSHOT_VERSION, "record": _record_to_dict(record)})

    def load(self, workflow_id: str) -> WorkflowRecord:
        path = self.path_for(workflow_id)
        if path is None or not path.exists():
            raise OrchestratorError("unknown_workflow", f"no snapshot for {workflow_id}")
        try:
            doc = json.loads(path.read_text("utf-8"))
            if doc.get("v") != SNAPSHOT_VERSION:
                raise ValueError(f"unsupported snapshot version {doc.get('v')}")
            return _record_from_dict(doc["record"])
        except OrchestratorError:
            raise
        except Exception as exc:
            raise OrchestratorError("corrupt_snapshot",
                                    f"cannot load {workflow_id}: {exc}") from exc

    def list_ids(self) -> list[str]:
        if not self._dir:
            return []
        return sorted(p.stem for p in self._dir.glob("*.json"))


def _record_to_dict(r: WorkflowRecord) -> dict:
    return {
        "workflow_id": r.workflow_id,
        "tenant_id": r.tenant_id,
        "user_id": r.user_id,
        "intent_id": r.intent_id,
        "intent_text": r.intent_text,
        "preferences": dict(r.preferences),
        "graph": None if r.graph is None else to_payload(r.graph),
        "node_outputs": {tid: to_payload(res) for tid, res in r.node_outputs.items()},
        "pending_gates": list(r.pending_gates),
        "decided_gates": list(r.decided_gates),
        "audit": [e.to_dict() for e in r.audit],
        "status": r.status.value,
        "graph_approved": r.graph_approved,
        "paused": r.paused,
        "replan_rounds_used": r.replan_rounds_used,
        "node_attempts": dict(r.node_attempts),
        "node_recovered": dict(r.node_recovered),
        "failure_reason": r.failure_reason,
        "unfulfilled": list(r.unfulfilled),
        "created_at": r.created_at,
        "updated_at": r.updated_at,
    }


def _record_from_dict(d: dict) -> WorkflowRecord:
    return WorkflowRecord(
        workflow_id=d["workflow_id"],
        tenant_id=d["tenant_id"],
        user_id=d["user_id"],
        intent_id=d["intent_id"],
        intent_text=d["intent_text"],
        preferences=dict(d["preferences"]),
        graph=None if d["graph"] is None else from_payload("task_graph", d["graph"]),
        node_outputs={tid: from_payload("execution_result", res)
                      for tid, res in d["node_outputs"].items()},
        pending_gates=list(d["pending_gates"]),
        decided_gates=list(d["decided_gates"]),
        audit=[AuditEvent(e["at"], e["kind"], e["task_id"], e["from"], e["to"],
                          e["detail"], e["actor"]) for e in d["audit"]],
        status=WorkflowStatus(d["status"]),
        graph_approved=d["graph_approved"],
        paused=d["paused"],
        replan_rounds_used=d["replan_rounds_used"],
        node_attempts=dict(d["node_attempts"]),
        node_recovered=dict(d["node_recovered"]),
        failure_reason=d["failure_reason"],
        unfulfilled=list(d["unfulfilled"]),
        created_at=d["created_at"],
        updated_at=d["updated_at"],
    )


# --- execution hooks -----------------------------------------------------------


class Executor(Protocol):
    def execute(self, record: WorkflowRecord, command: ExecutionCommand) -> ExecutionResult: ...


RecoveryFn = Callable[[WorkflowRecord, str], Assignment | None]
OutputCheck = Callable[[dict], str | None]
EventSink = Callable[[WorkflowRecord, AuditEvent], None]


class DispatchPolicy(Protocol):
    def choose(self, starts: list[str], deliveries: list[str]) -> tuple[str, str]: ...


class FifoPolicy:
    """Start ready nodes in task order, then deliver results in FIFO order."""

    def choose(self, starts, deliveries):
        if starts:
            return "start", sorted(starts)[0]
        return "deliver", deliveries[0]


class RandomPolicy:
    """Interleaves starts and deliveries pseudo-randomly (tests)."""

    def __init__(self, rng: random.Random):
        self.rng = rng

    def choose(self, starts, deliveries):
        options = [("start", t) for t in sorted(starts)]
        options += [("deliver", t) for t in deliveries]
        return self.rng.choice(options)


@dataclass
class _InFlight:
    task_id: str
    command_id: str
    result: ExecutionResult


# --- the engine ------------------------------------------------------------------


class Orchestrator:
    def __init__(
        self,
        store: WorkflowStore,
        executor: Executor,
        *,
        recovery: RecoveryFn | None = None,
        output_checks: dict[str, OutputCheck] | None = None,
        clock: Callable[[], int] = now_ms,
        deadline_ms: int = DEFAULT_NODE_DEADLINE_MS,
        max_parallel: int = MAX_PARALLEL_NODES,
        policy: DispatchPolicy | None = None,
        on_event: EventSink | None = None,
    ):
        self.store = store
        self.executor = executor
        self.recovery = recovery
        self.output_checks = output_checks or {}
        self.clock = clock
        self.deadline_ms = deadline_ms
        self.max_parallel = max_parallel
        self.policy = policy or FifoPolicy()
        self.on_event = on_event
        self._records: dict[str, WorkflowRecord] = {}
        self._in_flight: dict[str, list[_InFlight]] = {}
        self._lock = threading.RLock()

    # -- record access ---------------------------------------------------------

    def get(self, workflow_id: str) -> WorkflowRecord:
        record = self._records.get(workflow_id)
        if record is None:
            record = self.store.load(workflow_id)  # raises unknown_workflow
            self._records[workflow_id] = record
        return record

    def track(self, record: WorkflowRecord) -> WorkflowRecord:
        self._records[record.workflow_id] = record
        self._persist(record)
        return record

    # -- audit helpers ------------------------------------------------------------

    def _stamp(self, record: WorkflowRecord) -> int:
        at = self.clock()
        if record.audit and at < record.audit[-1].at:
            at = record.audit[-1].at
        return at

    def _audit(self, record: WorkflowRecord, event: AuditEvent) -> None:
        record.audit.append(event)
        if self.on_event is not None:
            self.on_event(record, event)

    def _set_node_status(self, record: WorkflowRecord, task_id: str,
                         to: NodeStatus, detail: str = "") -> None:
        node = record.node(task_id)
        if node.status is to:
            return
        was = node.status
        node.status = to  # mutate first so event sinks observe consistent state
        self._audit(record, AuditEvent(
            self._stamp(record), "node_status", task_id, was.value, to.value, detail))

    def _set_workflow_status(self, record: WorkflowRecord, to: WorkflowStatus,
                             detail: str = "") -> None:
        if record.status is to:
            return
        was = record.status
        record.status = to
        self._audit(record, AuditEvent(
            self._stamp(record), "workflow_status", None, was.value, to.value, detail))

    def _persist(self, record: WorkflowRecord) -> None:
        record.updated_at = self.clock()
        self.store.save(record)

    # -- lifecycle ----------------------------------------------------------------

    def start(self, record: WorkflowRecord) -> WorkflowRecord:
        """Validate and dispatch the dependency-free frontier."""
        with self._lock:
            self._validate_graph(record)
            if record.graph.mode is not Mode.NO_LLM and not record.graph_approved:
                raise OrchestratorError("not_approved",
                                        "composed graph needs user approval before start")
            self._records[record.workflow_id] = record
            self._in_flight.setdefault(record.workflow_id, [])
            if record.created_at == 0:
                record.created_at = self.clock()
            self._set_workflow_status(record, WorkflowStatus.RUNNING, "started")
            for task_id in self._ready_to_start(record):
                self._start_node(record, task_id)
            self._persist(record)
        return record

    def _validate_graph(self, record: WorkflowRecord) -> None:
        specs = [n.spec for n in record.graph.nodes]
        violations = validate_tasks(specs)
        cycle = check_dag(specs)
        if violations or not cycle.ok:
            raise OrchestratorError(
                "invalid_graph",
                "; ".join(violations) or f"cycle: {cycle.cycle}")
        for node in record.graph.nodes:
            if node.spec.node_kind is NodeKind.AGENTIC and node.assignment is None:
                raise OrchestratorError(
                    "unassigned_node",
                    f"node {node.spec.task_id} has no assigned resource")

    def run_no_llm(self, graph: TaskGraph, *, tenant_id: str = "", user_id: str = "",
                   workflow_id: str | None = None) -> WorkflowRecord:
        """Execute a hand-authored graph: no planner, no approval step."""
        if graph.mode is not Mode.NO_LLM:
            raise OrchestratorError("invalid_graph", "run_no_llm expects a no_llm graph")
        record = WorkflowRecord(
            workflow_id=workflow_id or f"wf-{graph.graph_id}",
            tenant_id=tenant_id, user_id=user_id,
            intent_id="", intent_text=f"hand-authored graph {graph.graph_id}",
            graph=graph,
        )
        self.start(record)
        return self.run(record.workflow_id)

    # -- the event loop ---------------------------------------------------------------

    def run(self, workflow_id: str) -> WorkflowRecord:
        """Process start/deliver events until blocked or terminal."""
        with self._lock:
            record = self.get(workflow_id)
            while True:
                if record.paused:
                    break
                starts = self._ready_to_start(record)
                deliveries = self._in_flight.get(workflow_id, [])
                can_start = (record.status in (WorkflowStatus.RUNNING,
                                               WorkflowStatus.AWAITING_HUMAN)
                             and len(deliveries) < self.max_parallel)
                start_options = starts if can_start else []
                if not start_options and not deliveries:
                    break
                kind, task_id = self.policy.choose(
                    start_options, [f.task_id for f in deliveries])
                if kind == "start":
                    self._start_node(record, task_id)
                else:
                    flight = next(f for f in deliveries if f.task_id == task_id)
                    deliveries.remove(flight)
                    self._apply_result(record, flight.task_id, flight.result,
                                       flight.command_id)
            self._persist(record)
            return record

    def _ready_to_start(self, record: WorkflowRecord) -> list[str]:
        if record.status not in (WorkflowStatus.RUNNING, WorkflowStatus.AWAITING_HUMAN):
            return []
        in_flight_ids = {f.task_id for f in self._in_flight.get(record.workflow_id, [])}
        ready = []
        for node in record.graph.nodes:
            if node.status is not NodeStatus.PENDING:
                continue
            if node.spec.task_id in in_flight_ids:
                continue
            preds = record.graph.predecessors(node.spec.task_id)
            if all(record.node(p).status is NodeStatus.SUCCEEDED for p in preds):
                ready.append(node.spec.task_id)
        return ready

    def _gate_required(self, record: WorkflowRecord, task_id: str) -> bool:
        node = record.node(task_id)
        if node.spec.node_kind is NodeKind.HUMAN_GATE:
            return True
        if record.graph.mode is not Mode.COPILOT:
            return False
        if node.spec.node_kind is not NodeKind.AGENTIC:
            return False
        gated = record.graph.gate_tasks
        return gated is None or task_id in gated

    def _start_node(self, record: WorkflowRecord, task_id: str) -> None:
        if self._gate_required(record, task_id) and task_id not in record.decided_gates:
            self._set_node_status(record, task_id, NodeStatus.AWAITING_APPROVAL)
            record.pending_gates.append(task_id)
            self._set_workflow_status(record, WorkflowStatus.AWAITING_HUMAN,
                                      f"gate pending for {task_id}")
            self._persist(record)
            return
        self._dispatch(record, task_id)

    def _dispatch(self, record: WorkflowRecord, task_id: str) -> None:
        node = record.node(task_id)
        attempt = record.node_attempts.get(task_id, 0)
        command_id = f"{record.workflow_id}:{task_id}:{attempt}"
        self._set_node_status(record, task_id, NodeStatus.RUNNING)
        self._persist(record)

        inputs, unresolved = resolve_inputs(node.inputs, record)
        if unresolved:
            result = error_result(command_id, f"unresolved input reference: {unresolved}")
        elif node.assignment is None:
            # unassigned gate/no_llm nodes complete as deterministic
            # pass-throughs: the step itself happens outside the system
            marker = ("gate", "approved") if node.spec.node_kind is NodeKind.HUMAN_GATE \
                else ("handled_by", "external_process")
            result = ok_result(command_id, {**inputs, marker[0]: marker[1]})
        else:
            command = ExecutionCommand(
                command_id=command_id,
                resource_id=node.assignment.resource_id,
                endpoint=node.assignment.endpoint,
                inputs=inputs,
                deadline_ms=self.deadline_ms,
            )
            try:
                result = self.executor.execute(record, command)
            except Exception as exc:  # executor contract breach; treat as node error
                logger.exception("executor raised for %s", command_id)
                result = error_result(command_id, f"executor failure: {exc}")
        self._in_flight[record.workflow_id].append(_InFlight(task_id, command_id, result))

    # -- results ---------------------------------------------------------------------

    def on_result(self, workflow_id: str, task_id: str, result: ExecutionResult) -> WorkflowRecord:
        """External result delivery; stale results are logged and ignored."""
        with self._lock:
            record = self.get(workflow_id)
            self._apply_result(record, task_id, result, result.command_id)
            self._persist(record)
            return record

    def _expected_command(self, record: WorkflowRecord, task_id: str) -> str:
        attempt = record.node_attempts.get(task_id, 0)
        return f"{record.workflow_id}:{task_id}:{attempt}"

    def _apply_result(self, record: WorkflowRecord, task_id: str,
                      result: ExecutionResult, command_id: str) -> None:
        try:
            node = record.node(task_id)
        except KeyError:
            self._audit(record, AuditEvent(self._stamp(record), "stale_result", task_id,
                                           detail=f"unknown task for {command_id}"))
            return
        if node.status is not NodeStatus.RUNNING or \
                command_id != self._expected_command(record, task_id):
            self._audit(record, AuditEvent(self._stamp(record), "stale_result", task_id,
                                           detail=f"ignoring {command_id}"))
            return

        if result.outcome is Outcome.OK:
            check = self.output_checks.get(task_id)
            violation = check(result.payload) if check else None
            if violation:
                result = error_result(command_id, f"output check failed: {violation}",
                                      result.elapsed_ms)
            else:
                record.node_outputs[task_id] = result
                self._set_node_status(record, task_id, NodeStatus.SUCCEEDED)
                self._maybe_complete(record)
                self._persist(record)
                return

        # failure path: retry same resource once, then substitute, then fail;
        # guard-blocked output is deterministic, so the same-resource retry
        # is skipped for it
        guard_blocked = (result.error_message or "").startswith("blocked_")
        attempts = record.node_attempts.get(task_id, 0)
        record.node_attempts[task_id] = attempts + 1
        if attempts == 0 and not guard_blocked:
            self._audit(record, AuditEvent(
                self._stamp(record), "retry", task_id,
                detail=f"re-executing on same resource after: {result.error_message}"))
            self._persist(record)
            self._dispatch(record, task_id)
            return
        if not record.node_recovered.get(task_id) and self.recovery is not None:
            record.node_recovered[task_id] = True
            substitute = self.recovery(record, task_id)
            if substitute is not None:
                node.assignment = substitute
                self._audit(record, AuditEvent(
                    self._stamp(record), "recovery", task_id,
                    detail=f"substitute {substitute.resource_id} from "
                           f"{substitute.gateway_id or 'local pool'}"))
                self._persist(record)
                self._dispatch(record, task_id)
                return
        record.node_outputs[task_id] = result
        self._set_node_status(record, task_id, NodeStatus.FAILED,
                              result.error_message or "")
        self._fail_workflow(record, f"node {task_id} failed: {result.error_message}",
                            unfulfilled=[task_id])

    def _maybe_complete(self, record: WorkflowRecord) -> None:
        done = all(n.status in (NodeStatus.SUCCEEDED, NodeStatus.SKIPPED)
                   for n in record.graph.nodes)
        if done:
            self._set_workflow_status(record, WorkflowStatus.COMPLETED)

    def _fail_workflow(self, record: WorkflowRecord, reason: str,
                       unfulfilled: list[str] | None = None) -> None:
        record.failure_reason = reason
        for tid in unfulfilled or []:
            if tid not in record.unfulfilled:
                record.unfulfilled.append(tid)
        # a failed workflow has no live gates (awaiting_human <=> gates pending)
        record.pending_gates.clear()
        self._set_workflow_status(record, WorkflowStatus.FAILED, reason)
        self._persist(record)

    # -- gates ------------------------------------------------------------------------

    def decide_gate(self, decision: GateDecision) -> WorkflowRecord:
        with self._lock:
            record = self.get(decision.workflow_id)
            task_id = decision.task_id
            if task_id not in record.pending_gates:
                if task_id in record.decided_gates:
                    raise OrchestratorError("decision_conflict",
                                            f"gate {task_id} already decided")
                raise OrchestratorError("no_such_gate", f"no pending gate for {task_id}")
            record.pending_gates.remove(task_id)
            record.decided_gates.append(task_id)
            self._audit(record, AuditEvent(
                self._stamp(record), "gate_decision", task_id,
                detail=f"{decision.decision.value}: {decision.note}", actor=decision.actor))

            if decision.decision is GateChoice.REJECT:
                self._set_node_status(record, task_id, NodeStatus.FAILED,
                                      f"rejected by {decision.actor}: {decision.note}")
                self._fail_workflow(record, f"gate {task_id} rejected", [task_id])
                return record

            if decision.decision is GateChoice.EDIT:
                node = record.node(task_id)
                node.inputs = {**node.inputs, **decision.inputs}
                self._audit(record, AuditEvent(
                    self._stamp(record), "inputs_overridden", task_id,
                    detail=json.dumps(decision.inputs, sort_keys=True), actor=decision.actor))

            if not record.pending_gates:
                self._set_workflow_status(record, WorkflowStatus.RUNNING,
                                          "gates cleared")
            self._dispatch(record, task_id)
            self._persist(record)
        return self.run(decision.workflow_id)

    # -- pause / resume -----------------------------------------------------------------

    def pause(self, workflow_id: str) -> WorkflowRecord:
        with self._lock:
            record = self.get(workflow_id)
            if record.status not in (WorkflowStatus.RUNNING, WorkflowStatus.AWAITING_HUMAN):
                raise OrchestratorError("invalid_state",
                                        f"cannot pause a {record.status.value} workflow")
            record.paused = True
            self._audit(record, AuditEvent(self._stamp(record), "paused"))
            # undelivered results are dropped; their nodes re-execute on resume
            self._in_flight.get(workflow_id, []).clear()
            self._persist(record)
            return record

    def resume(self, workflow_id: str) -> WorkflowRecord:
        with self._lock:
            record = self._records.get(workflow_id)
            if record is None:
                record = self.store.load(workflow_id)
                self._records[workflow_id] = record
            self._in_flight.setdefault(workflow_id, [])
            if record.status in (WorkflowStatus.COMPLETED, WorkflowStatus.FAILED):
                return record  # resume of a terminal workflow is a no-op
            if record.paused:
                record.paused = False
                self._audit(record, AuditEvent(self._stamp(record), "resumed"))
            for node in record.graph.nodes:
                started_not_finished = (node.status is NodeStatus.RUNNING
                                        and node.spec.task_id not in record.node_outputs)
                if started_not_finished:
                    self._set_node_status(record, node.spec.task_id, NodeStatus.PENDING,
                                          "reset on resume; result was never delivered")
            self._persist(record)
        return self.run(workflow_id)


# --- input references ------------------------------------------------------------


def resolve_inputs(inputs: dict[str, Any], record: WorkflowRecord
                   ) -> tuple[dict[str, Any], str | None]:
    """Substitute ``${task.field}`` / ``${intent.pref}`` references.

    A value that is exactly one reference keeps the referent's type; embedded
    references are stringified. Returns (resolved, first unresolved ref).
    """
    pattern = re.compile(r"\$\{([a-zA-Z0-9_.-]+)\.([a-zA-Z0-9_.-]+)\}")
    unresolved: str | None = None

    def lookup(source: str, fieldname: str):
        if source == "intent":
            return record.preferences.get(fieldname)
        result = record.node_outputs.get(source)
        if result is not None and result.payload is not None:
            return result.payload.get(fieldname)
        return None

    resolved: dict[str, Any] = {}
    for key, value in inputs.items():
        if not isinstance(value, str):
            resolved[key] = value
            continue
        whole = pattern.fullmatch(value)
        if whole:
            target = lookup(whole.group(1), whole.group(2))
            if target is None:
                unresolved = unresolved or value
                resolved[key] = value
            else:
                resolved[key] = target
            continue

        def substitute(match: re.Match) -> str:
            nonlocal unresolved
            target = lookup(match.group(1), match.group(2))
            if target is None:
                unresolved = unresolved or match.group(0)
                return match.group(0)
            return str(target)

        resolved[key] = pattern.sub(substitute, value)
    return resolved, unresolved
