"""Shared domain types and the canonical wire encoding.

Every message crossing a service boundary is UTF-8 JSON of the form

    {"type": "<message type>", "v": 1, "body": {...}}

serialized with sorted keys and no whitespace, so a given value has exactly
one encoding. ``decode`` is strict: unknown message types, unknown fields,
duplicate keys, and type mismatches all raise :class:`ProtocolError` naming
the byte offset or field path. See ``protocol.md`` for the full schemas.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Sequence

WIRE_VERSION = 1

LATENCY_RING_CAP = 1024


class ProtocolError(Exception):
    """Raised when a wire payload cannot be decoded.

    ``offset`` is the byte offset for malformed JSON; ``path`` is the field
    path (e.g. ``body.subtasks[0].task_id``) for structural violations.
    """

    def __init__(self, message: str, *, offset: int | None = None, path: str | None = None):
        detail = message
        if offset is not None:
            detail += f" (byte offset {offset})"
        if path is not None:
            detail += f" (at {path})"
        super().__init__(detail)
        self.offset = offset
        self.path = path


class ResourceKind(str, Enum):
    TOOL = "tool"
    AGENT = "agent"
    AGENTIC_APPLICATION = "agentic_application"


class ResourceStatus(str, Enum):
    ACTIVE = "active"
    SUSPENDED = "suspended"


class FieldType(str, Enum):
    STRING = "string"
    INT = "int"
    FLOAT = "float"
    BOOL = "bool"


class NodeKind(str, Enum):
    AGENTIC = "agentic"
    NO_LLM = "no_llm"
    HUMAN_GATE = "human_gate"


class NodeStatus(str, Enum):
    PENDING = "pending"
    AWAITING_APPROVAL = "awaiting_approval"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    SKIPPED = "skipped"  # reserved: no operation currently produces it


class Mode(str, Enum):
    NO_LLM = "no_llm"
    COPILOT = "copilot"
    LLM_AGENT = "llm_agent"


class Outcome(str, Enum):
    OK = "ok"
    ERROR = "error"


@dataclass(frozen=True)
class SchemaField:
    name: str
    type: FieldType
    required: bool = True


def _nearest_rank(sorted_samples: Sequence[int], pct: float) -> int:
    """Nearest-rank percentile: the ceil(pct*n)-th smallest value, 1-indexed."""
    n = len(sorted_samples)
    if n == 0:
        return 0
    rank = max(1, -(-int(pct * 100) * n // 100))  # ceil(pct*n) without floats
    return sorted_samples[rank - 1]


@dataclass
class ResourceMetrics:
    """Live usage counters for a registered resource.

    ``cost`` is carried opaquely and plays no part in default scoring.
    """

    success_count: int = 0
    failure_count: int = 0
    latency_samples_ms: list[int] = field(default_factory=list)
    cost: float = 0.0
    last_validated_at: int | None = None

    @property
    def completion_rate(self) -> float:
        total = self.success_count + self.failure_count
        return 1.0 if total == 0 else self.success_count / total

    @property
    def p50_ms(self) -> int:
        return _nearest_rank(sorted(self.latency_samples_ms), 0.50)

    @property
    def p90_ms(self) -> int:
        return _nearest_rank(sorted(self.latency_samples_ms), 0.90)

    def record(self, ok: bool, elapsed_ms: int) -> None:
        if ok:
            self.success_count += 1
        else:
            self.failure_count += 1
        self.latency_samples_ms.append(max(0, int(elapsed_ms)))
        if len(self.latency_samples_ms) > LATENCY_RING_CAP:
            del self.latency_samples_ms[: len(self.latency_samples_ms) - LATENCY_RING_CAP]


@dataclass
class ResourceManifest:
    """Registry entry describing a callable resource: the unit of discovery."""

    resource_id: str
    kind: ResourceKind
    name: str
    description: str
    endpoint: str
    usage_examples: list[str] = field(default_factory=list)
    input_schema: list[SchemaField] = field(default_factory=list)
    output_schema: list[SchemaField] = field(default_factory=list)
    owner_gateway: str = ""
    metrics: ResourceMetrics = field(default_factory=ResourceMetrics)
    status: ResourceStatus = ResourceStatus.ACTIVE

    def search_text(self) -> str:
        return self.description + " " + " ".join(self.usage_examples)

    def copy(self) -> "ResourceManifest":
        return decode(encode(self))  # deep copy through the canonical form


def validate_manifest(m: ResourceManifest) -> list[str]:
    """Return invariant violations as human-readable strings, [] when clean."""
    violations: list[str] = []
    if not m.resource_id:
        violations.append("resource_id empty")
    if not m.name:
        violations.append("name empty")
    if not m.description.strip():
        violations.append("description empty")
    if not m.endpoint or "://" not in m.endpoint:
        violations.append("endpoint not a URL")
    for label, schema in (("input_schema", m.input_schema), ("output_schema", m.output_schema)):
        seen: set[str] = set()
        for f in schema:
            if not f.name:
                violations.append(f"{label} field with empty name")
            if f.name in seen:
                violations.append(f"{label} duplicate field: {f.name}")
            seen.add(f.name)
    if m.metrics.success_count < 0 or m.metrics.failure_count < 0:
        violations.append("metrics counters negative")
    return violations


_PY_TYPES: dict[FieldType, tuple] = {
    FieldType.STRING: (str,),
    FieldType.INT: (int,),
    FieldType.FLOAT: (int, float),
    FieldType.BOOL: (bool,),
}


def validate_inputs(values: dict[str, Any], schema: Iterable[SchemaField]) -> list[str]:
    """Check a flat value map against a named-field schema."""
    violations = []
    fields = {f.name: f for f in schema}
    for f in fields.values():
        if f.required and f.name not in values:
            violations.append(f"missing required field: {f.name}")
    for name, value in values.items():
        f = fields.get(name)
        if f is None:
            violations.append(f"unexpected field: {name}")
            continue
        ok_types = _PY_TYPES[f.type]
        if isinstance(value, bool) and f.type is not FieldType.BOOL:
            violations.append(f"field {name}: expected {f.type.value}, got bool")
        elif not isinstance(value, ok_types):
            violations.append(f"field {name}: expected {f.type.value}")
    return violations


@dataclass
class TaskSpec:
    """One subtask of a plan: a short description plus its dependencies."""

    task_id: str
    description: str
    depends_on: list[str] = field(default_factory=list)
    node_kind: NodeKind = NodeKind.AGENTIC


def validate_tasks(tasks: Sequence[TaskSpec]) -> list[str]:
    violations = []
    ids = [t.task_id for t in tasks]
    id_set = set(ids)
    if len(ids) != len(id_set):
        dup = sorted({i for i in ids if ids.count(i) > 1})[0]
        violations.append(f"duplicate task_id: {dup}")
    for t in tasks:
        if not t.description.strip():
            violations.append(f"task {t.task_id}: description empty")
        for dep in t.depends_on:
            if dep == t.task_id:
                violations.append(f"task {t.task_id}: depends on itself")
            elif dep not in id_set:
                violations.append(f"task {t.task_id}: unknown dependency {dep}")
    return violations


@dataclass
class Assignment:
    """Resolved executor for a task node, with gateway provenance."""

    resource_id: str
    endpoint: str
    gateway_id: str  # "" for resources from the local pool


@dataclass
class TaskNode:
    spec: TaskSpec
    assignment: Assignment | None = None
    status: NodeStatus = NodeStatus.PENDING
    inputs: dict[str, Any] = field(default_factory=dict)


@dataclass
class TaskGraph:
    """The composed plan: a DAG of task nodes executed as a state machine.

    ``gate_tasks`` narrows copilot approval gates to the listed tasks; None
    gates every agentic node.
    """

    graph_id: str
    nodes: list[TaskNode]
    mode: Mode
    gate_tasks: list[str] | None = None

    def node(self, task_id: str) -> TaskNode:
        for n in self.nodes:
            if n.spec.task_id == task_id:
                return n
        raise KeyError(task_id)

    def edges(self) -> list[tuple[str, str]]:
        return [(dep, n.spec.task_id) for n in self.nodes for dep in n.spec.depends_on]

    def predecessors(self, task_id: str) -> list[str]:
        return list(self.node(task_id).spec.depends_on)


@dataclass
class CycleCheck:
    ok: bool
    cycle: list[str] = field(default_factory=list)


def check_dag(graph: TaskGraph | Sequence[TaskSpec]) -> CycleCheck:
    """Cycle-check the depends_on relation; returns one witness cycle if any."""
    specs = [n.spec for n in graph.nodes] if isinstance(graph, TaskGraph) else list(graph)
    adj = {t.task_id: list(t.depends_on) for t in specs}
    known = set(adj)
    color: dict[str, int] = {}  # 0 unvisited / 1 on stack / 2 done
    stack: list[str] = []

    def visit(u: str) -> list[str] | None:
        color[u] = 1
        stack.append(u)
        for v in adj[u]:
            if v not in known:
                continue
            c = color.get(v, 0)
            if c == 1:
                return stack[stack.index(v):]
            if c == 0:
                found = visit(v)
                if found is not None:
                    return found
        stack.pop()
        color[u] = 2
        return None

    for t in sorted(adj):
        if color.get(t, 0) == 0:
            witness = visit(t)
            if witness is not None:
                return CycleCheck(ok=False, cycle=witness)
    return CycleCheck(ok=True)


@dataclass
class ResourceQuery:
    """Summarized need sent to gateways: subtasks plus condensed context."""

    query_id: str
    subtasks: list[TaskSpec]
    context_summary: str = ""
    max_offers_per_task: int = 5

    def __post_init__(self):
        if not self.subtasks:
            raise ValueError("ResourceQuery.subtasks must be non-empty")
        if self.max_offers_per_task < 1:
            raise ValueError("max_offers_per_task must be >= 1")


@dataclass
class ScoredManifest:
    manifest: ResourceManifest
    score: float


@dataclass
class ResourceOffer:
    """Ranked manifests per task; tasks with no candidate land in unfulfilled."""

    query_id: str
    per_task: dict[str, list[ScoredManifest]]
    unfulfilled: list[str]


def make_offer(
    query: ResourceQuery, per_task: dict[str, list[ScoredManifest]]
) -> ResourceOffer:
    """Build an offer from ranked candidates, enforcing the partition invariant.

    Every task in the query appears in exactly one of per_task / unfulfilled;
    empty candidate lists become unfulfilled entries; lists are sorted by
    score descending (resource_id breaks ties).
    """
    task_ids = [t.task_id for t in query.subtasks]
    unknown = set(per_task) - set(task_ids)
    if unknown:
        raise ValueError(f"offer covers tasks not in query: {sorted(unknown)}")
    ranked: dict[str, list[ScoredManifest]] = {}
    unfulfilled: list[str] = []
    for tid in task_ids:
        candidates = per_task.get(tid, [])
        if candidates:
            ranked[tid] = sorted(candidates, key=lambda c: (-c.score, c.manifest.resource_id))
        else:
            unfulfilled.append(tid)
    offer = ResourceOffer(query_id=query.query_id, per_task=ranked, unfulfilled=unfulfilled)
    assert_offer_partition(offer, task_ids)
    return offer


def assert_offer_partition(offer: ResourceOffer, task_ids: Sequence[str]) -> None:
    covered = set(offer.per_task) | set(offer.unfulfilled)
    overlap = set(offer.per_task) & set(offer.unfulfilled)
    if covered != set(task_ids) or overlap:
        raise ValueError(
            f"offer does not partition query tasks: covered={sorted(covered)} "
            f"expected={sorted(set(task_ids))} overlap={sorted(overlap)}"
        )


@dataclass
class ExecutionCommand:
    """Endpoint + validated inputs: the second protocol message pair, outbound."""

    command_id: str
    resource_id: str
    endpoint: str
    inputs: dict[str, Any]
    deadline_ms: int = 30_000

    def __post_init__(self):
        if self.deadline_ms <= 0:
            raise ValueError("deadline_ms must be positive")


@dataclass
class ExecutionResult:
    command_id: str
    outcome: Outcome
    payload: dict[str, Any] | None = None
    error_message: str | None = None
    elapsed_ms: int = 0

    def __post_init__(self):
        if self.outcome is Outcome.OK and (self.payload is None or self.error_message is not None):
            raise ValueError("ok result must carry a payload and no error_message")
        if self.outcome is Outcome.ERROR and (self.error_message is None or self.payload is not None):
            raise ValueError("error result must carry error_message and no payload")


def ok_result(command_id: str, payload: dict[str, Any], elapsed_ms: int = 0) -> ExecutionResult:
    return ExecutionResult(command_id, Outcome.OK, payload=payload, elapsed_ms=elapsed_ms)


def error_result(command_id: str, message: str, elapsed_ms: int = 0) -> ExecutionResult:
    return ExecutionResult(command_id, Outcome.ERROR, error_message=message, elapsed_ms=elapsed_ms)


# ---------------------------------------------------------------------------
# wire encoding
# ---------------------------------------------------------------------------

_SCALAR = (str, int, float, bool, type(None))


def _check_values(values: Any, path: str) -> dict[str, Any]:
    d = _expect(values, dict, path)
    for k, v in d.items():
        if not isinstance(k, str):
            raise ProtocolError("value-map keys must be strings", path=path)
        if not isinstance(v, _SCALAR):
            raise ProtocolError("value-map entries must be scalars", path=f"{path}.{k}")
    return dict(d)


def _expect(value: Any, typ: type | tuple, path: str):
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ProtocolError("expected number", path=path)
        return float(value)
    if typ is int and isinstance(value, bool):
        raise ProtocolError("expected int", path=path)
    if not isinstance(value, typ):
        name = typ.__name__ if isinstance(typ, type) else "/".join(t.__name__ for t in typ)
        raise ProtocolError(f"expected {name}", path=path)
    return value


def _enum(value: Any, enum_cls, path: str):
    v = _expect(value, str, path)
    try:
        return enum_cls(v)
    except ValueError:
        raise ProtocolError(f"invalid {enum_cls.__name__} value: {v!r}", path=path) from None


def _fields(payload: Any, path: str, required: set[str], optional: set[str] = frozenset()) -> dict:
    d = _expect(payload, dict, path)
    unknown = set(d) - required - set(optional)
    if unknown:
        raise ProtocolError(f"unknown field: {sorted(unknown)[0]}", path=path)
    missing = required - set(d)
    if missing:
        raise ProtocolError(f"missing field: {sorted(missing)[0]}", path=path)
    return d


def _schema_to_payload(schema: list[SchemaField]) -> list[dict]:
    return [{"name": f.name, "type": f.type.value, "required": f.required} for f in schema]


def _schema_from_payload(payload: Any, path: str) -> list[SchemaField]:
    out = []
    for i, item in enumerate(_expect(payload, list, path)):
        d = _fields(item, f"{path}[{i}]", {"name", "type", "required"})
        out.append(
            SchemaField(
                name=_expect(d["name"], str, f"{path}[{i}].name"),
                type=_enum(d["type"], FieldType, f"{path}[{i}].type"),
                required=_expect(d["required"], bool, f"{path}[{i}].required"),
            )
        )
    return out


def _metrics_to_payload(m: ResourceMetrics) -> dict:
    return {
        "success_count": m.success_count,
        "failure_count": m.failure_count,
        "latency_samples_ms": list(m.latency_samples_ms),
        "cost": m.cost,
        "last_validated_at": m.last_validated_at,
    }


def _metrics_from_payload(payload: Any, path: str) -> ResourceMetrics:
    d = _fields(
        payload, path,
        {"success_count", "failure_count", "latency_samples_ms", "cost", "last_validated_at"},
    )
    samples = [_expect(s, int, f"{path}.latency_samples_ms[{i}]")
               for i, s in enumerate(_expect(d["latency_samples_ms"], list, path))]
    last = d["last_validated_at"]
    return ResourceMetrics(
        success_count=_expect(d["success_count"], int, f"{path}.success_count"),
        failure_count=_expect(d["failure_count"], int, f"{path}.failure_count"),
        latency_samples_ms=samples,
        cost=_expect(d["cost"], float, f"{path}.cost"),
        last_validated_at=None if last is None else _expect(last, int, f"{path}.last_validated_at"),
    )


def _manifest_to_payload(m: ResourceManifest) -> dict:
    return {
        "resource_id": m.resource_id,
        "kind": m.kind.value,
        "name": m.name,
        "description": m.description,
        "usage_examples": list(m.usage_examples),
        "endpoint": m.endpoint,
        "input_schema": _schema_to_payload(m.input_schema),
        "output_schema": _schema_to_payload(m.output_schema),
        "owner_gateway": m.owner_gateway,
        "metrics": _metrics_to_payload(m.metrics),
        "status": m.status.value,
    }


def _manifest_from_payload(payload: Any, path: str) -> ResourceManifest:
    d = _fields(
        payload, path,
        {"resource_id", "kind", "name", "description", "usage_examples", "endpoint",
         "input_schema", "output_schema", "owner_gateway", "metrics", "status"},
    )
    return ResourceManifest(
        resource_id=_expect(d["resource_id"], str, f"{path}.resource_id"),
        kind=_enum(d["kind"], ResourceKind, f"{path}.kind"),
        name=_expect(d["name"], str, f"{path}.name"),
        description=_expect(d["description"], str, f"{path}.description"),
        usage_examples=[_expect(x, str, f"{path}.usage_examples[{i}]")
                        for i, x in enumerate(_expect(d["usage_examples"], list, path))],
        endpoint=_expect(d["endpoint"], str, f"{path}.endpoint"),
        input_schema=_schema_from_payload(d["input_schema"], f"{path}.input_schema"),
        output_schema=_schema_from_payload(d["output_schema"], f"{path}.output_schema"),
        owner_gateway=_expect(d["owner_gateway"], str, f"{path}.owner_gateway"),
        metrics=_metrics_from_payload(d["metrics"], f"{path}.metrics"),
        status=_enum(d["status"], ResourceStatus, f"{path}.status"),
    )


def _task_to_payload(t: TaskSpec) -> dict:
    return {
        "task_id": t.task_id,
        "description": t.description,
        "depends_on": list(t.depends_on),
        "node_kind": t.node_kind.value,
    }


def _task_from_payload(payload: Any, path: str) -> TaskSpec:
    d = _fields(payload, path, {"task_id", "description", "depends_on", "node_kind"})
    return TaskSpec(
        task_id=_expect(d["task_id"], str, f"{path}.task_id"),
        description=_expect(d["description"], str, f"{path}.description"),
        depends_on=[_expect(x, str, f"{path}.depends_on[{i}]")
                    for i, x in enumerate(_expect(d["depends_on"], list, path))],
        node_kind=_enum(d["node_kind"], NodeKind, f"{path}.node_kind"),
    )


def _node_to_payload(n: TaskNode) -> dict:
    assignment = None
    if n.assignment is not None:
        assignment = {
            "resource_id": n.assignment.resource_id,
            "endpoint": n.assignment.endpoint,
            "gateway_id": n.assignment.gateway_id,
        }
    return {
        "spec": _task_to_payload(n.spec),
        "assignment": assignment,
        "status": n.status.value,
        "inputs": dict(n.inputs),
    }


def _node_from_payload(payload: Any, path: str) -> TaskNode:
    d = _fields(payload, path, {"spec", "assignment", "status", "inputs"})
    assignment = None
    if d["assignment"] is not None:
        a = _fields(d["assignment"], f"{path}.assignment", {"resource_id", "endpoint", "gateway_id"})
        assignment = Assignment(
            resource_id=_expect(a["resource_id"], str, f"{path}.assignment.resource_id"),
            endpoint=_expect(a["endpoint"], str, f"{path}.assignment.endpoint"),
            gateway_id=_expect(a["gateway_id"], str, f"{path}.assignment.gateway_id"),
        )
    return TaskNode(
        spec=_task_from_payload(d["spec"], f"{path}.spec"),
        assignment=assignment,
        status=_enum(d["status"], NodeStatus, f"{path}.status"),
        inputs=_check_values(d["inputs"], f"{path}.inputs"),
    )


def _graph_to_payload(g: TaskGraph) -> dict:
    return {
        "graph_id": g.graph_id,
        "nodes": [_node_to_payload(n) for n in g.nodes],
        "mode": g.mode.value,
        "gate_tasks": None if g.gate_tasks is None else list(g.gate_tasks),
    }


def _graph_from_payload(payload: Any, path: str) -> TaskGraph:
    d = _fields(payload, path, {"graph_id", "nodes", "mode", "gate_tasks"})
    gate_tasks = d["gate_tasks"]
    if gate_tasks is not None:
        gate_tasks = [_expect(x, str, f"{path}.gate_tasks[{i}]")
                      for i, x in enumerate(_expect(gate_tasks, list, f"{path}.gate_tasks"))]
    return TaskGraph(
        graph_id=_expect(d["graph_id"], str, f"{path}.graph_id"),
        nodes=[_node_from_payload(n, f"{path}.nodes[{i}]")
               for i, n in enumerate(_expect(d["nodes"], list, path))],
        mode=_enum(d["mode"], Mode, f"{path}.mode"),
        gate_tasks=gate_tasks,
    )


def _query_to_payload(q: ResourceQuery) -> dict:
    return {
        "query_id": q.query_id,
        "subtasks": [_task_to_payload(t) for t in q.subtasks],
        "context_summary": q.context_summary,
        "max_offers_per_task": q.max_offers_per_task,
    }


def _query_from_payload(payload: Any, path: str) -> ResourceQuery:
    d = _fields(payload, path, {"query_id", "subtasks", "context_summary", "max_offers_per_task"})
    subtasks = [_task_from_payload(t, f"{path}.subtasks[{i}]")
                for i, t in enumerate(_expect(d["subtasks"], list, path))]
    if not subtasks:
        raise ProtocolError("subtasks must be non-empty", path=f"{path}.subtasks")
    max_offers = _expect(d["max_offers_per_task"], int, f"{path}.max_offers_per_task")
    if max_offers < 1:
        raise ProtocolError("max_offers_per_task must be >= 1", path=f"{path}.max_offers_per_task")
    return ResourceQuery(
        query_id=_expect(d["query_id"], str, f"{path}.query_id"),
        subtasks=subtasks,
        context_summary=_expect(d["context_summary"], str, f"{path}.context_summary"),
        max_offers_per_task=max_offers,
    )


def _offer_to_payload(o: ResourceOffer) -> dict:
    return {
        "query_id": o.query_id,
        "per_task": {
            tid: [{"manifest": _manifest_to_payload(c.manifest), "score": c.score}
                  for c in candidates]
            for tid, candidates in o.per_task.items()
        },
        "unfulfilled": list(o.unfulfilled),
    }


def _offer_from_payload(payload: Any, path: str) -> ResourceOffer:
    d = _fields(payload, path, {"query_id", "per_task", "unfulfilled"})
    per_task: dict[str, list[ScoredManifest]] = {}
    for tid, items in _expect(d["per_task"], dict, f"{path}.per_task").items():
        candidates = []
        for i, item in enumerate(_expect(items, list, f"{path}.per_task.{tid}")):
            c = _fields(item, f"{path}.per_task.{tid}[{i}]", {"manifest", "score"})
            score = _expect(c["score"], float, f"{path}.per_task.{tid}[{i}].score")
            if not 0.0 <= score <= 1.0:
                raise ProtocolError("score out of [0,1]", path=f"{path}.per_task.{tid}[{i}].score")
            candidates.append(
                ScoredManifest(_manifest_from_payload(c["manifest"],
                                                      f"{path}.per_task.{tid}[{i}].manifest"), score)
            )
        if any(candidates[i].score < candidates[i + 1].score for i in range(len(candidates) - 1)):
            raise ProtocolError("offer list not sorted by score", path=f"{path}.per_task.{tid}")
        per_task[tid] = candidates
    unfulfilled = [_expect(x, str, f"{path}.unfulfilled[{i}]")
                   for i, x in enumerate(_expect(d["unfulfilled"], list, path))]
    if set(per_task) & set(unfulfilled):
        raise ProtocolError("per_task and unfulfilled overlap", path=path)
    return ResourceOffer(
        query_id=_expect(d["query_id"], str, f"{path}.query_id"),
        per_task=per_task,
        unfulfilled=unfulfilled,
    )


def _command_to_payload(c: ExecutionCommand) -> dict:
    return {
        "command_id": c.command_id,
        "resource_id": c.resource_id,
        "endpoint": c.endpoint,
        "inputs": dict(c.inputs),
        "deadline_ms": c.deadline_ms,
    }


def _command_from_payload(payload: Any, path: str) -> ExecutionCommand:
    d = _fields(payload, path, {"command_id", "resource_id", "endpoint", "inputs", "deadline_ms"})
    deadline = _expect(d["deadline_ms"], int, f"{path}.deadline_ms")
    if deadline <= 0:
        raise ProtocolError("deadline_ms must be positive", path=f"{path}.deadline_ms")
    return ExecutionCommand(
        command_id=_expect(d["command_id"], str, f"{path}.command_id"),
        resource_id=_expect(d["resource_id"], str, f"{path}.resource_id"),
        endpoint=_expect(d["endpoint"], str, f"{path}.endpoint"),
        inputs=_check_values(d["inputs"], f"{path}.inputs"),
        deadline_ms=deadline,
    )


def _result_to_payload(r: ExecutionResult) -> dict:
    return {
        "command_id": r.command_id,
        "outcome": r.outcome.value,
        "payload": None if r.payload is None else dict(r.payload),
        "error_message": r.error_message,
        "elapsed_ms": r.elapsed_ms,
    }


def _result_from_payload(payload: Any, path: str) -> ExecutionResult:
    d = _fields(payload, path, {"command_id", "outcome", "payload", "error_message", "elapsed_ms"})
    outcome = _enum(d["outcome"], Outcome, f"{path}.outcome")
    body = None if d["payload"] is None else _check_values(d["payload"], f"{path}.payload")
    err = d["error_message"]
    if err is not None:
        err = _expect(err, str, f"{path}.error_message")
    if (outcome is Outcome.OK) != (body is not None) or (outcome is Outcome.ERROR) != (err is not None):
        raise ProtocolError("outcome does not match payload/error_message presence", path=path)
    try:
        return ExecutionResult(
            command_id=_expect(d["command_id"], str, f"{path}.command_id"),
            outcome=outcome,
            payload=body,
            error_message=err,
            elapsed_ms=_expect(d["elapsed_ms"], int, f"{path}.elapsed_ms"),
        )
    except ValueError as exc:
        raise ProtocolError(str(exc), path=path) from None


_CODECS: dict[str, tuple[type, Callable, Callable]] = {
    "resource_manifest": (ResourceManifest, _manifest_to_payload, _manifest_from_payload),
    "task_spec": (TaskSpec, _task_to_payload, _task_from_payload),
    "task_graph": (TaskGraph, _graph_to_payload, _graph_from_payload),
    "resource_query": (ResourceQuery, _query_to_payload, _query_from_payload),
    "resource_offer": (ResourceOffer, _offer_to_payload, _offer_from_payload),
    "execution_command": (ExecutionCommand, _command_to_payload, _command_from_payload),
    "execution_result": (ExecutionResult, _result_to_payload, _result_from_payload),
}

_TYPE_NAMES = {cls: name for name, (cls, _, _) in _CODECS.items()}

Message = (ResourceManifest | TaskSpec | TaskGraph | ResourceQuery | ResourceOffer
           | ExecutionCommand | ExecutionResult)


def to_payload(message: Message) -> dict:
    """The message body as plain JSON-able data (used by snapshot files)."""
    name = _TYPE_NAMES.get(type(message))
    if name is None:
        raise TypeError(f"not a protocol message: {type(message).__name__}")
    _, to_body, _ = _CODECS[name]
    return to_body(message)


def from_payload(type_name: str, payload: Any) -> Message:
    """Inverse of :func:`to_payload`; strict like :func:`decode`."""
    if type_name not in _CODECS:
        raise ProtocolError(f"unknown message type: {type_name!r}", path="$.type")
    _, _, from_body = _CODECS[type_name]
    return from_body(payload, "body")


def encode(message: Message) -> bytes:
    """Serialize a protocol message to its canonical byte form."""
    name = _TYPE_NAMES.get(type(message))
    if name is None:
        raise TypeError(f"not a protocol message: {type(message).__name__}")
    _, to_payload, _ = _CODECS[name]
    envelope = {"type": name, "v": WIRE_VERSION, "body": to_payload(message)}
    return json.dumps(envelope, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _reject_duplicate_keys(pairs):
    seen = set()
    for k, _ in pairs:
        if k in seen:
            raise ProtocolError(f"duplicate key: {k}")
        seen.add(k)
    return dict(pairs)


def decode(data: bytes | str) -> Message:
    """Parse a canonical byte form back into a protocol message (strict)."""
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError("invalid UTF-8", offset=exc.start) from None
    else:
        text = data
    try:
        envelope = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed JSON: {exc.msg}", offset=exc.pos) from None
    d = _fields(envelope, "$", {"type", "v", "body"})
    name = _expect(d["type"], str, "$.type")
    if name not in _CODECS:
        raise ProtocolError(f"unknown message type: {name!r}", path="$.type")
    if d["v"] != WIRE_VERSION:
        raise ProtocolError(f"unsupported version: {d['v']!r}", path="$.v")
    _, _, from_payload = _CODECS[name]
    return from_payload(d["body"], "body")


__all__ = [
    "Assignment", "CycleCheck", "ExecutionCommand", "ExecutionResult", "FieldType",
    "Mode", "Message", "NodeKind", "NodeStatus", "Outcome", "ProtocolError",
    "ResourceKind", "ResourceManifest", "ResourceMetrics", "ResourceOffer",
    "ResourceQuery", "ResourceStatus", "SchemaField", "ScoredManifest", "TaskGraph",
    "TaskNode", "TaskSpec", "WIRE_VERSION", "assert_offer_partition", "check_dag",
    "decode", "encode", "error_result", "from_payload", "make_offer", "ok_result",
    "to_payload", "validate_inputs", "validate_manifest", "validate_tasks",
]
