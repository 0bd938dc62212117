"""Memory for agentic operation: scratchpad, message pool, memory bank.

Scratchpad and pool are strictly append-only; the memory bank is a
last-write-wins key/value store isolated by (tenant, user). Prompt assembly
is a deterministic template fill over these stores plus the workflow view,
budget-capped by dropping the oldest completed-step lines first.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

from ._util import now_ms, read_json, write_json_atomic
from .planner import PlanAction, PlanStep

CONTEXT_BUDGET_CHARS = 4000
SNAPSHOT_VERSION = 1


class ContextError(Exception):
    def __init__(self, code: str, message: str | None = None):
        super().__init__(message or code)
        self.code = code


class PoolDirection(str, Enum):
    TO_GATEWAY = "to_gateway"
    FROM_GATEWAY = "from_gateway"
    TO_RESOURCE = "to_resource"
    FROM_RESOURCE = "from_resource"


class MemoryKind(str, Enum):
    PREFERENCE = "preference"
    FACT = "fact"
    GATEWAY_STAT = "gateway_stat"


@dataclass
class ScratchpadEntry:
    workflow_id: str
    step_no: int
    content: PlanStep


@dataclass
class PoolMessage:
    workflow_id: str
    direction: PoolDirection
    peer_id: str
    body_type: str
    body_summary: str
    at: int = 0


@dataclass
class MemoryItem:
    tenant_id: str
    user_id: str
    key: str
    value: str
    kind: MemoryKind = MemoryKind.FACT
    updated_at: int = 0
    _seq: int = 0


class Purpose(str, Enum):
    PLAN_PROMPT = "plan_prompt"
    QUERY_SUMMARY = "query_summary"
    RESUME = "resume"


@dataclass
class WorkflowView:
    """What prompt assembly needs to know about a workflow right now."""

    intent_text: str
    tenant_id: str
    user_id: str
    completed: list[tuple[str, str]] = field(default_factory=list)  # (task_id, one-line result)
    pending: list[tuple[str, str]] = field(default_factory=list)    # (task_id, description)


@dataclass
class AssembledContext:
    text: str
    citations: list[str]


class ContextStore:
    """Per-principal context layer; optionally snapshotted to one JSON file."""

    def __init__(self, snapshot_path: str | Path | None = None,
                 clock: Callable[[], int] = now_ms):
        self._lock = threading.RLock()
        self._clock = clock
        self._snapshot_path = Path(snapshot_path) if snapshot_path else None
        self._workflows: dict[str, WorkflowView] = {}
        self._scratchpad: dict[str, list[ScratchpadEntry]] = {}
        self._pool: dict[str, list[PoolMessage]] = {}
        self._memory: dict[tuple[str, str, str], MemoryItem] = {}
        self._seq = 0
        self._view_provider: Callable[[str], WorkflowView | None] | None = None
        if self._snapshot_path and self._snapshot_path.exists():
            self._load()

    def set_view_provider(self, provider: Callable[[str], WorkflowView | None]) -> None:
        """Let the owning service supply live workflow state for assembly."""
        self._view_provider = provider

    # -- workflows -----------------------------------------------------------

    def register_workflow(self, workflow_id: str, intent_text: str,
                          tenant_id: str = "", user_id: str = "") -> None:
        with self._lock:
            self._workflows.setdefault(
                workflow_id, WorkflowView(intent_text, tenant_id, user_id))
            self._scratchpad.setdefault(workflow_id, [])
            self._pool.setdefault(workflow_id, [])
            self._save()

    def knows_workflow(self, workflow_id: str) -> bool:
        return workflow_id in self._workflows

    def _require(self, workflow_id: str) -> None:
        if workflow_id not in self._workflows:
            raise ContextError("unknown_workflow", f"unknown workflow: {workflow_id}")

    # -- scratchpad / pool -----------------------------------------------------

    def append_scratchpad(self, workflow_id: str, step: PlanStep) -> ScratchpadEntry:
        self._require(workflow_id)
        with self._lock:
            entry = ScratchpadEntry(workflow_id, step.step_no, step)
            self._scratchpad[workflow_id].append(entry)
            self._save()
        return entry

    def read_scratchpad(self, workflow_id: str) -> list[ScratchpadEntry]:
        self._require(workflow_id)
        return list(self._scratchpad[workflow_id])

    def append_pool(self, message: PoolMessage) -> PoolMessage:
        self._require(message.workflow_id)
        with self._lock:
            pool = self._pool[message.workflow_id]
            at = self._clock()
            if pool and at < pool[-1].at:
                at = pool[-1].at  # timestamps non-decreasing per workflow
            message.at = at
            pool.append(message)
            self._save()
        return message

    def read_pool(self, workflow_id: str) -> list[PoolMessage]:
        self._require(workflow_id)
        return list(self._pool[workflow_id])

    # -- memory bank ------------------------------------------------------------

    def upsert_memory(self, tenant_id: str, user_id: str, key: str, value: str,
                      kind: MemoryKind = MemoryKind.FACT) -> MemoryItem:
        with self._lock:
            self._seq += 1
            item = MemoryItem(tenant_id, user_id, key, value, kind,
                              updated_at=self._clock(), _seq=self._seq)
            self._memory[(tenant_id, user_id, key)] = item
            self._save()
        return item

    def lookup_memory(self, tenant_id: str, user_id: str, key_prefix: str = "") -> list[MemoryItem]:
        items = [
            item for (t, u, k), item in self._memory.items()
            if t == tenant_id and u == user_id and k.startswith(key_prefix)
        ]
        items.sort(key=lambda i: (-i.updated_at, -i._seq))
        return items

    # -- assembly ----------------------------------------------------------------

    def assemble_context(self, workflow_id: str, purpose: Purpose) -> AssembledContext:
        """Deterministic prompt/context assembly with source citations."""
        self._require(workflow_id)
        view = None
        if self._view_provider is not None:
            view = self._view_provider(workflow_id)
        if view is None:
            view = self._workflows[workflow_id]

        citations = [f"intent:{workflow_id}"]
        header = {
            Purpose.PLAN_PROMPT: "Plan the following request.",
            Purpose.QUERY_SUMMARY: "Context for resource search.",
            Purpose.RESUME: "Resuming a paused workflow; pick up the pending actions.",
        }[purpose]
        head_lines = [header, f"Intent: {view.intent_text}"]

        from ._util import tokens as _tokens  # local alias, avoids shadowing

        intent_tokens = set(_tokens(view.intent_text))
        memory_lines: list[str] = []
        for item in self.lookup_memory(view.tenant_id, view.user_id):
            first_segment = item.key.split(".", 1)[0].lower()
            if first_segment in intent_tokens:
                memory_lines.append(f"- {item.key} = {item.value}")
                citations.append(f"memory:{view.tenant_id}/{view.user_id}/{item.key}")
        if memory_lines:
            memory_lines.insert(0, "Relevant memory:")

        completed_lines = [(tid, f"- {tid}: {line}") for tid, line in view.completed]
        pending_lines = [f"- {tid}: {desc}" for tid, desc in view.pending]
        if pending_lines:
            pending_lines.insert(0, "Pending tasks:")

        def render(completed: list[tuple[str, str]]) -> str:
            parts = list(head_lines) + memory_lines
            if completed:
                parts.append("Completed steps:")
                parts.extend(line for _, line in completed)
            parts.extend(pending_lines)
            return "\n".join(parts)

        kept = list(completed_lines)
        text = render(kept)
        while len(text) > CONTEXT_BUDGET_CHARS and kept:
            kept.pop(0)  # oldest completed step goes first
            text = render(kept)
        if len(text) > CONTEXT_BUDGET_CHARS:
            text = text[:CONTEXT_BUDGET_CHARS]
        citations.extend(f"step:{tid}" for tid, _ in kept)
        citations.extend(f"pending:{tid}" for tid, _ in view.pending)
        return AssembledContext(text=text, citations=citations)

    # -- persistence ----------------------------------------------------------------

    def _save(self) -> None:
        if self._snapshot_path is None:
            return
        doc = {
            "v": SNAPSHOT_VERSION,
            "seq": self._seq,
            "workflows": {
                wid: {"intent_text": v.intent_text, "tenant_id": v.tenant_id,
                      "user_id": v.user_id}
                for wid, v in self._workflows.items()
            },
            "scratchpad": {
                wid: [
                    {"step_no": e.step_no, "thought": e.content.thought,
                     "action": e.content.action.value,
                     "action_payload": e.content.action_payload,
                     "observation": e.content.observation}
                    for e in entries
                ]
                for wid, entries in self._scratchpad.items()
            },
            "pool": {
                wid: [
                    {"direction": m.direction.value, "peer_id": m.peer_id,
                     "body_type": m.body_type, "body_summary": m.body_summary, "at": m.at}
                    for m in messages
                ]
                for wid, messages in self._pool.items()
            },
            "memory": [
                {"tenant_id": i.tenant_id, "user_id": i.user_id, "key": i.key,
                 "value": i.value, "kind": i.kind.value, "updated_at": i.updated_at,
                 "seq": i._seq}
                for i in self._memory.values()
            ],
        }
        write_json_atomic(self._snapshot_path, doc)

    def _load(self) -> None:
        doc = read_json(self._snapshot_path)
        if doc.get("v") != SNAPSHOT_VERSION:
            raise ContextError("bad_snapshot", f"unsupported snapshot version: {doc.get('v')}")
        self._seq = doc.get("seq", 0)
        for wid, v in doc["workflows"].items():
            self._workflows[wid] = WorkflowView(v["intent_text"], v["tenant_id"], v["user_id"])
        for wid, entries in doc["scratchpad"].items():
            self._scratchpad[wid] = [
                ScratchpadEntry(wid, e["step_no"], PlanStep(
                    e["step_no"], e["thought"], PlanAction(e["action"]),
                    e["action_payload"], e["observation"]))
                for e in entries
            ]
        for wid, messages in doc["pool"].items():
            self._pool[wid] = [
                PoolMessage(wid, PoolDirection(m["direction"]), m["peer_id"],
                            m["body_type"], m["body_summary"], m["at"])
                for m in messages
            ]
        for i in doc["memory"]:
            item = MemoryItem(i["tenant_id"], i["user_id"], i["key"], i["value"],
                              MemoryKind(i["kind"]), i["updated_at"], i["seq"])
            self._memory[(item.tenant_id, item.user_id, item.key)] = item
