"""Safety/security/compliance screening applied at every service boundary.

Deterministic rule pipeline, evaluated in a fixed order: injection patterns
block, deny-topic keywords block, PII rules redact, otherwise allow. The
first blocking rule decides the verdict; every match is still recorded so
traces show the full picture. Screening is stateless and idempotent on its
own redacted output.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

from ._util import now_ms

DEFAULT_POLICY_RESOURCE = "default_policy.json"


class Direction(str, Enum):
    INBOUND = "inbound"
    OUTBOUND = "outbound"


class Decision(str, Enum):
    ALLOW = "allow"
    REDACT = "redact"
    BLOCK = "block"


@dataclass(frozen=True)
class PiiRule:
    name: str
    pattern: str
    replacement: str


@dataclass
class GuardPolicy:
    policy_id: str
    injection_patterns: list[tuple[str, str]] = field(default_factory=list)  # (rule_id, pattern)
    pii_rules: list[PiiRule] = field(default_factory=list)
    deny_topics: dict[str, list[str]] = field(default_factory=dict)
    policy_facts: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self._injection = [(rid, re.compile(p, re.IGNORECASE)) for rid, p in self.injection_patterns]
        self._pii = []
        for rule in self.pii_rules:
            if re.search(r"\\\d|\\g<", rule.replacement):
                raise ValueError(f"pii rule {rule.name}: replacement must not capture matched text")
            self._pii.append((rule, re.compile(rule.pattern)))


@dataclass
class GuardVerdict:
    decision: Decision
    direction: Direction
    matched_rules: list[str] = field(default_factory=list)
    rule_id: str | None = None       # set for block
    redacted_text: str | None = None  # set for redact

    @property
    def blocked(self) -> bool:
        return self.decision is Decision.BLOCK


def screen(text: str, direction: Direction, policy: GuardPolicy) -> GuardVerdict:
    """Screen one text fragment; pure function of (text, direction, policy)."""
    matched: list[str] = []
    block_rule: str | None = None
    for rule_id, pattern in policy._injection:
        if pattern.search(text):
            matched.append(rule_id)
            if block_rule is None:
                block_rule = rule_id
    lowered = text.lower()
    for topic, keywords in sorted(policy.deny_topics.items()):
        for kw in keywords:
            if kw.lower() in lowered:
                rule_id = f"deny.{topic}"
                matched.append(rule_id)
                if block_rule is None:
                    block_rule = rule_id
                break
    if block_rule is not None:
        return GuardVerdict(Decision.BLOCK, direction, matched_rules=matched, rule_id=block_rule)

    redacted = text
    for rule, pattern in policy._pii:
        redacted, n = pattern.subn(rule.replacement, redacted)
        if n:
            matched.append(f"pii.{rule.name}")
    if redacted != text:
        return GuardVerdict(Decision.REDACT, direction, matched_rules=matched, redacted_text=redacted)
    return GuardVerdict(Decision.ALLOW, direction, matched_rules=matched)


def policy_lookup(key: str, policy: GuardPolicy) -> str | None:
    """Exact-key lookup into the policy fact table; None when absent."""
    return policy.policy_facts.get(key)


@dataclass
class GuardEvent:
    workflow_id: str
    direction: Direction
    peer_id: str
    decision: Decision
    matched_rules: list[str]
    rule_id: str | None
    task_id: str | None
    at: int
    command_id: str | None = None


class GuardLog:
    """Append-only record of every screen invocation, per workflow."""

    def __init__(self, clock=now_ms):
        self._events: list[GuardEvent] = []
        self._clock = clock

    def record(self, workflow_id: str, peer_id: str, verdict: GuardVerdict,
               task_id: str | None = None, command_id: str | None = None) -> GuardEvent:
        event = GuardEvent(
            workflow_id=workflow_id,
            direction=verdict.direction,
            peer_id=peer_id,
            decision=verdict.decision,
            matched_rules=list(verdict.matched_rules),
            rule_id=verdict.rule_id,
            task_id=task_id,
            at=self._clock(),
            command_id=command_id,
        )
        self._events.append(event)
        return event

    def trace(self, workflow_id: str) -> list[GuardEvent]:
        return [e for e in self._events if e.workflow_id == workflow_id]

    def all_events(self) -> list[GuardEvent]:
        return list(self._events)

    def export_jsonl(self, workflow_id: str) -> str:
        return "\n".join(json.dumps(event_to_dict(e), sort_keys=True)
                         for e in self.trace(workflow_id))


def event_to_dict(e: GuardEvent) -> dict:
    return {
        "workflow_id": e.workflow_id,
        "direction": e.direction.value,
        "peer_id": e.peer_id,
        "decision": e.decision.value,
        "matched_rules": e.matched_rules,
        "rule_id": e.rule_id,
        "task_id": e.task_id,
        "at": e.at,
        "command_id": e.command_id,
    }


def event_from_dict(d: dict) -> GuardEvent:
    return GuardEvent(
        workflow_id=d["workflow_id"],
        direction=Direction(d["direction"]),
        peer_id=d["peer_id"],
        decision=Decision(d["decision"]),
        matched_rules=list(d["matched_rules"]),
        rule_id=d["rule_id"],
        task_id=d["task_id"],
        at=d["at"],
        command_id=d.get("command_id"),
    )


def screen_values(values: dict[str, Any], direction: Direction, policy: GuardPolicy
                  ) -> tuple[dict[str, Any], GuardVerdict]:
    """Screen every string field of a flat value map.

    Returns the (possibly redacted) map plus one combined verdict: block if
    any field blocks, redact if any field was redacted, else allow.
    """
    out: dict[str, Any] = {}
    matched: list[str] = []
    block_rule = None
    redacted_any = False
    for key in values:
        value = values[key]
        if not isinstance(value, str):
            out[key] = value
            continue
        verdict = screen(value, direction, policy)
        matched.extend(r for r in verdict.matched_rules if r not in matched)
        if verdict.decision is Decision.BLOCK:
            if block_rule is None:
                block_rule = verdict.rule_id
            out[key] = value
        elif verdict.decision is Decision.REDACT:
            redacted_any = True
            out[key] = verdict.redacted_text
        else:
            out[key] = value
    if block_rule is not None:
        return values, GuardVerdict(Decision.BLOCK, direction, matched, rule_id=block_rule)
    if redacted_any:
        return out, GuardVerdict(Decision.REDACT, direction, matched)
    return out, GuardVerdict(Decision.ALLOW, direction, matched)


def load_policy(path: str | Path | None = None) -> GuardPolicy:
    """Load a policy file; without a path, the bundled default policy."""
    if path is None:
        raw = resources.files("agentmesh.data").joinpath(DEFAULT_POLICY_RESOURCE).read_text("utf-8")
    else:
        raw = Path(path).read_text("utf-8")
    doc = json.loads(raw)
    return GuardPolicy(
        policy_id=doc["policy_id"],
        injection_patterns=[(p["rule_id"], p["pattern"]) for p in doc.get("injection_patterns", [])],
        pii_rules=[PiiRule(r["name"], r["pattern"], r["replacement"])
                   for r in doc.get("pii_rules", [])],
        deny_topics={k: list(v) for k, v in doc.get("deny_topics", {}).items()},
        policy_facts={k: str(v) for k, v in doc.get("policy_facts", {}).items()},
    )


def merge_traces(guard_events: Iterable[GuardEvent], audit_events: Iterable[Any]) -> list[dict]:
    """Chronologically merge guard events with orchestrator audit events."""
    merged: list[tuple[int, int, dict]] = []
    for i, e in enumerate(guard_events):
        merged.append((e.at, i, {
            "source": "guard", "at": e.at, "direction": e.direction.value,
            "peer_id": e.peer_id, "decision": e.decision.value,
            "rule_id": e.rule_id, "matched_rules": e.matched_rules, "task_id": e.task_id,
        }))
    for i, e in enumerate(audit_events):
        merged.append((e["at"], i, {"source": "audit", **e}))
    merged.sort(key=lambda item: (item[0], item[1]))
    return [entry for _, _, entry in merged]
