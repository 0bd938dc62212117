"""The network face of a gateway: handshake, search, execution proxy.

Search composes the registry's visible snapshot with two-stage retrieval and
ships ranked manifests back; execution validates inputs against the cached
manifest, screens what goes to and comes from the resource, and feeds every
real execution outcome into the registry metrics. Messages that never reach
a resource (unknown id, suspended, schema violation) come back as error
results without touching that resource's metrics.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable

from ._util import now_ms
from .guard import Decision, Direction, GuardLog, GuardPolicy, load_policy, screen_values
from .protocol import (
    ExecutionCommand,
    ExecutionResult,
    Outcome,
    ResourceKind,
    ResourceManifest,
    ResourceOffer,
    ResourceQuery,
    ScoredManifest,
    error_result,
    make_offer,
    validate_inputs,
)
from .registry import Registry, RegistryError, ValidationState
from .retrieval import IdentityReranker, RerankProvider, SearchIndex, rerank, retrieve
from .transport import DeadlineExceeded, Transport, TransportError

logger = logging.getLogger(__name__)

SCORE_FLOOR = 0.05
STAGE1_K = 5
QUEUE_CAPACITY = 128
DRAIN_WAIT_S = 10.0


class GatewayError(Exception):
    def __init__(self, code: str, message: str | None = None):
        super().__init__(message or code)
        self.code = code


@dataclass
class GatewayIdentity:
    gateway_id: str
    display_name: str = ""
    base_url: str = ""
    auth_token: str = ""
    capabilities: list[ResourceKind] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "gateway_id": self.gateway_id,
            "display_name": self.display_name,
            "base_url": self.base_url,
            "auth_token": self.auth_token,
            "capabilities": [c.value for c in self.capabilities],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GatewayIdentity":
        return cls(
            gateway_id=d["gateway_id"],
            display_name=d.get("display_name", ""),
            base_url=d.get("base_url", ""),
            auth_token=d.get("auth_token", ""),
            capabilities=[ResourceKind(c) for c in d.get("capabilities", [])],
        )


class GatewayService:
    """One gateway: a registry plus search/execute handling."""

    def __init__(
        self,
        gateway_id: str,
        registry: Registry,
        transport: Transport,
        *,
        display_name: str = "",
        base_url: str = "",
        accepted_tokens: set[str] | None = None,
        policy: GuardPolicy | None = None,
        reranker: RerankProvider | None = None,
        guard_log: GuardLog | None = None,
        clock: Callable[[], int] = now_ms,
        score_floor: float = SCORE_FLOOR,
        queue_capacity: int = QUEUE_CAPACITY,
    ):
        self.gateway_id = gateway_id
        self.registry = registry
        self.transport = transport
        self.display_name = display_name or gateway_id
        self.base_url = base_url
        self.accepted_tokens = accepted_tokens or set()
        self.policy = policy or load_policy()
        self.reranker = reranker or IdentityReranker()
        self.guard_log = guard_log or GuardLog(clock=clock)
        self.clock = clock
        self.score_floor = score_floor
        self.queue_capacity = queue_capacity
        self._index: SearchIndex | None = None
        self._index_gen = -1
        self._draining = False
        self._drain_cv = threading.Condition()
        self._queued = 0

    # -- identity / handshake -------------------------------------------------

    def identity(self) -> GatewayIdentity:
        kinds = sorted({e.manifest.kind for e in self.registry.entries()},
                       key=lambda k: k.value)
        return GatewayIdentity(
            gateway_id=self.gateway_id,
            display_name=self.display_name,
            base_url=self.base_url,
            capabilities=list(kinds),
        )

    def handle_connect(self, token: str) -> GatewayIdentity:
        """Handshake from a principal; the offered token must be recognized."""
        if self.accepted_tokens and token not in self.accepted_tokens:
            raise GatewayError("bad_token", "connect token not recognized")
        return self.identity()

    def authenticate(self, token: str | None) -> None:
        if self.accepted_tokens and token not in self.accepted_tokens:
            raise GatewayError("unauthenticated", "missing or invalid bearer token")

    # -- registration ------------------------------------------------------------

    def register_resource(self, manifest: ResourceManifest, validate: bool = False):
        manifest.owner_gateway = self.gateway_id
        entry = self.registry.register(manifest)
        if validate:
            self.registry.validate(manifest.resource_id, self.transport)
        return entry

    # -- search ---------------------------------------------------------------------

    def _current_index(self) -> SearchIndex:
        if self._index is None or self._index_gen != self.registry.generation:
            self._index = SearchIndex(self.registry.visible_manifests())
            self._index_gen = self.registry.generation
        return self._index

    def begin_drain(self) -> None:
        with self._drain_cv:
            self._draining = True

    def end_drain(self) -> None:
        with self._drain_cv:
            self._draining = False
            self._drain_cv.notify_all()

    @property
    def draining(self) -> bool:
        return self._draining

    def handle_search(self, query: ResourceQuery) -> ResourceOffer:
        """Two-stage search per subtask; partitioned offer out.

        While draining, calls queue (bounded) until the drain ends.
        """
        with self._drain_cv:
            if self._draining:
                if self._queued >= self.queue_capacity:
                    raise GatewayError("queue_full",
                                       f"pending queue at capacity {self.queue_capacity}; retry later")
                self._queued += 1
                try:
                    served = self._drain_cv.wait_for(lambda: not self._draining,
                                                     timeout=DRAIN_WAIT_S)
                finally:
                    self._queued -= 1
                if not served:
                    raise GatewayError("queue_full", "gateway stayed draining; retry later")

        index = self._current_index()
        by_id = {m.resource_id: m for m in self.registry.visible_manifests()}
        texts = {rid: m.search_text() for rid, m in by_id.items()}
        per_task: dict[str, list[ScoredManifest]] = {}
        for task in query.subtasks:
            search_text = task.description
            if query.context_summary:
                search_text += " " + query.context_summary
            stage1 = retrieve(index, search_text, STAGE1_K, query_id=query.query_id)
            stage2 = rerank(task.description, query.context_summary, stage1,
                            self.reranker, texts=texts)
            candidates = [
                ScoredManifest(by_id[rid].copy(), score)
                for rid, score in stage2.items[: query.max_offers_per_task]
                if score >= self.score_floor
            ]
            per_task[task.task_id] = candidates
        return make_offer(query, per_task)

    # -- execution ---------------------------------------------------------------------

    def handle_execute(self, command: ExecutionCommand) -> ExecutionResult:
        """Proxy one command to its resource with screening and metrics."""
        try:
            entry = self.registry.get(command.resource_id)
        except RegistryError:
            return error_result(command.command_id,
                                f"unknown_resource: {command.resource_id}")
        if entry.suspended or entry.validation is not ValidationState.PASSED:
            return error_result(command.command_id,
                                f"suspended_resource: {command.resource_id}")
        manifest = entry.manifest
        violations = validate_inputs(command.inputs, manifest.input_schema)
        if violations:
            return error_result(command.command_id,
                                "schema_violation: " + "; ".join(violations))

        workflow_hint = command.command_id.split(":", 1)[0]
        inputs, outbound = screen_values(command.inputs, Direction.OUTBOUND, self.policy)
        self.guard_log.record(workflow_hint, command.resource_id, outbound,
                              command_id=command.command_id)
        if outbound.decision is Decision.BLOCK:
            result = error_result(command.command_id,
                                  f"blocked_outbound: rule {outbound.rule_id}")
            self.registry.record_outcome(command.resource_id, result)
            return result
        upstream = ExecutionCommand(
            command_id=command.command_id,
            resource_id=command.resource_id,
            endpoint=manifest.endpoint,
            inputs=inputs,
            deadline_ms=command.deadline_ms,
        )

        started = self.clock()
        result = self._invoke_with_retry(upstream)
        if result.outcome is Outcome.OK and result.elapsed_ms == 0:
            result.elapsed_ms = max(0, self.clock() - started)

        if result.outcome is Outcome.OK:
            payload, inbound = screen_values(result.payload, Direction.INBOUND, self.policy)
            self.guard_log.record(workflow_hint, command.resource_id, inbound,
                                  command_id=command.command_id)
            if inbound.decision is Decision.BLOCK:
                # the blocked payload is dropped, never delivered downstream
                result = error_result(
                    command.command_id,
                    f"blocked_inbound: rule {inbound.rule_id} from {command.resource_id}",
                    result.elapsed_ms)
            else:
                result = ExecutionResult(command.command_id, Outcome.OK,
                                         payload=payload, elapsed_ms=result.elapsed_ms)
        else:
            inbound_screened, inbound = screen_values(
                {"error_message": result.error_message}, Direction.INBOUND, self.policy)
            self.guard_log.record(workflow_hint, command.resource_id, inbound,
                                  command_id=command.command_id)
            if inbound.decision is Decision.BLOCK:
                result = error_result(command.command_id,
                                      f"blocked_inbound: rule {inbound.rule_id} from "
                                      f"{command.resource_id}", result.elapsed_ms)
            else:
                result = error_result(command.command_id,
                                      inbound_screened["error_message"], result.elapsed_ms)

        self.registry.record_outcome(command.resource_id, result)
        return result

    def _invoke_with_retry(self, command: ExecutionCommand) -> ExecutionResult:
        try:
            return self.transport.invoke(command)
        except DeadlineExceeded as exc:
            return error_result(command.command_id, f"deadline_exceeded: {exc}",
                                command.deadline_ms)
        except TransportError as exc:
            logger.warning("transport failure for %s, retrying once: %s",
                           command.command_id, exc)
            try:
                return self.transport.invoke(command)
            except DeadlineExceeded as exc2:
                return error_result(command.command_id, f"deadline_exceeded: {exc2}",
                                    command.deadline_ms)
            except TransportError as exc2:
                return error_result(command.command_id, f"upstream_error: {exc2}")

    # -- misc ------------------------------------------------------------------------

    def guard_events(self, command_ids: set[str] | None = None):
        events = self.guard_log.all_events()
        if command_ids is None:
            return events
        return [e for e in events if e.command_id in command_ids]

    def health(self) -> dict:
        entries = self.registry.entries()
        return {
            "status": "draining" if self._draining else "ok",
            "gateway_id": self.gateway_id,
            "resources": len(entries),
            "visible": len(self.registry.visible_manifests()),
        }
