"""The principal: intent intake, gateway fan-out, composition, execution glue.

Holds the gateway roster with its trust ratings, the local resource pool
(builtins plus an LRU cache of manifest references), and the wiring that
screens every message crossing a service boundary exactly once per
direction. Planning, composition and the re-plan loop run here; graph
execution is delegated to the orchestrator engine.
"""
from __future__ import annotations

import logging
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Protocol

from ._util import new_id, now_ms, tokens
from .agents import Agent, build_agents, BUILTIN_NAMES
from .context import ContextStore, MemoryKind, PoolDirection, PoolMessage, Purpose, WorkflowView
from .gateway import GatewayIdentity
from .guard import (
    Decision,
    Direction,
    GuardEvent,
    GuardLog,
    GuardPolicy,
    load_policy,
    merge_traces,
    screen,
    screen_values,
)
from .orchestrator import (
    GateDecision,
    Orchestrator,
    OrchestratorError,
    WorkflowRecord,
    WorkflowStatus,
    WorkflowStore,
)
from .planner import (
    Intent,
    PlanningError,
    ReasoningProvider,
    compose,
    plan,
    replan,
    MAX_REPLAN_ROUNDS,
)
from .protocol import (
    Assignment,
    ExecutionCommand,
    ExecutionResult,
    Mode,
    NodeKind,
    NodeStatus,
    Outcome,
    ResourceManifest,
    ResourceOffer,
    ResourceQuery,
    ScoredManifest,
    TaskSpec,
    assert_offer_partition,
    error_result,
)
from .transport import LocalTransport, TransportError

logger = logging.getLogger(__name__)

RATING_ALPHA = 0.2
RATING_INITIAL = 0.5
POOL_CAPACITY = 64
LOCAL_MATCH_THRESHOLD = 0.5
FAN_OUT_TIMEOUT_S = 5.0
MERGE_CAP_PER_TASK = 10


class PrincipalError(Exception):
    def __init__(self, code: str, message: str | None = None):
        super().__init__(message or code)
        self.code = code


# --- gateway clients -----------------------------------------------------------


class GatewayClient(Protocol):
    gateway_id: str

    def connect(self, token: str) -> GatewayIdentity: ...
    def search(self, query: ResourceQuery) -> ResourceOffer: ...
    def execute(self, command: ExecutionCommand) -> ExecutionResult: ...
    def guard_events(self, command_ids: set[str]) -> list[GuardEvent]: ...


class InProcessGatewayClient:
    """Direct calls into a co-located gateway service (tests, demo)."""

    def __init__(self, service):
        self.service = service
        self.gateway_id = service.gateway_id

    def connect(self, token: str) -> GatewayIdentity:
        return self.service.handle_connect(token)

    def search(self, query: ResourceQuery) -> ResourceOffer:
        return self.service.handle_search(query)

    def execute(self, command: ExecutionCommand) -> ExecutionResult:
        return self.service.handle_execute(command)

    def guard_events(self, command_ids: set[str]) -> list[GuardEvent]:
        return self.service.guard_events(command_ids)


class HttpGatewayClient:
    """Speaks the gateway HTTP API with a bearer token."""

    def __init__(self, base_url: str, token: str, client=None, gateway_id: str = ""):
        import httpx

        from .guard import event_from_dict
        from .protocol import decode, encode

        self._decode, self._encode = decode, encode
        self._event_from_dict = event_from_dict
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.gateway_id = gateway_id
        self._client = client or httpx.Client()

    def _headers(self):
        return {"authorization": f"Bearer {self.token}",
                "content-type": "application/json"}

    def connect(self, token: str) -> GatewayIdentity:
        response = self._client.post(f"{self.base_url}/v1/connect",
                                     json={"token": token}, timeout=FAN_OUT_TIMEOUT_S)
        if response.status_code != 200:
            raise TransportError(f"connect failed: HTTP {response.status_code}")
        identity = GatewayIdentity.from_dict(response.json())
        self.gateway_id = identity.gateway_id
        return identity

    def search(self, query: ResourceQuery) -> ResourceOffer:
        response = self._client.post(f"{self.base_url}/v1/search",
                                     content=self._encode(query),
                                     headers=self._headers(),
                                     timeout=FAN_OUT_TIMEOUT_S)
        if response.status_code != 200:
            raise TransportError(f"search failed: HTTP {response.status_code}")
        return self._decode(response.content)

    def execute(self, command: ExecutionCommand) -> ExecutionResult:
        response = self._client.post(f"{self.base_url}/v1/execute",
                                     content=self._encode(command),
                                     headers=self._headers(),
                                     timeout=command.deadline_ms / 1000.0 + 1.0)
        if response.status_code != 200:
            raise TransportError(f"execute failed: HTTP {response.status_code}")
        return self._decode(response.content)

    def guard_events(self, command_ids: set[str]) -> list[GuardEvent]:
        response = self._client.get(f"{self.base_url}/v1/guard-events",
                                    headers=self._headers(), timeout=FAN_OUT_TIMEOUT_S)
        if response.status_code != 200:
            return []
        events = [self._event_from_dict(d) for d in response.json()]
        return [e for e in events if e.command_id in command_ids]


# --- roster ------------------------------------------------------------------------


@dataclass
class RosterEntry:
    identity: GatewayIdentity
    client: GatewayClient
    rating: float = RATING_INITIAL
    connected: bool = True
    last_seen: int = 0
    joined_seq: int = 0


class GatewayRoster:
    """Connected gateways with EWMA trust ratings in [0, 1]."""

    def __init__(self, clock: Callable[[], int] = now_ms, alpha: float = RATING_ALPHA):
        self._entries: dict[str, RosterEntry] = {}
        self._clock = clock
        self._alpha = alpha
        self._join_counter = 0
        self._lock = threading.Lock()

    def add(self, identity: GatewayIdentity, client: GatewayClient) -> RosterEntry:
        with self._lock:
            self._join_counter += 1
            entry = RosterEntry(identity=identity, client=client,
                                last_seen=self._clock(), joined_seq=self._join_counter)
            self._entries[identity.gateway_id] = entry
            return entry

    def get(self, gateway_id: str) -> RosterEntry:
        entry = self._entries.get(gateway_id)
        if entry is None:
            raise PrincipalError("unknown_gateway", f"not in roster: {gateway_id}")
        return entry

    def connected_ids(self) -> list[str]:
        return sorted(gid for gid, e in self._entries.items() if e.connected)

    def entries(self) -> list[RosterEntry]:
        return [self._entries[gid] for gid in sorted(self._entries)]

    def update_rating(self, gateway_id: str, observation: float) -> float:
        """EWMA update; observations and ratings both live in [0, 1]."""
        entry = self.get(gateway_id)
        observation = min(1.0, max(0.0, float(observation)))
        with self._lock:
            entry.rating = (1.0 - self._alpha) * entry.rating + self._alpha * observation
            entry.rating = min(1.0, max(0.0, entry.rating))
            entry.last_seen = self._clock()
            return entry.rating

    def ratings(self) -> dict[str, float]:
        return {gid: e.rating for gid, e in self._entries.items()}


# --- local resource pool ---------------------------------------------------------------


class LocalResourcePool:
    """Builtins plus an LRU cache of manifest references from gateways.

    Builtins are never evicted; cached entries hold only the manifest (the
    resource's location and declared capability), never anything executable.
    """

    def __init__(self, builtins: list[ResourceManifest] | None = None,
                 capacity: int = POOL_CAPACITY):
        self.capacity = capacity
        self.builtins: dict[str, ResourceManifest] = {
            m.resource_id: m for m in (builtins or [])}
        self._cache: OrderedDict[str, ResourceManifest] = OrderedDict()
        self.evictions: list[str] = []

    def __contains__(self, resource_id: str) -> bool:
        return resource_id in self.builtins or resource_id in self._cache

    def pool_get(self, resource_id: str) -> ResourceManifest | None:
        if resource_id in self.builtins:
            return self.builtins[resource_id]
        manifest = self._cache.get(resource_id)
        if manifest is not None:
            self._cache.move_to_end(resource_id)
        return manifest

    def pool_put(self, manifest: ResourceManifest) -> str | None:
        """Insert/refresh a reference; returns the evicted id, if any."""
        if manifest.resource_id in self.builtins:
            return None
        self._cache[manifest.resource_id] = manifest
        self._cache.move_to_end(manifest.resource_id)
        if len(self._cache) > self.capacity:
            evicted, _ = self._cache.popitem(last=False)
            self.evictions.append(evicted)
            return evicted
        return None

    def cached_ids(self) -> list[str]:
        return list(self._cache)

    def match_local(self, task: TaskSpec) -> ScoredManifest | None:
        """Local-first rule: keyword overlap plus coverage >= 0.5.

        Coverage is the stage-2 scorer: the fraction of task-description
        tokens found in the manifest's name+text.
        """
        task_tokens = set(tokens(task.description))
        if not task_tokens:
            return None
        best: tuple[float, ResourceManifest] | None = None
        candidates = list(self.builtins.values()) + list(self._cache.values())
        for manifest in candidates:
            text_tokens = set(tokens(manifest.name)) | set(tokens(manifest.search_text()))
            if not (task_tokens & text_tokens):
                continue
            coverage = len(task_tokens & text_tokens) / len(task_tokens)
            if coverage >= LOCAL_MATCH_THRESHOLD:
                if best is None or coverage > best[0] or \
                        (coverage == best[0] and manifest.resource_id < best[1].resource_id):
                    best = (coverage, manifest)
        if best is None:
            return None
        return ScoredManifest(best[1], best[0])


# --- principal service ---------------------------------------------------------------


@dataclass
class PrincipalUser:
    token: str
    tenant_id: str
    user_id: str


@dataclass
class FanOutResult:
    offers: list[ResourceOffer]
    local_hits: dict[str, ScoredManifest]
    queried_gateways: list[str]
    outbound_query: ResourceQuery | None


class PrincipalService:
    def __init__(
        self,
        provider: ReasoningProvider,
        *,
        workflow_dir=None,
        context_path=None,
        policy: GuardPolicy | None = None,
        clock: Callable[[], int] = now_ms,
        pool_capacity: int = POOL_CAPACITY,
        rating_alpha: float = RATING_ALPHA,
        gateway_join_granularity: str = "round",
        gateway_tokens: set[str] | None = None,
        users: list[PrincipalUser] | None = None,
        output_checks: dict[str, Callable] | None = None,
        fan_out_timeout_s: float = FAN_OUT_TIMEOUT_S,
        builtin_agents: dict[str, Agent] | None = None,
        strategy: str = "react",
        id_factory: Callable[[str], str] | None = None,
    ):
        self.provider = provider
        self.strategy = strategy
        self.policy = policy or load_policy()
        self.clock = clock
        self.guard_log = GuardLog(clock=clock)
        self.context = ContextStore(snapshot_path=context_path, clock=clock)
        self.roster = GatewayRoster(clock=clock, alpha=rating_alpha)
        self.gateway_join_granularity = gateway_join_granularity
        self.gateway_tokens = gateway_tokens or set()
        self.users = {u.token: u for u in (users or [])}
        self.fan_out_timeout_s = fan_out_timeout_s
        self.new_id = id_factory or new_id

        agents = builtin_agents if builtin_agents is not None else {
            name: agent for name, agent in build_agents(self.policy).items()
            if name in BUILTIN_NAMES}
        self.local_transport = LocalTransport()
        for agent in agents.values():
            self.local_transport.mount(agent.name, agent.handle)
        self.pool = LocalResourcePool(
            [a.manifest for a in agents.values()], capacity=pool_capacity)

        self.engine = Orchestrator(
            WorkflowStore(workflow_dir),
            _PrincipalExecutor(self),
            recovery=self._recover_node,
            output_checks=output_checks,
            clock=clock,
            on_event=self._on_engine_event,
        )
        self.context.set_view_provider(self._workflow_view)
        self._workflow_roster_snapshot: dict[str, list[str]] = {}
        self._workflow_commands: dict[str, set[str]] = {}
        self._events: dict[str, list[dict]] = {}
        self._events_cv = threading.Condition()
        self._rated_workflows: set[str] = set()

    # -- auth --------------------------------------------------------------------

    def user_for(self, token: str | None) -> PrincipalUser:
        user = self.users.get(token or "")
        if user is None:
            raise PrincipalError("unauthenticated", "unknown principal token")
        return user

    def _check_tenant(self, record: WorkflowRecord, user: PrincipalUser | None):
        if user is not None and record.tenant_id != user.tenant_id:
            # foreign workflows are indistinguishable from unknown ones
            raise PrincipalError("unauthenticated",
                                 f"workflow {record.workflow_id} not accessible")

    # -- gateway lifecycle ----------------------------------------------------------

    def connect_gateway(self, identity: GatewayIdentity,
                        client: GatewayClient | None = None) -> RosterEntry:
        """Vet a connect request: allow-listed token plus a probe round-trip."""
        if self.gateway_tokens and identity.auth_token not in self.gateway_tokens:
            raise PrincipalError("bad_token", "gateway token not in the allow-list")
        if client is None:
            client = HttpGatewayClient(identity.base_url, identity.auth_token,
                                       gateway_id=identity.gateway_id)
        try:
            confirmed = client.connect(identity.auth_token)
            probe = ResourceQuery(
                query_id=self.new_id("probe"),
                subtasks=[TaskSpec("probe", "connectivity probe for vetting")],
            )
            offer = client.search(probe)
        except Exception as exc:
            raise PrincipalError("probe_failed", f"probe search failed: {exc}") from exc
        if offer.query_id != probe.query_id:
            raise PrincipalError("probe_failed", "gateway answered a different query")
        identity.gateway_id = confirmed.gateway_id or identity.gateway_id
        entry = self.roster.add(identity, client)
        logger.info("gateway %s joined the roster", identity.gateway_id)
        return entry

    def _eligible_gateways(self, workflow_id: str | None) -> list[str]:
        connected = self.roster.connected_ids()
        if (self.gateway_join_granularity == "workflow" and workflow_id
                and workflow_id in self._workflow_roster_snapshot):
            snapshot = set(self._workflow_roster_snapshot[workflow_id])
            return [gid for gid in connected if gid in snapshot]
        return connected

    # -- fan-out ----------------------------------------------------------------------

    def fan_out_query(self, query: ResourceQuery, workflow_id: str | None = None,
                      exclude_resources: set[str] | None = None) -> FanOutResult:
        """Local-first resolution, then concurrent broadcast to the roster.

        ``exclude_resources`` keeps named resources (e.g. one that just
        failed) from satisfying the local-first rule, so the query still
        reaches the gateways.
        """
        local_hits: dict[str, ScoredManifest] = {}
        rest: list[TaskSpec] = []
        for task in query.subtasks:
            if task.node_kind is not NodeKind.AGENTIC:
                continue  # non-agentic tasks are never queried
            hit = self.pool.match_local(task)
            if hit is not None and exclude_resources and \
                    hit.manifest.resource_id in exclude_resources:
                hit = None
            if hit is not None:
                local_hits[task.task_id] = hit
            else:
                rest.append(task)

        gateways = self._eligible_gateways(workflow_id)
        if not rest:
            return FanOutResult([], local_hits, [], None)
        if not gateways:
            raise PrincipalError(
                "no_gateways_and_no_local_match",
                f"no connected gateway can serve: {[t.task_id for t in rest]}")

        summary, verdict = self._screen_outbound_text(query.context_summary)
        outbound = ResourceQuery(
            query_id=query.query_id,
            subtasks=rest,
            context_summary=summary,
            max_offers_per_task=query.max_offers_per_task,
        )
        if workflow_id and self.context.knows_workflow(workflow_id):
            for gid in gateways:
                self.guard_log.record(workflow_id, gid, verdict)
                self.context.append_pool(PoolMessage(
                    workflow_id, PoolDirection.TO_GATEWAY, gid,
                    "resource_query", f"{len(rest)} subtask(s)"))
        if verdict.decision is Decision.BLOCK:
            raise PrincipalError("blocked_outbound",
                                 f"query context blocked by rule {verdict.rule_id}")

        offers: list[ResourceOffer] = []
        responded: list[str] = []
        with ThreadPoolExecutor(max_workers=max(1, len(gateways))) as pool:
            futures = {gid: pool.submit(self.roster.get(gid).client.search, outbound)
                       for gid in gateways}
            for gid, future in futures.items():
                try:
                    offer = future.result(timeout=self.fan_out_timeout_s)
                except Exception as exc:
                    logger.warning("gateway %s failed fan-out: %s", gid, exc)
                    self.roster.update_rating(gid, 0.0)  # timeout penalty
                    continue
                offer = self._screen_inbound_offer(offer, gid, workflow_id)
                offers.append(offer)
                responded.append(gid)
                if workflow_id and self.context.knows_workflow(workflow_id):
                    self.context.append_pool(PoolMessage(
                        workflow_id, PoolDirection.FROM_GATEWAY, gid,
                        "resource_offer", f"{len(offer.per_task)} task(s) covered"))
        merged = merge_offers(offers, cap_per_task=MERGE_CAP_PER_TASK)
        return FanOutResult(merged, local_hits, responded, outbound)

    def _screen_outbound_text(self, text: str):
        verdict = screen(text, Direction.OUTBOUND, self.policy)
        if verdict.decision is Decision.REDACT:
            return verdict.redacted_text, verdict
        return text, verdict

    def _screen_inbound_offer(self, offer: ResourceOffer, gateway_id: str,
                              workflow_id: str | None) -> ResourceOffer:
        """Screen offered manifest text; blocked candidates are dropped."""
        matched: list[str] = []
        block_rule = None
        cleaned: dict[str, list[ScoredManifest]] = {}
        for tid, candidates in offer.per_task.items():
            kept = []
            for candidate in candidates:
                verdict = screen(candidate.manifest.search_text(), Direction.INBOUND,
                                 self.policy)
                matched.extend(r for r in verdict.matched_rules if r not in matched)
                if verdict.decision is Decision.BLOCK:
                    block_rule = block_rule or verdict.rule_id
                    continue
                kept.append(candidate)
            if kept:
                cleaned[tid] = kept
        from .guard import GuardVerdict

        combined = GuardVerdict(
            Decision.BLOCK if block_rule else Decision.ALLOW,
            Direction.INBOUND, matched_rules=matched, rule_id=block_rule)
        if workflow_id:
            self.guard_log.record(workflow_id, gateway_id, combined)
        covered = list(offer.per_task) + list(offer.unfulfilled)
        unfulfilled = [tid for tid in covered if tid not in cleaned]
        screened = ResourceOffer(query_id=offer.query_id, per_task=cleaned,
                                 unfulfilled=sorted(set(unfulfilled)))
        assert_offer_partition(screened, covered)
        return screened

    # -- intent lifecycle ---------------------------------------------------------------

    def submit_intent(self, intent: Intent, token: str | None = None) -> str:
        if self.users:
            user = self.user_for(token)
            intent.tenant_id, intent.user_id = user.tenant_id, user.user_id
        workflow_id = self.new_id("wf")
        self.context.register_workflow(workflow_id, intent.text,
                                       intent.tenant_id, intent.user_id)
        self._workflow_roster_snapshot[workflow_id] = self.roster.connected_ids()
        self._workflow_commands[workflow_id] = set()

        outcome = plan(intent, self.provider, self.strategy,
                       scratchpad=lambda step: self.context.append_scratchpad(
                           workflow_id, step))

        record = WorkflowRecord(
            workflow_id=workflow_id,
            tenant_id=intent.tenant_id,
            user_id=intent.user_id,
            intent_id=intent.intent_id,
            intent_text=intent.text,
            preferences=dict(intent.preferences),
            graph=None,  # set below
        )
        self.engine.track(record)  # visible to get_status during composition

        compose_result, unfulfilled, offered = self._compose_with_replanning(
            workflow_id, intent, outcome, {})
        record.graph = compose_result.graph
        record.replan_rounds_used = getattr(compose_result, "rounds_used", 0)

        # retain references to the resources the composition actually kept
        for node in record.graph.nodes:
            if node.assignment and node.assignment.gateway_id:
                manifest = offered.get(node.assignment.resource_id)
                if manifest is not None:
                    self.pool.pool_put(manifest)

        if unfulfilled:
            record.unfulfilled = sorted(unfulfilled)
            record.failure_reason = (
                "no resources found after "
                f"{MAX_REPLAN_ROUNDS} re-plan rounds: {record.unfulfilled}")
            record.status = WorkflowStatus.FAILED
            self.engine.track(record)
            self._emit_event(record, {"kind": "workflow_status", "to": "failed",
                                      "detail": record.failure_reason})
            return workflow_id

        self.engine.track(record)
        if record.graph.mode is Mode.NO_LLM:
            record.graph_approved = True
        return workflow_id

    def _compose_with_replanning(self, workflow_id, intent, outcome, preassigned):
        fan_out = self.fan_out_query(
            ResourceQuery(
                query_id=self.new_id("q"),
                subtasks=outcome.tasks,
                context_summary=self.context.assemble_context(
                    workflow_id, Purpose.QUERY_SUMMARY).text[:1000],
            ),
            workflow_id,
        )
        offers = list(fan_out.offers)
        local_hits = dict(fan_out.local_hits)
        result = compose(
            outcome.tasks, offers, local_hits,
            ratings=self.roster.ratings(),
            preassigned=preassigned,
            task_inputs=outcome.task_inputs,
            mode=intent.mode,
            graph_id=self.new_id("g"),
        )
        rounds = 0
        while result.unassigned and rounds < MAX_REPLAN_ROUNDS:
            rounds += 1
            try:
                query = replan(result.graph, result.unassigned, self.provider,
                               round_no=rounds,
                               context_summary=self.context.assemble_context(
                                   workflow_id, Purpose.QUERY_SUMMARY).text[:1000],
                               query_id=self.new_id("q"))
                more = self.fan_out_query(query, workflow_id)
            except PrincipalError as exc:
                logger.warning("re-plan round %d failed: %s", rounds, exc)
                break
            offers.extend(more.offers)
            local_hits.update(more.local_hits)
            result = compose(
                outcome.tasks, offers, local_hits,
                ratings=self.roster.ratings(),
                preassigned=preassigned,
                task_inputs=outcome.task_inputs,
                mode=intent.mode,
                graph_id=result.graph.graph_id,
            )
        result.rounds_used = rounds
        unassigned_required = [
            tid for tid in result.unassigned
            if result.graph.node(tid).spec.node_kind is NodeKind.AGENTIC]
        offered = {c.manifest.resource_id: c.manifest
                   for offer in offers for lst in offer.per_task.values() for c in lst}
        return result, unassigned_required, offered

    # -- approval / gates / lifecycle ------------------------------------------------------

    def approve_graph(self, workflow_id: str, token: str | None = None) -> WorkflowRecord:
        record = self.get_record(workflow_id, token)
        if record.status is not WorkflowStatus.COMPOSING:
            raise PrincipalError("invalid_mode_transition",
                                 f"workflow is {record.status.value}, not awaiting approval")
        record.graph_approved = True
        self.engine.start(record)
        return self.run(workflow_id)

    def decide_gate(self, decision: GateDecision, token: str | None = None) -> WorkflowRecord:
        self.get_record(decision.workflow_id, token)
        record = self.engine.decide_gate(decision)
        self._rate_if_terminal(record)
        return record

    def pause(self, workflow_id: str, token: str | None = None) -> WorkflowRecord:
        self.get_record(workflow_id, token)
        return self.engine.pause(workflow_id)

    def resume(self, workflow_id: str, token: str | None = None) -> WorkflowRecord:
        record = self.get_record(workflow_id, token)
        if self.context.knows_workflow(workflow_id):
            # picking up pending actions needs the assembled context; keep it
            # in the memory bank where the next planning round can find it
            assembled = self.context.assemble_context(workflow_id, Purpose.RESUME)
            self.context.upsert_memory(
                record.tenant_id, record.user_id, f"resume.{workflow_id}",
                assembled.text[:500], MemoryKind.FACT)
        record = self.engine.resume(workflow_id)
        self._rate_if_terminal(record)
        return record

    def run(self, workflow_id: str) -> WorkflowRecord:
        record = self.engine.run(workflow_id)
        self._rate_if_terminal(record)
        return record

    def get_record(self, workflow_id: str, token: str | None = None) -> WorkflowRecord:
        user = self.user_for(token) if self.users else None
        try:
            record = self.engine.get(workflow_id)
        except OrchestratorError as exc:
            raise PrincipalError("unknown_workflow", str(exc)) from exc
        self._check_tenant(record, user)
        return record

    def get_status(self, workflow_id: str, token: str | None = None) -> dict:
        record = self.get_record(workflow_id, token)
        graph = record.graph
        return {
            "workflow_id": record.workflow_id,
            "status": record.status.value,
            "intent_text": record.intent_text,
            "mode": graph.mode.value if graph else None,
            "graph_approved": record.graph_approved,
            "pending_gates": list(record.pending_gates),
            "unfulfilled": list(record.unfulfilled),
            "failure_reason": record.failure_reason,
            "nodes": [
                {
                    "task_id": n.spec.task_id,
                    "description": n.spec.description,
                    "depends_on": list(n.spec.depends_on),
                    "node_kind": n.spec.node_kind.value,
                    "status": n.status.value,
                    "assignment": None if n.assignment is None else {
                        "resource_id": n.assignment.resource_id,
                        "gateway_id": n.assignment.gateway_id,
                    },
                }
                for n in (graph.nodes if graph else [])
            ],
            "node_outputs": {
                tid: {"outcome": r.outcome.value,
                      "payload": r.payload, "error_message": r.error_message}
                for tid, r in record.node_outputs.items()
            },
        }

    def trace(self, workflow_id: str, token: str | None = None) -> list[dict]:
        """Merged guard + audit timeline, including gateway-side screen events."""
        record = self.get_record(workflow_id, token)
        events = list(self.guard_log.trace(workflow_id))
        command_ids = self._workflow_commands.get(workflow_id, set())
        for entry in self.roster.entries():
            try:
                remote = entry.client.guard_events(command_ids)
            except Exception:
                remote = []
            events.extend(remote)
        return merge_traces(events, [e.to_dict() for e in record.audit])

    # -- engine hooks -------------------------------------------------------------------

    def _workflow_view(self, workflow_id: str) -> WorkflowView | None:
        try:
            record = self.engine.get(workflow_id)
        except OrchestratorError:
            return None
        completed = []
        pending = []
        for node in (record.graph.nodes if record.graph else []):
            tid = node.spec.task_id
            if node.status is NodeStatus.SUCCEEDED and tid in record.node_outputs:
                payload = record.node_outputs[tid].payload or {}
                first = next(iter(sorted(payload)), None)
                line = f"{first}={str(payload.get(first))[:60]}" if first else "done"
                completed.append((tid, line))
            elif node.status in (NodeStatus.PENDING, NodeStatus.AWAITING_APPROVAL,
                                 NodeStatus.RUNNING):
                pending.append((tid, node.spec.description))
        return WorkflowView(record.intent_text, record.tenant_id, record.user_id,
                            completed=completed, pending=pending)

    def _recover_node(self, record: WorkflowRecord, task_id: str) -> Assignment | None:
        """Failure-recovery search for a substitute; spends re-plan budget."""
        if record.replan_rounds_used >= MAX_REPLAN_ROUNDS:
            return None
        record.replan_rounds_used += 1
        node = record.node(task_id)
        failed_id = node.assignment.resource_id if node.assignment else None
        try:
            query = replan(record.graph, [task_id], self.provider,
                           round_no=record.replan_rounds_used,
                           context_summary=f"substitute needed for {failed_id}",
                           query_id=self.new_id("q"))
            fan_out = self.fan_out_query(
                query, record.workflow_id,
                exclude_resources={failed_id} if failed_id else None)
        except (PlanningError, PrincipalError):
            return None
        candidates: list[tuple[float, str, Assignment]] = []
        hit = fan_out.local_hits.get(task_id)
        if hit and hit.manifest.resource_id != failed_id:
            candidates.append((hit.score, hit.manifest.resource_id, Assignment(
                hit.manifest.resource_id, hit.manifest.endpoint, "")))
        for offer in fan_out.offers:
            for scored in offer.per_task.get(task_id, []):
                if scored.manifest.resource_id == failed_id:
                    continue
                candidates.append((scored.score, scored.manifest.resource_id, Assignment(
                    scored.manifest.resource_id, scored.manifest.endpoint,
                    scored.manifest.owner_gateway)))
        if not candidates:
            return None
        candidates.sort(key=lambda c: (-c[0], c[1]))
        return candidates[0][2]

    def _on_engine_event(self, record: WorkflowRecord, event) -> None:
        self._emit_event(record, event.to_dict())
        if event.kind == "workflow_status" and event.to_status in ("completed", "failed"):
            self._rate_if_terminal(record)

    def _emit_event(self, record: WorkflowRecord, payload: dict) -> None:
        with self._events_cv:
            log = self._events.setdefault(record.workflow_id, [])
            log.append({"seq": len(log), "workflow_id": record.workflow_id,
                        "status": record.status.value, **payload})
            self._events_cv.notify_all()

    def events_since(self, workflow_id: str, seq: int) -> list[dict]:
        return [e for e in self._events.get(workflow_id, []) if e["seq"] >= seq]

    def _rate_if_terminal(self, record: WorkflowRecord) -> None:
        """Per-workflow gateway observations: fraction of assigned resources
        that succeeded."""
        if record.status not in (WorkflowStatus.COMPLETED, WorkflowStatus.FAILED):
            return
        if record.workflow_id in self._rated_workflows:
            return
        self._rated_workflows.add(record.workflow_id)
        per_gateway: dict[str, list[bool]] = {}
        for node in record.graph.nodes if record.graph else []:
            if node.assignment is None or not node.assignment.gateway_id:
                continue
            ok = node.status is NodeStatus.SUCCEEDED
            per_gateway.setdefault(node.assignment.gateway_id, []).append(ok)
        for gid, results in per_gateway.items():
            observation = sum(results) / len(results)
            try:
                rating = self.roster.update_rating(gid, observation)
            except PrincipalError:
                continue
            self.context.upsert_memory(
                record.tenant_id, record.user_id, f"gateway.{gid}.rating",
                f"{rating:.4f}", MemoryKind.GATEWAY_STAT)


class _PrincipalExecutor:
    """The engine's executor: screen, route (gateway or local), screen back."""

    def __init__(self, principal: PrincipalService):
        self.p = principal

    def execute(self, record: WorkflowRecord, command: ExecutionCommand) -> ExecutionResult:
        p = self.p
        workflow_id = record.workflow_id
        task_id = command.command_id.split(":")[1] if ":" in command.command_id else ""
        node = record.node(task_id)
        gateway_id = node.assignment.gateway_id if node.assignment else ""
        peer = command.resource_id
        p._workflow_commands.setdefault(workflow_id, set()).add(command.command_id)

        inputs, outbound = screen_values(command.inputs, Direction.OUTBOUND, p.policy)
        p.guard_log.record(workflow_id, peer, outbound, task_id=task_id,
                           command_id=command.command_id)
        if p.context.knows_workflow(workflow_id):
            p.context.append_pool(PoolMessage(
                workflow_id, PoolDirection.TO_RESOURCE, peer,
                "execution_command", f"task {task_id}"))
        if outbound.decision is Decision.BLOCK:
            return error_result(command.command_id,
                                f"blocked_outbound: rule {outbound.rule_id}")
        command = ExecutionCommand(command.command_id, command.resource_id,
                                   command.endpoint, inputs, command.deadline_ms)

        if gateway_id:
            client = p.roster.get(gateway_id).client
            try:
                result = client.execute(command)
            except Exception as exc:
                result = error_result(command.command_id, f"gateway_error: {exc}")
        else:
            try:
                result = p.local_transport.invoke(command)
            except TransportError as exc:
                result = error_result(command.command_id, f"local_error: {exc}")
            manifest = p.pool.pool_get(command.resource_id)
            if manifest is not None:
                manifest.metrics.record(result.outcome is Outcome.OK, result.elapsed_ms)

        if result.outcome is Outcome.OK:
            payload, inbound = screen_values(result.payload, Direction.INBOUND, p.policy)
            p.guard_log.record(workflow_id, peer, inbound, task_id=task_id,
                               command_id=command.command_id)
            if inbound.decision is Decision.BLOCK:
                result = error_result(command.command_id,
                                      f"blocked_inbound: rule {inbound.rule_id}",
                                      result.elapsed_ms)
            else:
                result = ExecutionResult(command.command_id, Outcome.OK, payload=payload,
                                         elapsed_ms=result.elapsed_ms)
        else:
            screened, inbound = screen_values({"m": result.error_message},
                                              Direction.INBOUND, p.policy)
            p.guard_log.record(workflow_id, peer, inbound, task_id=task_id,
                               command_id=command.command_id)
            message = (f"blocked_inbound: rule {inbound.rule_id}"
                       if inbound.decision is Decision.BLOCK else screened["m"])
            result = error_result(command.command_id, message, result.elapsed_ms)

        if p.context.knows_workflow(workflow_id):
            p.context.append_pool(PoolMessage(
                workflow_id, PoolDirection.FROM_RESOURCE, peer,
                "execution_result", result.outcome.value))
        return result


def merge_offers(offers: list[ResourceOffer], cap_per_task: int = MERGE_CAP_PER_TASK
                 ) -> list[ResourceOffer]:
    """Trim each offer so no task carries more than the global candidate cap.

    Offers stay separate (compose dedups across them); the cap bounds what
    any downstream prompt could see from a single merge.
    """
    merged: list[ResourceOffer] = []
    for offer in offers:
        trimmed = {tid: candidates[:cap_per_task]
                   for tid, candidates in offer.per_task.items()}
        capped = ResourceOffer(offer.query_id, trimmed, list(offer.unfulfilled))
        assert_offer_partition(capped, list(offer.per_task) + list(offer.unfulfilled))
        merged.append(capped)
    return merged
