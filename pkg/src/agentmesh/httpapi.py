"""HTTP faces for the services. Bodies are the canonical protocol JSON.

Transport security note: these apps speak plain HTTP and are meant to sit
behind TLS termination in a real deployment; test and demo modes run them
unencrypted on localhost.
"""
from __future__ import annotations

import json
import logging
import time

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse, StreamingResponse

from .agents import Agent
from .gateway import GatewayError, GatewayIdentity, GatewayService
from .guard import event_to_dict
from .orchestrator import (
    GateChoice,
    GateDecision,
    OrchestratorError,
    WorkflowStatus,
)
from .planner import Intent, PlanningError
from .protocol import (
    ExecutionCommand,
    Mode,
    ProtocolError,
    ResourceManifest,
    ResourceQuery,
    decode,
    encode,
    to_payload,
)
from .registry import RegistryError

logger = logging.getLogger(__name__)

_STATUS_BY_CODE = {
    "unauthenticated": 401,
    "bad_token": 403,
    "unknown_resource": 404,
    "unknown_workflow": 404,
    "no_such_gate": 404,
    "duplicate_id": 409,
    "decision_conflict": 409,
    "invalid_state": 409,
    "not_approved": 409,
    "reinstate_without_validation": 409,
    "invalid_manifest": 422,
    "queue_full": 429,
}


def _error_response(code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=_STATUS_BY_CODE.get(code, 400),
                        content={"error": code, "message": message})


def _bearer(request: Request) -> str | None:
    header = request.headers.get("authorization", "")
    if header.lower().startswith("bearer "):
        return header[7:]
    return None


def _protocol_response(message) -> Response:
    return Response(content=encode(message), media_type="application/json")


def build_gateway_app(service: GatewayService) -> FastAPI:
    app = FastAPI(title=f"gateway {service.gateway_id}", docs_url=None, redoc_url=None)

    @app.exception_handler(GatewayError)
    async def _gateway_error(request, exc: GatewayError):
        return _error_response(exc.code, str(exc))

    @app.exception_handler(RegistryError)
    async def _registry_error(request, exc: RegistryError):
        return _error_response(exc.code, str(exc))

    @app.exception_handler(ProtocolError)
    async def _protocol_error(request, exc: ProtocolError):
        return _error_response("malformed_message", str(exc))

    @app.get("/v1/health")
    def health():
        return service.health()

    @app.post("/v1/connect")
    async def connect(request: Request):
        body = await request.json()
        identity = service.handle_connect(str(body.get("token", "")))
        return identity.to_dict()

    @app.post("/v1/search")
    async def search(request: Request):
        service.authenticate(_bearer(request))
        message = decode(await request.body())
        if not isinstance(message, ResourceQuery):
            raise GatewayError("malformed_query", "body must be a resource_query")
        return _protocol_response(service.handle_search(message))

    @app.post("/v1/execute")
    async def execute(request: Request):
        service.authenticate(_bearer(request))
        message = decode(await request.body())
        if not isinstance(message, ExecutionCommand):
            raise GatewayError("malformed_query", "body must be an execution_command")
        return _protocol_response(service.handle_execute(message))

    @app.get("/v1/resources")
    def list_resources(request: Request):
        service.authenticate(_bearer(request))
        return [
            {
                "manifest": to_payload(e.manifest),
                "validation": e.validation.value,
                "suspension_reason": e.suspension_reason,
                "registered_at": e.registered_at,
            }
            for e in service.registry.entries()
        ]

    @app.post("/v1/resources")
    async def register_resource(request: Request, validate: bool = False):
        service.authenticate(_bearer(request))
        message = decode(await request.body())
        if not isinstance(message, ResourceManifest):
            raise GatewayError("malformed_query", "body must be a resource_manifest")
        entry = service.register_resource(message, validate=validate)
        return {"resource_id": entry.manifest.resource_id,
                "validation": entry.validation.value}

    @app.post("/v1/resources/{resource_id}/validate")
    def validate_resource(resource_id: str, request: Request):
        service.authenticate(_bearer(request))
        report = service.registry.validate(resource_id, service.transport)
        return {
            "resource_id": report.resource_id,
            "overall": report.overall,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail}
                       for c in report.checks],
        }

    @app.get("/v1/guard-events")
    def guard_events(request: Request):
        service.authenticate(_bearer(request))
        return [event_to_dict(e) for e in service.guard_events()]

    return app


def build_principal_app(service) -> FastAPI:
    """HTTP face of a PrincipalService (imported lazily to avoid a cycle)."""
    from ._util import new_id
    from .principal import PrincipalError

    app = FastAPI(title="principal", docs_url=None, redoc_url=None)

    @app.exception_handler(PrincipalError)
    async def _principal_error(request, exc: PrincipalError):
        return _error_response(exc.code, str(exc))

    @app.exception_handler(OrchestratorError)
    async def _orchestrator_error(request, exc: OrchestratorError):
        return _error_response(exc.code, str(exc))

    @app.exception_handler(PlanningError)
    async def _planning_error(request, exc: PlanningError):
        return _error_response(exc.code, str(exc))

    @app.exception_handler(ProtocolError)
    async def _protocol_error(request, exc: ProtocolError):
        return _error_response("malformed_message", str(exc))

    def token_of(request: Request) -> str | None:
        return _bearer(request) or request.query_params.get("token")

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "service": "principal",
                "gateways": service.roster.connected_ids()}

    @app.post("/v1/intents")
    async def submit_intent(request: Request):
        body = await request.json()
        user = service.user_for(token_of(request)) if service.users else None
        intent = Intent(
            intent_id=body.get("intent_id") or new_id("i"),
            text=body["text"],
            user_id=user.user_id if user else body.get("user_id", ""),
            tenant_id=user.tenant_id if user else body.get("tenant_id", ""),
            mode=Mode(body.get("mode", "llm_agent")),
            preferences={k: str(v) for k, v in body.get("preferences", {}).items()},
        )
        workflow_id = service.submit_intent(intent, token_of(request))
        return {"workflow_id": workflow_id,
                "status": service.get_record(workflow_id, token_of(request)).status.value}

    @app.get("/v1/workflows/{workflow_id}")
    def get_status(workflow_id: str, request: Request):
        return service.get_status(workflow_id, token_of(request))

    @app.post("/v1/workflows/{workflow_id}/approve")
    def approve(workflow_id: str, request: Request):
        record = service.approve_graph(workflow_id, token_of(request))
        return {"workflow_id": workflow_id, "status": record.status.value}

    @app.post("/v1/workflows/{workflow_id}/gates/{task_id}")
    async def gate(workflow_id: str, task_id: str, request: Request):
        body = await request.json()
        decision = GateDecision(
            workflow_id=workflow_id,
            task_id=task_id,
            decision=GateChoice(body.get("decision", "approve")),
            actor=body.get("actor", ""),
            note=body.get("note", ""),
            inputs=body.get("inputs", {}),
        )
        record = service.decide_gate(decision, token_of(request))
        return {"workflow_id": workflow_id, "status": record.status.value,
                "pending_gates": list(record.pending_gates)}

    @app.post("/v1/workflows/{workflow_id}/pause")
    def pause(workflow_id: str, request: Request):
        record = service.pause(workflow_id, token_of(request))
        return {"workflow_id": workflow_id, "status": record.status.value,
                "paused": record.paused}

    @app.post("/v1/workflows/{workflow_id}/resume")
    def resume(workflow_id: str, request: Request):
        record = service.resume(workflow_id, token_of(request))
        return {"workflow_id": workflow_id, "status": record.status.value}

    @app.get("/v1/workflows/{workflow_id}/trace")
    def trace(workflow_id: str, request: Request):
        return service.trace(workflow_id, token_of(request))

    @app.get("/v1/gateways")
    def gateways(request: Request):
        if service.users:
            service.user_for(token_of(request))
        return [
            {
                "gateway_id": e.identity.gateway_id,
                "display_name": e.identity.display_name,
                "rating": e.rating,
                "connected": e.connected,
                "last_seen": e.last_seen,
            }
            for e in service.roster.entries()
        ]

    @app.post("/v1/gateways/connect-requests")
    async def connect_request(request: Request):
        body = await request.json()
        identity = GatewayIdentity.from_dict(body)
        entry = service.connect_gateway(identity)
        return {"gateway_id": entry.identity.gateway_id, "rating": entry.rating,
                "connected": entry.connected}

    @app.get("/v1/events")
    def events(request: Request, workflow: str):
        token = token_of(request)
        service.get_record(workflow, token)  # auth + existence up front

        def stream():
            seq = 0
            idle = 0
            while True:
                batch = service.events_since(workflow, seq)
                for event in batch:
                    seq = event["seq"] + 1
                    yield f"data: {json.dumps(event, sort_keys=True)}\n\n"
                current = service.get_record(workflow, token)
                if current.status in (WorkflowStatus.COMPLETED, WorkflowStatus.FAILED) \
                        and not service.events_since(workflow, seq):
                    yield "event: end\ndata: {}\n\n"
                    return
                if not batch:
                    idle += 1
                    if idle > 400:  # ~20 s of silence closes the stream
                        return
                    time.sleep(0.05)

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app


def build_agent_app(agent: Agent) -> FastAPI:
    app = FastAPI(title=f"agent {agent.name}", docs_url=None, redoc_url=None)

    @app.exception_handler(ProtocolError)
    async def _protocol_error(request, exc: ProtocolError):
        return _error_response("malformed_message", str(exc))

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "agent": agent.name}

    @app.post("/invoke")
    async def invoke(request: Request):
        message = decode(await request.body())
        if not isinstance(message, ExecutionCommand):
            raise ProtocolError("body must be an execution_command")
        return _protocol_response(agent.handle(message))

    return app
