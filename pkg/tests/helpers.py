"""Factories shared by the test modules."""
from __future__ import annotations

import itertools

from agentmesh.protocol import (
    FieldType,
    ResourceKind,
    ResourceManifest,
    SchemaField,
    TaskSpec,
)

_counter = itertools.count(1)


def make_manifest(
    resource_id: str | None = None,
    *,
    name: str | None = None,
    description: str = "a perfectly generic resource for testing",
    usage_examples: list[str] | None = None,
    kind: ResourceKind = ResourceKind.TOOL,
    endpoint: str | None = None,
    owner_gateway: str = "gw-test",
    input_schema: list[SchemaField] | None = None,
    output_schema: list[SchemaField] | None = None,
) -> ResourceManifest:
    rid = resource_id or f"res-{next(_counter):04d}"
    return ResourceManifest(
        resource_id=rid,
        kind=kind,
        name=name or rid,
        description=description,
        usage_examples=usage_examples or [],
        endpoint=endpoint or f"local://{rid}",
        input_schema=input_schema if input_schema is not None else [SchemaField("text", FieldType.STRING)],
        output_schema=output_schema if output_schema is not None else [SchemaField("text", FieldType.STRING)],
        owner_gateway=owner_gateway,
    )


def linear_tasks(*descriptions: str) -> list[TaskSpec]:
    tasks = []
    prev = None
    for i, desc in enumerate(descriptions):
        tid = f"t{i}"
        tasks.append(TaskSpec(tid, desc, depends_on=[prev] if prev else []))
        prev = tid
    return tasks


HR_INTENT_TEXT = "please hire a new ml engineer"
HR_PREFS = {"role_title": "ML Engineer", "level": "senior",
            "location": "remote", "skills": "python,ml"}


def build_hr_env(tmp_path=None, mode=None, users=None, **principal_kw):
    """One principal + two gateways with the HR agents split 3 + 3."""
    import itertools

    from agentmesh.agents import HR_AGENT_NAMES, build_agents
    from agentmesh.gateway import GatewayIdentity, GatewayService
    from agentmesh.planner import load_packaged_scripts
    from agentmesh.principal import InProcessGatewayClient, PrincipalService
    from agentmesh.registry import Registry
    from agentmesh.transport import LocalTransport

    clock = itertools.count(1).__next__
    agents = build_agents()

    def gateway(gid, names):
        transport = LocalTransport()
        registry = Registry(transport=transport)
        service = GatewayService(gid, registry, transport,
                                 accepted_tokens={"gw-token"}, clock=clock)
        for name in names:
            agent = agents[name]
            transport.mount(name, agent.handle)
            service.register_resource(agent.manifest.copy(), validate=True)
        return service

    g1 = gateway("gw-1", HR_AGENT_NAMES[:3])
    g2 = gateway("gw-2", HR_AGENT_NAMES[3:])
    principal_kw.setdefault("gateway_tokens", {"gw-token"})
    principal = PrincipalService(
        load_packaged_scripts("hr_plan.json", "trip_plan.json"),
        clock=clock,
        workflow_dir=(tmp_path / "workflows") if tmp_path else None,
        users=users,
        **principal_kw,
    )
    for g in (g1, g2):
        principal.connect_gateway(GatewayIdentity(g.gateway_id, auth_token="gw-token"),
                                  InProcessGatewayClient(g))
    return principal, g1, g2, agents


def hr_intent(mode=None, text=HR_INTENT_TEXT):
    from agentmesh.planner import Intent
    from agentmesh.protocol import Mode

    return Intent("i-hr", text, "user-1", "tenant-1", mode or Mode.LLM_AGENT,
                  preferences=dict(HR_PREFS))
