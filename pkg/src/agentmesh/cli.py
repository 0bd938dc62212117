"""Operator command line: serve the services, run demos and evaluations."""
from __future__ import annotations

import json
import os
import sys
import time
from pathlib import Path

import click

from ._util import new_id, read_json
from .agents import HR_AGENT_NAMES, build_agents
from .gateway import GatewayIdentity, GatewayService
from .guard import load_policy
from .orchestrator import GateChoice, GateDecision, WorkflowStatus
from .planner import Intent, load_packaged_scripts
from .principal import InProcessGatewayClient, PrincipalService, PrincipalUser
from .protocol import Mode
from .registry import Registry
from .transport import LocalTransport

CONFIG_ENV = "DAWN_CONFIG"


def _load_config(path: str | None) -> dict:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        raise click.UsageError(
            f"no config file: pass --config or set {CONFIG_ENV}")
    return read_json(path)


def _echo_json(payload) -> None:
    click.echo(json.dumps(payload, indent=2, sort_keys=True, default=str))


@click.group()
@click.version_option(package_name="agentmesh")
def main():
    """Principal/gateway agent orchestration."""


# --- serve commands ---------------------------------------------------------------


@main.group()
def principal():
    """Principal-side commands."""


@principal.command("serve")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def principal_serve(config_path):
    """Run the principal HTTP service from a config file."""
    import uvicorn

    from .httpapi import build_principal_app

    config = _load_config(config_path)
    service = build_principal_from_config(config)
    app = build_principal_app(service)
    host, port = _listen(config.get("listen", "127.0.0.1:8700"))
    uvicorn.run(app, host=host, port=port, log_level="warning")


def build_principal_from_config(config: dict) -> PrincipalService:
    scripts = config.get("scripts", ["hr_plan.json", "trip_plan.json"])
    provider = load_packaged_scripts(*scripts)
    policy = load_policy(config["policy_path"]) if config.get("policy_path") else None
    users = [PrincipalUser(u["token"], u["tenant_id"], u["user_id"])
             for u in config.get("users", [])]
    service = PrincipalService(
        provider,
        policy=policy,
        workflow_dir=config.get("workflow_dir"),
        context_path=config.get("context_path"),
        users=users,
        gateway_tokens=set(config.get("gateway_tokens", [])),
        pool_capacity=config.get("pool_capacity", 64),
        rating_alpha=config.get("rating_alpha", 0.2),
        gateway_join_granularity=config.get("gateway_join_granularity", "round"),
        strategy=config.get("strategy", "react"),
    )
    for seed in config.get("roster", []):
        identity = GatewayIdentity(
            gateway_id=seed.get("gateway_id", ""),
            base_url=seed["base_url"],
            auth_token=seed["token"],
        )
        try:
            service.connect_gateway(identity)
            click.echo(f"connected gateway {identity.gateway_id}", err=True)
        except Exception as exc:
            click.echo(f"gateway {seed.get('gateway_id')} not connected: {exc}", err=True)
    return service


@main.group()
def gateway():
    """Gateway-side commands."""


@gateway.command("serve")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def gateway_serve(config_path):
    """Run a gateway HTTP service from a config file."""
    import uvicorn

    from .httpapi import build_gateway_app

    config = _load_config(config_path)
    service = build_gateway_from_config(config)
    app = build_gateway_app(service)
    host, port = _listen(config.get("listen", "127.0.0.1:8800"))
    uvicorn.run(app, host=host, port=port, log_level="warning")


def build_gateway_from_config(config: dict) -> GatewayService:
    transport = LocalTransport()
    registry = Registry(snapshot_path=config.get("snapshot_path"), transport=transport)
    policy = load_policy(config["policy_path"]) if config.get("policy_path") else None
    service = GatewayService(
        config["gateway_id"],
        registry,
        transport,
        accepted_tokens=set(config.get("tokens", [])),
        base_url=config.get("base_url", ""),
        policy=policy,
    )
    local_agents = config.get("local_agents", [])
    if local_agents:
        agents = build_agents()
        for name in local_agents:
            agent = agents[name]
            transport.mount(name, agent.handle)
            if name not in registry:
                service.register_resource(agent.manifest.copy(), validate=True)
    return service


@main.group()
def agent():
    """Stand-alone resource processes."""


@agent.command("serve")
@click.argument("name")
@click.option("--listen", default="127.0.0.1:8900")
def agent_serve(name, listen):
    """Serve one demo agent over HTTP (POST /invoke)."""
    import uvicorn

    from .httpapi import build_agent_app

    agents = build_agents()
    if name not in agents:
        raise click.UsageError(f"unknown agent {name!r}; one of {sorted(agents)}")
    picked = agents[name]
    picked.simulate_latency = False  # real service sleeps out its latency
    host, port = _listen(listen)
    uvicorn.run(build_agent_app(picked), host=host, port=port, log_level="warning")


def _listen(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    return host or "127.0.0.1", int(port)


# --- demo --------------------------------------------------------------------------


def build_hr_demo(mode: Mode, workflow_dir=None):
    """One principal + two gateways + six HR agents, wired in-process."""
    agents = build_agents()
    policy = load_policy()

    def make_gateway(gid: str, names: list[str]) -> GatewayService:
        transport = LocalTransport()
        registry = Registry(transport=transport)
        service = GatewayService(gid, registry, transport,
                                 accepted_tokens={"demo-token"})
        for name in names:
            a = agents[name]
            transport.mount(name, a.handle)
            service.register_resource(a.manifest.copy(), validate=True)
        return service

    g1 = make_gateway("gw-east", HR_AGENT_NAMES[:3])
    g2 = make_gateway("gw-west", HR_AGENT_NAMES[3:])
    from .agents import compliance_check_jd

    service = PrincipalService(
        load_packaged_scripts("hr_plan.json", "trip_plan.json"),
        policy=policy,
        workflow_dir=workflow_dir,
        gateway_tokens={"demo-token"},
        output_checks={"jd_write": lambda payload: compliance_check_jd(payload, policy)},
    )
    for g in (g1, g2):
        service.connect_gateway(GatewayIdentity(g.gateway_id, auth_token="demo-token"),
                                InProcessGatewayClient(g))
    return service, (g1, g2), agents


HR_DEMO_PREFERENCES = {
    "role_title": "ML Engineer",
    "level": "senior",
    "location": "remote",
    "skills": "python,ml",
}


@main.command("demo")
@click.argument("scenario", type=click.Choice(["hr"]))
@click.option("--mode", type=click.Choice(["llm_agent", "copilot"]), default="llm_agent")
@click.option("--serve", "serve_addr", default=None,
              help="copilot only: serve the principal API and wait for gate "
                   "decisions instead of prompting on stdin")
@click.option("--workflow-dir", type=click.Path(), default=None)
def demo(scenario, mode, serve_addr, workflow_dir):
    """Boot the whole stack locally and run the hiring workflow."""
    mode = Mode(mode)
    started = time.time()
    service, gateways, _ = build_hr_demo(mode, workflow_dir=workflow_dir)
    intent = Intent(new_id("i"), "please hire a new ml engineer",
                    "demo-user", "demo-tenant", mode,
                    preferences=dict(HR_DEMO_PREFERENCES))
    workflow_id = service.submit_intent(intent)
    record = service.get_record(workflow_id)
    click.echo(f"workflow {workflow_id} composed "
               f"({len(record.graph.nodes)} nodes, mode {mode.value})")
    record = service.approve_graph(workflow_id)

    if mode is Mode.COPILOT and serve_addr:
        import uvicorn

        from .httpapi import build_principal_app

        host, port = _listen(serve_addr)
        click.echo(f"workflow {workflow_id} awaiting gate decisions at "
                   f"http://{host}:{port} (POST /v1/workflows/{workflow_id}/gates/<task>)")
        uvicorn.run(build_principal_app(service), host=host, port=port,
                    log_level="warning")
        return

    while record.status is WorkflowStatus.AWAITING_HUMAN:
        gate = record.pending_gates[0]
        node = record.node(gate)
        if click.confirm(f"approve gate {gate!r} ({node.spec.description})",
                         default=True):
            decision = GateDecision(workflow_id, gate, GateChoice.APPROVE, actor="cli")
        else:
            decision = GateDecision(workflow_id, gate, GateChoice.REJECT, actor="cli",
                                    note="rejected at the terminal")
        record = service.decide_gate(decision)

    elapsed = time.time() - started
    click.echo(f"status: {record.status.value} in {elapsed:.2f}s")
    click.echo("audit trail:")
    for event in record.audit:
        line = f"  [{event.at}] {event.kind}"
        if event.task_id:
            line += f" {event.task_id}"
        if event.from_status:
            line += f" {event.from_status}->{event.to_status}"
        if event.detail:
            line += f" ({event.detail[:70]})"
        click.echo(line)
    for task_id, result in record.node_outputs.items():
        summary = result.error_message or ", ".join(sorted(result.payload))
        click.echo(f"  output {task_id}: {result.outcome.value} [{summary[:70]}]")
    if record.status is not WorkflowStatus.COMPLETED:
        sys.exit(1)


# --- workflow client -----------------------------------------------------------------


@main.group()
@click.option("--principal-url", default="http://127.0.0.1:8700", envvar="DAWN_PRINCIPAL_URL")
@click.option("--token", default="", envvar="DAWN_TOKEN")
@click.pass_context
def workflow(ctx, principal_url, token):
    """Drive workflows on a running principal."""
    ctx.obj = {"url": principal_url.rstrip("/"), "token": token}


def _client_call(ctx, method, path, **kw):
    import httpx

    headers = {}
    if ctx.obj["token"]:
        headers["authorization"] = f"Bearer {ctx.obj['token']}"
    response = httpx.request(method, ctx.obj["url"] + path, headers=headers,
                             timeout=30.0, **kw)
    if response.status_code >= 400:
        try:
            doc = response.json()
        except Exception:
            doc = {"error": response.status_code, "message": response.text[:200]}
        _echo_json(doc)
        sys.exit(1)
    return response.json()


@workflow.command("submit")
@click.option("--text", required=True)
@click.option("--mode", type=click.Choice(["no_llm", "copilot", "llm_agent"]),
              default="llm_agent")
@click.option("--pref", "prefs", multiple=True, help="key=value preference")
@click.pass_context
def workflow_submit(ctx, text, mode, prefs):
    preferences = dict(p.split("=", 1) for p in prefs)
    _echo_json(_client_call(ctx, "POST", "/v1/intents", json={
        "text": text, "mode": mode, "preferences": preferences}))


@workflow.command("status")
@click.argument("workflow_id")
@click.pass_context
def workflow_status(ctx, workflow_id):
    _echo_json(_client_call(ctx, "GET", f"/v1/workflows/{workflow_id}"))


@workflow.command("approve")
@click.argument("workflow_id")
@click.pass_context
def workflow_approve(ctx, workflow_id):
    _echo_json(_client_call(ctx, "POST", f"/v1/workflows/{workflow_id}/approve"))


@workflow.command("gate")
@click.argument("workflow_id")
@click.argument("task_id")
@click.option("--approve", "decision", flag_value="approve", default=True)
@click.option("--reject", "decision", flag_value="reject")
@click.option("--edit", "edits", multiple=True, help="key=value input override")
@click.option("--note", default="")
@click.pass_context
def workflow_gate(ctx, workflow_id, task_id, decision, edits, note):
    body = {"decision": "edit" if edits else decision, "note": note, "actor": "cli",
            "inputs": dict(e.split("=", 1) for e in edits)}
    _echo_json(_client_call(ctx, "POST",
                            f"/v1/workflows/{workflow_id}/gates/{task_id}", json=body))


@workflow.command("pause")
@click.argument("workflow_id")
@click.pass_context
def workflow_pause(ctx, workflow_id):
    _echo_json(_client_call(ctx, "POST", f"/v1/workflows/{workflow_id}/pause"))


@workflow.command("resume")
@click.argument("workflow_id")
@click.pass_context
def workflow_resume(ctx, workflow_id):
    _echo_json(_client_call(ctx, "POST", f"/v1/workflows/{workflow_id}/resume"))


@workflow.command("trace")
@click.argument("workflow_id")
@click.pass_context
def workflow_trace(ctx, workflow_id):
    _echo_json(_client_call(ctx, "GET", f"/v1/workflows/{workflow_id}/trace"))


# --- registry client --------------------------------------------------------------------


@main.group()
@click.option("--gateway-url", default="http://127.0.0.1:8800", envvar="DAWN_GATEWAY_URL")
@click.option("--token", default="", envvar="DAWN_TOKEN")
@click.pass_context
def registry(ctx, gateway_url, token):
    """Manage resources on a running gateway."""
    ctx.obj = {"url": gateway_url.rstrip("/"), "token": token}


@registry.command("register")
@click.argument("manifest_file", type=click.Path(exists=True))
@click.option("--validate/--no-validate", default=True)
@click.pass_context
def registry_register(ctx, manifest_file, validate):
    import httpx

    body = Path(manifest_file).read_bytes()
    response = httpx.post(
        f"{ctx.obj['url']}/v1/resources", params={"validate": validate},
        content=body, headers={"authorization": f"Bearer {ctx.obj['token']}"},
        timeout=30.0)
    _echo_json(response.json())
    if response.status_code >= 400:
        sys.exit(1)


@registry.command("validate")
@click.argument("resource_id")
@click.pass_context
def registry_validate(ctx, resource_id):
    _echo_json(_client_call(ctx, "POST", f"/v1/resources/{resource_id}/validate"))


@registry.command("list")
@click.pass_context
def registry_list(ctx):
    _echo_json(_client_call(ctx, "GET", "/v1/resources"))


# --- evaluations -----------------------------------------------------------------------


@main.group("eval")
def eval_group():
    """Reproducible desk-scale benchmarks."""


@eval_group.command("planner")
@click.option("--seed", default=7, show_default=True)
@click.option("--repeats", default=5, show_default=True)
@click.option("--noise", default=0.25, show_default=True)
@click.option("--noise-repeats", default=20, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
def eval_planner(seed, repeats, noise, noise_repeats, out_path):
    """Planner repeatability protocol with sanity-bounded stand-in providers."""
    from .evalharness import (
        CasePlaybackProvider,
        drop_one_task,
        drop_one_with_probability,
        generate_cases,
        run_planner_eval,
    )

    cases = generate_cases(seed)
    perfect = run_planner_eval(CasePlaybackProvider(cases), cases, repeats=repeats,
                               seed=seed)
    dropper = run_planner_eval(
        CasePlaybackProvider(cases, seed=seed, mutate=drop_one_task),
        cases, repeats=repeats, seed=seed)
    noisy = run_planner_eval(
        CasePlaybackProvider(cases, seed=seed, mutate=drop_one_with_probability(noise)),
        cases, repeats=noise_repeats, seed=seed)

    report = {
        "seed": seed,
        "cases": len(cases),
        "perfect": perfect.to_dict(),
        "drop_one": dropper.to_dict(),
        "noisy": {**noisy.to_dict(), "drop_probability": noise},
    }
    click.echo(f"perfect provider : {perfect.success_rate:.3f} over {perfect.trials} trials")
    click.echo(f"drop-one provider: {dropper.success_rate:.3f} over {dropper.trials} trials")
    click.echo(f"{noise:.2f}-noise provider: {noisy.success_rate:.3f} "
               f"over {noisy.trials} trials (expect ~{1 - noise:.2f})")
    if out_path:
        Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True))
    ok = (perfect.success_rate == 1.0 and dropper.success_rate == 0.0
          and abs(noisy.success_rate - (1 - noise)) <= 0.1)
    if not ok:
        click.echo("sanity bounds FAILED", err=True)
        sys.exit(1)


@eval_group.command("ir")
@click.option("--seed", default=7, show_default=True)
@click.option("--agents", "n_agents", default=200, show_default=True)
@click.option("--queries", "n_queries", default=1000, show_default=True)
@click.option("--full", is_flag=True, help="use 20000 queries")
@click.option("--reranker", type=click.Choice(["identity", "lexical", "oracle"]),
              default="identity", show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--corpus-dir", type=click.Path(), default=None,
              help="also write the corpus files here")
def eval_ir(seed, n_agents, n_queries, full, reranker, out_path, corpus_dir):
    """Two-stage retrieval benchmark over the synthetic corpus."""
    from .evalharness import OracleReranker, generate_ir_corpus, run_ir_eval, save_corpus
    from .retrieval import LexicalOverlapReranker

    if full:
        n_queries = 20_000
    corpus = generate_ir_corpus(seed, n_agents=n_agents, n_queries=n_queries)
    if corpus_dir:
        save_corpus(corpus, corpus_dir)
    providers = {
        "identity": None,
        "lexical": LexicalOverlapReranker(),
        "oracle": OracleReranker(corpus),
    }
    report = run_ir_eval(corpus, reranker=providers[reranker])
    click.echo(f"seed {seed}, {len(corpus.manifests)} agents, "
               f"{len(corpus.queries)} queries, reranker {reranker}")
    click.echo(report.table())
    if out_path:
        Path(out_path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    if report.stage1_oracle_delta > 1e-9:
        click.echo("stage-1 metrics diverge from the full-sort pass", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
