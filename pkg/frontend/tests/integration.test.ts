/**
 * End-to-end contract: the console client drives a real principal process,
 * and an approve-gate through the console advances the FSM exactly like the
 * equivalent CLI call (workflow records compared field by field).
 *
 * Spawns `python3 -m agentmesh.cli demo hr --mode copilot --serve` from the
 * repository this frontend lives in.
 */
import { spawn, spawnSync, type ChildProcess } from 'node:child_process';
import { createServer } from 'node:net';
import { dirname, join } from 'node:path';
import { fileURLToPath } from 'node:url';
import { afterAll, beforeAll, describe, expect, it } from 'vitest';

import { ConsoleApi } from '../src/api.js';
import { ConsoleSession } from '../src/session.js';
import type { ConsoleEvent, WorkflowView } from '../src/types.js';

const REPO_ROOT = join(dirname(fileURLToPath(import.meta.url)), '..', '..');
const INTENT = {
  text: 'please hire a new ml engineer',
  mode: 'copilot' as const,
  preferences: {
    role_title: 'ML Engineer',
    level: 'senior',
    location: 'remote',
    skills: 'python,ml',
  },
};

let principal: ChildProcess;
let baseUrl: string;
let api: ConsoleApi;

async function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const probe = createServer();
    probe.listen(0, '127.0.0.1', () => {
      const address = probe.address();
      if (address === null || typeof address === 'string') {
        reject(new Error('no port'));
        return;
      }
      const port = address.port;
      probe.close(() => resolve(port));
    });
  });
}

beforeAll(async () => {
  const port = await freePort();
  baseUrl = `http://127.0.0.1:${port}`;
  principal = spawn(
    'python3',
    ['-m', 'agentmesh.cli', 'demo', 'hr', '--mode', 'copilot',
     '--serve', `127.0.0.1:${port}`],
    { cwd: REPO_ROOT, stdio: ['ignore', 'pipe', 'pipe'] },
  );
  const stderr: string[] = [];
  principal.stderr?.on('data', (chunk: Buffer) => stderr.push(chunk.toString()));

  const deadline = Date.now() + 45_000;
  for (;;) {
    try {
      const response = await fetch(`${baseUrl}/v1/health`);
      if (response.ok) break;
    } catch {
      /* not up yet */
    }
    if (Date.now() > deadline) {
      throw new Error(`principal did not come up: ${stderr.join('')}`);
    }
    await new Promise((resolve) => setTimeout(resolve, 150));
  }
  api = new ConsoleApi(baseUrl);
});

afterAll(() => {
  principal?.kill('SIGTERM');
});

function gateProjection(view: WorkflowView) {
  // everything that defines FSM state, minus ids and timestamps
  return {
    status: view.status,
    pending_gates: view.pending_gates,
    nodes: view.nodes.map((n) => ({
      task: n.task_id,
      status: n.status,
      kind: n.node_kind,
      resource: n.assignment?.resource_id ?? null,
    })),
    outputs: Object.fromEntries(
      Object.entries(view.node_outputs).map(([task, out]) => [task, out.outcome]),
    ),
  };
}

describe('console against a live principal', () => {
  it('submits, approves, and walks every gate to completion', async () => {
    const submitted = await api.submitIntent(INTENT);
    expect(submitted.status).toBe('composing');
    let view = await api.getWorkflow(submitted.workflow_id);
    expect(view.nodes).toHaveLength(6);
    expect(view.graph_approved).toBe(false);

    await api.approveGraph(submitted.workflow_id);
    view = await api.getWorkflow(submitted.workflow_id);
    expect(view.status).toBe('awaiting_human');
    expect(view.pending_gates).toEqual(['jd_write']);

    const gateOrder: string[] = [];
    while (view.pending_gates.length > 0) {
      const gate = view.pending_gates[0]!;
      gateOrder.push(gate);
      await api.decideGate(submitted.workflow_id, gate, {
        decision: 'approve',
        actor: 'console',
      });
      view = await api.getWorkflow(submitted.workflow_id);
    }
    expect(view.status).toBe('completed');
    expect(gateOrder).toEqual([
      'jd_write', 'profile_search', 'schedule_interviews',
      'collect_feedback', 'onboarding',
    ]);
    expect(Object.keys(view.node_outputs)).toHaveLength(6);
  });

  it('approve-gate via console matches the CLI-driven FSM state', async () => {
    // two fresh identical workflows on the same principal
    const viaConsole = await api.submitIntent(INTENT);
    const viaCli = await api.submitIntent(INTENT);
    await api.approveGraph(viaConsole.workflow_id);
    await api.approveGraph(viaCli.workflow_id);

    await api.decideGate(viaConsole.workflow_id, 'jd_write', { decision: 'approve' });
    const cli = spawnSync(
      'python3',
      ['-m', 'agentmesh.cli', 'workflow', '--principal-url', baseUrl,
       'gate', viaCli.workflow_id, 'jd_write', '--approve'],
      { cwd: REPO_ROOT, encoding: 'utf-8' },
    );
    expect(cli.status, cli.stderr).toBe(0);

    const consoleView = await api.getWorkflow(viaConsole.workflow_id);
    const cliView = await api.getWorkflow(viaCli.workflow_id);
    expect(gateProjection(consoleView)).toEqual(gateProjection(cliView));
    expect(consoleView.pending_gates).toEqual(['profile_search']);
  });

  it('rejecting a gate fails the workflow and shows up in the trace', async () => {
    const submitted = await api.submitIntent(INTENT);
    await api.approveGraph(submitted.workflow_id);
    await api.decideGate(submitted.workflow_id, 'jd_write', {
      decision: 'reject',
      note: 'role is on hold',
      actor: 'console',
    });
    const view = await api.getWorkflow(submitted.workflow_id);
    expect(view.status).toBe('failed');

    const trace = await api.getTrace(submitted.workflow_id);
    const decisions = trace.filter((e) => e.kind === 'gate_decision');
    expect(decisions.length).toBe(1);
    expect(decisions[0]!.detail).toContain('role is on hold');
  });

  it('conflicting decisions surface the server verdict', async () => {
    const submitted = await api.submitIntent(INTENT);
    await api.approveGraph(submitted.workflow_id);
    await api.decideGate(submitted.workflow_id, 'jd_write', { decision: 'approve' });
    await expect(
      api.decideGate(submitted.workflow_id, 'jd_write', { decision: 'reject' }),
    ).rejects.toMatchObject({ code: 'decision_conflict' });
  });

  it('receives live events over the stream while gates are approved', async () => {
    const submitted = await api.submitIntent(INTENT);
    await api.approveGraph(submitted.workflow_id);
    const session = new ConsoleSession(api, submitted.workflow_id);
    const events: ConsoleEvent[] = [];
    session.onChange((_view, log) => void events.splice(0, events.length, ...log));
    await session.subscribe();

    let view = session.current()!;
    while (view.pending_gates.length > 0) {
      view = await session.decideGate(view.pending_gates[0]!, { decision: 'approve' });
    }
    await session.streamDone(); // server closes the stream once terminal
    await session.refresh();
    session.unsubscribe();
    expect(session.current()!.status).toBe('completed');
    const transitions = session
      .eventLog()
      .filter((e) => e.kind === 'node_status' && e.to === 'succeeded');
    expect(transitions.length).toBeGreaterThanOrEqual(5);
  });

  it('pause freezes the timeline until resume', async () => {
    const submitted = await api.submitIntent(INTENT);
    await api.approveGraph(submitted.workflow_id);
    await api.pauseWorkflow(submitted.workflow_id);
    const before = (await api.getTrace(submitted.workflow_id)).length;
    await new Promise((resolve) => setTimeout(resolve, 200));
    const after = (await api.getTrace(submitted.workflow_id)).length;
    expect(after).toBe(before);
    const resumed = await api.resumeWorkflow(submitted.workflow_id);
    expect(resumed.status).toBe('awaiting_human');
  });
});
