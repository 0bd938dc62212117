/** Browser bootstrap: wires the DOM to the session and views. */
import { ConsoleApi } from './api.js';
import { gateActionable, renderGraph } from './graphView.js';
import { ConsoleSession } from './session.js';
import { renderTrace } from './traceView.js';
import type { GateChoice, Mode, WorkflowView } from './types.js';

function el<T extends HTMLElement>(id: string): T {
  const found = document.getElementById(id);
  if (!found) throw new Error(`missing element #${id}`);
  return found as T;
}

let session: ConsoleSession | null = null;

function api(): ConsoleApi {
  const base = (el<HTMLInputElement>('principal-url').value || '').trim();
  const token = (el<HTMLInputElement>('token').value || '').trim();
  return new ConsoleApi(base, token);
}

async function renderAll(view: WorkflowView): Promise<void> {
  el('graph').innerHTML = renderGraph(view);
  if (session) {
    const trace = await session.api.getTrace(view.workflow_id);
    el('trace').innerHTML = renderTrace(trace);
  }
  el('status-line').textContent =
    `${view.workflow_id}: ${view.status}` +
    (view.pending_gates.length ? ` (gates: ${view.pending_gates.join(', ')})` : '');
}

async function selectWorkflow(workflowId: string): Promise<void> {
  session?.unsubscribe();
  session = new ConsoleSession(api(), workflowId);
  session.onChange((view) => void renderAll(view));
  await session.subscribe();
}

async function submitIntent(event: Event): Promise<void> {
  event.preventDefault();
  const text = el<HTMLTextAreaElement>('intent-text').value.trim();
  const mode = el<HTMLSelectElement>('mode').value as Mode;
  const preferences: Record<string, string> = {};
  for (const pair of el<HTMLInputElement>('preferences').value.split(',')) {
    const [key, value] = pair.split('=', 2);
    if (key && value !== undefined) preferences[key.trim()] = value.trim();
  }
  try {
    const submitted = await api().submitIntent({ text, mode, preferences });
    await selectWorkflow(submitted.workflow_id);
  } catch (error) {
    el('status-line').textContent = String(error);
  }
}

async function onGraphClick(event: Event): Promise<void> {
  const target = event.target as HTMLElement;
  const action = target.dataset['action'];
  if (!session || !action) return;
  try {
    if (action === 'approve-graph') {
      await session.approveGraph();
      return;
    }
    const taskId = target.closest<HTMLElement>('[data-task]')?.dataset['task'];
    if (!taskId || !gateActionable(session.current()!, taskId)) return;
    if (action === 'edit') {
      const node = session.current()!.nodes.find((n) => n.task_id === taskId);
      const overrides: Record<string, unknown> = {};
      const raw = window.prompt(
        `override inputs for ${taskId} (key=value, comma separated)`, '');
      if (raw === null) return;
      for (const pair of raw.split(',')) {
        const [key, value] = pair.split('=', 2);
        if (key && value !== undefined) overrides[key.trim()] = value.trim();
      }
      await session.decideGate(taskId, { decision: 'edit', inputs: overrides, actor: 'console' });
      void node;
      return;
    }
    const note = action === 'reject' ? window.prompt('rejection note', '') ?? '' : '';
    await session.decideGate(taskId, {
      decision: action as GateChoice,
      note,
      actor: 'console',
    });
  } catch (error) {
    // a conflicting decision from elsewhere: refresh shows the truth
    el('status-line').textContent = `${error} (view refreshed)`;
    await session.refresh();
  }
}

export function boot(): void {
  el('intent-form').addEventListener('submit', (e) => void submitIntent(e));
  el('graph').addEventListener('click', (e) => void onGraphClick(e));
  el('load-form').addEventListener('submit', (e) => {
    e.preventDefault();
    const id = el<HTMLInputElement>('workflow-id').value.trim();
    if (id) void selectWorkflow(id);
  });
}

if (typeof document !== 'undefined' && document.readyState !== 'loading') {
  boot();
} else if (typeof document !== 'undefined') {
  document.addEventListener('DOMContentLoaded', boot);
}
