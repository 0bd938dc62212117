/** Pure rendering of a workflow's task graph and its action affordances. */
import type { NodeView, WorkflowView } from './types.js';

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;');
}

/** Group nodes into dependency layers (Kahn peeling); layer 0 has no deps. */
export function topologicalLayers(nodes: NodeView[]): NodeView[][] {
  const remaining = new Map(nodes.map((n) => [n.task_id, n]));
  const placed = new Set<string>();
  const layers: NodeView[][] = [];
  while (remaining.size > 0) {
    const layer: NodeView[] = [];
    for (const node of remaining.values()) {
      if (node.depends_on.every((d) => placed.has(d) || !remaining.has(d))) {
        layer.push(node);
      }
    }
    if (layer.length === 0) {
      // defensive: a cycle would never come from the server, but never loop
      layers.push([...remaining.values()]);
      break;
    }
    for (const node of layer) {
      remaining.delete(node.task_id);
      placed.add(node.task_id);
    }
    layers.push(layer);
  }
  return layers;
}

/** The graph-approval button is live only before execution starts. */
export function approveEnabled(view: WorkflowView): boolean {
  return view.status === 'composing' && !view.graph_approved && view.nodes.length > 0;
}

export function gateActionable(view: WorkflowView, taskId: string): boolean {
  return view.pending_gates.includes(taskId);
}

function nodeCard(view: WorkflowView, node: NodeView): string {
  const classes = ['node', `status-${node.status}`, `kind-${node.node_kind}`];
  if (node.assignment === null && node.node_kind === 'agentic') classes.push('unassigned');
  const assignment = node.assignment
    ? `<span class="assignment">${escapeHtml(node.assignment.resource_id)}` +
      (node.assignment.gateway_id
        ? ` <span class="provenance">via ${escapeHtml(node.assignment.gateway_id)}</span>`
        : ' <span class="provenance">local</span>') +
      '</span>'
    : '<span class="assignment unassigned-flag">unassigned</span>';
  const gate = gateActionable(view, node.task_id)
    ? `<span class="gate-actions" data-task="${escapeHtml(node.task_id)}">` +
      `<button data-action="approve">approve</button>` +
      `<button data-action="edit">edit</button>` +
      `<button data-action="reject">reject</button></span>`
    : '';
  return (
    `<div class="${classes.join(' ')}" data-task="${escapeHtml(node.task_id)}">` +
    `<strong>${escapeHtml(node.task_id)}</strong>` +
    `<span class="badge">${node.status}</span>` +
    `<p>${escapeHtml(node.description)}</p>` +
    assignment +
    gate +
    '</div>'
  );
}

export function renderGraph(view: WorkflowView): string {
  const layers = topologicalLayers(view.nodes);
  const columns = layers
    .map((layer) => `<div class="layer">${layer.map((n) => nodeCard(view, n)).join('')}</div>`)
    .join('');
  const approve = approveEnabled(view)
    ? '<button class="approve-graph" data-action="approve-graph">approve graph</button>'
    : '';
  const failure = view.failure_reason
    ? `<p class="failure">${escapeHtml(view.failure_reason)}</p>`
    : '';
  return (
    `<section class="workflow status-${view.status}" data-workflow="${escapeHtml(view.workflow_id)}">` +
    `<header><h2>${escapeHtml(view.intent_text)}</h2>` +
    `<span class="badge">${view.status}</span>${approve}</header>` +
    failure +
    `<div class="graph">${columns}</div>` +
    '</section>'
  );
}
