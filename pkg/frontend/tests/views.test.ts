import { describe, expect, it } from 'vitest';

import {
  approveEnabled,
  escapeHtml,
  gateActionable,
  renderGraph,
  topologicalLayers,
} from '../src/graphView.js';
import { isBlocked, renderTrace } from '../src/traceView.js';
import type { NodeView, TraceEntry, WorkflowView } from '../src/types.js';
import { workflowFixture } from './mockServer.js';

function view(overrides: Record<string, unknown> = {}): WorkflowView {
  return workflowFixture(overrides) as unknown as WorkflowView;
}

describe('graph rendering', () => {
  it('colors nodes by status and flags unassigned ones', () => {
    const html = renderGraph(view());
    expect(html).toContain('status-awaiting_approval');
    expect(html).toContain('status-pending');
    expect(html).toContain('unassigned-flag');
    expect(html).toContain('via gw-east'); // gateway provenance shown
  });

  it('renders gate action buttons only for pending gates', () => {
    const html = renderGraph(view());
    expect(html).toContain('data-task="jd_write"');
    const gateSections = html.match(/gate-actions/g) ?? [];
    expect(gateSections.length).toBe(1); // only jd_write is gated
  });

  it('approve button appears only pre-approval with a composed graph', () => {
    expect(approveEnabled(view({ status: 'composing', graph_approved: false }))).toBe(true);
    expect(approveEnabled(view())).toBe(false); // already approved and running
    expect(approveEnabled(view({ status: 'composing', graph_approved: false, nodes: [] })))
      .toBe(false);
    const composing = renderGraph(view({ status: 'composing', graph_approved: false }));
    expect(composing).toContain('approve-graph');
    expect(renderGraph(view())).not.toContain('approve-graph');
  });

  it('lays nodes out in dependency layers', () => {
    const nodes: NodeView[] = [
      { task_id: 'a', description: '', depends_on: [], node_kind: 'agentic', status: 'pending', assignment: null },
      { task_id: 'b', description: '', depends_on: ['a'], node_kind: 'agentic', status: 'pending', assignment: null },
      { task_id: 'c', description: '', depends_on: ['a'], node_kind: 'agentic', status: 'pending', assignment: null },
      { task_id: 'd', description: '', depends_on: ['b', 'c'], node_kind: 'agentic', status: 'pending', assignment: null },
    ];
    const layers = topologicalLayers(nodes).map((layer) => layer.map((n) => n.task_id));
    expect(layers).toEqual([['a'], ['b', 'c'], ['d']]);
  });

  it('escapes untrusted text', () => {
    const html = renderGraph(view({ intent_text: '<script>alert(1)</script>' }));
    expect(html).not.toContain('<script>');
    expect(html).toContain('&lt;script&gt;');
    expect(escapeHtml('a & b "c"')).toBe('a &amp; b &quot;c&quot;');
  });

  it('shows the failure reason when present', () => {
    const html = renderGraph(view({ status: 'failed', failure_reason: 'gate rejected' }));
    expect(html).toContain('class="failure"');
    expect(html).toContain('gate rejected');
  });

  it('gateActionable mirrors pending_gates', () => {
    const v = view();
    expect(gateActionable(v, 'jd_write')).toBe(true);
    expect(gateActionable(v, 'profile_search')).toBe(false);
  });
});

describe('trace rendering', () => {
  const entries: TraceEntry[] = [
    { source: 'audit', at: 1, kind: 'node_status', task_id: 'a', from: 'pending', to: 'running' },
    { source: 'guard', at: 2, direction: 'inbound', decision: 'allow', peer_id: 'echo' },
    {
      source: 'guard', at: 3, direction: 'inbound', decision: 'block',
      rule_id: 'injection.override', peer_id: 'schedule_interviews',
    },
  ];

  it('highlights blocked entries with their rule ids', () => {
    const html = renderTrace(entries);
    expect(html).toContain('data-blocked="1"');
    expect(html.match(/class="[^"]*blocked/g) ?? []).toHaveLength(1);
    expect(html).toContain('injection.override');
    expect(html).toContain('schedule_interviews');
  });

  it('keeps chronological order and sources', () => {
    const html = renderTrace(entries);
    expect(html.indexOf('node_status')).toBeLessThan(html.indexOf('allow'));
    expect(isBlocked(entries[2]!)).toBe(true);
    expect(isBlocked(entries[1]!)).toBe(false);
  });

  it('renders a clean run with zero highlights', () => {
    const html = renderTrace(entries.slice(0, 2));
    expect(html).toContain('data-blocked="0"');
    expect(html).not.toContain('class="trace-entry source-guard blocked"');
  });
});
