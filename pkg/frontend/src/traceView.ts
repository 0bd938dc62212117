/** Pure rendering of the merged guard + audit timeline. */
import { escapeHtml } from './graphView.js';
import type { TraceEntry } from './types.js';

export function isBlocked(entry: TraceEntry): boolean {
  return entry.source === 'guard' && entry.decision === 'block';
}

function describe(entry: TraceEntry): string {
  if (entry.source === 'guard') {
    const rule = entry.rule_id ? ` rule=${entry.rule_id}` : '';
    const peer = entry.peer_id ? ` peer=${entry.peer_id}` : '';
    return `guard ${entry.direction ?? ''} ${entry.decision ?? ''}${rule}${peer}`;
  }
  const transition =
    entry.from && entry.to ? ` ${entry.from} -> ${entry.to}` : '';
  const task = entry.task_id ? ` ${entry.task_id}` : '';
  return `${entry.kind ?? 'audit'}${task}${transition}`;
}

export function renderTrace(entries: TraceEntry[]): string {
  const rows = entries
    .map((entry) => {
      const classes = ['trace-entry', `source-${entry.source}`];
      if (isBlocked(entry)) classes.push('blocked');
      const detail = entry.detail ? ` — ${escapeHtml(entry.detail)}` : '';
      return (
        `<li class="${classes.join(' ')}">` +
        `<time>${entry.at}</time> ${escapeHtml(describe(entry))}${detail}</li>`
      );
    })
    .join('');
  const blocked = entries.filter(isBlocked).length;
  return (
    `<ol class="trace" data-blocked="${blocked}">` +
    rows +
    '</ol>'
  );
}
