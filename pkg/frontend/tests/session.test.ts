import { describe, expect, it, vi } from 'vitest';

import type { ConsoleApi, EventStreamHandle } from '../src/api.js';
import { ConsoleSession } from '../src/session.js';
import type { ConsoleEvent, WorkflowView } from '../src/types.js';
import { workflowFixture } from './mockServer.js';

type EventCallback = (event: ConsoleEvent) => void;
type EndCallback = ((error?: Error) => void) | undefined;

/** In-memory stand-in for ConsoleApi: scripted views, manual event pushes. */
class FakeApi {
  views: WorkflowView[] = [];
  calls: string[] = [];
  emit: EventCallback | null = null;
  end: EndCallback = undefined;
  streamShouldFail = false;

  async getWorkflow(): Promise<WorkflowView> {
    this.calls.push('getWorkflow');
    const next = this.views.length > 1 ? this.views.shift()! : this.views[0]!;
    return next;
  }

  async approveGraph() {
    this.calls.push('approveGraph');
    return { workflow_id: 'wf-1', status: 'running' };
  }

  async decideGate(_id: string, task: string) {
    this.calls.push(`decideGate:${task}`);
    return { workflow_id: 'wf-1', status: 'running', pending_gates: [] };
  }

  async pauseWorkflow() {
    this.calls.push('pause');
    return { status: 'running', paused: true };
  }

  async resumeWorkflow() {
    this.calls.push('resume');
    return { status: 'running' };
  }

  streamEvents(_id: string, onEvent: EventCallback, onEnd?: EndCallback): EventStreamHandle {
    this.calls.push('streamEvents');
    if (this.streamShouldFail) {
      const failure = Promise.resolve().then(() => onEnd?.(new Error('stream down')));
      return { close: () => undefined, done: failure };
    }
    this.emit = onEvent;
    this.end = onEnd;
    return { close: () => undefined, done: Promise.resolve() };
  }
}

function fixture(status = 'awaiting_human'): WorkflowView {
  return workflowFixture({ status }) as unknown as WorkflowView;
}

describe('ConsoleSession', () => {
  it('refreshes from the server on every stream event', async () => {
    const api = new FakeApi();
    api.views = [fixture(), fixture('running'), fixture('completed')];
    const session = new ConsoleSession(api as unknown as ConsoleApi, 'wf-1');
    const seen: string[] = [];
    session.onChange((view) => seen.push(view.status));
    await session.subscribe();
    api.emit!({ seq: 0, workflow_id: 'wf-1', status: 'running' });
    api.emit!({ seq: 1, workflow_id: 'wf-1', status: 'completed' });
    await new Promise((resolve) => setTimeout(resolve, 0));
    expect(seen).toEqual(['awaiting_human', 'running', 'completed']);
    expect(session.eventLog().map((e) => e.seq)).toEqual([0, 1]);
    expect(session.isTerminal()).toBe(true);
  });

  it('falls back to polling when the stream fails', async () => {
    vi.useFakeTimers();
    try {
      const api = new FakeApi();
      api.streamShouldFail = true;
      api.views = [fixture(), fixture('completed')];
      const session = new ConsoleSession(api as unknown as ConsoleApi, 'wf-1');
      await session.subscribe();
      await Promise.resolve(); // let the failure callback run
      expect(session.polling).toBe(true);
      await vi.advanceTimersByTimeAsync(1100);
      expect(session.current()!.status).toBe('completed');
      expect(session.polling).toBe(false); // terminal state stops the poll
    } finally {
      vi.useRealTimers();
    }
  });

  it('mutations are one API call plus a refetch, never optimistic', async () => {
    const api = new FakeApi();
    api.views = [fixture()];
    const session = new ConsoleSession(api as unknown as ConsoleApi, 'wf-1');
    await session.refresh();
    api.calls.length = 0;
    await session.decideGate('jd_write', { decision: 'approve' });
    expect(api.calls).toEqual(['decideGate:jd_write', 'getWorkflow']);
    api.calls.length = 0;
    await session.approveGraph();
    expect(api.calls).toEqual(['approveGraph', 'getWorkflow']);
    api.calls.length = 0;
    await session.pause();
    await session.resume();
    expect(api.calls).toEqual(['pause', 'getWorkflow', 'resume', 'getWorkflow']);
  });
});
