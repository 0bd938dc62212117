/**
 * Console session state: the selected workflow, its latest server view,
 * and the live subscription that keeps the view fresh.
 *
 * The server is the only source of truth — events trigger refetches rather
 * than optimistic mutation, and if the event stream is unavailable the
 * session degrades to polling.
 */
import type { ConsoleApi, EventStreamHandle } from './api.js';
import type { ConsoleEvent, GateDecisionRequest, WorkflowView } from './types.js';

const POLL_INTERVAL_MS = 1000;
const TERMINAL: ReadonlyArray<string> = ['completed', 'failed'];

export type SessionListener = (view: WorkflowView, events: ConsoleEvent[]) => void;

export class ConsoleSession {
  private view: WorkflowView | null = null;
  private events: ConsoleEvent[] = [];
  private listeners: SessionListener[] = [];
  private stream: EventStreamHandle | null = null;
  private pollTimer: ReturnType<typeof setInterval> | null = null;
  polling = false;

  constructor(
    readonly api: ConsoleApi,
    readonly workflowId: string,
  ) {}

  current(): WorkflowView | null {
    return this.view;
  }

  eventLog(): ConsoleEvent[] {
    return [...this.events];
  }

  onChange(listener: SessionListener): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    if (this.view === null) return;
    for (const listener of this.listeners) listener(this.view, this.events);
  }

  async refresh(): Promise<WorkflowView> {
    this.view = await this.api.getWorkflow(this.workflowId);
    this.notify();
    return this.view;
  }

  /** Start live updates: SSE when available, polling otherwise. */
  async subscribe(): Promise<void> {
    await this.refresh();
    this.stream = this.api.streamEvents(
      this.workflowId,
      (event) => {
        this.events.push(event);
        void this.refresh();
      },
      (error) => {
        this.stream = null;
        if (error && !this.isTerminal()) this.startPolling();
      },
    );
  }

  private startPolling(): void {
    if (this.pollTimer !== null) return;
    this.polling = true;
    this.pollTimer = setInterval(() => {
      void this.refresh().then(() => {
        if (this.isTerminal()) this.unsubscribe();
      });
    }, POLL_INTERVAL_MS);
  }

  isTerminal(): boolean {
    return this.view !== null && TERMINAL.includes(this.view.status);
  }

  /** Resolves when the server closes the event stream (terminal workflow). */
  streamDone(): Promise<void> {
    return this.stream?.done ?? Promise.resolve();
  }

  unsubscribe(): void {
    this.stream?.close();
    this.stream = null;
    if (this.pollTimer !== null) {
      clearInterval(this.pollTimer);
      this.pollTimer = null;
    }
    this.polling = false;
  }

  // every mutation is one documented API call followed by a server refetch

  async approveGraph(): Promise<WorkflowView> {
    await this.api.approveGraph(this.workflowId);
    return this.refresh();
  }

  async decideGate(taskId: string, decision: GateDecisionRequest): Promise<WorkflowView> {
    await this.api.decideGate(this.workflowId, taskId, decision);
    return this.refresh();
  }

  async pause(): Promise<WorkflowView> {
    await this.api.pauseWorkflow(this.workflowId);
    return this.refresh();
  }

  async resume(): Promise<WorkflowView> {
    await this.api.resumeWorkflow(this.workflowId);
    return this.refresh();
  }
}
