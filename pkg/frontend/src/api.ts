/**
 * Typed client for the principal HTTP API.
 *
 * The console holds no authority of its own: every state change it can
 * cause is exactly one of the calls below, and reads return server state
 * verbatim. Works in the browser and under node 18+ (global fetch).
 */
import type {
  ConsoleEvent,
  GateDecisionRequest,
  GatewayInfo,
  SubmitIntentRequest,
  SubmitIntentResponse,
  TraceEntry,
  WorkflowView,
} from './types.js';

export class ApiCallError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(`${code}: ${message}`);
  }
}

export interface EventStreamHandle {
  close(): void;
  done: Promise<void>;
}

export class ConsoleApi {
  constructor(
    readonly baseUrl: string,
    readonly token: string = '',
    private readonly fetchFn: typeof fetch = fetch,
  ) {
    this.baseUrl = baseUrl.replace(/\/+$/, '');
  }

  private headers(json = false): Record<string, string> {
    const headers: Record<string, string> = {};
    if (this.token) headers['authorization'] = `Bearer ${this.token}`;
    if (json) headers['content-type'] = 'application/json';
    return headers;
  }

  private async call<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, {
      method,
      headers: this.headers(body !== undefined),
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!response.ok) {
      let code = `http_${response.status}`;
      let message = response.statusText;
      try {
        const doc = (await response.json()) as { error?: string; message?: string };
        code = doc.error ?? code;
        message = doc.message ?? message;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiCallError(response.status, code, message);
    }
    return (await response.json()) as T;
  }

  health(): Promise<{ status: string; gateways: string[] }> {
    return this.call('GET', '/v1/health');
  }

  submitIntent(request: SubmitIntentRequest): Promise<SubmitIntentResponse> {
    return this.call('POST', '/v1/intents', request);
  }

  getWorkflow(workflowId: string): Promise<WorkflowView> {
    return this.call('GET', `/v1/workflows/${encodeURIComponent(workflowId)}`);
  }

  approveGraph(workflowId: string): Promise<{ workflow_id: string; status: string }> {
    return this.call('POST', `/v1/workflows/${encodeURIComponent(workflowId)}/approve`);
  }

  decideGate(
    workflowId: string,
    taskId: string,
    decision: GateDecisionRequest,
  ): Promise<{ workflow_id: string; status: string; pending_gates: string[] }> {
    return this.call(
      'POST',
      `/v1/workflows/${encodeURIComponent(workflowId)}/gates/${encodeURIComponent(taskId)}`,
      decision,
    );
  }

  pauseWorkflow(workflowId: string): Promise<{ status: string; paused: boolean }> {
    return this.call('POST', `/v1/workflows/${encodeURIComponent(workflowId)}/pause`);
  }

  resumeWorkflow(workflowId: string): Promise<{ status: string }> {
    return this.call('POST', `/v1/workflows/${encodeURIComponent(workflowId)}/resume`);
  }

  getTrace(workflowId: string): Promise<TraceEntry[]> {
    return this.call('GET', `/v1/workflows/${encodeURIComponent(workflowId)}/trace`);
  }

  listGateways(): Promise<GatewayInfo[]> {
    return this.call('GET', '/v1/gateways');
  }

  /**
   * Subscribe to the server-push event stream for one workflow.
   *
   * Parses `text/event-stream` frames from a streaming fetch; the caller
   * gets every `data:` payload in order plus an `onEnd` once the server
   * closes the stream (terminal workflow) or the handle is closed.
   */
  streamEvents(
    workflowId: string,
    onEvent: (event: ConsoleEvent) => void,
    onEnd?: (error?: Error) => void,
  ): EventStreamHandle {
    const controller = new AbortController();
    const url =
      `${this.baseUrl}/v1/events?workflow=${encodeURIComponent(workflowId)}` +
      (this.token ? `&token=${encodeURIComponent(this.token)}` : '');
    const done = (async () => {
      const response = await this.fetchFn(url, { signal: controller.signal });
      if (!response.ok || response.body === null) {
        throw new ApiCallError(response.status, 'stream_failed', 'event stream unavailable');
      }
      const reader = response.body.getReader();
      const decoder = new TextDecoder();
      let buffer = '';
      for (;;) {
        const { value, done: finished } = await reader.read();
        if (finished) break;
        buffer += decoder.decode(value, { stream: true });
        let boundary;
        while ((boundary = buffer.indexOf('\n\n')) >= 0) {
          const frame = buffer.slice(0, boundary);
          buffer = buffer.slice(boundary + 2);
          if (frame.startsWith('event: end')) return;
          for (const line of frame.split('\n')) {
            if (line.startsWith('data: ')) {
              onEvent(JSON.parse(line.slice(6)) as ConsoleEvent);
            }
          }
        }
      }
    })();
    const settled = done
      .then(() => onEnd?.())
      .catch((error: Error) => {
        if (error.name !== 'AbortError') onEnd?.(error);
      });
    return { close: () => controller.abort(), done: settled };
  }
}
