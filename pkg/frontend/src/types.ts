/** Payload shapes of the principal HTTP API (see protocol.md in the repo root). */

export type WorkflowStatus =
  | 'composing'
  | 'running'
  | 'awaiting_human'
  | 'failed'
  | 'completed';

export type NodeStatus =
  | 'pending'
  | 'awaiting_approval'
  | 'running'
  | 'succeeded'
  | 'failed'
  | 'skipped';

export type NodeKind = 'agentic' | 'no_llm' | 'human_gate';
export type Mode = 'no_llm' | 'copilot' | 'llm_agent';
export type GateChoice = 'approve' | 'reject' | 'edit';

export interface Assignment {
  resource_id: string;
  gateway_id: string;
}

export interface NodeView {
  task_id: string;
  description: string;
  depends_on: string[];
  node_kind: NodeKind;
  status: NodeStatus;
  assignment: Assignment | null;
}

export interface NodeOutput {
  outcome: 'ok' | 'error';
  payload: Record<string, unknown> | null;
  error_message: string | null;
}

export interface WorkflowView {
  workflow_id: string;
  status: WorkflowStatus;
  intent_text: string;
  mode: Mode | null;
  graph_approved: boolean;
  pending_gates: string[];
  unfulfilled: string[];
  failure_reason: string | null;
  nodes: NodeView[];
  node_outputs: Record<string, NodeOutput>;
}

export interface TraceEntry {
  source: 'guard' | 'audit';
  at: number;
  // guard entries
  direction?: 'inbound' | 'outbound';
  peer_id?: string;
  decision?: 'allow' | 'redact' | 'block';
  rule_id?: string | null;
  matched_rules?: string[];
  // audit entries
  kind?: string;
  task_id?: string | null;
  from?: string | null;
  to?: string | null;
  detail?: string;
  actor?: string;
}

export interface GatewayInfo {
  gateway_id: string;
  display_name: string;
  rating: number;
  connected: boolean;
  last_seen: number;
}

export interface SubmitIntentRequest {
  text: string;
  mode: Mode;
  preferences?: Record<string, string>;
}

export interface SubmitIntentResponse {
  workflow_id: string;
  status: WorkflowStatus;
}

export interface GateDecisionRequest {
  decision: GateChoice;
  actor?: string;
  note?: string;
  inputs?: Record<string, unknown>;
}

export interface ConsoleEvent {
  seq: number;
  workflow_id: string;
  status: WorkflowStatus;
  kind?: string;
  task_id?: string | null;
  from?: string | null;
  to?: string | null;
  detail?: string;
  at?: number;
}

export interface ApiError {
  error: string;
  message: string;
}
