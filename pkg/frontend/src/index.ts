export { ApiCallError, ConsoleApi } from './api.js';
export type { EventStreamHandle } from './api.js';
export { approveEnabled, escapeHtml, gateActionable, renderGraph, topologicalLayers } from './graphView.js';
export { ConsoleSession } from './session.js';
export { isBlocked, renderTrace } from './traceView.js';
export type * from './types.js';
