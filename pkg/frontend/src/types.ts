/** Shapes of the prediction service's JSON API (see GET /schema). */

export interface HistoryPayload {
  x: number[][];
  a: number[][];
  y: number[][];
  v: number[];
}

export interface PlanSpec {
  label: string;
  assignments: number[][];
}

export interface PredictRequest {
  history: HistoryPayload;
  plans?: PlanSpec[];
  horizon: number;
  top_k?: number;
  target_range: [number, number];
  ig_steps?: number;
  target_channel?: number;
  include_phi?: boolean;
}

export interface TopKEntry {
  name: string;
  omega: number;
  omega_raw: number;
}

export interface AttributionPayload {
  input_names: string[];
  top_k: TopKEntry[];
  omega: number[];
  omega_raw: number[];
  phi: number[][] | null;
  baseline_note: string;
  m_steps: number;
}

export interface ExplanationPayload {
  sections: string[];
  preference: Record<string, number>;
}

export interface PredictResponse {
  labels: string[];
  trajectories: number[][][];
  attribution: AttributionPayload;
  explanation: ExplanationPayload;
  model_digest: string;
  latency_ms: number;
}

export interface HealthResponse {
  status: string;
  model_digest: string;
  format_version: string;
}
