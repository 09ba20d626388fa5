import { ApiClient, ApiError } from "./api.js";
import type { HistoryPayload, PlanSpec, PredictRequest, PredictResponse } from "./types.js";

/** Canonical plan set built from the arm names: none / each arm / both. */
export function canonicalPlans(aNames: string[], horizon: number): PlanSpec[] {
  const dA = aNames.length;
  const constant = (active: number[]): number[][] =>
    Array.from({ length: horizon }, () =>
      Array.from({ length: dA }, (_, j) => (active.includes(j) ? 1 : 0)));
  const cap = (s: string) => s.charAt(0).toUpperCase() + s.slice(1);
  const plans: PlanSpec[] = [{ label: "None", assignments: constant([]) }];
  aNames.forEach((name, j) =>
    plans.push({ label: cap(name), assignments: constant([j]) }));
  if (dA > 1) {
    plans.push({
      label: "Both",
      assignments: constant(aNames.map((_, j) => j)),
    });
  }
  return plans;
}

export interface SessionState {
  history: HistoryPayload | null;
  aNames: string[];
  /** Plan labels currently toggled on (subset of the canonical labels). */
  enabledPlans: Set<string>;
  horizon: number;
  targetRange: [number, number];
  lastResponse: PredictResponse | null;
  /** Exact body text of the last successful response. */
  lastResponseText: string | null;
  lastError: string | null;
  pending: boolean;
}

/**
 * UI state holder. All numbers shown on screen come from user input or
 * service responses; this class performs no inference of its own.
 */
export class UiSession {
  readonly state: SessionState = {
    history: null,
    aNames: [],
    enabledPlans: new Set(),
    horizon: 6,
    targetRange: [0, 30],
    lastResponse: null,
    lastResponseText: null,
    lastError: null,
    pending: false,
  };
  private inflight: AbortController | null = null;
  private listeners: Array<() => void> = [];

  constructor(public readonly api: ApiClient) {}

  onChange(fn: () => void): void {
    this.listeners.push(fn);
  }

  private emit(): void {
    for (const fn of this.listeners) fn();
  }

  setHistory(history: HistoryPayload, aNames: string[]): void {
    this.state.history = history;
    this.state.aNames = aNames;
    this.state.enabledPlans = new Set(
      canonicalPlans(aNames, this.state.horizon).map((p) => p.label));
    this.emit();
  }

  togglePlan(label: string): void {
    const s = this.state.enabledPlans;
    if (s.has(label)) s.delete(label);
    else s.add(label);
    this.emit();
  }

  setHorizon(horizon: number): void {
    this.state.horizon = horizon;
    this.emit();
  }

  setTargetRange(lo: number, hi: number): void {
    this.state.targetRange = [lo, hi];
    this.emit();
  }

  get canSubmit(): boolean {
    return this.state.history !== null && this.state.enabledPlans.size > 0;
  }

  /** The plans that one submission will request, in canonical order. */
  selectedPlans(): PlanSpec[] {
    return canonicalPlans(this.state.aNames, this.state.horizon).filter((p) =>
      this.state.enabledPlans.has(p.label));
  }

  /**
   * Issue exactly one POST /predict for the current state. A submission
   * while another is pending aborts the pending one first, so at most one
   * request is in flight per session.
   */
  async submit(): Promise<void> {
    if (!this.canSubmit) {
      throw new Error("need a valid history and at least one plan");
    }
    if (this.inflight) this.inflight.abort();
    const controller = new AbortController();
    this.inflight = controller;
    this.state.pending = true;
    this.state.lastError = null;
    this.emit();

    const req: PredictRequest = {
      history: this.state.history as HistoryPayload,
      plans: this.selectedPlans(),
      horizon: this.state.horizon,
      target_range: this.state.targetRange,
      include_phi: true,
    };
    try {
      const { body, rawText } = await this.api.predict(req, controller.signal);
      this.state.lastResponse = body;
      this.state.lastResponseText = rawText;
    } catch (err) {
      if (err instanceof DOMException && err.name === "AbortError") {
        return; // superseded by a newer submission; keep previous render
      }
      // surface the message; the previous response stays on screen
      this.state.lastError =
        err instanceof ApiError
          ? `service error ${err.status}: ${err.message}`
          : `request failed: ${String(err)}`;
    } finally {
      if (this.inflight === controller) {
        this.inflight = null;
        this.state.pending = false;
      }
      this.emit();
    }
  }

  get canExport(): boolean {
    return this.state.lastResponseText !== null;
  }

  /** Byte-identical copy of the last server body, named after the model. */
  exportView(): { filename: string; text: string } {
    if (this.state.lastResponse === null || this.state.lastResponseText === null) {
      throw new Error("no response to export");
    }
    const digest = this.state.lastResponse.model_digest.slice(0, 12);
    return {
      filename: `whatif_${digest}.json`,
      text: this.state.lastResponseText,
    };
  }
}
