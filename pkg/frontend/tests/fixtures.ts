import type { PredictResponse } from "../src/types.js";

export function sampleCsv(steps = 12): string {
  const lines = ["patient_id,t,x_volume,x_chemo_conc,a_chemo,a_radio,y_volume,v_comp0,v_comp1,v_comp2"];
  for (let t = 0; t < steps; t++) {
    const vol = (100 - 3 * t).toFixed(1);
    lines.push(`p000001,${t},${vol},${(t % 3).toFixed(1)},${t % 2},0,${vol},1,0,0`);
  }
  return lines.join("\n");
}

/** sampleCsv with a_chemo=2 on the t=1 data row (file line 3). */
export function csvWithBadTreatment(steps = 4): { csv: string; line: number } {
  const lines = sampleCsv(steps).split("\n");
  const cells = lines[2].split(",");
  cells[4] = "2"; // a_chemo column
  lines[2] = cells.join(",");
  return { csv: lines.join("\n"), line: 3 };
}

export function sampleResponse(labels: string[], tau: number): PredictResponse {
  const trajectories = labels.map((_, i) =>
    Array.from({ length: tau }, (_, k) => [90 - 2 * k - 5 * i]));
  const inputNames = ["x_volume", "x_chemo_conc", "y_volume",
    "v_comp0", "v_comp1", "v_comp2", "a_chemo_prev", "a_radio_prev"];
  const omega = inputNames.map((_, i) => (i === 0 ? 0.3 : 0.1));
  const preference: Record<string, number> = {};
  labels.forEach((label, i) => {
    preference[label] = i === 0 ? 100 - 10 * (labels.length - 1) : 10;
  });
  return {
    labels,
    trajectories,
    attribution: {
      input_names: inputNames,
      top_k: inputNames.slice(0, 5).map((name, i) => ({
        name, omega: omega[i], omega_raw: omega[i] - 0.1,
      })),
      omega,
      omega_raw: omega.map((w) => w - 0.1),
      phi: Array.from({ length: tau }, () => inputNames.map((_, j) => 0.01 * (j - 3))),
      baseline_note: "cohort-mean baseline",
      m_steps: 64,
    },
    explanation: {
      sections: ["s1 target [0, 30]", "s2 trend falling", "s3 drivers", "s4 sums to 100"],
      preference,
    },
    model_digest: "abcdef0123456789",
    latency_ms: 12.3,
  };
}

/**
 * fetch stub returning canned /predict bodies; records every request.
 * Pass status != 200 to simulate a service error.
 */
export function mockFetch(opts: {
  status?: number;
  detail?: string;
  delayMs?: number;
} = {}) {
  const calls: Array<{ url: string; body: any }> = [];
  const status = opts.status ?? 200;
  const fn = async (url: string | URL | Request, init?: RequestInit): Promise<Response> => {
    const body = init?.body ? JSON.parse(init.body as string) : null;
    calls.push({ url: String(url), body });
    if (opts.delayMs) {
      await new Promise<void>((resolve, reject) => {
        const timer = setTimeout(resolve, opts.delayMs);
        init?.signal?.addEventListener("abort", () => {
          clearTimeout(timer);
          reject(new DOMException("aborted", "AbortError"));
        });
      });
    }
    if (init?.signal?.aborted) {
      throw new DOMException("aborted", "AbortError");
    }
    if (status !== 200) {
      return new Response(JSON.stringify({ detail: opts.detail ?? "boom" }), {
        status, statusText: "Error",
        headers: { "Content-Type": "application/json" },
      });
    }
    const labels = body?.plans
      ? body.plans.map((p: { label: string }) => p.label)
      : ["None", "Chemo", "Radio", "Both"];
    const payload = sampleResponse(labels, body?.horizon ?? 6);
    return new Response(JSON.stringify(payload), {
      status: 200, headers: { "Content-Type": "application/json" },
    });
  };
  return { fn: fn as typeof fetch, calls };
}
