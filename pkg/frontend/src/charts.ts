/**
 * SVG renderers. Observed history is a solid line, predicted trajectories
 * are dashed, and the target range is a shaded band. Values are plotted
 * exactly as received; no client-side numerics beyond axis scaling.
 */

const SVG_NS = "http://www.w3.org/2000/svg";
const PALETTE = ["#4363d8", "#e6194b", "#3cb44b", "#f58231", "#911eb4",
  "#46f0f0", "#808000", "#000075"];

function el<K extends keyof SVGElementTagNameMap>(
  tag: K,
  attrs: Record<string, string | number> = {},
): SVGElementTagNameMap[K] {
  const node = document.createElementNS(SVG_NS, tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, String(v));
  return node;
}

interface Scale {
  x: (t: number) => number;
  y: (v: number) => number;
}

function makeScale(
  tMax: number, vMin: number, vMax: number,
  width: number, height: number, pad: number,
): Scale {
  const span = vMax - vMin || 1;
  return {
    x: (t) => pad + (t / Math.max(tMax, 1)) * (width - 2 * pad),
    y: (v) => height - pad - ((v - vMin) / span) * (height - 2 * pad),
  };
}

function polyline(points: Array<[number, number]>, scale: Scale): string {
  return points.map(([t, v]) => `${scale.x(t)},${scale.y(v)}`).join(" ");
}

export interface TrajectoryChartInput {
  /** Observed outcome values for the target channel, steps 0..T-1. */
  observed: number[];
  /** One label per plan, matching the response order. */
  labels: string[];
  /** Per-plan predicted values for the target channel, steps T..T+tau-1. */
  predicted: number[][];
  targetRange: [number, number];
}

export function renderTrajectoryChart(
  input: TrajectoryChartInput,
  width = 640,
  height = 320,
): SVGSVGElement {
  const { observed, labels, predicted, targetRange } = input;
  const T = observed.length;
  const tau = predicted.length ? predicted[0].length : 0;
  const all = [...observed, ...predicted.flat(), ...targetRange];
  const vMin = Math.min(...all);
  const vMax = Math.max(...all);
  const pad = 30;
  const scale = makeScale(T - 1 + tau, vMin, vMax, width, height, pad);

  const svg = el("svg", {
    width, height, viewBox: `0 0 ${width} ${height}`, role: "img",
  });
  svg.classList.add("trajectory-chart");

  const [lo, hi] = targetRange;
  const band = el("rect", {
    x: pad, width: width - 2 * pad,
    y: scale.y(hi), height: Math.max(scale.y(lo) - scale.y(hi), 0),
    fill: "#3cb44b", opacity: 0.12, "data-role": "target-band",
  });
  svg.appendChild(band);

  const obs = el("polyline", {
    points: polyline(observed.map((v, t) => [t, v]), scale),
    fill: "none", stroke: "#222", "stroke-width": 2, "data-role": "observed",
  });
  svg.appendChild(obs);

  predicted.forEach((traj, i) => {
    // connect the last observed point to the first predicted one
    const points: Array<[number, number]> = [[T - 1, observed[T - 1]]];
    traj.forEach((v, k) => points.push([T + k, v]));
    const line = el("polyline", {
      points: polyline(points, scale),
      fill: "none",
      stroke: PALETTE[i % PALETTE.length],
      "stroke-width": 2,
      "stroke-dasharray": "6 4",
      "data-role": "predicted",
      "data-label": labels[i],
    });
    svg.appendChild(line);
  });

  labels.forEach((label, i) => {
    const y = 16 + 16 * i;
    svg.appendChild(el("line", {
      x1: width - 150, x2: width - 130, y1: y - 4, y2: y - 4,
      stroke: PALETTE[i % PALETTE.length], "stroke-width": 2,
      "stroke-dasharray": "6 4",
    }));
    const text = el("text", {
      x: width - 124, y, "font-size": 12, "data-role": "legend",
    });
    text.textContent = label;
    svg.appendChild(text);
  });
  return svg;
}

export interface AttributionBar {
  name: string;
  omega: number;
}

/** Horizontal bars of the top-k softmax attribution weights, shown as
 * percentages of the full weight vector (which sums to 1). */
export function renderAttributionBars(
  topK: AttributionBar[],
  width = 420,
): HTMLDivElement {
  const root = document.createElement("div");
  root.className = "attribution-bars";
  for (const entry of topK) {
    const row = document.createElement("div");
    row.className = "attribution-row";
    const label = document.createElement("span");
    label.className = "attribution-name";
    label.textContent = entry.name;
    const track = document.createElement("div");
    track.className = "attribution-track";
    track.style.width = `${width}px`;
    const bar = document.createElement("div");
    bar.className = "attribution-fill";
    bar.style.width = `${(entry.omega * 100).toFixed(1)}%`;
    bar.dataset.omega = String(entry.omega);
    const pct = document.createElement("span");
    pct.className = "attribution-pct";
    pct.textContent = `${(entry.omega * 100).toFixed(1)}%`;
    track.appendChild(bar);
    row.append(label, track, pct);
    root.appendChild(row);
  }
  return root;
}

/** Stacked preference bar; segment widths are the integer scores, which
 * the service guarantees sum to 100. */
export function renderPreferenceBar(
  preference: Record<string, number>,
): HTMLDivElement {
  const root = document.createElement("div");
  root.className = "preference-bar";
  let i = 0;
  for (const [label, score] of Object.entries(preference)) {
    const seg = document.createElement("div");
    seg.className = "preference-segment";
    seg.style.width = `${score}%`;
    seg.style.background = PALETTE[i % PALETTE.length];
    seg.dataset.score = String(score);
    seg.title = `${label}: ${score}`;
    seg.textContent = score >= 8 ? `${label} ${score}` : "";
    root.appendChild(seg);
    i += 1;
  }
  return root;
}

/** Temporal contribution strip: one cell per (step, input variable),
 * blue for positive and red for negative contributions. */
export function renderPhiStrip(
  phi: number[][],
  inputNames: string[],
): HTMLTableElement {
  const table = document.createElement("table");
  table.className = "phi-strip";
  const absMax = Math.max(...phi.flat().map(Math.abs), 1e-12);
  const head = table.insertRow();
  head.insertCell().textContent = "step";
  for (const name of inputNames) head.insertCell().textContent = name;
  phi.forEach((row, t) => {
    const tr = table.insertRow();
    tr.insertCell().textContent = `+${t + 1}`;
    row.forEach((v) => {
      const cell = tr.insertCell();
      const alpha = Math.abs(v) / absMax;
      cell.style.background = v >= 0
        ? `rgba(67, 99, 216, ${alpha.toFixed(3)})`
        : `rgba(230, 25, 75, ${alpha.toFixed(3)})`;
      cell.dataset.phi = String(v);
      cell.title = v.toExponential(3);
    });
  });
  return table;
}

/** Tiny inline sparkline for the history preview. */
export function renderSparkline(values: number[], width = 120, height = 24): SVGSVGElement {
  const vMin = Math.min(...values);
  const vMax = Math.max(...values);
  const scale = makeScale(values.length - 1, vMin, vMax, width, height, 2);
  const svg = el("svg", { width, height, viewBox: `0 0 ${width} ${height}` });
  svg.classList.add("sparkline");
  svg.appendChild(el("polyline", {
    points: polyline(values.map((v, t) => [t, v]), scale),
    fill: "none", stroke: "#4363d8", "stroke-width": 1.5,
  }));
  return svg;
}
