import { describe, expect, it } from "vitest";
import {
  renderAttributionBars, renderPhiStrip, renderPreferenceBar,
  renderTrajectoryChart,
} from "../src/charts.js";
import { sampleResponse } from "./fixtures.js";

const labels = ["None", "Chemo", "Radio", "Both"];
const response = sampleResponse(labels, 6);

describe("renderTrajectoryChart", () => {
  const svg = renderTrajectoryChart({
    observed: [100, 97, 94, 91],
    labels,
    predicted: response.trajectories.map((t) => t.map((s) => s[0])),
    targetRange: [0, 30],
  });

  it("renders one solid observed line and four dashed predictions", () => {
    const observed = svg.querySelectorAll('[data-role="observed"]');
    expect(observed).toHaveLength(1);
    expect(observed[0].getAttribute("stroke-dasharray")).toBeNull();
    const predicted = svg.querySelectorAll('[data-role="predicted"]');
    expect(predicted).toHaveLength(4);
    for (const line of predicted) {
      expect(line.getAttribute("stroke-dasharray")).toBe("6 4");
    }
  });

  it("labels each prediction and shades the target band", () => {
    const seen = Array.from(svg.querySelectorAll('[data-role="predicted"]'))
      .map((n) => n.getAttribute("data-label"));
    expect(seen).toEqual(labels);
    expect(svg.querySelectorAll('[data-role="target-band"]')).toHaveLength(1);
    const legend = Array.from(svg.querySelectorAll('[data-role="legend"]'))
      .map((n) => n.textContent);
    expect(legend).toEqual(labels);
  });

  it("extends the x-axis with the horizon", () => {
    const short = renderTrajectoryChart({
      observed: [10, 9], labels: ["None"],
      predicted: [[8]], targetRange: [0, 5],
    });
    const long = renderTrajectoryChart({
      observed: [10, 9], labels: ["None"],
      predicted: [[8, 7, 6, 5, 4, 3]], targetRange: [0, 5],
    });
    const firstStepX = (root: SVGSVGElement) => {
      const pts = root.querySelector('[data-role="predicted"]')!
        .getAttribute("points")!.split(" ");
      return Number(pts[1].split(",")[0]); // first future step after the join
    };
    // same drawing width: with six future steps the first one sits close to
    // the observed data, with one step it spans the whole remaining axis
    expect(firstStepX(long)).toBeLessThan(firstStepX(short));
  });
});

describe("renderAttributionBars", () => {
  it("uses the response omega values and displays matching percentages", () => {
    const root = renderAttributionBars(response.attribution.top_k);
    const fills = root.querySelectorAll<HTMLElement>(".attribution-fill");
    expect(fills).toHaveLength(5);
    fills.forEach((fill, i) => {
      const omega = response.attribution.top_k[i].omega;
      expect(Number(fill.dataset.omega)).toBe(omega);
      expect(parseFloat(fill.style.width)).toBeCloseTo(omega * 100, 6);
    });
    // the full omega vector is a softmax: displayed total over all inputs
    // is 100% of the weight mass
    const total = response.attribution.omega.reduce((s, w) => s + w, 0);
    expect(total).toBeCloseTo(1.0, 9);
  });
});

describe("renderPreferenceBar", () => {
  it("renders segments whose widths total 100", () => {
    const root = renderPreferenceBar(response.explanation.preference);
    const widths = Array.from(
      root.querySelectorAll<HTMLElement>(".preference-segment"),
    ).map((seg) => Number(seg.dataset.score));
    expect(widths).toHaveLength(4);
    expect(widths.reduce((s, w) => s + w, 0)).toBe(100);
  });
});

describe("renderPhiStrip", () => {
  it("renders one cell per step and input with sign-coded colors", () => {
    const phi = response.attribution.phi!;
    const table = renderPhiStrip(phi, response.attribution.input_names);
    expect(table.rows).toHaveLength(phi.length + 1);
    expect(table.rows[1].cells).toHaveLength(phi[0].length + 1);
    const neg = table.rows[1].cells[1];   // phi[0][0] = -0.03
    const pos = table.rows[1].cells[8];   // phi[0][7] = +0.04
    // jsdom normalizes rgba(..., 1) to rgb(...)
    expect(Number(neg.dataset.phi)).toBeLessThan(0);
    expect(neg.style.background).toMatch(/rgba?\(230, 25, 75/);
    expect(Number(pos.dataset.phi)).toBeGreaterThan(0);
    expect(pos.style.background).toMatch(/rgba?\(67, 99, 216/);
  });
});
