import { ApiClient } from "./api.js";
import { parseHistoryCsv, type ParsedHistory } from "./csv.js";
import { UiSession, canonicalPlans } from "./session.js";
import {
  renderAttributionBars, renderPhiStrip, renderPreferenceBar,
  renderSparkline, renderTrajectoryChart,
} from "./charts.js";

/** Wire the explorer into a host element. Returns the session for tests. */
export function mountApp(root: HTMLElement, baseUrl = ""): UiSession {
  const session = new UiSession(new ApiClient(baseUrl));
  root.innerHTML = `
    <section class="panel" id="load-panel">
      <h2>Patient history</h2>
      <input type="file" id="csv-file" accept=".csv,text/csv" />
      <textarea id="csv-text" rows="6"
        placeholder="paste trajectory CSV (patient_id,t,x_...,a_...,y_...,v_...)"></textarea>
      <button id="load-btn">Load</button>
      <div id="csv-errors" class="errors" role="alert"></div>
      <div id="preview"></div>
    </section>
    <section class="panel" id="controls">
      <h2>What-if controls</h2>
      <div id="plan-toggles"></div>
      <label>Horizon <input type="range" id="horizon" min="1" max="12" value="6" />
        <span id="horizon-value">6</span></label>
      <label>Target range
        <input type="number" id="target-lo" value="0" step="any" /> to
        <input type="number" id="target-hi" value="30" step="any" />
      </label>
      <button id="run-btn" disabled>Run what-if</button>
      <button id="export-btn" disabled>Export JSON</button>
      <div id="service-error" class="errors" role="alert"></div>
    </section>
    <section class="panel" id="results">
      <div id="chart"></div>
      <div id="attribution"></div>
      <div id="phi"></div>
      <h2>Explanation</h2>
      <ol id="explanation"></ol>
      <div id="preference"></div>
      <div id="meta" class="meta"></div>
    </section>`;

  const $ = <T extends HTMLElement>(id: string): T =>
    root.querySelector<T>(`#${id}`) as T;

  const fileInput = $<HTMLInputElement>("csv-file");
  const textInput = $<HTMLTextAreaElement>("csv-text");
  const runBtn = $<HTMLButtonElement>("run-btn");
  const exportBtn = $<HTMLButtonElement>("export-btn");

  function showParse(parsed: ParsedHistory): void {
    const errBox = $("csv-errors");
    errBox.innerHTML = "";
    for (const e of parsed.errors) {
      const div = document.createElement("div");
      div.textContent = `line ${e.line}: ${e.message}`;
      errBox.appendChild(div);
    }
    const preview = $("preview");
    preview.innerHTML = "";
    if (parsed.history) {
      const table = document.createElement("table");
      table.id = "preview-table";
      const head = table.insertRow();
      ["t", ...parsed.xNames.map((n) => `x_${n}`),
        ...parsed.aNames.map((n) => `a_${n}`),
        ...parsed.yNames.map((n) => `y_${n}`)].forEach((h) => {
        head.insertCell().textContent = h;
      });
      parsed.history.y.forEach((yRow, t) => {
        const tr = table.insertRow();
        tr.insertCell().textContent = String(t);
        for (const v of parsed.history!.x[t]) tr.insertCell().textContent = String(v);
        for (const v of parsed.history!.a[t]) tr.insertCell().textContent = String(v);
        for (const v of yRow) tr.insertCell().textContent = String(v);
      });
      preview.appendChild(table);
      preview.appendChild(renderSparkline(parsed.history.y.map((r) => r[0])));
      if (parsed.errors.length === 0) {
        session.setHistory(parsed.history, parsed.aNames);
        renderToggles();
      }
    }
    runBtn.disabled = !(parsed.errors.length === 0 && session.canSubmit);
  }

  function renderToggles(): void {
    const box = $("plan-toggles");
    box.innerHTML = "";
    for (const plan of canonicalPlans(session.state.aNames, session.state.horizon)) {
      const label = document.createElement("label");
      label.className = "plan-toggle";
      const cb = document.createElement("input");
      cb.type = "checkbox";
      cb.checked = session.state.enabledPlans.has(plan.label);
      cb.dataset.plan = plan.label;
      cb.addEventListener("change", () => {
        session.togglePlan(plan.label);
        runBtn.disabled = !session.canSubmit;
      });
      label.append(cb, document.createTextNode(plan.label));
      box.appendChild(label);
    }
  }

  $("load-btn").addEventListener("click", async () => {
    const file = fileInput.files?.[0];
    const text = file ? await file.text() : textInput.value;
    showParse(parseHistoryCsv(text));
  });

  $<HTMLInputElement>("horizon").addEventListener("input", (ev) => {
    const value = Number((ev.target as HTMLInputElement).value);
    session.setHorizon(value);
    $("horizon-value").textContent = String(value);
  });
  const onTarget = () => session.setTargetRange(
    Number($<HTMLInputElement>("target-lo").value),
    Number($<HTMLInputElement>("target-hi").value));
  $("target-lo").addEventListener("change", onTarget);
  $("target-hi").addEventListener("change", onTarget);

  runBtn.addEventListener("click", () => void session.submit());

  exportBtn.addEventListener("click", () => {
    const { filename, text } = session.exportView();
    const blob = new Blob([text], { type: "application/json" });
    const a = document.createElement("a");
    a.href = URL.createObjectURL(blob);
    a.download = filename;
    a.click();
    URL.revokeObjectURL(a.href);
  });

  session.onChange(() => {
    const s = session.state;
    runBtn.disabled = !session.canSubmit || s.pending;
    exportBtn.disabled = !session.canExport;
    $("service-error").textContent = s.lastError ?? "";
    if (!s.lastResponse || !s.history) return;
    const r = s.lastResponse;
    const chart = $("chart");
    chart.innerHTML = "";
    chart.appendChild(renderTrajectoryChart({
      observed: s.history.y.map((row) => row[0]),
      labels: r.labels,
      predicted: r.trajectories.map((traj) => traj.map((step) => step[0])),
      targetRange: s.targetRange,
    }));
    const attribution = $("attribution");
    attribution.innerHTML = "";
    attribution.appendChild(renderAttributionBars(r.attribution.top_k));
    const phi = $("phi");
    phi.innerHTML = "";
    if (r.attribution.phi) {
      phi.appendChild(renderPhiStrip(r.attribution.phi, r.attribution.input_names));
    }
    const explanation = $("explanation");
    explanation.innerHTML = "";
    for (const section of r.explanation.sections) {
      const li = document.createElement("li");
      li.textContent = section;
      explanation.appendChild(li);
    }
    const preference = $("preference");
    preference.innerHTML = "";
    preference.appendChild(renderPreferenceBar(r.explanation.preference));
    $("meta").textContent =
      `model ${r.model_digest.slice(0, 12)} · ${r.latency_ms.toFixed(1)} ms`;
  });

  return session;
}
