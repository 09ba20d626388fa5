/**
 * End-to-end contract test against a live service at the fetch level
 * (no browser is available in this environment; the DOM layer is covered
 * by the jsdom tests). Spawns the real Python service on a random port,
 * drives the UiSession against it, and checks the UI contract:
 * one /predict per submission, four labelled trajectories, attribution
 * weights, preference totalling 100, and error surfacing.
 */

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { ApiClient } from "../src/api.js";
import { parseHistoryCsv } from "../src/csv.js";
import { UiSession } from "../src/session.js";

const PY = "python3";
const hasService = spawnSync(PY, ["-c", "import cftraj.cli"]).status === 0;
const maybe = hasService ? describe : describe.skip;

maybe("live service", () => {
  let dir: string;
  let proc: ChildProcess;
  let baseUrl: string;
  let csvText: string;

  beforeAll(async () => {
    dir = mkdtempSync(join(tmpdir(), "cftraj-e2e-"));
    const write = (name: string, text: string) => {
      const path = join(dir, name);
      writeFileSync(path, text);
      return path;
    };
    const run = (args: string[]) => {
      const res = spawnSync(PY, ["-m", "cftraj.cli", ...args], { cwd: dir });
      if (res.status !== 0) {
        throw new Error(`cftraj ${args[0]} failed: ${res.stderr}${res.stdout}`);
      }
    };
    run(["simulate", "--config",
      write("sim.toml", "[simulate]\nn_patients = 24\nhorizon = 14\ngamma = 1.0\nseed = 3\n"),
      "--out", join(dir, "data")]);
    run(["train", "--config",
      write("train.toml", "[train]\nepochs = 3\nseed = 7\nbalancing_mode = \"none\"\n"),
      "--data", join(dir, "data", "gamma_1"), "--out", join(dir, "model")]);

    const cohort = readFileSync(join(dir, "data", "gamma_1", "cohort.csv"), "utf-8");
    const lines = cohort.split("\n");
    csvText = [lines[0], ...lines.slice(1).filter((l) => l.startsWith("p000000,"))].join("\n");

    proc = spawn(PY, ["-m", "cftraj.cli", "serve", "--checkpoint",
      join(dir, "model", "model.ckpt"), "--port", "0", "--quiet"]);
    baseUrl = await new Promise<string>((resolve, reject) => {
      const timer = setTimeout(() => reject(new Error("service did not start")), 30_000);
      proc.stdout!.on("data", (chunk: Buffer) => {
        const m = /listening on (http:\/\/[\d.]+:\d+)/.exec(chunk.toString());
        if (m) {
          clearTimeout(timer);
          resolve(m[1]);
        }
      });
      proc.on("exit", (code) => reject(new Error(`service exited ${code}`)));
    });
    for (let i = 0; i < 50; i++) {
      try {
        if ((await fetch(`${baseUrl}/health`)).ok) break;
      } catch { /* not up yet */ }
      await new Promise((r) => setTimeout(r, 100));
    }
  }, 120_000);

  afterAll(() => {
    proc?.kill();
    if (dir) rmSync(dir, { recursive: true, force: true });
  });

  function liveSession(): UiSession {
    const session = new UiSession(new ApiClient(baseUrl));
    const parsed = parseHistoryCsv(csvText);
    expect(parsed.errors).toEqual([]);
    session.setHistory(parsed.history!, parsed.aNames);
    return session;
  }

  it("reports healthy with a model digest", async () => {
    const health = await new ApiClient(baseUrl).health();
    expect(health.status).toBe("ok");
    expect(health.model_digest.length).toBeGreaterThan(8);
  });

  it("runs the four default plans through one /predict", async () => {
    const session = liveSession();
    session.setHorizon(4);
    await session.submit();
    expect(session.state.lastError).toBeNull();
    const r = session.state.lastResponse!;
    expect(r.labels).toEqual(["None", "Chemo", "Radio", "Both"]);
    expect(r.trajectories).toHaveLength(4);
    for (const traj of r.trajectories) expect(traj).toHaveLength(4);
    const omegaSum = r.attribution.omega.reduce((s, w) => s + w, 0);
    expect(omegaSum).toBeCloseTo(1.0, 9);
    const prefTotal = Object.values(r.explanation.preference)
      .reduce((s, w) => s + w, 0);
    expect(prefTotal).toBe(100);
    expect(r.explanation.sections).toHaveLength(4);
  }, 30_000);

  it("re-running unchanged inputs returns an identical body", async () => {
    const session = liveSession();
    await session.submit();
    const strip = (text: string) => {
      const body = JSON.parse(text);
      delete body.latency_ms;
      return JSON.stringify(body);
    };
    const first = strip(session.state.lastResponseText!);
    await session.submit();
    expect(strip(session.state.lastResponseText!)).toBe(first);
  }, 30_000);

  it("toggling a plan off drops exactly that trajectory", async () => {
    const session = liveSession();
    await session.submit();
    const before = session.state.lastResponse!;
    session.togglePlan("Radio");
    await session.submit();
    const after = session.state.lastResponse!;
    expect(after.labels).toEqual(["None", "Chemo", "Both"]);
    // plans are rolled out in one batch, so summation order (and the last
    // few float bits) can shift when the plan set changes
    const close = (a: number[][], b: number[][]) => {
      expect(a.length).toBe(b.length);
      a.flat().forEach((v, i) => expect(v).toBeCloseTo(b.flat()[i], 9));
    };
    close(after.trajectories[0], before.trajectories[0]);
    close(after.trajectories[1], before.trajectories[1]);
    close(after.trajectories[2], before.trajectories[3]);
  }, 30_000);

  it("surfaces a server-side validation error", async () => {
    const session = liveSession();
    session.setTargetRange(5, 5);
    await session.submit();
    expect(session.state.lastError).toContain("422");
    expect(session.state.lastError).toContain("lo must be < hi");
  }, 30_000);

  it("export is byte-identical to the live body", async () => {
    const session = liveSession();
    await session.submit();
    const { filename, text } = session.exportView();
    expect(text).toBe(session.state.lastResponseText);
    expect(filename).toContain(
      session.state.lastResponse!.model_digest.slice(0, 12));
  }, 30_000);
});
