import type { HistoryPayload } from "./types.js";

/**
 * Long-format trajectory CSV:
 * `patient_id, t, x_<name>..., a_<name>..., y_<name>..., v_<name>...`
 * with a 0-based integer step column and empty cells for missing values.
 */

export interface RowError {
  /** 1-based line number in the file (header is line 1). */
  line: number;
  message: string;
}

export interface ParsedHistory {
  history: HistoryPayload | null;
  patientId: string | null;
  xNames: string[];
  aNames: string[];
  yNames: string[];
  vNames: string[];
  /** Errors with line numbers; non-empty disables submission. */
  errors: RowError[];
  rowCount: number;
}

function splitCsvLine(line: string): string[] {
  // The trajectory format never quotes fields; a plain split suffices.
  return line.split(",").map((c) => c.trim());
}

function prefixed(header: string[], prefix: string): string[] {
  return header
    .filter((h) => h.startsWith(prefix))
    .map((h) => h.slice(prefix.length));
}

export function parseHistoryCsv(text: string): ParsedHistory {
  const empty: ParsedHistory = {
    history: null, patientId: null,
    xNames: [], aNames: [], yNames: [], vNames: [],
    errors: [], rowCount: 0,
  };
  const lines = text.split(/\r?\n/).filter((l) => l.trim() !== "");
  if (lines.length === 0) {
    return { ...empty, errors: [{ line: 1, message: "empty file" }] };
  }
  const header = splitCsvLine(lines[0]);
  if (header[0] !== "patient_id" || header[1] !== "t") {
    return {
      ...empty,
      errors: [{ line: 1, message: "header must start with patient_id,t" }],
    };
  }
  const out: ParsedHistory = {
    ...empty,
    xNames: prefixed(header, "x_"),
    aNames: prefixed(header, "a_"),
    yNames: prefixed(header, "y_"),
    vNames: prefixed(header, "v_"),
  };
  if (out.yNames.length === 0 || out.aNames.length === 0) {
    out.errors.push({ line: 1, message: "need at least one a_ and one y_ column" });
    return out;
  }
  const col: Record<string, number> = {};
  header.forEach((h, i) => (col[h] = i));

  const x: number[][] = [];
  const a: number[][] = [];
  const y: number[][] = [];
  let v: number[] = [];
  let patientId: string | null = null;
  let step = 0; // expected t for the next row, even past flagged rows

  for (let i = 1; i < lines.length; i++) {
    const line = i + 1;
    const cells = splitCsvLine(lines[i]);
    if (cells.length !== header.length) {
      out.errors.push({ line, message: `expected ${header.length} cells, got ${cells.length}` });
      continue;
    }
    const pid = cells[col["patient_id"]];
    if (patientId === null) patientId = pid;
    if (pid !== patientId) {
      // preview the first patient only; later patients are reported once
      if (!out.errors.some((e) => e.message.startsWith("multiple patients"))) {
        out.errors.push({ line, message: `multiple patients in file; showing ${patientId}` });
      }
      continue;
    }
    const t = Number(cells[col["t"]]);
    if (!Number.isInteger(t) || t !== step) {
      out.errors.push({ line, message: `step t must be the 0-based row index (got ${cells[col["t"]]})` });
      continue;
    }
    step += 1;
    const num = (name: string): number => {
      const raw = cells[col[name]];
      if (raw === "") return NaN; // missing cell; imputed server-side? no — flag
      return Number(raw);
    };
    const readRow = (prefix: string, names: string[]): number[] | null => {
      const row: number[] = [];
      for (const n of names) {
        const value = num(`${prefix}${n}`);
        if (!Number.isFinite(value)) {
          out.errors.push({ line, message: `${prefix}${n}: missing or non-numeric value` });
          return null;
        }
        row.push(value);
      }
      return row;
    };
    const xr = readRow("x_", out.xNames);
    const ar = readRow("a_", out.aNames);
    const yr = readRow("y_", out.yNames);
    if (xr === null || ar === null || yr === null) continue;
    const badArm = ar.findIndex((val) => val !== 0 && val !== 1);
    if (badArm >= 0) {
      out.errors.push({ line, message: `a_${out.aNames[badArm]}: treatment must be 0 or 1 (got ${ar[badArm]})` });
      continue;
    }
    if (t === 0) {
      const vr = readRow("v_", out.vNames);
      if (vr === null) continue;
      v = vr;
    }
    x.push(xr);
    a.push(ar);
    y.push(yr);
  }

  out.rowCount = y.length;
  out.patientId = patientId;
  if (out.rowCount === 0 && out.errors.length === 0) {
    out.errors.push({ line: 1, message: "no data rows" });
  }
  if (out.rowCount > 0) {
    out.history = { x, a, y, v };
  }
  return out;
}
