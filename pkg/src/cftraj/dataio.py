"""Canonical longitudinal dataset schema, file formats and transforms.

File format: a long-format trajectory CSV plus a sidecar JSON manifest.
CSV columns are ``patient_id, t, x_<name>..., a_<name>..., y_<name>...,
v_<name>...`` with ``t`` a 0-based integer step, floats at 17 significant
digits, and missing values as empty cells.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numkit import RngStream

FORMAT_VERSION = "1"


class SchemaError(ValueError):
    pass


@dataclass
class DatasetSchema:
    x_names: List[str]
    a_names: List[str]
    y_names: List[str]
    v_names: List[str] = field(default_factory=list)
    onehot_groups: List[List[str]] = field(default_factory=list)
    units: Dict[str, str] = field(default_factory=dict)

    @property
    def d_x(self) -> int:
        return len(self.x_names)

    @property
    def d_a(self) -> int:
        return len(self.a_names)

    @property
    def d_y(self) -> int:
        return len(self.y_names)

    @property
    def d_v(self) -> int:
        return len(self.v_names)

    def to_jsonable(self) -> dict:
        return {
            "x_names": self.x_names, "a_names": self.a_names,
            "y_names": self.y_names, "v_names": self.v_names,
            "onehot_groups": self.onehot_groups, "units": self.units,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "DatasetSchema":
        return cls(
            x_names=list(d["x_names"]), a_names=list(d["a_names"]),
            y_names=list(d["y_names"]), v_names=list(d.get("v_names", [])),
            onehot_groups=[list(g) for g in d.get("onehot_groups", [])],
            units=dict(d.get("units", {})),
        )


@dataclass
class TrajectoryRecord:
    """One patient: static covariates plus aligned per-step sequences."""

    patient_id: str
    V: np.ndarray          # (d_v,)
    X: np.ndarray          # (T, d_x)
    A: np.ndarray          # (T, d_a), entries in {0,1}
    Y: np.ndarray          # (T, d_y)
    mask: np.ndarray       # (T, d_x) observed flags for X

    def __post_init__(self):
        T = self.X.shape[0]
        if self.A.shape[0] != T or self.Y.shape[0] != T or self.mask.shape != self.X.shape:
            raise SchemaError(f"record {self.patient_id!r}: ragged sequence lengths")
        if T < 1:
            raise SchemaError(f"record {self.patient_id!r}: empty trajectory")
        finite_a = self.A[np.isfinite(self.A)]
        if not np.isin(finite_a, (0.0, 1.0)).all():
            raise SchemaError(f"record {self.patient_id!r}: treatment entries must be 0/1")

    @property
    def T(self) -> int:
        return self.X.shape[0]


@dataclass
class NormStats:
    mean: Dict[str, float]
    std: Dict[str, float]

    def to_jsonable(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_jsonable(cls, d: dict) -> "NormStats":
        return cls(mean=dict(d["mean"]), std=dict(d["std"]))


@dataclass
class Dataset:
    records: List[TrajectoryRecord]
    schema: DatasetSchema
    stats: Optional[NormStats] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.records:
            if (r.X.shape[1] != self.schema.d_x or r.A.shape[1] != self.schema.d_a
                    or r.Y.shape[1] != self.schema.d_y or r.V.shape[0] != self.schema.d_v):
                raise SchemaError(f"record {r.patient_id!r} does not conform to schema")
        self._check_onehot()

    def _check_onehot(self):
        for group in self.schema.onehot_groups:
            idx = [self.schema.v_names.index(n) for n in group if n in self.schema.v_names]
            if len(idx) != len(group):
                continue
            for r in self.records:
                s = r.V[idx].sum()
                if abs(s - 1.0) > 1e-9:
                    raise SchemaError(
                        f"record {r.patient_id!r}: one-hot group {group} sums to {s}"
                    )

    def patient_ids(self) -> List[str]:
        return [r.patient_id for r in self.records]

    def subset(self, ids: Sequence[str]) -> "Dataset":
        wanted = set(ids)
        return Dataset(
            records=[r for r in self.records if r.patient_id in wanted],
            schema=self.schema, stats=self.stats, provenance=self.provenance,
        )


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def save_dataset(ds: Dataset, path: str) -> None:
    """Write trajectory CSV plus manifest JSON (path without extension)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)) or ".", exist_ok=True)
    s = ds.schema
    header = (["patient_id", "t"]
              + [f"x_{n}" for n in s.x_names]
              + [f"a_{n}" for n in s.a_names]
              + [f"y_{n}" for n in s.y_names]
              + [f"v_{n}" for n in s.v_names])
    with open(path + ".csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in ds.records:
            for t in range(r.T):
                row = [r.patient_id, str(t)]
                for j in range(s.d_x):
                    row.append(_fmt(r.X[t, j]) if r.mask[t, j] else "")
                row += [_fmt(v) for v in r.A[t]]
                row += [_fmt(v) for v in r.Y[t]]
                row += [_fmt(v) for v in r.V]
                w.writerow(row)
    manifest = {
        "format_version": FORMAT_VERSION,
        "schema": s.to_jsonable(),
        "stats": ds.stats.to_jsonable() if ds.stats else None,
        "provenance": ds.provenance,
    }
    with open(path + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_dataset(path: str) -> Dataset:
    """Load a dataset written by save_dataset (path without extension)."""
    with open(path + ".manifest.json", encoding="utf-8") as f:
        manifest = json.load(f)
    schema = DatasetSchema.from_jsonable(manifest["schema"])
    per_patient: Dict[str, list] = {}
    order: List[str] = []
    with open(path + ".csv", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        expected = (["patient_id", "t"]
                    + [f"x_{n}" for n in schema.x_names]
                    + [f"a_{n}" for n in schema.a_names]
                    + [f"y_{n}" for n in schema.y_names]
                    + [f"v_{n}" for n in schema.v_names])
        if header != expected:
            missing = set(expected) - set(header)
            raise SchemaError(f"CSV header mismatch; missing columns: {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SchemaError(f"row {lineno}: expected {len(header)} cells, got {len(row)}")
            pid = row[0]
            if pid not in per_patient:
                per_patient[pid] = []
                order.append(pid)
            per_patient[pid].append((lineno, row))
    records = []
    d_x, d_a, d_y, d_v = schema.d_x, schema.d_a, schema.d_y, schema.d_v
    for pid in order:
        rows = sorted(per_patient[pid], key=lambda lr: int(lr[1][1]))
        T = len(rows)
        X = np.zeros((T, d_x))
        mask = np.zeros((T, d_x), dtype=bool)
        A = np.zeros((T, d_a))
        Y = np.zeros((T, d_y))
        V = np.zeros(d_v)
        for i, (lineno, row) in enumerate(rows):
            if int(row[1]) != i:
                raise SchemaError(f"row {lineno}: non-contiguous steps for patient {pid!r}")
            c = 2
            for j in range(d_x):
                cell = row[c + j]
                if cell != "":
                    X[i, j] = float(cell)
                    mask[i, j] = True
            c += d_x
            for j in range(d_a):
                val = float(row[c + j])
                if val not in (0.0, 1.0):
                    raise SchemaError(
                        f"row {lineno}, column a_{schema.a_names[j]}: "
                        f"treatment value {val} not in {{0,1}}"
                    )
                A[i, j] = val
            c += d_a
            for j in range(d_y):
                Y[i, j] = float(row[c + j])
            c += d_y
            for j in range(d_v):
                V[j] = float(row[c + j])
        records.append(TrajectoryRecord(pid, V, X, A, Y, mask))
    ds = Dataset(records=records, schema=schema,
                 stats=NormStats.from_jsonable(manifest["stats"]) if manifest.get("stats") else None,
                 provenance=manifest.get("provenance", {}))
    return ds


# ---------------------------------------------------------------------------
# Imputation and normalization
# ---------------------------------------------------------------------------

def impute_locf_nocb(record: TrajectoryRecord) -> TrajectoryRecord:
    """Forward fill, then backward fill leading gaps; original mask retained."""
    X = record.X.copy()
    for j in range(X.shape[1]):
        col_mask = record.mask[:, j]
        if not col_mask.any():
            raise ValueError(f"feature column {j} has no observed values")
        last = None
        for t in range(X.shape[0]):
            if col_mask[t]:
                last = X[t, j]
            elif last is not None:
                X[t, j] = last
        first = X[np.argmax(col_mask), j]
        for t in range(X.shape[0]):
            if col_mask[t]:
                break
            X[t, j] = first
    return TrajectoryRecord(record.patient_id, record.V.copy(), X,
                            record.A.copy(), record.Y.copy(), record.mask.copy())


def _onehot_v_names(schema: DatasetSchema) -> set:
    out = set()
    for g in schema.onehot_groups:
        out.update(g)
    return out


def zscore_fit(train: Dataset) -> NormStats:
    """Population mean/std per continuous feature, fitted on the train split.

    Constant features get std 1 so they transform to zeros. One-hot static
    groups and treatment indicators are left untouched.
    """
    s = train.schema
    onehot = _onehot_v_names(s)
    mean: Dict[str, float] = {}
    std: Dict[str, float] = {}

    def fit(name: str, values: np.ndarray):
        mu = float(values.mean())
        sigma = float(values.std())
        mean[name] = mu
        std[name] = sigma if sigma > 0 else 1.0

    for j, n in enumerate(s.x_names):
        fit(f"x_{n}", np.concatenate([r.X[:, j] for r in train.records]))
    for j, n in enumerate(s.y_names):
        fit(f"y_{n}", np.concatenate([r.Y[:, j] for r in train.records]))
    for j, n in enumerate(s.v_names):
        if n not in onehot:
            fit(f"v_{n}", np.array([r.V[j] for r in train.records]))
    return NormStats(mean, std)


def zscore_apply(ds: Dataset, stats: NormStats, invert: bool = False) -> Dataset:
    s = ds.schema
    for key in stats.mean:
        prefix, name = key.split("_", 1)
        names = {"x": s.x_names, "y": s.y_names, "v": s.v_names}[prefix]
        if name not in names:
            raise SchemaError(f"normalization stats refer to unknown feature {key!r}")
    records = []
    for r in ds.records:
        X, Y, V = r.X.copy(), r.Y.copy(), r.V.copy()
        for j, n in enumerate(s.x_names):
            key = f"x_{n}"
            if key in stats.mean:
                X[:, j] = (X[:, j] * stats.std[key] + stats.mean[key]) if invert \
                    else (X[:, j] - stats.mean[key]) / stats.std[key]
        for j, n in enumerate(s.y_names):
            key = f"y_{n}"
            if key in stats.mean:
                Y[:, j] = (Y[:, j] * stats.std[key] + stats.mean[key]) if invert \
                    else (Y[:, j] - stats.mean[key]) / stats.std[key]
        for j, n in enumerate(s.v_names):
            key = f"v_{n}"
            if key in stats.mean:
                V[j] = (V[j] * stats.std[key] + stats.mean[key]) if invert \
                    else (V[j] - stats.mean[key]) / stats.std[key]
        records.append(TrajectoryRecord(r.patient_id, V, X, r.A.copy(), Y, r.mask.copy()))
    out = Dataset(records, s, stats=stats if not invert else None, provenance=ds.provenance)
    return out


# ---------------------------------------------------------------------------
# Windowing and splitting
# ---------------------------------------------------------------------------

@dataclass
class HistoryWindow:
    """View into a record: history up to origin t, future up to t + tau_max.

    The accessible history exposes X, Y at steps <= t and treatments at
    steps <= t-1; nothing past the origin leaks in.
    """

    record: TrajectoryRecord
    origin: int
    tau_max: int

    def __post_init__(self):
        if self.origin + self.tau_max > self.record.T - 1:
            raise ValueError("window exceeds trajectory length")
        if self.origin < 0 or self.tau_max < 1:
            raise ValueError("require origin >= 0 and tau_max >= 1")

    def history(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(X_hist, A_prev, Y_hist, V): steps 0..origin, treatments shifted."""
        t = self.origin
        r = self.record
        X = r.X[: t + 1]
        Y = r.Y[: t + 1]
        # step s sees A_{s-1}; step 0 sees a zero treatment vector
        A_prev = np.vstack([np.zeros((1, r.A.shape[1])), r.A[:t]])
        return X, A_prev, Y, r.V

    def future_treatments(self, tau: int) -> np.ndarray:
        return self.record.A[self.origin: self.origin + tau]

    def future_outcomes(self, tau: int) -> np.ndarray:
        return self.record.Y[self.origin + 1: self.origin + 1 + tau]


def rolling_origin_windows(record: TrajectoryRecord, tau_max: int,
                           t_min: int = 1) -> List[HistoryWindow]:
    """Windows with history length t_min..T-tau_max; empty list if too short.

    ``t_min`` counts history steps, so the default 1 starts at 0-based
    origin 0 (one observed step). Each window exposes tau_max future steps.
    """
    if tau_max < 1:
        raise ValueError("tau_max must be >= 1")
    if t_min < 1:
        raise ValueError("t_min must be >= 1")
    out = []
    for origin in range(t_min - 1, record.T - tau_max):
        out.append(HistoryWindow(record, origin, tau_max))
    return out


def split_patients(ds: Dataset, ratios: Tuple[float, float, float],
                   stream: RngStream) -> Tuple[Dataset, Dataset, Dataset]:
    """Disjoint patient-level partition, deterministic under the stream seed."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    ids = ds.patient_ids()
    n = len(ids)
    nonzero = sum(1 for r in ratios if r > 0)
    if n < nonzero:
        raise ValueError(f"cannot split {n} patients into {nonzero} nonempty parts")
    perm = stream.permutation(n)
    shuffled = [ids[i] for i in perm]
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    train_ids = shuffled[:n_train]
    val_ids = shuffled[n_train: n_train + n_val]
    test_ids = shuffled[n_train + n_val:]
    return ds.subset(train_ids), ds.subset(val_ids), ds.subset(test_ids)


# ---------------------------------------------------------------------------
# Positivity
# ---------------------------------------------------------------------------

@dataclass
class PositivityReport:
    arm_counts: Dict[Tuple[int, ...], int]
    total_steps: int
    zero_support: List[Tuple[int, ...]]
    low_support: List[Tuple[int, ...]]
    min_fraction: float

    @property
    def ok(self) -> bool:
        return not self.zero_support and not self.low_support


def positivity_check(ds: Dataset, min_fraction: float = 0.01) -> PositivityReport:
    """Per joint treatment arm, counts of assigned steps; report-only."""
    d_a = ds.schema.d_a
    arms = [tuple(int(b) for b in np.binary_repr(i, width=d_a)) for i in range(2 ** d_a)]
    counts = {arm: 0 for arm in arms}
    total = 0
    for r in ds.records:
        for t in range(r.T):
            arm = tuple(int(v) for v in r.A[t])
            counts[arm] += 1
            total += 1
    zero = [a for a, c in counts.items() if c == 0] if total else []
    low = [a for a, c in counts.items() if c > 0 and c / max(total, 1) < min_fraction] if total else []
    return PositivityReport(counts if total else {}, total, zero, low, min_fraction)
