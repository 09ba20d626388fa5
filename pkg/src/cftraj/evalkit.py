"""Metrics and probes: RMSE, classification metrics, AUROC, ECE, the
frozen-encoder reconstruction probe, per-variable R^2 deltas, and
representation export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataio import Dataset
from .numkit import AdamState, Params, RngStream, adam_step
from .seqmodel import ModelCheckpoint, ProbeConfig, ProbeDecoder, record_inputs
from .training import _stack_dataset


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.size == 0:
        raise ValueError("empty input")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    return float(np.sqrt((d * d).mean()))


@dataclass
class ClassificationMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: bool = False       # a 0/0 convention was applied


def classification_metrics(pred_labels: np.ndarray,
                           true_labels: np.ndarray) -> ClassificationMetrics:
    """Accuracy/precision/recall/F1 with 0-on-empty-denominator conventions."""
    p = np.asarray(pred_labels).ravel()
    y = np.asarray(true_labels).ravel()
    if not (np.isin(p, (0, 1)).all() and np.isin(y, (0, 1)).all()):
        raise ValueError("labels must be 0/1")
    tp = int(((p == 1) & (y == 1)).sum())
    tn = int(((p == 0) & (y == 0)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    degenerate = False
    acc = (tp + tn) / max(len(y), 1)
    if tp + fp == 0:
        prec, degenerate = 0.0, True
    else:
        prec = tp / (tp + fp)
    if tp + fn == 0:
        rec, degenerate = 0.0, True
    else:
        rec = tp / (tp + fn)
    if prec + rec == 0:
        f1, degenerate = 0.0, True
    else:
        f1 = 2 * prec * rec / (prec + rec)
    return ClassificationMetrics(acc, prec, rec, f1, degenerate)


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Trapezoidal ROC integration; equivalent to normalized Mann-Whitney U."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tps = np.cumsum(y_sorted == 1)
    fps = np.cumsum(y_sorted == 0)
    # collapse threshold ties: keep the last index of each distinct score
    distinct = np.nonzero(np.diff(s_sorted))[0]
    idx = np.concatenate([distinct, [len(s_sorted) - 1]])
    tpr = np.concatenate([[0.0], tps[idx] / n_pos])
    fpr = np.concatenate([[0.0], fps[idx] / n_neg])
    return float(np.trapezoid(tpr, fpr))


def ece(probs: np.ndarray, labels: np.ndarray, n_bins: int = 10) -> float:
    """Expected calibration error over equal-width probability bins."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("empty input")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if ((p < 0) | (p > 1)).any():
        raise ValueError("probabilities must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    total = 0.0
    n = p.size
    for b in range(n_bins):
        lo, hi = edges[b], edges[b + 1]
        mask = (p >= lo) & (p < hi) if b < n_bins - 1 else (p >= lo) & (p <= hi)
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        total += (cnt / n) * abs(p[mask].mean() - y[mask].mean())
    return float(total)


# ---------------------------------------------------------------------------
# Rollout evaluation
# ---------------------------------------------------------------------------

def _denorm_y(ds: Dataset, values: np.ndarray, channel: int = 0) -> np.ndarray:
    key = f"y_{ds.schema.y_names[channel]}"
    if ds.stats is None:
        return values
    return values * ds.stats.std[key] + ds.stats.mean[key]


def multi_horizon_rmse(ck: ModelCheckpoint, test_ds: Dataset, tau_max: int,
                       origin_stride: int = 1) -> Dict[int, float]:
    """Autoregressive RMSE per horizon 1..tau_max under factual treatments.

    Teacher forcing off: each window is rolled out tau_max steps feeding the
    model its own predictions; errors are pooled over rolling origins.
    """
    from .inference import TreatmentPlan, _rollout_batch
    from .seqmodel import window_inputs
    from .dataio import HistoryWindow

    if not test_ds.records:
        raise ValueError("empty test set")
    T = min(r.T for r in test_ds.records)
    sq = {tau: [] for tau in range(1, tau_max + 1)}
    for origin in range(0, T - tau_max, origin_stride):
        windows = [HistoryWindow(r, origin, tau_max) for r in test_ds.records]
        inputs = np.concatenate([window_inputs(w) for w in windows], axis=0)
        plans = [TreatmentPlan("factual", w.future_treatments(tau_max))
                 for w in windows]
        preds, _ = _rollout_batch(ck, inputs, plans, tau_max)
        targets = np.stack([w.future_outcomes(tau_max) for w in windows])
        err = _denorm_y(test_ds, preds[..., 0]) - _denorm_y(test_ds, targets[..., 0])
        for tau in range(1, tau_max + 1):
            sq[tau].append(err[:, tau - 1] ** 2)
    return {tau: float(np.sqrt(np.concatenate(v).mean())) for tau, v in sq.items()}


def counterfactual_rmse(ck: ModelCheckpoint, test_ds: Dataset, cohort,
                        tau: int, origin_stride: int = 6,
                        per_horizon: bool = False, plan_family: str = "canonical",
                        normalized: bool = False):
    """RMSE of counterfactual rollouts against the common-noise oracle.

    Evaluates a plan family at rolling origins; the oracle re-rolls the
    simulator under each plan with the factual noise sequence. Families:
    "canonical" (None / single arms / Both, constant over the horizon) or
    "sliding" (None plus one arm applied at one step of the horizon). With
    ``normalized`` the errors are divided by the dataset's outcome standard
    deviation, making values comparable across cohorts whose policies lead
    to different outcome scales.
    """
    from . import tumorsim
    from .inference import (TreatmentPlan, _rollout_batch, default_plans,
                            sliding_window_plans)
    from .seqmodel import window_inputs
    from .dataio import HistoryWindow

    by_id = {r.patient_id: r for r in cohort.records}
    T = min(r.T for r in test_ds.records)
    if plan_family == "canonical":
        plan_set = default_plans(tau, test_ds.schema.a_names)
    elif plan_family == "sliding":
        plan_set = sliding_window_plans(tau, test_ds.schema.a_names)
    else:
        raise ValueError(f"unknown plan family {plan_family!r}")
    y_scale = 1.0
    if normalized and test_ds.stats is not None:
        y_scale = test_ds.stats.std[f"y_{test_ds.schema.y_names[0]}"]
    sq = {h: [] for h in range(1, tau + 1)}
    for origin in range(0, T - tau, origin_stride):
        windows = [HistoryWindow(r, origin, tau) for r in test_ds.records]
        base_inputs = np.concatenate([window_inputs(w) for w in windows], axis=0)
        for plan in plan_set:
            n = len(windows)
            plans = [plan] * n
            preds, _ = _rollout_batch(ck, base_inputs, plans, tau)
            preds_dn = _denorm_y(test_ds, preds[..., 0])
            for i, w in enumerate(windows):
                rec = by_id[w.record.patient_id]
                oracle = tumorsim.counterfactual_oracle(
                    rec, plan.assignments[:, 0].astype(int),
                    plan.assignments[:, 1].astype(int), cohort.cfg, origin=origin)
                err = (preds_dn[i] - oracle) / y_scale
                for h in range(1, tau + 1):
                    sq[h].append(err[h - 1] ** 2)
    per = {h: float(np.sqrt(np.mean(v))) for h, v in sq.items()}
    if per_horizon:
        return per
    return float(np.sqrt(np.mean([e for v in sq.values() for e in v])))


# ---------------------------------------------------------------------------
# Reconstruction probe (frozen encoder)
# ---------------------------------------------------------------------------

@dataclass
class ProbeTrainConfig:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0


@dataclass
class ProbeReport:
    train_loss: List[float]
    val_loss: List[float]
    r2_per_variable: Dict[str, float]
    excluded_constant: List[str] = field(default_factory=list)


def _probe_targets(ds: Dataset) -> Tuple[np.ndarray, List[str]]:
    """Per-step reconstruction targets: covariates plus time-expanded statics."""
    names = [f"x_{n}" for n in ds.schema.x_names] + [f"v_{n}" for n in ds.schema.v_names]
    T_max = max(r.T for r in ds.records)
    N = len(ds.records)
    out = np.zeros((N, T_max, len(names)))
    for i, r in enumerate(ds.records):
        vrep = np.broadcast_to(r.V, (r.T, r.V.shape[0]))
        out[i, : r.T] = np.concatenate([r.X, vrep], axis=1)
    return out, names


def reconstruction_probe(ck: ModelCheckpoint, train_ds: Dataset, val_ds: Dataset,
                         cfg: ProbeTrainConfig = ProbeTrainConfig()) -> ProbeReport:
    """Train only a fresh probe decoder on frozen representations.

    Encoder parameters are read, never written; representations are
    precomputed once, which is equivalent to freezing.
    """
    model = ck.model()
    enc_before = {k: v.copy() for k, v in ck.params.items()}

    def representations(ds: Dataset) -> Tuple[np.ndarray, np.ndarray]:
        X, _, _, M = _stack_dataset(ds)
        B, _ = model.encoder.forward(ck.params, X)
        step_mask = np.concatenate([M, np.ones((M.shape[0], 1), dtype=bool)], axis=1)
        return B, step_mask

    B_tr, m_tr = representations(train_ds)
    B_va, m_va = representations(val_ds)
    T_tr, names = _probe_targets(train_ds)
    T_va, _ = _probe_targets(val_ds)

    probe_cfg = ProbeConfig(d_repr=ck.encoder_cfg.d_repr, d_out=len(names))
    probe = ProbeDecoder(probe_cfg)
    stream = RngStream(cfg.seed, 3_000_000)
    params = probe.init_params(stream)
    adam = AdamState(lr=cfg.learning_rate)
    shuffle = RngStream(cfg.seed, 3_000_001)

    def masked_mse(pred, target, mask):
        d = (pred - target) * mask[..., None]
        return float((d * d).sum() / (mask.sum() * target.shape[-1]))

    report = ProbeReport([], [], {})
    best_val = math.inf
    best_params = params
    n = B_tr.shape[0]
    for _ in range(cfg.epochs):
        order = shuffle.permutation(n)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            Bb, Tb, Mb = B_tr[idx], T_tr[idx], m_tr[idx]
            pred, cache = probe.forward(params, Bb)
            n_valid = Mb.sum() * Tb.shape[-1]
            resid = (pred - Tb) * Mb[..., None]
            loss = float((resid * resid).sum() / n_valid)
            grads, _ = probe.backward(params, cache, (2.0 / n_valid) * resid)
            params, adam = adam_step(params, grads, adam)
            epoch_loss += loss
            n_batches += 1
        pred_va, _ = probe.forward(params, B_va)
        val_loss = masked_mse(pred_va, T_va, m_va)
        report.train_loss.append(epoch_loss / max(n_batches, 1))
        report.val_loss.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = {k: v.copy() for k, v in params.items()}

    pred_va, _ = probe.forward(best_params, B_va)
    flat_mask = m_va.reshape(-1)
    pv = pred_va.reshape(-1, len(names))[flat_mask]
    tv = T_va.reshape(-1, len(names))[flat_mask]
    for j, name in enumerate(names):
        var = tv[:, j].var()
        if var < 1e-12:
            report.excluded_constant.append(name)
            continue
        ss_res = float(((tv[:, j] - pv[:, j]) ** 2).mean())
        report.r2_per_variable[name] = 1.0 - ss_res / float(var)

    # frozen contract: encoder parameters untouched
    for k, v in enc_before.items():
        if not np.array_equal(v, ck.params[k]):
            raise RuntimeError("probe training mutated encoder parameters")
    return report


def delta_r2(unbalanced: ProbeReport, balanced: ProbeReport) -> Dict[str, float]:
    """Per-variable R^2(unbalanced) - R^2(balanced); positive means the
    balanced encoder lost information."""
    keys_u = set(unbalanced.r2_per_variable)
    keys_b = set(balanced.r2_per_variable)
    if keys_u != keys_b:
        raise ValueError("probe reports cover different variables")
    return {k: unbalanced.r2_per_variable[k] - balanced.r2_per_variable[k]
            for k in sorted(keys_u)}


# ---------------------------------------------------------------------------
# Representation export and seed-wise comparison
# ---------------------------------------------------------------------------

def export_representations(ck: ModelCheckpoint, ds: Dataset, path: str,
                           static_names: Optional[Sequence[str]] = None) -> int:
    """CSV of (patient_id, t, B_1..B_D, treatments, selected statics)."""
    model = ck.model()
    statics = list(static_names or ds.schema.v_names)
    header = (["patient_id", "t"]
              + [f"B_{i + 1}" for i in range(ck.encoder_cfg.d_repr)]
              + [f"a_{n}" for n in ds.schema.a_names]
              + [f"v_{n}" for n in statics])
    v_idx = [ds.schema.v_names.index(n) for n in statics]
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in ds.records:
            inputs = record_inputs(r.X, r.Y, r.V, r.A)[None]
            B, _ = model.encoder.forward(ck.params, inputs)
            for t in range(r.T):
                row = ([r.patient_id, str(t)]
                       + [f"{v:.17g}" for v in B[0, t]]
                       + [f"{v:.17g}" for v in r.A[t]]
                       + [f"{r.V[i]:.17g}" for i in v_idx])
                w.writerow(row)
                rows += 1
    return rows


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Two-sided paired t-test; returns (t statistic, p value).

    Helper for seed-wise acceptance comparisons.
    """
    from scipy import stats

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("need paired samples of equal length >= 2")
    res = stats.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)
