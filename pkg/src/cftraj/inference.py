"""Autoregressive rollout, counterfactual comparison, integrated gradients,
and the deterministic template explanation.

All operations are read-only over a loaded checkpoint. Rollouts operate in
normalized units internally and denormalize at the boundary. During rollout
the predicted outcome is appended to the history, time-varying covariates
are carried forward, and the plan treatment becomes the next step's
treatment history.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataio import HistoryWindow
from .seqmodel import Model, ModelCheckpoint, window_inputs


@dataclass
class TreatmentPlan:
    label: str
    assignments: np.ndarray        # (tau, d_a) multi-hot

    def __post_init__(self):
        self.assignments = np.atleast_2d(np.asarray(self.assignments, dtype=np.float64))
        if not np.isin(self.assignments, (0.0, 1.0)).all():
            raise ValueError(f"plan {self.label!r}: assignments must be 0/1")

    @property
    def tau(self) -> int:
        return self.assignments.shape[0]

    @property
    def intensity(self) -> float:
        """Fraction of active treatment-steps."""
        return float(self.assignments.mean())


def default_plans(tau: int, a_names: Sequence[str]) -> List[TreatmentPlan]:
    """None / single-arm plans / Both, constant over the horizon."""
    d_a = len(a_names)
    plans = [TreatmentPlan("None", np.zeros((tau, d_a)))]
    for i, name in enumerate(a_names):
        arr = np.zeros((tau, d_a))
        arr[:, i] = 1.0
        plans.append(TreatmentPlan(name.capitalize(), arr))
    plans.append(TreatmentPlan("Both", np.ones((tau, d_a))))
    return plans


def sliding_window_plans(tau: int, a_names: Sequence[str]) -> List[TreatmentPlan]:
    """No-treatment plus every single-treatment plan: one arm applied at one
    step of the horizon, nothing elsewhere."""
    d_a = len(a_names)
    plans = [TreatmentPlan("None", np.zeros((tau, d_a)))]
    for i, name in enumerate(a_names):
        for k in range(tau):
            arr = np.zeros((tau, d_a))
            arr[k, i] = 1.0
            plans.append(TreatmentPlan(f"{name.capitalize()}@{k}", arr))
    return plans


@dataclass
class CounterfactualResult:
    labels: List[str]
    trajectories: np.ndarray       # (n_plans, tau, d_y), denormalized
    origin: int
    tau: int


@dataclass
class AttributionReport:
    phi: np.ndarray                # (tau, d_in) per-step contributions
    omega_raw: np.ndarray          # (d_in,)
    omega: np.ndarray              # (d_in,) softmax-normalized
    input_names: List[str]
    baseline_note: str
    m_steps: int


def _rollout_batch(ck: ModelCheckpoint, inputs: np.ndarray,
                   plans: List[TreatmentPlan], tau: int,
                   target_channel: Optional[int] = None,
                   ig_m: int = 0) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Shared autoregressive loop over a batch of plans.

    inputs: (n, L, d_in) normalized history, one row per plan (identical
    content). Returns normalized predictions (n, tau, d_y) and, when ig_m >
    0, per-step IG attributions (tau, d_in) for plan 0's trajectory.
    """
    model = ck.model()
    n = inputs.shape[0]
    d_in = inputs.shape[2]
    d_y = ck.head_cfg.d_y
    schema = ck.schema
    y_cols = slice(schema.d_x, schema.d_x + schema.d_y)
    preds = np.empty((n, tau, d_y))
    phi = np.zeros((tau, d_in)) if ig_m else None
    hist = inputs
    for k in range(tau):
        a_k = np.stack([p.assignments[k] for p in plans])
        B, _ = model.encoder.forward(ck.params, hist)
        y_hat, _ = model.head.forward(ck.params, B[:, -1], a_k)
        preds[:, k] = y_hat
        if ig_m:
            phi[k] = _ig_step(ck, model, hist[0], a_k[0],
                              target_channel or 0, ig_m)
        if k < tau - 1:
            new_row = hist[:, -1, :].copy()
            new_row[:, y_cols] = y_hat                     # predicted outcome
            # covariates carried forward; statics unchanged
            new_row[:, schema.d_x + schema.d_y + schema.d_v:] = a_k
            hist = np.concatenate([hist, new_row[:, None, :]], axis=1)
    return preds, phi


def _ig_step(ck: ModelCheckpoint, model: Model, hist: np.ndarray,
             a_k: np.ndarray, channel: int, m: int) -> np.ndarray:
    """Midpoint-rule integrated gradients for one prediction step.

    hist: (L, d_in) current history. Baseline is the stored cohort mean
    tiled over time. Returns attributions summed over history steps,
    one value per input variable.
    """
    L = hist.shape[0]
    base = np.broadcast_to(ck.ig_baseline, hist.shape)
    diff = hist - base
    alphas = (np.arange(m) + 0.5) / m
    batch = base[None] + alphas[:, None, None] * diff[None]
    grad = _input_gradient(ck, model, batch, np.broadcast_to(a_k, (m, a_k.shape[0])), channel)
    if not np.isfinite(grad).all():
        raise FloatingPointError("non-finite gradient in integrated gradients")
    avg_grad = grad.mean(axis=0)
    return (diff * avg_grad).sum(axis=0)


def _input_gradient(ck: ModelCheckpoint, model: Model, batch: np.ndarray,
                    a: np.ndarray, channel: int) -> np.ndarray:
    """d prediction[channel] / d inputs for a batch of histories."""
    B, enc_cache = model.encoder.forward(ck.params, batch)
    _, head_cache = model.head.forward(ck.params, B[:, -1], a)
    dout = np.zeros((batch.shape[0], ck.head_cfg.d_y))
    dout[:, channel] = 1.0
    _, dB_last, _ = model.head.backward(ck.params, head_cache, dout)
    dB = np.zeros_like(B)
    dB[:, -1] = dB_last
    _, dx = model.encoder.backward(ck.params, enc_cache, dB)
    return dx


def _denormalize(ck: ModelCheckpoint, preds: np.ndarray) -> np.ndarray:
    out = preds.copy()
    for j, name in enumerate(ck.schema.y_names):
        key = f"y_{name}"
        out[..., j] = out[..., j] * ck.stats.std[key] + ck.stats.mean[key]
    return out


def rollout(window: HistoryWindow, plan: TreatmentPlan,
            ck: ModelCheckpoint) -> np.ndarray:
    """Denormalized predicted trajectory (tau, d_y) under one plan."""
    if plan.tau < 1:
        raise ValueError("plan horizon must be >= 1")
    if plan.assignments.shape[1] != ck.head_cfg.d_a:
        raise ValueError("plan treatment arity does not match the checkpoint")
    inputs = window_inputs(window)
    preds, _ = _rollout_batch(ck, inputs, [plan], plan.tau)
    return _denormalize(ck, preds[0])


def counterfactual_compare_inputs(inputs: np.ndarray,
                                  plans: List[TreatmentPlan],
                                  ck: ModelCheckpoint) -> CounterfactualResult:
    """Plan comparison from a prepared normalized history (1, L, d_in)."""
    if not plans:
        raise ValueError("need at least one plan")
    taus = {p.tau for p in plans}
    if len(taus) != 1:
        raise ValueError(f"mixed plan horizons: {sorted(taus)}")
    for p in plans:
        if p.assignments.shape[1] != ck.head_cfg.d_a:
            raise ValueError(f"plan {p.label!r}: treatment arity does not match the checkpoint")
    tau = taus.pop()
    batch = np.repeat(inputs, len(plans), axis=0)
    preds, _ = _rollout_batch(ck, batch, plans, tau)
    return CounterfactualResult(
        labels=[p.label for p in plans],
        trajectories=_denormalize(ck, preds),
        origin=inputs.shape[1] - 1, tau=tau,
    )


def counterfactual_compare(window: HistoryWindow, plans: List[TreatmentPlan],
                           ck: ModelCheckpoint) -> CounterfactualResult:
    """One rollout per plan from the identical latent starting state."""
    result = counterfactual_compare_inputs(window_inputs(window), plans, ck)
    result.origin = window.origin
    return result


def integrated_gradients_inputs(inputs: np.ndarray, plan: TreatmentPlan,
                                ck: ModelCheckpoint, target_channel: int = 0,
                                m: int = 64) -> AttributionReport:
    """Per-step attributions along the plan's rollout.

    Each row of phi attributes that step's prediction to the input
    variables of the history current at that step (earlier predictions
    included at their history positions), summed over time.
    """
    if m < 8:
        raise ValueError("m must be >= 8")
    if ck.ig_baseline.shape[0] != inputs.shape[2]:
        raise ValueError("baseline width does not match the input width")
    _, phi = _rollout_batch(ck, inputs, [plan], plan.tau,
                            target_channel=target_channel, ig_m=m)
    omega_raw, omega = aggregate_attribution(phi)
    return AttributionReport(
        phi=phi, omega_raw=omega_raw, omega=omega,
        input_names=list(ck.input_names),
        baseline_note="training-cohort per-variable mean", m_steps=m,
    )


def integrated_gradients(window: HistoryWindow, plan: TreatmentPlan,
                         ck: ModelCheckpoint, target_channel: int = 0,
                         m: int = 64) -> AttributionReport:
    return integrated_gradients_inputs(window_inputs(window), plan, ck,
                                       target_channel=target_channel, m=m)


def aggregate_attribution(phi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """omega_raw = column mean over prediction steps; omega = softmax."""
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    if phi.size == 0:
        raise ValueError("phi must be non-empty")
    omega_raw = phi.mean(axis=0)
    z = omega_raw - omega_raw.max()
    e = np.exp(z)
    return omega_raw, e / e.sum()


# ---------------------------------------------------------------------------
# Template explanation
# ---------------------------------------------------------------------------

@dataclass
class PreferenceWeights:
    in_target: float = 0.4
    stability: float = 0.2
    endpoint: float = 0.2
    intensity: float = 0.2


@dataclass
class Explanation:
    sections: List[str]            # exactly four ordered paragraphs
    preference: Dict[str, int]     # plan label -> integer percent, sums to 100


def preference_scores(result: CounterfactualResult,
                      plans: List[TreatmentPlan],
                      target_range: Tuple[float, float],
                      weights: PreferenceWeights = PreferenceWeights()
                      ) -> Dict[str, int]:
    """Deterministic preference heuristic, normalized to integers summing to 100.

    Rewards time inside the target range, trajectory stability, endpoint
    proximity to the target center; penalizes intervention intensity
    (minimal-necessary-intervention principle breaks ties).
    """
    lo, hi = target_range
    if not lo < hi:
        raise ValueError("target range must satisfy lo < hi")
    center = 0.5 * (lo + hi)
    trajs = result.trajectories[..., 0]
    variances = trajs.var(axis=1)
    var_scale = max(float(variances.max()), 1e-12)
    end_dists = np.abs(trajs[:, -1] - center)
    end_scale = max(float(end_dists.max()), 1e-12)
    raw = []
    for i, plan in enumerate(plans):
        inside = float(((trajs[i] >= lo) & (trajs[i] <= hi)).mean())
        stability = 1.0 - variances[i] / var_scale
        endpoint = 1.0 - end_dists[i] / end_scale
        raw.append(weights.in_target * inside + weights.stability * stability
                   + weights.endpoint * endpoint - weights.intensity * plan.intensity)
    raw = np.asarray(raw)
    shifted = raw - raw.min() + 0.05      # floor keeps every plan representable
    return _largest_remainder(shifted, [p.label for p in plans])


def _largest_remainder(weights: np.ndarray, labels: List[str]) -> Dict[str, int]:
    shares = 100.0 * weights / weights.sum()
    floors = np.floor(shares).astype(int)
    remainder = int(100 - floors.sum())
    # ties broken by plan order for determinism
    order = sorted(range(len(labels)), key=lambda i: (-(shares[i] - floors[i]), i))
    for i in order[:remainder]:
        floors[i] += 1
    return {lab: int(v) for lab, v in zip(labels, floors)}


def template_explanation(history_outcomes: np.ndarray,
                         result: CounterfactualResult,
                         plans: List[TreatmentPlan],
                         attribution: AttributionReport,
                         target_range: Tuple[float, float],
                         outcome_name: str = "outcome",
                         outcome_unit: str = "",
                         top_k: int = 5) -> Explanation:
    """Deterministic four-section narrative with preference scores."""
    lo, hi = target_range
    if not lo < hi:
        raise ValueError("target range must satisfy lo < hi")
    unit = f" {outcome_unit}" if outcome_unit else ""
    hist = np.asarray(history_outcomes).ravel()
    current = hist[-1]
    trend = hist[-1] - hist[0] if hist.size > 1 else 0.0
    trend_word = "rising" if trend > 0 else ("falling" if trend < 0 else "stable")

    s1 = (f"Target context: current {outcome_name} is {current:.3g}{unit} "
          f"({trend_word} over the observed history); the target range is "
          f"[{lo:.3g}, {hi:.3g}]{unit}. Predictions cover the next "
          f"{result.tau} steps under {len(plans)} treatment plans.")

    order = np.argsort(-attribution.omega)[:top_k]
    parts = [f"{attribution.input_names[i]} (weight {attribution.omega[i]:.3f}, "
             f"mean contribution {attribution.omega_raw[i]:+.4g})" for i in order]
    s2 = ("Most influential variables for this forecast: " + "; ".join(parts) + ".")

    lines = []
    for i, lab in enumerate(result.labels):
        end = result.trajectories[i, -1, 0]
        lines.append(f"{lab}: endpoint {end:.3g}{unit}")
    s3 = ("Trajectory comparison at the end of the horizon - "
          + "; ".join(lines) + ".")

    prefs = preference_scores(result, plans, target_range)
    ranked = sorted(prefs.items(), key=lambda kv: (-kv[1], kv[0]))
    s4 = ("Preference distribution (sums to 100): "
          + ", ".join(f"{lab} {pct}%" for lab, pct in ranked)
          + ". Scores reward staying inside the target range with minimal "
            "intervention.")

    return Explanation(sections=[s1, s2, s3, s4], preference=prefs)
