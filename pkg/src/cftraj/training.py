"""Joint optimization of prediction and balancing losses.

One-step-ahead training with teacher forcing: each patient sequence is
encoded once and the outcome head predicts Y_{t+1} from (B_t, A_t) at every
transition in parallel. The balancing term (sMMD, gradient reversal, or
domain confusion) acts on the pooled per-step representations, weighted by
the sigmoidal lambda schedule.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import balancing
from .balancing import KernelConfig, SmmdConfig
from .dataio import Dataset, NormStats, zscore_apply, zscore_fit
from .numkit import AdamState, Params, RngStream, adam_step
from .seqmodel import (
    EncoderConfig, HeadConfig, Model, ModelCheckpoint, CHECKPOINT_FORMAT_VERSION,
    build_input_names, record_inputs, save_checkpoint, load_checkpoint,
)


def lambda_schedule(e: int, E: int) -> float:
    """Sigmoidal annealing: 0 at epoch 0, approaching 1 by the final epoch."""
    if E < 1 or not (0 <= e <= E):
        raise ValueError("require 0 <= e <= E and E >= 1")
    return 2.0 / (1.0 + math.exp(-10.0 * e / E)) - 1.0


def joint_loss(pred_loss: float, bal_loss: float, lam: float) -> float:
    return pred_loss + lam * bal_loss


def prediction_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error over all transition tuples."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    return float((d * d).sum() / d.shape[0] / (d.shape[1] if d.ndim > 1 else 1))


def weighted_bce(logits: np.ndarray, labels: np.ndarray,
                 w_plus: float, w_minus: float) -> float:
    """Weighted binary cross-entropy averaged over the batch."""
    logits = np.asarray(logits, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")
    base = np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    w = np.where(labels == 1.0, w_plus, w_minus)
    return float((w * base).mean())


def class_weights(labels: np.ndarray) -> Tuple[float, float]:
    """w+ = N/(2 N+), w- = N/(2 N-): inverse class-frequency weights."""
    labels = np.asarray(labels).ravel()
    n = labels.size
    n_pos = int(labels.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    return n / (2.0 * n_pos), n / (2.0 * n_neg)


def focal_loss(logits: np.ndarray, labels: np.ndarray,
               alpha: float = 0.25, gamma_f: float = 2.0) -> float:
    """-mean alpha (1 - p_t)^gamma log p_t with p_t the true-class probability."""
    if gamma_f < 0:
        raise ValueError("gamma_f must be >= 0")
    logits = np.asarray(logits, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")
    # log p_t computed stably from logits: log p_t = -log(1 + exp(-z_t)),
    # z_t = z for y=1 and -z for y=0
    z_t = np.where(labels == 1.0, logits, -logits)
    log_pt = -np.log1p(np.exp(-np.abs(z_t))) + np.minimum(z_t, 0.0)
    pt = np.exp(log_pt)
    return float(-(alpha * (1.0 - pt) ** gamma_f * log_pt).mean())


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    balancing_mode: str = "smmd"       # none | smmd | grl | cdc
    smmd: SmmdConfig = field(default_factory=SmmdConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    patience: int = 10
    teacher_forcing: bool = True
    grad_clip: Optional[float] = None
    select: str = "best"               # checkpoint: "best" val RMSE | "final" epoch
    seed: int = 0
    encoder: EncoderConfig = None      # filled in by train() when absent
    head_hidden: int = 48
    d_repr: int = 16
    d_channels: int = 16
    kernel_size: int = 2
    dilations: List[int] = field(default_factory=lambda: [1, 2, 4])

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1:
            raise ValueError("require epochs >= 1 and patience >= 1")
        if self.balancing_mode not in ("none", "smmd", "grl", "cdc"):
            raise ValueError(f"unknown balancing mode {self.balancing_mode!r}")
        if self.select not in ("best", "final"):
            raise ValueError(f"unknown checkpoint selection {self.select!r}")

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class TrainReport:
    train_loss: List[float]
    val_rmse: List[float]
    lambda_trace: List[float]
    best_epoch: int
    final_val_rmse: float              # recomputed from the saved checkpoint
    epoch_seconds: List[float]

    def to_jsonable(self) -> dict:
        return asdict(self)


def _stack_dataset(ds: Dataset) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pad records to a common length; returns inputs, treatments, targets, mask.

    inputs: (N, T, d_in); treatments A: (N, T, d_a); targets Y_{t+1}:
    (N, T-1, d_y); valid transition mask: (N, T-1).
    """
    T_max = max(r.T for r in ds.records)
    N = len(ds.records)
    d_in = ds.schema.d_x + ds.schema.d_y + ds.schema.d_v + ds.schema.d_a
    X = np.zeros((N, T_max, d_in))
    A = np.zeros((N, T_max, ds.schema.d_a))
    Yn = np.zeros((N, T_max - 1, ds.schema.d_y))
    mask = np.zeros((N, T_max - 1), dtype=bool)
    for i, r in enumerate(ds.records):
        X[i, : r.T] = record_inputs(r.X, r.Y, r.V, r.A)
        A[i, : r.T] = r.A
        Yn[i, : r.T - 1] = r.Y[1:]
        mask[i, : r.T - 1] = True
    return X, A, Yn, mask


def _forward_batch(model: Model, params: Params, X, A, Yn, mask):
    """One-step-ahead predictions over a batch; returns loss pieces and caches."""
    B, enc_cache = model.encoder.forward(params, X)
    Bt = B[:, :-1]                      # B_t for t = 0..T-2
    At = A[:, :-1]                      # A_t drives the Y_{t+1} target
    n_valid = int(mask.sum())
    pred, head_cache = model.head.forward(
        params, Bt.reshape(-1, Bt.shape[-1]), At.reshape(-1, At.shape[-1]))
    pred = pred.reshape(Yn.shape)
    resid = (pred - Yn) * mask[..., None]
    mse = float((resid * resid).sum() / (n_valid * Yn.shape[-1]))
    return mse, resid, n_valid, B, enc_cache, head_cache


def train(train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
          checkpoint_path: str) -> Tuple[ModelCheckpoint, TrainReport]:
    """Run the joint training loop; writes and returns the best checkpoint."""
    if not train_ds.records:
        raise ValueError("empty training set")
    if train_ds.stats is None:
        raise ValueError("datasets must be normalized with train-fitted stats")

    schema = train_ds.schema
    d_in = schema.d_x + schema.d_y + schema.d_v + schema.d_a
    enc_cfg = cfg.encoder or EncoderConfig(
        d_in=d_in, d_channels=cfg.d_channels, kernel_size=cfg.kernel_size,
        dilations=list(cfg.dilations), d_repr=cfg.d_repr)
    head_cfg = HeadConfig(d_repr=enc_cfg.d_repr, d_a=schema.d_a,
                          d_y=schema.d_y, d_hidden=cfg.head_hidden)
    with_disc = cfg.balancing_mode in ("grl", "cdc")
    model = Model(enc_cfg, head_cfg, with_discriminator=with_disc)

    init_stream = RngStream(cfg.seed, 1_000_000)
    params = model.init_params(init_stream)
    adam = AdamState(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    shuffle_stream = RngStream(cfg.seed, 1_000_001)
    smmd_stream = RngStream(cfg.seed, 1_000_002)

    Xtr, Atr, Ytr, Mtr = _stack_dataset(train_ds)
    Xva, Ava, Yva, Mva = _stack_dataset(val_ds)
    y_keys = [f"y_{n}" for n in schema.y_names]
    y_std = np.array([train_ds.stats.std[k] for k in y_keys])

    # IG baseline: cohort mean of encoder inputs over observed steps
    flat = Xtr.reshape(-1, d_in)
    step_mask = np.concatenate([Mtr, np.ones((Mtr.shape[0], 1), dtype=bool)], axis=1).reshape(-1)
    ig_baseline = flat[step_mask].mean(axis=0)

    n = Xtr.shape[0]
    best_rmse = math.inf
    best_epoch = -1
    report = TrainReport([], [], [], -1, math.nan, [])
    ck = ModelCheckpoint(
        format_version=CHECKPOINT_FORMAT_VERSION, encoder_cfg=enc_cfg,
        head_cfg=head_cfg, with_discriminator=with_disc, schema=schema,
        stats=train_ds.stats, input_names=build_input_names(schema),
        ig_baseline=ig_baseline, params=params, train_digest=cfg.digest(),
    )
    since_best = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lam = lambda_schedule(epoch, cfg.epochs)
        order = shuffle_stream.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            X, A, Yn, M = Xtr[idx], Atr[idx], Ytr[idx], Mtr[idx]
            mse, resid, n_valid, B, enc_cache, head_cache = _forward_batch(
                model, params, X, A, Yn, M)

            dpred = (2.0 / (n_valid * Yn.shape[-1])) * resid
            head_grads, dBt, _ = model.head.backward(
                params, head_cache, dpred.reshape(-1, Yn.shape[-1]))
            dB = np.zeros_like(B)
            dB[:, :-1] = dBt.reshape(B.shape[0], B.shape[1] - 1, B.shape[2])

            bal_loss = 0.0
            disc_grads: Params = {}
            if cfg.balancing_mode != "none":
                # pool valid per-step representations with their treatments
                Bt_flat = B[:, :-1].reshape(-1, B.shape[-1])
                At_flat = A[:, :-1].reshape(-1, A.shape[-1])
                valid = M.reshape(-1)
                Bp, Ap = Bt_flat[valid], At_flat[valid]
                if cfg.balancing_mode == "smmd":
                    bal_loss, dBp = balancing.smmd_loss(
                        Bp, Ap, cfg.smmd, cfg.kernel, smmd_stream)
                elif cfg.balancing_mode == "grl":
                    bal_loss, disc_grads, dBp = balancing.grl_losses(
                        Bp, Ap, model.discriminator, params)
                else:
                    disc_loss, disc_grads, _ = balancing.grl_losses(
                        Bp, Ap, model.discriminator, params)
                    bal_loss, dBp = balancing.cdc_loss(
                        Bp, model.discriminator, params)
                if lam > 0:
                    dBp_scaled = lam * dBp
                    add = np.zeros_like(Bt_flat)
                    add[valid] = dBp_scaled
                    dB[:, :-1] += add.reshape(B.shape[0], B.shape[1] - 1, B.shape[2])

            enc_grads, _ = model.encoder.backward(params, enc_cache, dB)

            grads: Params = {}
            grads.update(enc_grads)
            grads.update(head_grads)
            if disc_grads:
                # discriminator always trains on its own (non-reversed) loss
                grads.update(disc_grads)
            if cfg.grad_clip:
                gn = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if gn > cfg.grad_clip:
                    scale = cfg.grad_clip / gn
                    grads = {k: g * scale for k, g in grads.items()}

            total = joint_loss(mse, bal_loss, lam)
            if not math.isfinite(total):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}")
            params, adam = adam_step(params, grads, adam)
            epoch_loss += total
            n_batches += 1

        val_rmse = _one_step_val_rmse(model, params, Xva, Ava, Yva, Mva, y_std)
        report.train_loss.append(epoch_loss / max(n_batches, 1))
        report.val_rmse.append(val_rmse)
        report.lambda_trace.append(lam)
        report.epoch_seconds.append(time.perf_counter() - t0)

        if val_rmse < best_rmse:
            best_rmse = val_rmse
            best_epoch = epoch - 1
            since_best = 0
            if cfg.select == "best":
                ck.params = {k: v.copy() for k, v in params.items()}
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
        if cfg.select == "final":
            ck.params = {k: v.copy() for k, v in params.items()}

    report.best_epoch = best_epoch
    _atomic_save(ck, checkpoint_path)
    ck = load_checkpoint(checkpoint_path)
    report.final_val_rmse = _one_step_val_rmse(
        ck.model(), ck.params, Xva, Ava, Yva, Mva, y_std)
    return ck, report


def _one_step_val_rmse(model: Model, params: Params, X, A, Yn, M, y_std) -> float:
    """Denormalized one-step-ahead RMSE on a stacked validation set."""
    mse, resid, n_valid, _, _, _ = _forward_batch(model, params, X, A, Yn, M)
    resid_dn = resid * y_std
    return float(np.sqrt((resid_dn * resid_dn).sum() / (n_valid * Yn.shape[-1])))


def checkpoint_val_rmse(ck: ModelCheckpoint, val_ds: Dataset) -> float:
    """One-step-ahead denormalized RMSE of a loaded checkpoint; the code path
    that produced TrainReport.final_val_rmse."""
    X, A, Yn, M = _stack_dataset(val_ds)
    y_std = np.array([ck.stats.std[f"y_{n}"] for n in ck.schema.y_names])
    return _one_step_val_rmse(ck.model(), ck.params, X, A, Yn, M, y_std)


def _atomic_save(ck: ModelCheckpoint, path: str) -> None:
    tmp = path + ".tmp"
    save_checkpoint(ck, tmp)
    os.replace(tmp, path)


def prepare_splits(ds: Dataset, seed: int,
                   ratios=(0.7, 0.15, 0.15)) -> Tuple[Dataset, Dataset, Dataset]:
    """Patient-level split, LOCF/NOCB imputation, train-fitted z-scoring."""
    from .dataio import impute_locf_nocb, split_patients

    stream = RngStream(seed, 2_000_000)
    imputed = Dataset([impute_locf_nocb(r) for r in ds.records], ds.schema,
                      provenance=ds.provenance)
    train_raw, val_raw, test_raw = split_patients(imputed, ratios, stream)
    stats = zscore_fit(train_raw)
    return (zscore_apply(train_raw, stats), zscore_apply(val_raw, stats),
            zscore_apply(test_raw, stats))
