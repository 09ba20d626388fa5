"""Distribution-alignment objectives over latent representations.

The sampling-based MMD loss draws fixed-size subsets from each treatment
group, accumulates the unbiased MMD^2 U-statistic over all group pairs with
enough members, and averages by C(d_a_groups, 2). Pairs with insufficient
members contribute nothing. Gradients are analytic; the median-heuristic
bandwidth is treated as a constant of the current step (no gradient flows
through sigma).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .numkit import Params, RngStream
from .seqmodel import Discriminator, _sigmoid

SIGMA_FLOOR = 1e-6


@dataclass
class KernelConfig:
    mode: str = "median"           # "median" | "fixed"
    sigma: float = 1.0             # used when mode == "fixed"
    squared_median: bool = False   # sigma^2 = median(||.||^2)/2 variant

    def __post_init__(self):
        if self.mode not in ("median", "fixed"):
            raise ValueError(f"unknown bandwidth mode {self.mode!r}")
        if self.mode == "fixed" and self.sigma <= 0:
            raise ValueError("fixed sigma must be > 0")


@dataclass
class SmmdConfig:
    n_subset: int = 200
    grouping: str = "joint"        # "joint" tuple | "channel"

    def __post_init__(self):
        if self.n_subset < 2:
            raise ValueError("subset size must be >= 2")
        if self.grouping not in ("joint", "channel"):
            raise ValueError(f"unknown grouping {self.grouping!r}")


def rbf_kernel(x: np.ndarray, y: np.ndarray, sigma: float) -> float:
    """k(x, y) = exp(-||x - y||^2 / (2 sigma^2))."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.exp(-np.dot(d.ravel(), d.ravel()) / (2.0 * sigma * sigma)))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(1)[:, None]
    bb = (b * b).sum(1)[None, :]
    d2 = aa + bb - 2.0 * a @ b.T
    np.maximum(d2, 0.0, out=d2)
    return d2


def median_bandwidth(pooled: np.ndarray, squared: bool = False) -> float:
    """sigma from the median pairwise distance of the pooled sample.

    Default follows the literal rule sigma = sqrt(median ||x - y||); the
    squared variant uses sigma^2 = median(||x - y||^2) / 2.
    """
    pooled = np.atleast_2d(np.asarray(pooled, dtype=np.float64))
    n = pooled.shape[0]
    if n < 2:
        raise ValueError("median bandwidth needs at least 2 points")
    d2 = _sq_dists(pooled, pooled)
    iu = np.triu_indices(n, k=1)
    if squared:
        sigma = np.sqrt(np.median(d2[iu]) / 2.0)
    else:
        sigma = np.sqrt(np.median(np.sqrt(d2[iu])))
    return max(float(sigma), SIGMA_FLOOR)


def resolve_bandwidth(pooled: np.ndarray, cfg: KernelConfig) -> float:
    if cfg.mode == "fixed":
        return cfg.sigma
    return median_bandwidth(pooled, squared=cfg.squared_median)


def mmd2_u(S_i: np.ndarray, S_j: np.ndarray, sigma: float) -> float:
    """Unbiased MMD^2 U-statistic; may be negative."""
    val, _, _ = mmd2_u_with_grad(S_i, S_j, sigma)
    return val


def mmd2_u_with_grad(S_i: np.ndarray, S_j: np.ndarray, sigma: float
                     ) -> Tuple[float, np.ndarray, np.ndarray]:
    """MMD^2_u plus gradients w.r.t. both subsets (sigma held constant)."""
    S_i = np.atleast_2d(np.asarray(S_i, dtype=np.float64))
    S_j = np.atleast_2d(np.asarray(S_j, dtype=np.float64))
    n = S_i.shape[0]
    if S_j.shape[0] != n:
        raise ValueError(f"subset sizes differ: {n} vs {S_j.shape[0]}")
    if n < 2:
        raise ValueError("subsets must have size >= 2")
    inv = 1.0 / (2.0 * sigma * sigma)
    Kii = np.exp(-_sq_dists(S_i, S_i) * inv)
    Kjj = np.exp(-_sq_dists(S_j, S_j) * inv)
    Kij = np.exp(-_sq_dists(S_i, S_j) * inv)
    off = 1.0 / (n * (n - 1))
    val = (off * (Kii.sum() - np.trace(Kii))
           + off * (Kjj.sum() - np.trace(Kjj))
           - (2.0 / (n * n)) * Kij.sum())

    # d k(x,y)/dx = -(x - y)/sigma^2 * k(x,y); diagonal terms have zero
    # gradient (x - x = 0) so no masking is needed for the within sums.
    s2 = 1.0 / (sigma * sigma)

    def pair_grad(K, A, B_):
        # sum_pq K_pq * -(a_p - b_q)/sigma^2, gradient w.r.t. a_p
        return -s2 * (K.sum(1)[:, None] * A - K @ B_)

    dSi = 2.0 * off * pair_grad(Kii, S_i, S_i) - (2.0 / (n * n)) * pair_grad(Kij, S_i, S_j)
    dSj = 2.0 * off * pair_grad(Kjj, S_j, S_j) - (2.0 / (n * n)) * pair_grad(Kij.T, S_j, S_i)
    return float(val), dSi, dSj


def group_indices(A: np.ndarray, grouping: str) -> Dict[object, np.ndarray]:
    """Partition row indices by treatment label.

    joint: one group per observed joint tuple; channel: per-channel binary
    groups keyed by (channel, value).
    """
    A = np.atleast_2d(np.asarray(A))
    if grouping == "joint":
        out: Dict[object, list] = {}
        for idx, row in enumerate(A):
            key = tuple(int(v) for v in row)
            out.setdefault(key, []).append(idx)
        return {k: np.asarray(v) for k, v in out.items()}
    out = {}
    for c in range(A.shape[1]):
        for val in (0, 1):
            idx = np.nonzero(A[:, c] == val)[0]
            out[(c, val)] = idx
    return out


def smmd_loss(B: np.ndarray, A: np.ndarray, cfg: SmmdConfig,
              kernel: KernelConfig, stream: RngStream,
              with_grad: bool = True) -> Tuple[float, Optional[np.ndarray]]:
    """Sampling-based MMD loss over treatment groups, with gradient w.r.t. B.

    Subsets are drawn without replacement, fresh each call, from the given
    stream. Returns 0 (and zero gradient) when no group pair qualifies.
    """
    B = np.asarray(B, dtype=np.float64)
    dB = np.zeros_like(B) if with_grad else None
    if cfg.grouping == "joint":
        groups = group_indices(A, "joint")
        keys = sorted(groups)
        pairs = [(keys[i], keys[j]) for i in range(len(keys)) for j in range(i + 1, len(keys))]
        # all-pairs normalizer over the treatment-group count
        n_groups = max(len(keys), 2)
        norm = n_groups * (n_groups - 1) / 2
        total = _accumulate_pairs(B, groups, pairs, cfg, kernel, stream, dB)
        return total / norm, (dB / norm if with_grad else None)
    # per-channel: average the two-group MMD over channels
    A = np.atleast_2d(np.asarray(A))
    total = 0.0
    for c in range(A.shape[1]):
        groups = group_indices(A[:, [c]], "joint")
        keys = sorted(groups)
        pairs = [(keys[i], keys[j]) for i in range(len(keys)) for j in range(i + 1, len(keys))]
        total += _accumulate_pairs(B, groups, pairs, cfg, kernel, stream, dB)
    n_ch = A.shape[1]
    if with_grad:
        dB /= n_ch
    return total / n_ch, dB


def _accumulate_pairs(B, groups, pairs, cfg: SmmdConfig, kernel: KernelConfig,
                      stream: RngStream, dB: Optional[np.ndarray]) -> float:
    total = 0.0
    for gi, gj in pairs:
        idx_i, idx_j = groups[gi], groups[gj]
        if len(idx_i) < cfg.n_subset or len(idx_j) < cfg.n_subset:
            continue  # skip if insufficient
        sel_i = idx_i[stream.choice_without_replacement(len(idx_i), cfg.n_subset)]
        sel_j = idx_j[stream.choice_without_replacement(len(idx_j), cfg.n_subset)]
        Si, Sj = B[sel_i], B[sel_j]
        sigma = resolve_bandwidth(np.vstack([Si, Sj]), kernel)
        val, dSi, dSj = mmd2_u_with_grad(Si, Sj, sigma)
        total += val
        if dB is not None:
            np.add.at(dB, sel_i, dSi)
            np.add.at(dB, sel_j, dSj)
    return total


# ---------------------------------------------------------------------------
# Adversarial baselines
# ---------------------------------------------------------------------------

def bce_logits(logits: np.ndarray, labels: np.ndarray
               ) -> Tuple[float, np.ndarray]:
    """Mean-per-row, summed-per-channel binary cross-entropy and d/dlogits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = logits.shape[0]
    # stable log(1 + exp(-|z|)) formulation
    loss = np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    p = _sigmoid(logits)
    return float(loss.sum() / n), (p - labels) / n


def grl_losses(B: np.ndarray, A: np.ndarray, disc: Discriminator,
               disc_params: Params) -> Tuple[float, Params, np.ndarray]:
    """Gradient-reversal adversarial loss.

    Returns (discriminator BCE, gradients for the discriminator head, and
    the REVERSED gradient w.r.t. B to be fed into the encoder).
    """
    logits, cache = disc.forward(disc_params, B)
    loss, dlogits = bce_logits(logits, A)
    grads, dB = disc.backward(disc_params, cache, dlogits)
    return loss, grads, -dB


def cdc_loss(B: np.ndarray, disc: Discriminator, disc_params: Params
             ) -> Tuple[float, np.ndarray]:
    """Domain-confusion loss: cross-entropy of softmaxed channel logits
    against the uniform distribution, applied to the encoder only.

    Minimum is ln(d_a), attained when the logits are uniform.
    """
    logits, cache = disc.forward(disc_params, B)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    d_a = logits.shape[1]
    n = logits.shape[0]
    loss = -(logp.mean(axis=1)).sum() / n
    p = np.exp(logp)
    dlogits = (p - 1.0 / d_a) / n
    _, dB = disc.backward(disc_params, cache, dlogits)
    return float(loss), dB
