"""Deterministic numeric core: seeded random streams, Adam, gradient checking.

Arrays are plain ``numpy.ndarray`` in float64; float32 is only used at the
checkpoint/serving boundary. Parameter collections are ``dict[str, ndarray]``
throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple

import numpy as np

Params = Dict[str, np.ndarray]


class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Same key gives the same sequence on every platform; distinct stream ids
    are statistically independent, so per-patient simulation can be
    parallelized without reordering effects.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed % 2**64, self.stream_id % 2**64]))

    def substream(self, stream_id: int) -> "RngStream":
        """Derive an independent stream under the same seed."""
        return RngStream(self.seed, stream_id)

    def standard_normal(self, n: int | tuple = 0) -> np.ndarray:
        return self._gen.standard_normal(n)

    def uniform(self, n: int | tuple = 0) -> np.ndarray:
        return self._gen.random(n)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)


def rng_standard_normal(stream: RngStream, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be >= 0")
    return stream.standard_normal(n)


def rng_uniform(stream: RngStream, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be >= 0")
    return stream.uniform(n)


@dataclass
class AdamState:
    """Adam moment accumulators and hyperparameters (decoupled weight decay)."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            weight_decay=self.weight_decay, step=self.step,
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
        )


def adam_step(params: Params, grads: Params, state: AdamState) -> Tuple[Params, AdamState]:
    """One Adam update with bias correction; pure in (params, grads, state).

    Weight decay, when nonzero, is decoupled (applied directly to the
    parameters, not through the moments).
    """
    if state.lr <= 0:
        raise ValueError("learning rate must be > 0")
    for name, g in grads.items():
        if name not in params:
            raise ValueError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(
                f"shape mismatch for {name!r}: param {params[name].shape}, grad {g.shape}"
            )

    out = state.copy()
    out.step = state.step + 1
    t = out.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params: Params = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p.copy()
            continue
        m = out.m.get(name)
        v = out.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ValueError(f"moment shape mismatch for {name!r}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        out.m[name] = m
        out.v[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p_new = p - state.lr * update
        if state.weight_decay > 0:
            p_new = p_new - state.lr * state.weight_decay * p
        new_params[name] = p_new
    return new_params, out


def finite_diff_check(
    loss_and_grad: Callable[[Params], Tuple[float, Params]],
    params: Params,
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad`` must be a pure function returning (scalar loss,
    gradient dict). Central differences give O(eps^2) truncation, which is
    what lets well-implemented gradients land below 1e-4 in float64.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    _, analytic = loss_and_grad(params)
    worst = 0.0
    for name, p in params.items():
        if name not in analytic:
            continue
        a = analytic[name]
        flat = p.reshape(-1)
        for i in range(flat.size):
            perturbed = {k: (v.copy() if k == name else v) for k, v in params.items()}
            pf = perturbed[name].reshape(-1)
            pf[i] = flat[i] + epsilon
            up, _ = loss_and_grad(perturbed)
            pf[i] = flat[i] - epsilon
            down, _ = loss_and_grad(perturbed)
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(
                    f"non-finite loss probing parameter {name!r} at flat index {i}"
                )
            numeric = (up - down) / (2.0 * epsilon)
            ana = a.reshape(-1)[i]
            err = abs(ana - numeric) / (abs(ana) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
