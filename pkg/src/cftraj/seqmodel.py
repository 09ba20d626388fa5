"""Causal sequence encoder, outcome head, treatment discriminator, probe decoder.

Every block is a pair of pure functions: ``forward(params, ...) -> (out,
cache)`` and ``backward(params, cache, dout) -> (grads, dinputs)``. There is
no autodiff graph; the analytic backward passes are certified by
``numkit.finite_diff_check``.

Shapes: sequence inputs are (N, T, C); per-step inputs are (N, C).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple

import numpy as np

from .dataio import DatasetSchema, HistoryWindow, NormStats
from .numkit import Params, RngStream

CHECKPOINT_FORMAT_VERSION = "1"


# ---------------------------------------------------------------------------
# Primitive layers
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    return x @ W + b, x


def dense_backward(dout: np.ndarray, x: np.ndarray, W: np.ndarray):
    dx = dout @ W.T
    axes = tuple(range(dout.ndim - 1))
    dW = np.tensordot(x, dout, axes=(axes, axes))
    db = dout.sum(axis=axes)
    return dx, dW, db


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray):
    return dout * mask


def causal_conv_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray, dilation: int):
    """Causal dilated 1-D convolution: y[t] = sum_i x[t - i*d] W[i] + b.

    x: (N, T, Cin), W: (k, Cin, Cout). Left zero-padding keeps y[t] a
    function of inputs at steps <= t only.
    """
    k = W.shape[0]
    T = x.shape[1]
    pad = (k - 1) * dilation
    xp = np.pad(x, ((0, 0), (pad, 0), (0, 0)))
    y = np.broadcast_to(b, x.shape[:2] + (W.shape[2],)).copy()
    for i in range(k):
        lo = pad - i * dilation
        y += xp[:, lo: lo + T] @ W[i]
    return y, (xp, pad)


def causal_conv_backward(dout: np.ndarray, cache, W: np.ndarray, dilation: int):
    xp, pad = cache
    k = W.shape[0]
    T = dout.shape[1]
    dW = np.empty_like(W)
    dxp = np.zeros_like(xp)
    for i in range(k):
        lo = pad - i * dilation
        sl = xp[:, lo: lo + T]
        dW[i] = np.tensordot(sl, dout, axes=((0, 1), (0, 1)))
        dxp[:, lo: lo + T] += dout @ W[i].T
    db = dout.sum(axis=(0, 1))
    dx = dxp[:, pad:]
    return dx, dW, db


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

@dataclass
class EncoderConfig:
    d_in: int                      # d_x + d_y + d_v + d_a
    d_channels: int = 16
    kernel_size: int = 2
    dilations: List[int] = field(default_factory=lambda: [1, 2, 4])
    d_repr: int = 16               # representation width D

    def __post_init__(self):
        if self.kernel_size < 2 or self.d_repr < 1 or any(d < 1 for d in self.dilations):
            raise ValueError("invalid encoder config")


class Encoder:
    """Temporal convolutional encoder: causal, dilated, residual."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg

    def init_params(self, stream: RngStream) -> Params:
        cfg = self.cfg
        p: Params = {}

        def glorot(shape, fan_in, fan_out):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            return scale * stream.standard_normal(shape)

        p["enc.in.W"] = glorot((cfg.d_in, cfg.d_channels), cfg.d_in, cfg.d_channels)
        p["enc.in.b"] = np.zeros(cfg.d_channels)
        k, c = cfg.kernel_size, cfg.d_channels
        for i, _ in enumerate(cfg.dilations):
            for conv in ("conv1", "conv2"):
                p[f"enc.block{i}.{conv}.W"] = glorot((k, c, c), k * c, c)
                p[f"enc.block{i}.{conv}.b"] = np.zeros(c)
        p["enc.out.W"] = glorot((c, cfg.d_repr), c, cfg.d_repr)
        p["enc.out.b"] = np.zeros(cfg.d_repr)
        return p

    def forward(self, params: Params, x: np.ndarray):
        """x: (N, T, d_in) -> representations (N, T, D) plus cache."""
        if x.shape[-1] != self.cfg.d_in:
            raise ValueError(f"encoder expects width {self.cfg.d_in}, got {x.shape[-1]}")
        cache = {}
        h, cache["in.x"] = dense_forward(x, params["enc.in.W"], params["enc.in.b"])
        for i, dil in enumerate(self.cfg.dilations):
            skip = h
            z1, cache[f"b{i}.c1"] = causal_conv_forward(
                h, params[f"enc.block{i}.conv1.W"], params[f"enc.block{i}.conv1.b"], dil)
            a1, cache[f"b{i}.r1"] = relu_forward(z1)
            z2, cache[f"b{i}.c2"] = causal_conv_forward(
                a1, params[f"enc.block{i}.conv2.W"], params[f"enc.block{i}.conv2.b"], dil)
            a2, cache[f"b{i}.r2"] = relu_forward(z2)
            h = a2 + skip
        out, cache["out.x"] = dense_forward(h, params["enc.out.W"], params["enc.out.b"])
        return out, cache

    def backward(self, params: Params, cache, dout: np.ndarray):
        grads: Params = {}
        dh, grads["enc.out.W"], grads["enc.out.b"] = dense_backward(
            dout, cache["out.x"], params["enc.out.W"])
        for i in reversed(range(len(self.cfg.dilations))):
            dil = self.cfg.dilations[i]
            dskip = dh
            da2 = relu_backward(dh, cache[f"b{i}.r2"])
            da1, gW2, gb2 = causal_conv_backward(
                da2, cache[f"b{i}.c2"], params[f"enc.block{i}.conv2.W"], dil)
            grads[f"enc.block{i}.conv2.W"] = gW2
            grads[f"enc.block{i}.conv2.b"] = gb2
            dz1 = relu_backward(da1, cache[f"b{i}.r1"])
            dh_conv, gW1, gb1 = causal_conv_backward(
                dz1, cache[f"b{i}.c1"], params[f"enc.block{i}.conv1.W"], dil)
            grads[f"enc.block{i}.conv1.W"] = gW1
            grads[f"enc.block{i}.conv1.b"] = gb1
            dh = dh_conv + dskip
        dx, grads["enc.in.W"], grads["enc.in.b"] = dense_backward(
            dh, cache["in.x"], params["enc.in.W"])
        return grads, dx


# ---------------------------------------------------------------------------
# Outcome head and discriminator
# ---------------------------------------------------------------------------

@dataclass
class HeadConfig:
    d_repr: int
    d_a: int
    d_y: int
    d_hidden: int = 48


class OutcomeHead:
    """Affine-rectifier-affine head on (representation, current treatment)."""

    def __init__(self, cfg: HeadConfig):
        self.cfg = cfg

    def init_params(self, stream: RngStream) -> Params:
        cfg = self.cfg
        d_in = cfg.d_repr + cfg.d_a
        s1 = np.sqrt(2.0 / (d_in + cfg.d_hidden))
        s2 = np.sqrt(2.0 / (cfg.d_hidden + cfg.d_y))
        return {
            "head.fc1.W": s1 * stream.standard_normal((d_in, cfg.d_hidden)),
            "head.fc1.b": np.zeros(cfg.d_hidden),
            "head.fc2.W": s2 * stream.standard_normal((cfg.d_hidden, cfg.d_y)),
            "head.fc2.b": np.zeros(cfg.d_y),
        }

    def forward(self, params: Params, B: np.ndarray, a: np.ndarray):
        finite_a = a[np.isfinite(a)]
        if not np.isin(finite_a, (0.0, 1.0)).all():
            raise ValueError("treatment entries must be 0/1")
        if B.shape[-1] != self.cfg.d_repr:
            raise ValueError(f"head expects width {self.cfg.d_repr}, got {B.shape[-1]}")
        z = np.concatenate([B, a], axis=-1)
        h, x1 = dense_forward(z, params["head.fc1.W"], params["head.fc1.b"])
        hr, mask = relu_forward(h)
        y, x2 = dense_forward(hr, params["head.fc2.W"], params["head.fc2.b"])
        return y, (x1, mask, x2)

    def backward(self, params: Params, cache, dout: np.ndarray):
        x1, mask, x2 = cache
        grads: Params = {}
        dhr, grads["head.fc2.W"], grads["head.fc2.b"] = dense_backward(
            dout, x2, params["head.fc2.W"])
        dh = relu_backward(dhr, mask)
        dz, grads["head.fc1.W"], grads["head.fc1.b"] = dense_backward(
            dh, x1, params["head.fc1.W"])
        dB = dz[..., : self.cfg.d_repr]
        da = dz[..., self.cfg.d_repr:]
        return grads, dB, da


class Discriminator:
    """One independent binary logit per treatment channel."""

    def __init__(self, d_repr: int, d_a: int):
        self.d_repr = d_repr
        self.d_a = d_a

    def init_params(self, stream: RngStream) -> Params:
        s = np.sqrt(2.0 / (self.d_repr + self.d_a))
        return {
            "disc.W": s * stream.standard_normal((self.d_repr, self.d_a)),
            "disc.b": np.zeros(self.d_a),
        }

    def forward(self, params: Params, B: np.ndarray):
        return dense_forward(B, params["disc.W"], params["disc.b"])

    def backward(self, params: Params, cache, dout: np.ndarray):
        dB, dW, db = dense_backward(dout, cache, params["disc.W"])
        return {"disc.W": dW, "disc.b": db}, dB


# ---------------------------------------------------------------------------
# Gated recurrent probe decoder
# ---------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    d_repr: int
    d_out: int                 # d_x + d_statics
    d_hidden: int = 25


class ProbeDecoder:
    """Single-layer gated recurrent decoder plus affine projection.

    Reconstructs the original per-step covariates (and time-expanded
    statics) from the representation sequence; trained with the encoder
    frozen by the caller.
    """

    def __init__(self, cfg: ProbeConfig):
        self.cfg = cfg

    def init_params(self, stream: RngStream) -> Params:
        d, h, o = self.cfg.d_repr, self.cfg.d_hidden, self.cfg.d_out
        si = np.sqrt(2.0 / (d + h))
        sh = np.sqrt(2.0 / (2 * h))
        so = np.sqrt(2.0 / (h + o))
        p: Params = {}
        for gate in ("r", "z", "n"):
            p[f"probe.Wi{gate}"] = si * stream.standard_normal((d, h))
            p[f"probe.Wh{gate}"] = sh * stream.standard_normal((h, h))
            p[f"probe.bi{gate}"] = np.zeros(h)
            p[f"probe.bh{gate}"] = np.zeros(h)
        p["probe.out.W"] = so * stream.standard_normal((h, o))
        p["probe.out.b"] = np.zeros(o)
        return p

    def forward(self, params: Params, B: np.ndarray):
        """B: (N, T, D) -> reconstruction (N, T, d_out) plus cache."""
        if B.shape[-1] != self.cfg.d_repr:
            raise ValueError(f"probe expects width {self.cfg.d_repr}, got {B.shape[-1]}")
        N, T, _ = B.shape
        h = np.zeros((N, self.cfg.d_hidden))
        hs = np.empty((N, T, self.cfg.d_hidden))
        steps = []
        for t in range(T):
            x = B[:, t]
            r = _sigmoid(x @ params["probe.Wir"] + params["probe.bir"]
                         + h @ params["probe.Whr"] + params["probe.bhr"])
            z = _sigmoid(x @ params["probe.Wiz"] + params["probe.biz"]
                         + h @ params["probe.Whz"] + params["probe.bhz"])
            hn = h @ params["probe.Whn"] + params["probe.bhn"]
            n = np.tanh(x @ params["probe.Win"] + params["probe.bin"] + r * hn)
            h_new = (1.0 - z) * n + z * h
            steps.append((x, h, r, z, n, hn))
            h = h_new
            hs[:, t] = h
        out, _ = dense_forward(hs, params["probe.out.W"], params["probe.out.b"])
        return out, (steps, hs)

    def backward(self, params: Params, cache, dout: np.ndarray):
        steps, hs = cache
        grads: Params = {k: np.zeros_like(v) for k, v in params.items()
                         if k.startswith("probe.")}
        dhs, grads["probe.out.W"], grads["probe.out.b"] = dense_backward(
            dout, hs, params["probe.out.W"])
        N, T, _ = dhs.shape
        dB = np.zeros((N, T, self.cfg.d_repr))
        dh_next = np.zeros((N, self.cfg.d_hidden))
        for t in reversed(range(T)):
            x, h_prev, r, z, n, hn = steps[t]
            dh = dhs[:, t] + dh_next
            dz = dh * (h_prev - n) * z * (1.0 - z)
            dn = dh * (1.0 - z) * (1.0 - n * n)
            dr = dn * hn * r * (1.0 - r)
            dhn = dn * r

            grads["probe.Win"] += x.T @ dn
            grads["probe.bin"] += dn.sum(0)
            grads["probe.Whn"] += h_prev.T @ dhn
            grads["probe.bhn"] += dhn.sum(0)
            grads["probe.Wir"] += x.T @ dr
            grads["probe.bir"] += dr.sum(0)
            grads["probe.Whr"] += h_prev.T @ dr
            grads["probe.bhr"] += dr.sum(0)
            grads["probe.Wiz"] += x.T @ dz
            grads["probe.biz"] += dz.sum(0)
            grads["probe.Whz"] += h_prev.T @ dz
            grads["probe.bhz"] += dz.sum(0)

            dB[:, t] = (dn @ params["probe.Win"].T + dr @ params["probe.Wir"].T
                        + dz @ params["probe.Wiz"].T)
            dh_next = (dh * z + dhn @ params["probe.Whn"].T
                       + dr @ params["probe.Whr"].T + dz @ params["probe.Whz"].T)
        return grads, dB


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# Model bundle and checkpoint
# ---------------------------------------------------------------------------

def build_input_names(schema: DatasetSchema) -> List[str]:
    return ([f"x_{n}" for n in schema.x_names]
            + [f"y_{n}" for n in schema.y_names]
            + [f"v_{n}" for n in schema.v_names]
            + [f"a_{n}_prev" for n in schema.a_names])


def window_inputs(window: HistoryWindow) -> np.ndarray:
    """(1, t+1, d_in) encoder input for one history window."""
    X, A_prev, Y, V = window.history()
    T = X.shape[0]
    Vrep = np.broadcast_to(V, (T, V.shape[0]))
    return np.concatenate([X, Y, Vrep, A_prev], axis=1)[None]


def record_inputs(X: np.ndarray, Y: np.ndarray, V: np.ndarray, A: np.ndarray) -> np.ndarray:
    """(T, d_in) encoder input for a full record, treatments shifted by one."""
    T = X.shape[0]
    A_prev = np.vstack([np.zeros((1, A.shape[1])), A[:-1]])
    Vrep = np.broadcast_to(V, (T, V.shape[0]))
    return np.concatenate([X, Y, Vrep, A_prev], axis=1)


@dataclass
class Model:
    encoder_cfg: EncoderConfig
    head_cfg: HeadConfig
    with_discriminator: bool = False

    def __post_init__(self):
        self.encoder = Encoder(self.encoder_cfg)
        self.head = OutcomeHead(self.head_cfg)
        self.discriminator = Discriminator(self.head_cfg.d_repr, self.head_cfg.d_a) \
            if self.with_discriminator else None

    def init_params(self, stream: RngStream) -> Params:
        p = {}
        p.update(self.encoder.init_params(stream))
        p.update(self.head.init_params(stream))
        if self.discriminator is not None:
            p.update(self.discriminator.init_params(stream))
        return p

    def param_count(self, params: Params, include_discriminator: bool = True) -> int:
        total = 0
        for k, v in params.items():
            if not include_discriminator and k.startswith("disc."):
                continue
            total += v.size
        return total


def encode(window: HistoryWindow, encoder: Encoder, params: Params) -> np.ndarray:
    """Latent sequence (t+1, D) for one preprocessed window."""
    B, _ = encoder.forward(params, window_inputs(window))
    return B[0]


def predict_outcome(head: OutcomeHead, params: Params, B_t: np.ndarray,
                    a_t: np.ndarray) -> np.ndarray:
    y, _ = head.forward(params, B_t, a_t)
    return y


@dataclass
class ModelCheckpoint:
    format_version: str
    encoder_cfg: EncoderConfig
    head_cfg: HeadConfig
    with_discriminator: bool
    schema: DatasetSchema
    stats: NormStats
    input_names: List[str]
    ig_baseline: np.ndarray        # cohort-mean per input variable (normalized units)
    params: Params
    train_digest: str = ""

    def model(self) -> Model:
        return Model(self.encoder_cfg, self.head_cfg, self.with_discriminator)


def save_checkpoint(ck: ModelCheckpoint, path: str) -> None:
    """Header JSON + named little-endian float32 blocks; bit-exact round trip."""
    names = sorted(ck.params)
    header = {
        "format_version": ck.format_version,
        "encoder_cfg": asdict(ck.encoder_cfg),
        "head_cfg": asdict(ck.head_cfg),
        "with_discriminator": ck.with_discriminator,
        "schema": ck.schema.to_jsonable(),
        "stats": ck.stats.to_jsonable(),
        "input_names": ck.input_names,
        "ig_baseline": ck.ig_baseline.tolist(),
        "train_digest": ck.train_digest,
        "blocks": [{"name": n, "shape": list(ck.params[n].shape), "dtype": "f4"}
                   for n in names],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(b"CFTRAJCK")
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for n in names:
            f.write(np.ascontiguousarray(ck.params[n], dtype="<f4").tobytes())


def load_checkpoint(path: str) -> ModelCheckpoint:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != b"CFTRAJCK":
            raise ValueError(f"{path}: not a model checkpoint")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        params: Params = {}
        for blk in header["blocks"]:
            shape = tuple(blk["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(4 * count)
            params[blk["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return ModelCheckpoint(
        format_version=header["format_version"],
        encoder_cfg=EncoderConfig(**header["encoder_cfg"]),
        head_cfg=HeadConfig(**header["head_cfg"]),
        with_discriminator=header["with_discriminator"],
        schema=DatasetSchema.from_jsonable(header["schema"]),
        stats=NormStats.from_jsonable(header["stats"]),
        input_names=list(header["input_names"]),
        ig_baseline=np.asarray(header["ig_baseline"], dtype=np.float64),
        params=params,
        train_digest=header.get("train_digest", ""),
    )


def checkpoint_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
