"""HTTP JSON API for counterfactual prediction over a loaded checkpoint.

Routes: GET /health, GET /models, GET /schema, POST /predict,
POST /attribute. The loaded model is immutable and shared read-only across
requests; identical requests yield identical bodies (latency aside).
Model choice is fixed per process; /models advertises alternatives.
"""

from __future__ import annotations

import json
import logging
import struct
import time
import uuid
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import inference
from .seqmodel import ModelCheckpoint, checkpoint_digest, load_checkpoint

log = logging.getLogger("cftraj.service")

DEFAULT_CORS_ORIGINS = ["http://localhost:5173", "http://127.0.0.1:5173"]


# ---------------------------------------------------------------------------
# Request / response models
# ---------------------------------------------------------------------------

class HistoryPayload(BaseModel):
    """Inline patient history in raw (denormalized) units."""

    x: List[List[float]] = Field(description="time-varying covariates, T x d_x")
    a: List[List[float]] = Field(description="treatments in {0,1}, T x d_a")
    y: List[List[float]] = Field(description="outcomes, T x d_y")
    v: List[float] = Field(default_factory=list, description="static covariates, d_v")


class PlanSpec(BaseModel):
    label: str
    assignments: List[List[float]] = Field(description="tau x d_a multi-hot in {0,1}")


class PredictRequest(BaseModel):
    history: HistoryPayload
    plans: Optional[List[PlanSpec]] = Field(
        default=None, description="omit for the canonical None/arm/Both set")
    horizon: int = Field(default=6, ge=1)
    top_k: int = Field(default=5, ge=1)
    target_range: Tuple[float, float]
    ig_steps: int = Field(default=64, ge=8)
    target_channel: int = Field(default=0, ge=0)
    include_phi: bool = False


class AttributionPayload(BaseModel):
    input_names: List[str]
    top_k: List[Dict[str, float | str]]
    omega: List[float]
    omega_raw: List[float]
    phi: Optional[List[List[float]]] = None
    baseline_note: str
    m_steps: int


class ExplanationPayload(BaseModel):
    sections: List[str]
    preference: Dict[str, int]


class PredictResponse(BaseModel):
    labels: List[str]
    trajectories: List[List[List[float]]]   # plan x step x d_y, denormalized
    attribution: AttributionPayload
    explanation: ExplanationPayload
    model_digest: str
    latency_ms: float


class AttributeRequest(BaseModel):
    history: HistoryPayload
    plan: PlanSpec
    target_channel: int = Field(default=0, ge=0)
    ig_steps: int = Field(default=64, ge=8)
    include_phi: bool = False


class AttributeResponse(BaseModel):
    attribution: AttributionPayload
    model_digest: str
    latency_ms: float


# ---------------------------------------------------------------------------
# History validation and encoding
# ---------------------------------------------------------------------------

def _as_matrix(rows: List[List[float]], width: int, field_name: str) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise HTTPException(400, detail=f"history.{field_name}: expected rows of width {width}")
    if not np.isfinite(arr).all():
        raise HTTPException(400, detail=f"history.{field_name}: non-finite value")
    return arr


def history_to_inputs(ck: ModelCheckpoint, history: HistoryPayload) -> np.ndarray:
    """Validate an inline history against the checkpoint schema and encode it
    as a normalized (1, T, d_in) model input."""
    schema = ck.schema
    if not history.y:
        raise HTTPException(400, detail="history.y: at least one observed step required")
    X = _as_matrix(history.x, schema.d_x, "x")
    Y = _as_matrix(history.y, schema.d_y, "y")
    A = _as_matrix(history.a, schema.d_a, "a")
    if not (X.shape[0] == Y.shape[0] == A.shape[0]):
        raise HTTPException(400, detail="history: x, a, y must have equal length")
    bad = np.argwhere(~np.isin(A, (0.0, 1.0)))
    if bad.size:
        t, j = bad[0]
        raise HTTPException(400, detail=f"history.a[{t}][{j}]: treatment must be 0 or 1")
    V = np.asarray(history.v, dtype=np.float64)
    if V.shape != (schema.d_v,):
        raise HTTPException(400, detail=f"history.v: expected {schema.d_v} static covariates")

    onehot = {n for group in schema.onehot_groups for n in group}
    Xn, Yn, Vn = X.copy(), Y.copy(), V.copy()
    for j, name in enumerate(schema.x_names):
        key = f"x_{name}"
        if key in ck.stats.mean:
            Xn[:, j] = (Xn[:, j] - ck.stats.mean[key]) / ck.stats.std[key]
    for j, name in enumerate(schema.y_names):
        key = f"y_{name}"
        if key in ck.stats.mean:
            Yn[:, j] = (Yn[:, j] - ck.stats.mean[key]) / ck.stats.std[key]
    for j, name in enumerate(schema.v_names):
        key = f"v_{name}"
        if name not in onehot and key in ck.stats.mean:
            Vn[j] = (Vn[j] - ck.stats.mean[key]) / ck.stats.std[key]

    from .seqmodel import record_inputs
    return record_inputs(Xn, Yn, Vn, A)[None]


def _build_plans(req_plans: Optional[List[PlanSpec]], horizon: int,
                 ck: ModelCheckpoint) -> List[inference.TreatmentPlan]:
    if req_plans is None:
        return inference.default_plans(horizon, ck.schema.a_names)
    if not req_plans:
        raise HTTPException(422, detail="plans: need at least one plan")
    plans = []
    for spec in req_plans:
        arr = np.asarray(spec.assignments, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != ck.schema.d_a:
            raise HTTPException(
                400, detail=f"plans[{spec.label!r}].assignments: expected rows of width {ck.schema.d_a}")
        bad = np.argwhere(~np.isin(arr, (0.0, 1.0)))
        if bad.size:
            k, j = bad[0]
            raise HTTPException(
                400, detail=f"plans[{spec.label!r}].assignments[{k}][{j}]: must be 0 or 1")
        if arr.shape[0] != horizon:
            raise HTTPException(
                422, detail=f"plans[{spec.label!r}]: length {arr.shape[0]} does not match horizon {horizon}")
        plans.append(inference.TreatmentPlan(spec.label, arr))
    return plans


def _attribution_payload(report: inference.AttributionReport, top_k: int,
                         include_phi: bool) -> AttributionPayload:
    order = np.argsort(-report.omega)[:top_k]
    top = [{"name": report.input_names[i],
            "omega": float(report.omega[i]),
            "omega_raw": float(report.omega_raw[i])} for i in order]
    return AttributionPayload(
        input_names=list(report.input_names),
        top_k=top,
        omega=[float(v) for v in report.omega],
        omega_raw=[float(v) for v in report.omega_raw],
        phi=report.phi.tolist() if include_phi else None,
        baseline_note=report.baseline_note,
        m_steps=report.m_steps,
    )


# ---------------------------------------------------------------------------
# Checkpoint directory listing
# ---------------------------------------------------------------------------

def read_checkpoint_header(path: Path) -> dict:
    """Parse just the header JSON of a checkpoint file."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != b"CFTRAJCK":
            raise ValueError("bad magic")
        (n,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(n).decode("utf-8"))


def list_models(model_dir: Path) -> List[dict]:
    entries = []
    for p in sorted(model_dir.iterdir()):
        if not p.is_file():
            continue
        entry: dict = {"file": p.name}
        try:
            header = read_checkpoint_header(p)
            entry["format_version"] = header["format_version"]
            entry["encoder_cfg"] = header["encoder_cfg"]
            entry["head_cfg"] = header["head_cfg"]
            entry["train_digest"] = header.get("train_digest", "")
        except Exception as exc:           # noqa: BLE001 - listed, not fatal
            entry["error"] = f"unreadable checkpoint: {exc}"
        entries.append(entry)
    return entries


# ---------------------------------------------------------------------------
# App factory
# ---------------------------------------------------------------------------

def create_app(checkpoint_path: Optional[str] = None,
               model_dir: Optional[str] = None,
               cors_origins: Optional[List[str]] = None) -> FastAPI:
    app = FastAPI(title="cftraj", version="0.1.0")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=cors_origins if cors_origins is not None else DEFAULT_CORS_ORIGINS,
        allow_methods=["*"], allow_headers=["*"],
    )

    ck: Optional[ModelCheckpoint] = None
    digest = ""
    if checkpoint_path is not None:
        ck = load_checkpoint(checkpoint_path)
        digest = checkpoint_digest(checkpoint_path)
    app.state.ck = ck
    app.state.digest = digest
    app.state.model_dir = Path(model_dir) if model_dir else None

    @app.exception_handler(Exception)
    async def internal_error(request: Request, exc: Exception):
        error_id = uuid.uuid4().hex[:12]
        log.exception("internal error %s on %s", error_id, request.url.path)
        return JSONResponse(status_code=500,
                            content={"detail": "internal error", "error_id": error_id})

    def require_model() -> Tuple[ModelCheckpoint, str]:
        if app.state.ck is None:
            raise HTTPException(503, detail="no model loaded")
        return app.state.ck, app.state.digest

    @app.get("/health")
    def health():
        if app.state.ck is None:
            raise HTTPException(503, detail="no model loaded")
        return {"status": "ok", "model_digest": app.state.digest,
                "format_version": app.state.ck.format_version}

    @app.get("/models")
    def models():
        if app.state.model_dir is None or not app.state.model_dir.is_dir():
            return {"models": []}
        return {"models": list_models(app.state.model_dir)}

    @app.get("/schema")
    def schema():
        return {
            "predict_request": PredictRequest.model_json_schema(),
            "predict_response": PredictResponse.model_json_schema(),
            "attribute_request": AttributeRequest.model_json_schema(),
            "attribute_response": AttributeResponse.model_json_schema(),
        }

    @app.post("/predict", response_model=PredictResponse)
    def predict(req: PredictRequest):
        model, model_digest = require_model()
        lo, hi = req.target_range
        if not lo < hi:
            raise HTTPException(422, detail="target_range: lo must be < hi")
        if req.target_channel >= model.schema.d_y:
            raise HTTPException(422, detail=f"target_channel: model has {model.schema.d_y} outcome channel(s)")
        t0 = time.perf_counter()
        inputs = history_to_inputs(model, req.history)
        plans = _build_plans(req.plans, req.horizon, model)
        result = inference.counterfactual_compare_inputs(inputs, plans, model)
        report = inference.integrated_gradients_inputs(
            inputs, plans[0], model, target_channel=req.target_channel, m=req.ig_steps)
        y_name = model.schema.y_names[req.target_channel]
        hist_y = np.asarray(req.history.y)[:, req.target_channel]
        explanation = inference.template_explanation(
            hist_y, result, plans, report, req.target_range,
            outcome_name=y_name, outcome_unit=model.schema.units.get(f"y_{y_name}", ""),
            top_k=req.top_k)
        latency_ms = 1000.0 * (time.perf_counter() - t0)
        return PredictResponse(
            labels=result.labels,
            trajectories=result.trajectories.tolist(),
            attribution=_attribution_payload(report, req.top_k, req.include_phi),
            explanation=ExplanationPayload(sections=explanation.sections,
                                           preference=explanation.preference),
            model_digest=model_digest,
            latency_ms=latency_ms,
        )

    @app.post("/attribute", response_model=AttributeResponse)
    def attribute(req: AttributeRequest):
        model, model_digest = require_model()
        if req.target_channel >= model.schema.d_y:
            raise HTTPException(422, detail=f"target_channel: model has {model.schema.d_y} outcome channel(s)")
        t0 = time.perf_counter()
        inputs = history_to_inputs(model, req.history)
        plans = _build_plans([req.plan], len(req.plan.assignments), model)
        report = inference.integrated_gradients_inputs(
            inputs, plans[0], model, target_channel=req.target_channel, m=req.ig_steps)
        latency_ms = 1000.0 * (time.perf_counter() - t0)
        return AttributeResponse(
            attribution=_attribution_payload(report, top_k=len(report.input_names),
                                             include_phi=req.include_phi),
            model_digest=model_digest,
            latency_ms=latency_ms,
        )

    return app
