"""Confounded tumor-growth cohort simulator with a counterfactual oracle.

Volume dynamics:

    Y_{t+1} = (1 + rho*log(K/Y_t) - beta_c*C_t - (alpha_r*d_t + beta_r*d_t^2) + eps_t) * Y_t

with eps_t ~ N(0, noise_std^2). Chemotherapy acts through an exponentially
decaying concentration C_t; radiotherapy acts through the instantaneous dose
d_t. Treatment assignment is biased by recent tumor diameter, with strength
controlled by gamma (gamma = 0 is a randomized trial).

Each simulated patient keeps its sampled parameters and noise realization, so
any treatment plan can be re-rolled with the same noise: the factual plan
reproduces the factual trajectory exactly, and per-patient counterfactual
errors are well-defined.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import List, Sequence, Tuple

import numpy as np

from .numkit import RngStream
from .dataio import Dataset, DatasetSchema, TrajectoryRecord

# stream_id layout per patient: 4*i params, 4*i+1 noise, 4*i+2 assignment
_STREAMS_PER_PATIENT = 4


@dataclass
class MixtureComponent:
    mean: float
    std: float
    lo: float
    hi: float


@dataclass
class MixturePrior:
    """Three-component truncated-normal prior for one patient parameter."""

    components: List[MixtureComponent]

    def __post_init__(self):
        if len(self.components) != 3:
            raise ValueError("mixture prior needs exactly three components")
        for c in self.components:
            if c.std <= 0:
                raise ValueError("component std must be > 0")
            if not (c.lo < c.hi):
                raise ValueError(f"degenerate truncation interval [{c.lo}, {c.hi}]")


def _three_around(mean: float, spread: float = 0.15, rel_std: float = 0.10) -> MixturePrior:
    comps = []
    for f in (1.0 - spread, 1.0, 1.0 + spread):
        m = mean * f
        s = rel_std * m
        comps.append(MixtureComponent(mean=m, std=s, lo=max(m - 3 * s, 1e-12), hi=m + 3 * s))
    return MixturePrior(comps)


@dataclass
class PatientParams:
    rho: float            # growth rate, 1/day
    K: float              # carrying capacity, cm^3
    beta_c: float         # chemo sensitivity, 1/concentration
    alpha_r: float        # radio linear coefficient, 1/Gy
    beta_r: float         # radio quadratic coefficient, 1/Gy^2
    mixture_component: int

    def __post_init__(self):
        if min(self.beta_c, self.alpha_r, self.beta_r) <= 0 or self.K <= 0:
            raise ValueError("sensitivities and K must be > 0")
        if self.mixture_component not in (0, 1, 2):
            raise ValueError("mixture_component must be in {0,1,2}")


def _default_priors() -> dict:
    # Default priors only; mixture hyper-values are a declared configuration,
    # not ground truth. Scales follow the classic PKPD tumor lineage:
    # slow growth, chemo sensitivity ~0.028 per concentration unit, radio
    # alpha/beta ratio 10.
    return {
        "rho": _three_around(7.0e-2, spread=0.25, rel_std=0.10),
        "beta_c": _three_around(0.028, spread=0.25, rel_std=0.10),
        "alpha_r": _three_around(0.0398, spread=0.25, rel_std=0.10),
        "beta_r": _three_around(0.00398, spread=0.25, rel_std=0.10),
    }


@dataclass
class SimCohortConfig:
    n_patients: int = 1000
    horizon: int = 30                 # days
    gamma: float = 0.0                # confounding strength
    d_max: float = 13.0               # maximum tumor diameter, cm
    noise_std: float = 0.01
    chemo_half_life: float = 1.0      # days
    chemo_dose: float = 5.0           # concentration units on a treated day
    radio_dose: float = 2.0           # Gy on a treated day
    lookback: int = 15                # diameter-averaging window W, days
    init_diameter_lo: float = 0.5     # initial tumor diameter range, cm
    init_diameter_hi: float = 13.0
    volume_floor: float = 1e-3        # cm^3, keeps log(K/Y) finite
    seed: int = 0
    priors: dict = field(default_factory=_default_priors)

    def __post_init__(self):
        if self.gamma < 0 or self.d_max <= 0 or self.noise_std < 0:
            raise ValueError("require gamma >= 0, d_max > 0, noise_std >= 0")
        if self.lookback < 1 or self.horizon < 2:
            raise ValueError("require lookback >= 1 and horizon >= 2")

    @property
    def carrying_capacity(self) -> float:
        """K derived from d_max via the sphere model."""
        return volume_from_diameter(self.d_max)


@dataclass
class ChemoState:
    concentration: float = 0.0

    def __post_init__(self):
        if self.concentration < 0:
            raise ValueError("concentration must be >= 0")


def volume_to_diameter(v: float) -> float:
    """Diameter of a sphere of volume v (cm^3 -> cm)."""
    if v < 0:
        raise ValueError("volume must be >= 0")
    return (6.0 * v / math.pi) ** (1.0 / 3.0)


def volume_from_diameter(d: float) -> float:
    return math.pi * d ** 3 / 6.0


def _truncnorm_draw(comp: MixtureComponent, stream: RngStream) -> float:
    # rejection sampling; bounds are a few sigma wide so this terminates fast
    for _ in range(10000):
        x = comp.mean + comp.std * float(stream.standard_normal(1)[0])
        if comp.lo <= x <= comp.hi:
            return x
    raise RuntimeError("truncated normal rejection sampling did not terminate")


def sample_patient_params(cfg: SimCohortConfig, stream: RngStream) -> PatientParams:
    """Draw one patient's response parameters from the mixture priors."""
    component = int(stream.integers(0, 3))
    draws = {}
    for name in ("rho", "beta_c", "alpha_r", "beta_r"):
        prior: MixturePrior = cfg.priors[name]
        draws[name] = _truncnorm_draw(prior.components[component], stream)
    return PatientParams(
        rho=draws["rho"],
        K=cfg.carrying_capacity,
        beta_c=draws["beta_c"],
        alpha_r=draws["alpha_r"],
        beta_r=draws["beta_r"],
        mixture_component=component,
    )


def step_tumor(
    y_t: float,
    c_t: float,
    d_t: float,
    p: PatientParams,
    eps: float,
    volume_floor: float = 1e-3,
) -> float:
    """One day of tumor dynamics; result clamped at the volume floor."""
    if y_t <= 0:
        raise ValueError("tumor volume must be > 0")
    growth = p.rho * math.log(p.K / y_t)
    chemo = p.beta_c * c_t
    radio = p.alpha_r * d_t + p.beta_r * d_t * d_t
    y_next = (1.0 + growth - chemo - radio + eps) * y_t
    return max(y_next, volume_floor)


def decay_and_dose_chemo(state: ChemoState, took_chemo: bool, cfg: SimCohortConfig) -> ChemoState:
    """Geometric decay by half-life plus additive dose on treated days."""
    c = state.concentration * 2.0 ** (-1.0 / cfg.chemo_half_life)
    if took_chemo:
        c += cfg.chemo_dose
    return ChemoState(c)


def assignment_probability(diam_history: Sequence[float], gamma: float, d_max: float, lookback: int = 15) -> float:
    """Bernoulli parameter for both treatments given recent diameters."""
    if len(diam_history) == 0:
        raise ValueError("diameter history must be non-empty")
    w = min(lookback, len(diam_history))
    d_bar = float(np.mean(diam_history[-w:]))
    z = (gamma / d_max) * (d_bar - d_max / 2.0)
    return 1.0 / (1.0 + math.exp(-z))


def assign_treatment(
    diam_history: Sequence[float],
    gamma: float,
    d_max: float,
    stream: RngStream,
    lookback: int = 15,
) -> Tuple[bool, bool]:
    """Two independent Bernoulli draws with the same diameter-biased probability."""
    p = assignment_probability(diam_history, gamma, d_max, lookback)
    u = stream.uniform(2)
    return bool(u[0] < p), bool(u[1] < p)


@dataclass
class SimRecord:
    """One simulated patient: observable record plus oracle state."""

    patient_id: str
    params: PatientParams
    y0: float                      # initial volume, cm^3
    volumes: np.ndarray            # (T,) factual volumes
    concentrations: np.ndarray     # (T,) chemo concentration C_t
    chemo: np.ndarray              # (T,) 0/1
    radio: np.ndarray              # (T,) 0/1
    noise: np.ndarray              # (T-1,) eps_t driving Y_1..Y_{T-1}


@dataclass
class SimCohort:
    cfg: SimCohortConfig
    records: List[SimRecord]


def _roll_patient(cfg: SimCohortConfig, params: PatientParams, y0: float,
                  noise: np.ndarray, assign_stream: RngStream) -> SimRecord:
    T = cfg.horizon
    volumes = np.empty(T)
    concs = np.empty(T)
    chemo = np.zeros(T, dtype=np.int64)
    radio = np.zeros(T, dtype=np.int64)
    volumes[0] = y0
    chemo_state = ChemoState(0.0)
    diams = [volume_to_diameter(y0)]
    for t in range(T):
        a_c, a_r = assign_treatment(diams[: max(t, 1)], cfg.gamma, cfg.d_max, assign_stream, cfg.lookback)
        chemo[t] = int(a_c)
        radio[t] = int(a_r)
        chemo_state = decay_and_dose_chemo(chemo_state, a_c, cfg)
        concs[t] = chemo_state.concentration
        if t < T - 1:
            d_t = cfg.radio_dose if a_r else 0.0
            volumes[t + 1] = step_tumor(volumes[t], concs[t], d_t, params,
                                        float(noise[t]), cfg.volume_floor)
            diams.append(volume_to_diameter(volumes[t + 1]))
    return SimRecord(
        patient_id="", params=params, y0=y0, volumes=volumes,
        concentrations=concs, chemo=chemo, radio=radio, noise=noise,
    )


def simulate_patient(cfg: SimCohortConfig, index: int) -> SimRecord:
    base = index * _STREAMS_PER_PATIENT
    param_stream = RngStream(cfg.seed, base)
    noise_stream = RngStream(cfg.seed, base + 1)
    assign_stream = RngStream(cfg.seed, base + 2)
    params = sample_patient_params(cfg, param_stream)
    u = float(param_stream.uniform(1)[0])
    d0 = cfg.init_diameter_lo + u * (cfg.init_diameter_hi - cfg.init_diameter_lo)
    y0 = volume_from_diameter(d0)
    noise = cfg.noise_std * noise_stream.standard_normal(cfg.horizon - 1)
    rec = _roll_patient(cfg, params, y0, noise, assign_stream)
    rec.patient_id = f"p{index:06d}"
    return rec


def simulate_cohort(cfg: SimCohortConfig) -> SimCohort:
    """Pure function of cfg: the full factual cohort, order-deterministic."""
    return SimCohort(cfg, [simulate_patient(cfg, i) for i in range(cfg.n_patients)])


def counterfactual_oracle(
    rec: SimRecord,
    plan_chemo: Sequence[int],
    plan_radio: Sequence[int],
    cfg: SimCohortConfig,
    origin: int = 0,
    zero_noise: bool = False,
) -> np.ndarray:
    """Re-roll the dynamics under a given plan reusing the stored noise.

    Returns volumes at steps origin+1 .. origin+len(plan). With the factual
    plan from origin 0 this reproduces the stored trajectory exactly.
    """
    if rec.noise is None:
        raise ValueError("record carries no stored noise realization")
    tau = len(plan_chemo)
    if len(plan_radio) != tau:
        raise ValueError("plan arms must have equal length")
    if origin + tau > cfg.horizon - 1:
        raise ValueError("plan extends past the simulated horizon")
    y = rec.volumes[origin]
    # chemo concentration state entering the plan window
    c = rec.concentrations[origin - 1] if origin > 0 else 0.0
    out = np.empty(tau)
    for k in range(tau):
        t = origin + k
        state = decay_and_dose_chemo(ChemoState(c), bool(plan_chemo[k]), cfg)
        c = state.concentration
        d_t = cfg.radio_dose if plan_radio[k] else 0.0
        eps = 0.0 if zero_noise else float(rec.noise[t])
        y = step_tumor(y, c, d_t, rec.params, eps, cfg.volume_floor)
        out[k] = y
    return out


# ---------------------------------------------------------------------------
# Export to the canonical dataset schema
# ---------------------------------------------------------------------------

def cohort_schema() -> DatasetSchema:
    return DatasetSchema(
        x_names=["volume", "chemo_conc"],
        a_names=["chemo", "radio"],
        y_names=["volume"],
        v_names=["comp0", "comp1", "comp2"],
        onehot_groups=[["comp0", "comp1", "comp2"]],
        units={"volume": "cm^3", "chemo_conc": "conc", "chemo": "flag", "radio": "flag"},
    )


def cohort_to_dataset(cohort: SimCohort) -> Dataset:
    schema = cohort_schema()
    records = []
    for rec in cohort.records:
        T = cohort.cfg.horizon
        X = np.stack([rec.volumes, rec.concentrations], axis=1)
        A = np.stack([rec.chemo, rec.radio], axis=1).astype(np.float64)
        Y = rec.volumes.reshape(T, 1)
        V = np.zeros(3)
        V[rec.params.mixture_component] = 1.0
        records.append(TrajectoryRecord(
            patient_id=rec.patient_id, V=V, X=X, A=A, Y=Y,
            mask=np.ones_like(X, dtype=bool),
        ))
    ds = Dataset(records=records, schema=schema)
    ds.provenance = {"generator": "tumorsim", "config": config_to_jsonable(cohort.cfg)}
    return ds


def config_to_jsonable(cfg: SimCohortConfig) -> dict:
    d = asdict(cfg)
    d["priors"] = {
        name: [asdict(c) for c in prior.components]
        for name, prior in cfg.priors.items()
    }
    return d


def config_from_jsonable(d: dict) -> SimCohortConfig:
    d = dict(d)
    priors = d.pop("priors", None)
    cfg = SimCohortConfig(**{k: v for k, v in d.items() if k in SimCohortConfig.__dataclass_fields__})
    if priors is not None:
        cfg.priors = {
            name: MixturePrior([MixtureComponent(**c) for c in comps])
            for name, comps in priors.items()
        }
    return cfg


def save_oracle_sidecar(cohort: SimCohort, path: str) -> None:
    """Persist params and noise so the oracle survives a save/load round trip."""
    payload = {
        "config": config_to_jsonable(cohort.cfg),
        "patients": [
            {
                "patient_id": r.patient_id,
                "params": asdict(r.params),
                "y0": r.y0,
                "noise": r.noise.tolist(),
            }
            for r in cohort.records
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)


def load_oracle_sidecar(path: str) -> SimCohort:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    cfg = config_from_jsonable(payload["config"])
    records = []
    for i, p in enumerate(payload["patients"]):
        base = i * _STREAMS_PER_PATIENT
        assign_stream = RngStream(cfg.seed, base + 2)
        params = PatientParams(**p["params"])
        rec = _roll_patient(cfg, params, p["y0"], np.asarray(p["noise"]), assign_stream)
        rec.patient_id = p["patient_id"]
        records.append(rec)
    return SimCohort(cfg, records)
