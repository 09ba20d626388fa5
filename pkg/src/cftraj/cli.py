"""Single-executable front end: simulate, train, evaluate, predict,
attribute, probe, export-repr, serve.

Configuration is a TOML (or JSON) key-value tree with one section per
command; unknown keys are rejected and every run writes a resolved-config
copy next to its outputs, from which it is reproducible. The environment
variable COUNTERFACT_LOG sets log verbosity.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import socket
import sys
try:
    import tomllib
except ModuleNotFoundError:                      # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import click
import numpy as np

from . import dataio, evalkit, inference, training, tumorsim
from .balancing import KernelConfig, SmmdConfig
from .seqmodel import load_checkpoint, checkpoint_digest

log = logging.getLogger("cftraj")

SIMULATE_KEYS = ("Config keys under [simulate]: n_patients (count), horizon (days), "
                 "gamma (confounding strength, dimensionless; or gammas = list for a sweep), "
                 "d_max (cm), noise_std (relative volume noise), chemo_half_life (days), "
                 "chemo_dose (concentration units/day), radio_dose (Gy/day), "
                 "lookback (days), init_diameter_lo/init_diameter_hi (cm), "
                 "volume_floor (cm^3), seed (integer).")

TRAIN_KEYS = ("Config keys under [train]: epochs (count), batch_size (patients), "
              "learning_rate (1/step), weight_decay (1/step), balancing_mode "
              "(none|smmd|grl|cdc), patience (epochs), teacher_forcing (bool), "
              "grad_clip (global L2 norm or absent), seed (integer), head_hidden "
              "(units), d_repr (units), d_channels (units), kernel_size (taps), "
              "dilations (list of steps); [train.smmd]: n_subset (samples), grouping "
              "(joint|channel); [train.kernel]: mode (median|fixed), sigma "
              "(representation units), squared_median (bool).")


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

class ConfigError(click.ClickException):
    exit_code = 2


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    if p.suffix == ".json":
        return json.loads(p.read_text(encoding="utf-8"))
    with open(p, "rb") as f:
        return tomllib.load(f)


def _check_keys(d: dict, allowed: Sequence[str], where: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where}: {', '.join(unknown)}")


def section(cfg: dict, name: str) -> dict:
    top_allowed = ("simulate", "train", "evaluate", "probe", "serve", "predict",
                   "attribute")
    _check_keys(cfg, top_allowed, "config root")
    return dict(cfg.get(name, {}))


def sim_config(cfg: dict, seed: Optional[int]) -> List[tumorsim.SimCohortConfig]:
    sec = section(cfg, "simulate")
    gammas = sec.pop("gammas", None)
    allowed = [f.name for f in dataclasses.fields(tumorsim.SimCohortConfig)]
    _check_keys(sec, allowed, "[simulate]")
    if seed is not None:
        sec["seed"] = seed
    base = tumorsim.config_from_jsonable(sec)
    if gammas is None:
        return [base]
    return [dataclasses.replace(base, gamma=float(g)) for g in gammas]


def train_config(cfg: dict, seed: Optional[int]) -> training.TrainConfig:
    sec = section(cfg, "train")
    smmd = sec.pop("smmd", {})
    kernel = sec.pop("kernel", {})
    allowed = [f.name for f in dataclasses.fields(training.TrainConfig)]
    _check_keys(sec, allowed, "[train]")
    _check_keys(smmd, [f.name for f in dataclasses.fields(SmmdConfig)], "[train.smmd]")
    _check_keys(kernel, [f.name for f in dataclasses.fields(KernelConfig)], "[train.kernel]")
    if seed is not None:
        sec["seed"] = seed
    sec.pop("encoder", None)
    return training.TrainConfig(smmd=SmmdConfig(**smmd), kernel=KernelConfig(**kernel), **sec)


def write_resolved_config(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / "resolved_config.json.tmp"
    tmp.write_text(json.dumps(resolved, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(out_dir / "resolved_config.json")


def setup_logging(quiet: bool, json_logs: bool) -> None:
    level_name = os.environ.get("COUNTERFACT_LOG", "INFO").upper()
    level = logging.WARNING if quiet else getattr(logging, level_name, logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    if json_logs:
        class JsonFormatter(logging.Formatter):
            def format(self, record):
                return json.dumps({"level": record.levelname,
                                   "logger": record.name,
                                   "message": record.getMessage()})
        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.basicConfig(level=level, handlers=[handler], force=True)


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="TOML (or JSON) configuration file.")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(), default=".",
                      help="Output directory.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override the config seed.")(fn)
    fn = click.option("--quiet", is_flag=True, help="Log warnings only.")(fn)
    fn = click.option("--json-logs", is_flag=True, help="One JSON object per log line.")(fn)
    return fn


def _load_data(data_dir: str) -> dataio.Dataset:
    prefix = str(Path(data_dir) / "cohort")
    return dataio.load_dataset(prefix)


def _load_oracle(data_dir: str) -> Optional[tumorsim.SimCohort]:
    p = Path(data_dir) / "oracle.json"
    if not p.is_file():
        return None
    return tumorsim.load_oracle_sidecar(str(p))


def _write_json(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

@click.group()
def main() -> None:
    """Counterfactual treatment-trajectory engine."""


@main.command(epilog=SIMULATE_KEYS)
@common_options
def simulate(config_path, out_dir, seed, quiet, json_logs):
    """Generate confounded simulator cohorts (one directory per gamma)."""
    setup_logging(quiet, json_logs)
    cfg = load_config(config_path)
    out = Path(out_dir)
    resolved = {"command": "simulate", "simulate": []}
    for sim_cfg in sim_config(cfg, seed):
        sub = out / f"gamma_{sim_cfg.gamma:g}"
        sub.mkdir(parents=True, exist_ok=True)
        cohort = tumorsim.simulate_cohort(sim_cfg)
        ds = tumorsim.cohort_to_dataset(cohort)
        dataio.save_dataset(ds, str(sub / "cohort"))
        tumorsim.save_oracle_sidecar(cohort, str(sub / "oracle.json"))
        pos = dataio.positivity_check(ds)
        _write_json(sub / "positivity.json", {
            "counts": {"".join(map(str, k)): v for k, v in pos.arm_counts.items()},
            "zero_support": ["".join(map(str, a)) for a in pos.zero_support],
            "low_support": ["".join(map(str, a)) for a in pos.low_support],
        })
        resolved["simulate"].append(tumorsim.config_to_jsonable(sim_cfg))
        log.info("wrote cohort gamma=%g (%d patients) to %s",
                 sim_cfg.gamma, sim_cfg.n_patients, sub)
    write_resolved_config(out, resolved)


@main.command(epilog=TRAIN_KEYS)
@common_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True,
              help="Dataset directory written by `simulate` (or compatible).")
def train(config_path, out_dir, seed, quiet, json_logs, data_dir):
    """Train a model; writes model.ckpt and train_report.json."""
    setup_logging(quiet, json_logs)
    cfg = load_config(config_path)
    tc = train_config(cfg, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = _load_data(data_dir)
    train_ds, val_ds, _ = training.prepare_splits(ds, tc.seed)
    try:
        ck, report = training.train(train_ds, val_ds, tc, str(out / "model.ckpt"))
    except FloatingPointError as exc:
        raise click.ClickException(f"training diverged: {exc}") from exc
    _write_json(out / "train_report.json", report.to_jsonable())
    write_resolved_config(out, {
        "command": "train", "data": str(data_dir),
        "train": json.loads(json.dumps(dataclasses.asdict(tc), default=str)),
    })
    log.info("lambda trace: %s", ", ".join(f"{v:.4f}" for v in report.lambda_trace[:10]))
    log.info("best epoch %d, final val RMSE %.6f", report.best_epoch, report.final_val_rmse)


@main.command()
@common_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", "checkpoints", type=str, multiple=True, required=True,
              help="Checkpoint path; repeat for one CSV row per model. May "
                   "contain '{seed}' when --seeds is used.")
@click.option("--tau-max", type=int, default=6, show_default=True)
@click.option("--seeds", type=str, default=None,
              help="Comma-separated seeds for batched evaluation (mean ± sd).")
def evaluate(config_path, out_dir, seed, quiet, json_logs, data_dir,
             checkpoints, tau_max, seeds):
    """Rolling-origin multi-horizon evaluation; emits JSON + per-horizon CSV."""
    setup_logging(quiet, json_logs)
    load_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = _load_data(data_dir)
    oracle = _load_oracle(data_dir)
    seed_list = [int(s) for s in seeds.split(",")] if seeds else [seed if seed is not None else 0]

    rows: List[dict] = []
    for ck_tmpl in checkpoints:
        per_seed: List[Dict[int, float]] = []
        cf_per_seed: List[float] = []
        one_step: List[float] = []
        for s in seed_list:
            path = ck_tmpl.format(seed=s)
            ck = load_checkpoint(path)
            _, val_ds, test_ds = training.prepare_splits(ds, s)
            per_seed.append(evalkit.multi_horizon_rmse(ck, test_ds, tau_max))
            one_step.append(training.checkpoint_val_rmse(ck, val_ds))
            if oracle is not None:
                cf_per_seed.append(evalkit.counterfactual_rmse(ck, test_ds, oracle, tau_max))
        label = Path(ck_tmpl).stem
        row = {"model": label, "seeds": seed_list,
               "per_horizon_rmse_mean": {t: float(np.mean([p[t] for p in per_seed]))
                                         for t in range(1, tau_max + 1)},
               "per_horizon_rmse_sd": {t: float(np.std([p[t] for p in per_seed]))
                                       for t in range(1, tau_max + 1)},
               "one_step_val_rmse": one_step,
               "counterfactual_rmse": cf_per_seed or None,
               "config_digest": load_checkpoint(ck_tmpl.format(seed=seed_list[0])).train_digest}
        rows.append(row)

    _write_json(out / "eval_report.json", {"tau_max": tau_max, "rows": rows})
    lines = ["model," + ",".join(f"tau{t}" for t in range(1, tau_max + 1))]
    for row in rows:
        cells = []
        for t in range(1, tau_max + 1):
            m = row["per_horizon_rmse_mean"][t]
            sd = row["per_horizon_rmse_sd"][t]
            cells.append(f"{m:.6g}±{sd:.2g}" if len(seed_list) > 1 else f"{m:.6g}")
        lines.append(row["model"] + "," + ",".join(cells))
    (out / "per_horizon.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_resolved_config(out, {"command": "evaluate", "data": str(data_dir),
                                "evaluate": {"checkpoints": list(checkpoints),
                                             "tau_max": tau_max, "seeds": seed_list}})
    for row in rows:
        log.info("%s: tau1 RMSE %.4f", row["model"], row["per_horizon_rmse_mean"][1])


def _patient_window(ck, ds: dataio.Dataset, patient: str, origin: int,
                    tau: int) -> dataio.HistoryWindow:
    recs = [r for r in ds.records if r.patient_id == patient]
    if not recs:
        raise click.ClickException(f"patient {patient!r} not found")
    rec = dataio.impute_locf_nocb(recs[0])
    one = dataio.Dataset([rec], ds.schema)
    normed = dataio.zscore_apply(one, ck.stats)
    return dataio.HistoryWindow(normed.records[0], origin, tau)


@main.command()
@common_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--patient", type=str, required=True)
@click.option("--origin", type=int, default=None, help="0-based origin step; default last usable.")
@click.option("--horizon", type=int, default=6, show_default=True)
@click.option("--target-range", type=(float, float), default=(0.0, 50.0), show_default=True)
def predict(config_path, out_dir, seed, quiet, json_logs, data_dir, checkpoint,
            patient, origin, horizon, target_range):
    """Counterfactual trajectories for the canonical plan set, as JSON."""
    setup_logging(quiet, json_logs)
    ck = load_checkpoint(checkpoint)
    ds = _load_data(data_dir)
    if origin is None:
        lengths = [r.T for r in ds.records if r.patient_id == patient]
        if not lengths:
            raise click.ClickException(f"patient {patient!r} not found")
        origin = max(lengths) - horizon - 1
    window = _patient_window(ck, ds, patient, origin, horizon)
    plans = inference.default_plans(horizon, ck.schema.a_names)
    result = inference.counterfactual_compare(window, plans, ck)
    report = inference.integrated_gradients(window, plans[0], ck)
    y_key = f"y_{ck.schema.y_names[0]}"
    hist_y = window.history()[2][:, 0] * ck.stats.std.get(y_key, 1.0) + ck.stats.mean.get(y_key, 0.0)
    explanation = inference.template_explanation(
        hist_y, result, plans, report, target_range,
        outcome_name=ck.schema.y_names[0],
        outcome_unit=ck.schema.units.get(y_key, ""))
    payload = {
        "patient": patient, "origin": origin, "horizon": horizon,
        "labels": result.labels,
        "trajectories": result.trajectories.tolist(),
        "omega": report.omega.tolist(),
        "input_names": report.input_names,
        "explanation": explanation.sections,
        "preference": explanation.preference,
        "model_digest": checkpoint_digest(checkpoint),
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "prediction.json", payload)
    write_resolved_config(out, {"command": "predict", "data": str(data_dir),
                                "predict": {"checkpoint": str(checkpoint),
                                            "patient": patient, "origin": origin,
                                            "horizon": horizon,
                                            "target_range": list(target_range)}})
    click.echo(json.dumps(payload))


@main.command()
@common_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--patient", type=str, required=True)
@click.option("--origin", type=int, required=True)
@click.option("--horizon", type=int, default=6, show_default=True)
@click.option("--plan", "plan_label", type=str, default="Both", show_default=True,
              help="One of the canonical plan labels.")
@click.option("--ig-steps", type=int, default=64, show_default=True)
def attribute(config_path, out_dir, seed, quiet, json_logs, data_dir, checkpoint,
              patient, origin, horizon, plan_label, ig_steps):
    """Integrated-gradients attribution for one patient and plan, as JSON."""
    setup_logging(quiet, json_logs)
    ck = load_checkpoint(checkpoint)
    ds = _load_data(data_dir)
    window = _patient_window(ck, ds, patient, origin, horizon)
    plans = {p.label: p for p in inference.default_plans(horizon, ck.schema.a_names)}
    if plan_label not in plans:
        raise click.ClickException(f"unknown plan {plan_label!r}; choose from {sorted(plans)}")
    report = inference.integrated_gradients(window, plans[plan_label], ck, m=ig_steps)
    payload = {
        "patient": patient, "origin": origin, "plan": plan_label,
        "input_names": report.input_names,
        "phi": report.phi.tolist(),
        "omega_raw": report.omega_raw.tolist(),
        "omega": report.omega.tolist(),
        "m_steps": report.m_steps,
        "baseline_note": report.baseline_note,
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "attribution.json", payload)
    write_resolved_config(out, {"command": "attribute", "data": str(data_dir),
                                "attribute": {"checkpoint": str(checkpoint),
                                              "patient": patient, "origin": origin,
                                              "horizon": horizon, "plan": plan_label,
                                              "ig_steps": ig_steps}})
    click.echo(json.dumps(payload))


@main.command()
@common_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), required=True,
              help="Balanced-encoder checkpoint.")
@click.option("--baseline-checkpoint", type=click.Path(exists=True), required=True,
              help="Unbalanced-encoder checkpoint for the ΔR² comparison.")
@click.option("--epochs", type=int, default=60, show_default=True)
def probe(config_path, out_dir, seed, quiet, json_logs, data_dir, checkpoint,
          baseline_checkpoint, epochs):
    """Frozen-encoder reconstruction probe with per-variable ΔR²."""
    setup_logging(quiet, json_logs)
    ck_bal = load_checkpoint(checkpoint)
    ck_unb = load_checkpoint(baseline_checkpoint)
    ds = _load_data(data_dir)
    split_seed = seed if seed is not None else 0
    train_ds, val_ds, _ = training.prepare_splits(ds, split_seed)
    pc = evalkit.ProbeTrainConfig(epochs=epochs, seed=split_seed)
    rep_bal = evalkit.reconstruction_probe(ck_bal, train_ds, val_ds, pc)
    rep_unb = evalkit.reconstruction_probe(ck_unb, train_ds, val_ds, pc)
    payload = {
        "balanced": {"r2": rep_bal.r2_per_variable, "train_loss": rep_bal.train_loss,
                     "val_loss": rep_bal.val_loss},
        "unbalanced": {"r2": rep_unb.r2_per_variable, "train_loss": rep_unb.train_loss,
                       "val_loss": rep_unb.val_loss},
        "delta_r2": evalkit.delta_r2(rep_unb, rep_bal),
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "probe_report.json", payload)
    write_resolved_config(out, {"command": "probe", "data": str(data_dir),
                                "probe": {"checkpoint": str(checkpoint),
                                          "baseline_checkpoint": str(baseline_checkpoint),
                                          "epochs": epochs, "seed": split_seed}})
    for name, d in sorted(payload["delta_r2"].items()):
        log.info("delta R^2 %s: %+.4f", name, d)


@main.command("export-repr")
@common_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
def export_repr(config_path, out_dir, seed, quiet, json_logs, data_dir, checkpoint):
    """Export per-step latent representations to CSV."""
    setup_logging(quiet, json_logs)
    ck = load_checkpoint(checkpoint)
    ds = _load_data(data_dir)
    imputed = dataio.Dataset([dataio.impute_locf_nocb(r) for r in ds.records], ds.schema)
    normed = dataio.zscore_apply(imputed, ck.stats)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = evalkit.export_representations(ck, normed, str(out / "representations.csv"))
    write_resolved_config(out, {"command": "export-repr", "data": str(data_dir),
                                "export_repr": {"checkpoint": str(checkpoint)}})
    log.info("wrote %d representation rows", n)


@main.command()
@common_options
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--model-dir", type=click.Path(), default=None,
              help="Directory advertised by GET /models.")
@click.option("--host", type=str, default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True,
              help="0 binds an ephemeral port (printed on startup).")
@click.option("--cors-origin", "cors_origins", type=str, multiple=True,
              help="Allowed CORS origin; repeatable.")
def serve(config_path, out_dir, seed, quiet, json_logs, checkpoint, model_dir,
          host, port, cors_origins):
    """Serve the HTTP JSON API over a loaded checkpoint."""
    import uvicorn

    from .service import create_app

    setup_logging(quiet, json_logs)
    app = create_app(checkpoint, model_dir=model_dir,
                     cors_origins=list(cors_origins) or None)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen(128)
    actual_port = sock.getsockname()[1]
    click.echo(f"listening on http://{host}:{actual_port}")
    config = uvicorn.Config(app, log_level="warning" if quiet else "info")
    uvicorn.Server(config).run(sockets=[sock])


if __name__ == "__main__":
    main()
