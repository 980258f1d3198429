"""Command-line entry point: ``uqdecomp <subcommand> [--seed --episodes --config --out]``.

The optional config file (TOML or JSON) may hold these tables:

    [plant]        PlantParams overrides
    [policy]       PolicyParams overrides
    [perturbation] a single PerturbationConfig, used by ``run --condition custom``
    [calibration]  cal_episodes, k, epochs, t_cal, m_a, m_e, noise_levels
    [experiment]   controllers, conditions, alpha, alphas, shifts, workers
    [tracking]     TrackingConfig (stream, quality, reward, selector tables)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import aleatoric as A
from . import capacity as K
from . import env as E
from . import epistemic as EP
from . import harness as H
from . import mlp
from .control import ControllerConfig, ControllerKind, PolicyParams

log = logging.getLogger("uqdecomp")


@dataclass
class CalibrationOptions:
    cal_episodes: int = 300
    k: int = 5
    epochs: int = 200
    t_cal: int = 300
    m_a: float = 1.0
    m_e: float = 1.5
    noise_levels: tuple[float, ...] = EP.NOISE_LEVELS


@dataclass
class ExperimentOptions:
    controllers: tuple[str, ...] = tuple(k.value for k in ControllerKind)
    conditions: tuple[str, ...] = tuple(H.CONDITIONS)
    alpha: float = 0.30
    alphas: tuple[float, ...] = (0.15, 0.30, 0.50)
    shifts: tuple[str, ...] = tuple(H.SHIFTS)
    workers: int = 1


@dataclass
class RunConfig:
    plant: E.PlantParams = field(default_factory=E.PlantParams)
    policy: PolicyParams = field(default_factory=PolicyParams)
    perturbation: E.PerturbationConfig | None = None
    calibration: CalibrationOptions = field(default_factory=CalibrationOptions)
    experiment: ExperimentOptions = field(default_factory=ExperimentOptions)
    tracking: K.TrackingConfig = field(default_factory=K.TrackingConfig)


def _build(cls, d: dict, section: str):
    names = {f.name for f in fields(cls)}
    bad = set(d) - names
    if bad:
        raise SystemExit(f"config [{section}]: unknown keys {sorted(bad)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    d = E.read_mapping(path)
    known = {"plant", "policy", "perturbation", "calibration", "experiment", "tracking"}
    bad = set(d) - known
    if bad:
        raise SystemExit(f"config: unknown tables {sorted(bad)}")
    plant = _build(E.PlantParams, d.get("plant", {}), "plant")
    pol_d = {"f_max": plant.f_max, "m_object": plant.m_object, "grip_offset": plant.grip_offset}
    pol_d.update(d.get("policy", {}))
    return RunConfig(
        plant=plant,
        policy=_build(PolicyParams, pol_d, "policy"),
        perturbation=E.PerturbationConfig.from_dict(d["perturbation"]) if "perturbation" in d else None,
        calibration=_build(CalibrationOptions, d.get("calibration", {}), "calibration"),
        experiment=_build(ExperimentOptions, d.get("experiment", {}), "experiment"),
        tracking=K.TrackingConfig.from_dict(d.get("tracking", {})),
    )


# --------------------------------------------------------------------------- helpers

def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, allow_nan=False, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def _finite(x: float) -> float | None:
    return float(x) if np.isfinite(x) else None


def _calibrate(args, cfg: RunConfig, cal=None, levels=None):
    c = cfg.calibration
    episodes = args.episodes if args.episodes is not None else c.cal_episodes
    t0 = time.time()
    models, cal = H.calibrate(args.seed, episodes, c.k, mlp.TrainConfig(epochs=c.epochs), c.t_cal,
                              c.m_a, c.m_e, c.noise_levels if levels is None else levels,
                              cfg.plant, cfg.policy, cal)
    log.info("calibrated on %d transitions in %.1fs", len(cal), time.time() - t0)
    return models, cal


def _summary(models: H.Models, cal: A.CalibrationSet) -> dict:
    return {"n_cal": len(cal), "tau_alea": models.alea.tau, "m_a": models.alea.m_a,
            "tau_epis": models.ens.tau, "m_e": models.ens.m_e,
            "reliable_dims": list(models.ens.reliable_dims),
            "r2": [_finite(v) for v in models.ens.r2],
            "noise_levels": list(models.ens.noise_levels)}


def _models(args, cfg: RunConfig) -> H.Models:
    path = Path(args.models) if args.models else Path(args.out) / "models.json"
    if path.exists():
        log.info("loading models from %s", path)
        return H.Models.load(path)
    log.info("no models at %s; calibrating", path)
    args_cal = argparse.Namespace(**{**vars(args), "episodes": None})
    models, cal = _calibrate(args_cal, cfg)
    out = _out(args)
    models.save(out / "models.json")
    cal.save(out / "calibration.npz")
    return models


def _episodes(args, default: int = 1000) -> int:
    return default if args.episodes is None else args.episodes


def _controllers(names, alpha: float) -> tuple[ControllerConfig, ...]:
    return tuple(ControllerConfig(ControllerKind(n), alpha) for n in names)


def _finish(args, table: H.ResultTable, records) -> None:
    out = _out(args)
    H.write_outputs(table, records, out)
    print(table.format())
    log.info("wrote %s", ", ".join(str(out / n) for n in ("results.csv", "results.json", "records.csv")))


# --------------------------------------------------------------------------- subcommands

def cmd_calibrate(args, cfg: RunConfig) -> int:
    models, cal = _calibrate(args, cfg)
    out = _out(args)
    models.save(out / "models.json")
    cal.save(out / "calibration.npz")
    _write_json(out / "calibration.json", _summary(models, cal))
    print(json.dumps(_summary(models, cal), indent=2))
    return 0


def cmd_train_ensemble(args, cfg: RunConfig) -> int:
    cal = A.CalibrationSet.load(args.cal) if args.cal else None
    levels = (0.0,) if args.no_augment else None
    models, cal = _calibrate(args, cfg, cal, levels)
    out = _out(args)
    name = args.name or ("ensemble_noaug.json" if args.no_augment else "ensemble.json")
    (out / name).write_text(EP.dumps(models.ens))
    if args.cal is None:
        cal.save(out / "calibration.npz")
    print(json.dumps(_summary(models, cal), indent=2))
    return 0


def cmd_run(args, cfg: RunConfig) -> int:
    ex = cfg.experiment
    models = _models(args, cfg)
    if args.condition == "custom":
        if cfg.perturbation is None:
            raise SystemExit("--condition custom needs a [perturbation] table in --config")
        conds = {cfg.perturbation.name: cfg.perturbation}
    elif args.condition:
        conds = {args.condition: H.CONDITIONS[args.condition]}
    else:
        conds = {c: H.CONDITIONS[c] for c in ex.conditions}
    alpha = ex.alpha if args.alpha is None else args.alpha
    names = args.controllers.split(",") if args.controllers else ex.controllers
    grid = H.GridSpec(conds, _controllers(names, alpha), cfg.plant, cfg.policy)
    table, records = H.run_experiment(grid, models, args.seed, _episodes(args), args.workers or ex.workers)
    _finish(args, table, records)
    if args.trajectories:
        tdir = _out(args) / "trajectories"
        tdir.mkdir(exist_ok=True)
        for ci, (cname, ccfg) in enumerate(conds.items()):
            seeds = H.episode_seeds(args.seed, ci, args.trajectories)
            for ctrl in grid.controllers:
                for rec in H.run_episodes(ctrl, ccfg, seeds, models, cfg.plant, cfg.policy,
                                          condition=cname, keep_trajectory=True):
                    (tdir / f"{cname}_{ctrl.kind.value}_{rec.seed}.csv").write_text(
                        H.trajectory_to_csv(rec))
    return 0


def cmd_sweep_alpha(args, cfg: RunConfig) -> int:
    ex = cfg.experiment
    table, records = H.sweep_alpha(_models(args, cfg), ex.alphas, args.seed, _episodes(args),
                                   plant=cfg.plant, policy=cfg.policy,
                                   workers=args.workers or ex.workers)
    _finish(args, table, records)
    return 0


def cmd_sweep_shift(args, cfg: RunConfig) -> int:
    ex = cfg.experiment
    alpha = ex.alpha if args.alpha is None else args.alpha
    table, records = H.sweep_shift(_models(args, cfg), ex.shifts, args.seed, _episodes(args),
                                   alpha=alpha, plant=cfg.plant, policy=cfg.policy,
                                   workers=args.workers or ex.workers)
    _finish(args, table, records)
    gaps = {}
    for tag in ex.shifts:
        cell = f"{tag}:dynamics"
        gaps[cell] = table.get("total_u", cell).success_rate - table.get("vanilla", cell).success_rate
        print(f"total_u - vanilla under {cell}: {100 * gaps[cell]:+.1f} pp")
    _write_json(_out(args) / "shift_gaps.json", gaps)
    return 0


def cmd_analyze(args, cfg: RunConfig) -> int:
    """Trigger rates, signal correlation and the runtime-calibration ablation."""
    models = _models(args, cfg)
    n = _episodes(args, 200)
    ctrls = (ControllerConfig(ControllerKind.VANILLA), ControllerConfig(ControllerKind.DECOMPOSED))
    grid = H.GridSpec(dict(H.CONDITIONS), ctrls, cfg.plant, cfg.policy)
    _, records = H.run_experiment(grid, models, args.seed, n, args.workers or cfg.experiment.workers)
    rates = H.trigger_rate_report(records)
    vanilla = [r for r in records if r.controller == "vanilla"]
    out = _out(args)
    report = {
        "episodes_per_condition": n,
        "trigger_rates": [vars(r) for r in rates],
        "signal_correlation": H.signal_correlation(vanilla),
        "signal_correlation_by_condition": {
            c: H.signal_correlation([r for r in vanilla if r.condition == c]) for c in H.CONDITIONS},
    }
    cal_path = Path(args.cal) if args.cal else out / "calibration.npz"
    if cal_path.exists():
        report["calibration_ablation"] = H.offline_threshold_ablation(
            models, A.CalibrationSet.load(cal_path), args.seed, n, cfg.plant, cfg.policy)
    _write_json(out / "analysis.json", report)
    lines = ["condition,controller,episodes,alea_mean,alea_std,epis_mean,epis_std"]
    for r in rates:
        lines.append(f"{r.condition},{r.controller},{r.episodes},{r.alea_mean:.6f},"
                     f"{r.alea_std:.6f},{r.epis_mean:.6f},{r.epis_std:.6f}")
    (out / "trigger_rates.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"pooled r(sigma_alea, sigma_epis) = {report['signal_correlation']:.4f}")
    return 0


def cmd_track_sim(args, cfg: RunConfig) -> int:
    tc = cfg.tracking
    if args.episodes is not None:
        tc = replace(tc, eval_streams=args.episodes)
    study = K.run_tracking_experiment(tc, args.seed)
    out = _out(args)
    (out / "track_report.csv").write_text(K.reports_to_csv(study.reports))
    summary = {"selectors": study.summary(),
               "escalation_asymmetry": _finite(study.escalation_asymmetry()),
               "signal_correlation": K.stream_signal_correlation(study),
               "tau_alea": study.estimators.alea.tau, "tau_epis": study.estimators.ens.tau}
    _write_json(out / "track_summary.json", summary)
    for name, s in summary["selectors"].items():
        print(f"{name:14s} savings {100 * s['savings']:5.1f}%  quality {s['mean_quality']:.4f}  "
              f"switches/100 {s['switches_per_100']:5.2f}")
    return 0


COMMANDS = {
    "calibrate": (cmd_calibrate, "collect D_cal and fit both estimators"),
    "train-ensemble": (cmd_train_ensemble, "fit (and runtime-calibrate) the dynamics ensemble"),
    "run": (cmd_run, "run the controller x condition grid"),
    "sweep-alpha": (cmd_sweep_alpha, "dampening-gain sweep for Total-U and Decomposed"),
    "sweep-shift": (cmd_sweep_shift, "mass and friction shift sweep"),
    "analyze": (cmd_analyze, "trigger rates, signal correlation, calibration ablation"),
    "track-sim": (cmd_track_sim, "capacity selection on synthetic detection streams"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uqdecomp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--seed", type=int, default=0, help="master seed")
        s.add_argument("--episodes", type=int, default=None,
                       help="episodes per cell (calibration episodes for calibrate/train-ensemble, "
                            "evaluation streams for track-sim)")
        s.add_argument("--config", default=None, help="TOML or JSON config file")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("run", "sweep-alpha", "sweep-shift", "analyze"):
            s.add_argument("--models", default=None, help="models.json (default: <out>/models.json)")
            s.add_argument("--workers", type=int, default=None)
        if name in ("run", "sweep-shift"):
            s.add_argument("--alpha", type=float, default=None)
        if name == "run":
            s.add_argument("--controllers", default=None, help="comma-separated controller kinds")
            s.add_argument("--condition", default=None,
                           choices=[*H.CONDITIONS, "custom"], help="single condition")
            s.add_argument("--trajectories", type=int, default=0,
                           help="dump per-step CSVs for the first N episodes of every cell")
        if name in ("train-ensemble", "analyze"):
            s.add_argument("--cal", default=None, help="calibration.npz to reuse")
        if name == "train-ensemble":
            s.add_argument("--no-augment", action="store_true", help="train on clean inputs only")
            s.add_argument("--name", default=None, help="output file name")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    cfg = load_run_config(args.config)
    return COMMANDS[args.command][0](args, cfg)


if __name__ == "__main__":
    sys.exit(main())
