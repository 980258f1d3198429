"""Experiment orchestration: calibration, seeded episode grids, result tables.

Per-episode seeds come from ``derive_seed(master_seed, condition_index,
episode_index)``. Every controller sees the same seeds for a condition, so
controller comparisons are paired. Each episode owns two generators seeded
``[seed, 1]`` (sensor, recovery) and ``[seed, 2]`` (process force noise).

Episodes are simulated in lockstep within fixed-size chunks. The chunk layout
depends only on the episode count, never on the number of workers, so outputs
are byte-identical for any ``workers`` value.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import aleatoric as A
from . import env as E
from . import epistemic as EP
from . import mlp
from .control import ControllerConfig, ControllerKind, PolicyParams, controller_step
from .stats import derive_seed, diff_interval, pearson, wilson_interval

CHUNK = 250
CAL_STREAM = 10_000        # condition index reserved for D_cal collection
RUNTIME_STREAM = 10_001    # condition index reserved for runtime calibration
PROBE_STREAM = 10_002      # fresh nominal probe rollouts

CONDITIONS = {
    "nominal": E.nominal(),
    "sensor": E.sensor(),
    "dynamics": E.dynamics(2.0),
    "compound": E.compound(2.0),
}


class ExperimentError(RuntimeError):
    pass


# --------------------------------------------------------------------------- models

@dataclass
class Models:
    alea: A.AleatoricModel
    ens: EP.DynamicsEnsemble

    def to_dict(self) -> dict:
        return {"aleatoric": self.alea.to_dict(), "ensemble": self.ens.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Models":
        return cls(A.AleatoricModel.from_dict(d["aleatoric"]),
                   EP.DynamicsEnsemble.from_dict(d["ensemble"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Models":
        return cls.from_dict(json.loads(Path(path).read_text()))


def collect_calibration(seed: int = 0, episodes: int = 300,
                        plant: E.PlantParams = E.PlantParams(),
                        policy: PolicyParams = PolicyParams()) -> A.CalibrationSet:
    """Nominal closed-loop transitions of the frozen policy (clean observations)."""
    seeds = [derive_seed(seed, CAL_STREAM, i) for i in range(episodes)]
    records = run_episodes(ControllerConfig(ControllerKind.VANILLA), E.nominal(), seeds,
                           None, plant, policy, keep_trajectory=True)
    obs, act, nxt = [], [], []
    for r in records:
        obs.append(r.trajectory["obs"])
        act.append(r.trajectory["action"])
        nxt.append(r.trajectory["next_obs"])
    return A.CalibrationSet(np.concatenate(obs), np.concatenate(act), np.concatenate(nxt))


def calibrate(seed: int = 0, cal_episodes: int = 300, k: int = 5,
              train_cfg: mlp.TrainConfig | None = None, t_cal: int = 300,
              m_a: float = 1.0, m_e: float = 1.5, levels=EP.NOISE_LEVELS,
              plant: E.PlantParams = E.PlantParams(),
              policy: PolicyParams = PolicyParams(),
              cal: A.CalibrationSet | None = None) -> tuple[Models, A.CalibrationSet]:
    """Collect D_cal, fit both estimators and runtime-calibrate the ensemble."""
    if cal is None:
        cal = collect_calibration(seed, cal_episodes, plant, policy)
    alea = A.fit_aleatoric(cal, E.ACTIVE_DIMS, m_a=m_a)
    ens = EP.fit_ensemble(cal, k, seed, E.sensor(), levels=levels, train_cfg=train_cfg)
    ens = EP.runtime_calibrate(ens.with_threshold(None, m_e), derive_seed(seed, RUNTIME_STREAM),
                               t_cal, m_e, plant, policy)
    return Models(alea, ens), cal


# --------------------------------------------------------------------------- episodes

@dataclass
class EpisodeRecord:
    seed: int
    condition: str
    controller: str
    alpha: float
    success: bool
    outcome: str                 # success | lost | timeout
    final_height: float
    sigma_alea: np.ndarray
    sigma_epis: np.ndarray
    alea_fired: np.ndarray
    epis_fired: np.ndarray
    recovery: np.ndarray
    dampen: np.ndarray
    trajectory: dict | None = None

    @property
    def n_steps(self) -> int:
        return len(self.sigma_alea)

    def rate(self, name: str) -> float:
        v = getattr(self, name)
        return float(v.mean()) if len(v) else 0.0


def _empty_log():
    return {k: [] for k in ("sa", "se", "af", "ef", "rec", "dmp", "obs", "raw", "act", "nxt")}


def run_episodes(ctrl: ControllerConfig, config: E.PerturbationConfig, seeds,
                 models: Models | None, plant: E.PlantParams = E.PlantParams(),
                 policy: PolicyParams = PolicyParams(), condition: str | None = None,
                 keep_trajectory: bool = False) -> list[EpisodeRecord]:
    """Simulate one episode per seed in lockstep and return their records.

    An episode ends on success, on a lost grasp (fingers closed on nothing,
    which the plant cannot undo) or at the horizon.
    """
    seeds = [int(s) for s in seeds]
    n = len(seeds)
    alea = models.alea if models else None
    ens = models.ens if models else None
    state = E.reset(config, seeds, plant)
    sensor = [np.random.default_rng([s, 1]) for s in seeds]
    push = [np.random.default_rng([s, 2]) for s in seeds]
    logs = [_empty_log() for _ in range(n)]
    outcome = ["timeout"] * n
    final_h = np.zeros(n)
    live = np.arange(n)
    prev_obs = prev_act = None

    for _ in range(plant.horizon):
        rngs = [sensor[i] for i in live]
        try:
            action, dec = controller_step(ctrl, state, config, alea, ens, prev_obs, prev_act,
                                          rngs, policy)
            nxt = E.step(state, action, config, plant,
                         E.draw_disturbance(plant, [push[i] for i in live]))
        except E.SimulationDivergedError as exc:
            raise ExperimentError(f"episode diverged (condition={condition}, "
                                  f"controller={ctrl.kind.value}, seeds={[seeds[i] for i in live]})") from exc
        for j, i in enumerate(live):
            lg = logs[i]
            lg["sa"].append(dec.sigma_alea[j]); lg["se"].append(dec.sigma_epis[j])
            lg["af"].append(dec.alea_fired[j]); lg["ef"].append(dec.epis_fired[j])
            lg["rec"].append(dec.recovery_applied[j]); lg["dmp"].append(dec.dampen_applied[j])
        if keep_trajectory:
            clean, clean_next = E.physics_readout(state), E.physics_readout(nxt)
            for j, i in enumerate(live):
                logs[i]["obs"].append(clean[j]); logs[i]["raw"].append(dec.raw_obs[j])
                logs[i]["act"].append(action[j]); logs[i]["nxt"].append(clean_next[j])
        won = E.is_success(nxt, plant)
        lost = E.is_lost(nxt)
        for j, i in enumerate(live):
            if won[j] or lost[j]:
                outcome[i] = "success" if won[j] else "lost"
                final_h[i] = nxt.object_pos[j, 1]
        keep = ~(won | lost)
        if not keep.any():
            live = live[:0]
            break
        state = nxt.take(keep)
        prev_obs, prev_act = dec.raw_obs[keep], action[keep]
        live = live[keep]
    for j, i in enumerate(live):
        final_h[i] = state.object_pos[j, 1]

    out = []
    for i in range(n):
        lg = logs[i]
        traj = None
        if keep_trajectory:
            traj = {"obs": np.array(lg["obs"]), "raw_obs": np.array(lg["raw"]),
                    "action": np.array(lg["act"]), "next_obs": np.array(lg["nxt"])}
        out.append(EpisodeRecord(
            seeds[i], condition or config.name, ctrl.kind.value, ctrl.alpha,
            outcome[i] == "success", outcome[i], float(final_h[i]),
            np.array(lg["sa"], float), np.array(lg["se"], float),
            np.array(lg["af"], bool), np.array(lg["ef"], bool),
            np.array(lg["rec"], bool), np.array(lg["dmp"], bool), traj))
    return out


# --------------------------------------------------------------------------- grid

@dataclass
class GridSpec:
    conditions: dict[str, E.PerturbationConfig] = field(default_factory=lambda: dict(CONDITIONS))
    controllers: tuple[ControllerConfig, ...] = tuple(ControllerConfig(k) for k in ControllerKind)
    plant: E.PlantParams = E.PlantParams()
    policy: PolicyParams = PolicyParams()
    baseline: str = ControllerKind.VANILLA.value


def episode_seeds(master_seed: int, condition_index: int, episodes: int) -> list[int]:
    return [derive_seed(master_seed, condition_index, i) for i in range(episodes)]


def _run_task(task):
    ctrl, cond, cfg, seeds, models, plant, policy = task
    return run_episodes(ctrl, cfg, seeds, models, plant, policy, condition=cond)


def run_experiment(grid: GridSpec, models: Models | None, master_seed: int = 0,
                   episodes: int = 1000, workers: int = 1):
    """Run every (controller, condition) cell. Returns ``(ResultTable, records)``."""
    tasks = []
    for ci, (cond, cfg) in enumerate(grid.conditions.items()):
        seeds = episode_seeds(master_seed, ci, episodes)
        for ctrl in grid.controllers:
            if ctrl.kind.needs_models and models is None:
                raise EP.ConfigurationError(f"{ctrl.kind.value} needs calibrated models")
            for lo in range(0, episodes, CHUNK):
                tasks.append((ctrl, cond, cfg, seeds[lo:lo + CHUNK],
                              models if ctrl.kind is not ControllerKind.VANILLA or models else None,
                              grid.plant, grid.policy))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            chunks = list(pool.map(_run_task, tasks))
    else:
        chunks = [_run_task(t) for t in tasks]
    records = [r for c in chunks for r in c]
    return ResultTable.from_records(records, grid.baseline), records


# --------------------------------------------------------------------------- tables

@dataclass
class ResultRow:
    controller: str
    condition: str
    alpha: float
    episodes: int
    successes: int
    success_rate: float
    ci_low: float
    ci_high: float
    alea_rate: float
    alea_std: float
    epis_rate: float
    epis_std: float
    recovery_rate: float
    dampen_rate: float
    delta_vs_baseline: float = math.nan
    delta_ci_low: float = math.nan
    delta_ci_high: float = math.nan


COLUMNS = [f for f in ResultRow.__dataclass_fields__]


def _per_episode(records, name):
    return np.array([r.rate(name) for r in records]) if records else np.zeros(0)


@dataclass
class ResultTable:
    rows: list[ResultRow]
    baseline: str = ControllerKind.VANILLA.value

    @classmethod
    def from_records(cls, records, baseline: str = ControllerKind.VANILLA.value) -> "ResultTable":
        cells: dict[tuple, list[EpisodeRecord]] = {}
        for r in records:
            cells.setdefault((r.controller, r.condition, r.alpha), []).append(r)
        rows = []
        for (ctrl, cond, alpha), recs in cells.items():
            n = len(recs)
            s = sum(r.success for r in recs)
            lo, hi = wilson_interval(s, n)
            a = _per_episode(recs, "alea_fired")
            e = _per_episode(recs, "epis_fired")
            rows.append(ResultRow(ctrl, cond, alpha, n, s, s / n, lo, hi,
                                  float(a.mean()), float(a.std()), float(e.mean()), float(e.std()),
                                  float(_per_episode(recs, "recovery").mean()),
                                  float(_per_episode(recs, "dampen").mean())))
        base = {(r.condition, r.alpha): r for r in rows if r.controller == baseline}
        if not base:
            base = {(r.condition,): r for r in rows if r.controller == baseline}
        for row in rows:
            b = base.get((row.condition, row.alpha))
            if b is None:
                b = next((x for x in rows if x.controller == baseline and x.condition == row.condition), None)
            if b is not None:
                row.delta_vs_baseline = row.success_rate - b.success_rate
                row.delta_ci_low, row.delta_ci_high = diff_interval(
                    row.successes, row.episodes, b.successes, b.episodes)
        return cls(rows, baseline)

    def get(self, controller: str, condition: str, alpha: float | None = None) -> ResultRow:
        for r in self.rows:
            if r.controller == controller and r.condition == condition and (
                    alpha is None or math.isclose(r.alpha, alpha)):
                return r
        raise KeyError((controller, condition, alpha))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"baseline": self.baseline,
                           "rows": [{c: _json_val(getattr(r, c)) for c in COLUMNS} for r in self.rows]},
                          indent=2)

    def write(self, out_dir, stem: str = "results"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(self.to_csv())
        (out / f"{stem}.json").write_text(self.to_json())

    def format(self) -> str:
        lines = [f"{'controller':14s} {'condition':10s} {'alpha':>5s} {'N':>5s} {'success':>8s} "
                 f"{'95% CI':>15s} {'alea':>6s} {'epis':>6s} {'delta':>7s}"]
        for r in self.rows:
            d = "" if math.isnan(r.delta_vs_baseline) else f"{100 * r.delta_vs_baseline:+7.1f}"
            lines.append(f"{r.controller:14s} {r.condition:10s} {r.alpha:5.2f} {r.episodes:5d} "
                         f"{100 * r.success_rate:8.1f} [{100 * r.ci_low:5.1f}, {100 * r.ci_high:5.1f}] "
                         f"{100 * r.alea_rate:6.1f} {100 * r.epis_rate:6.1f} {d:>7s}")
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def _json_val(v):
    if isinstance(v, float):
        return None if math.isnan(v) else round(v, 6)
    return v


RECORD_COLUMNS = ["condition", "controller", "alpha", "seed", "success", "outcome", "steps",
                  "final_height", "alea_rate", "epis_rate", "recovery_rate", "dampen_rate",
                  "mean_sigma_alea", "mean_sigma_epis"]


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow([r.condition, r.controller, f"{r.alpha:.2f}", r.seed, int(r.success), r.outcome,
                    r.n_steps, f"{r.final_height:.6f}", f"{r.rate('alea_fired'):.6f}",
                    f"{r.rate('epis_fired'):.6f}", f"{r.rate('recovery'):.6f}",
                    f"{r.rate('dampen'):.6f}", f"{r.rate('sigma_alea'):.6f}",
                    f"{r.rate('sigma_epis'):.6f}"])
    return buf.getvalue()


TRAJECTORY_COLUMNS = (["t"] + [f"phys_{i}" for i in range(E.OBS_DIM)]
                      + [f"obs_{i}" for i in range(E.OBS_DIM)]
                      + [f"act_{i}" for i in range(E.ACT_DIM)]
                      + ["sigma_alea", "sigma_epis", "alea_fired", "epis_fired", "recovery", "dampen"])


def trajectory_to_csv(record: EpisodeRecord) -> str:
    """One row per step: physics readout, raw observation, applied action, signals."""
    if record.trajectory is None:
        raise ValueError("record was produced without keep_trajectory=True")
    tr = record.trajectory
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for t in range(record.n_steps):
        w.writerow([t] + [f"{v:.6f}" for v in tr["obs"][t]] + [f"{v:.6f}" for v in tr["raw_obs"][t]]
                   + [f"{v:.6f}" for v in tr["action"][t]]
                   + [f"{record.sigma_alea[t]:.6f}", f"{record.sigma_epis[t]:.6f}",
                      int(record.alea_fired[t]), int(record.epis_fired[t]),
                      int(record.recovery[t]), int(record.dampen[t])])
    return buf.getvalue()


# --------------------------------------------------------------------------- analyses

@dataclass
class TriggerRates:
    condition: str
    controller: str
    episodes: int
    alea_mean: float
    alea_std: float
    epis_mean: float
    epis_std: float
    alea_step_rate: float
    epis_step_rate: float


def trigger_rate_report(records) -> list[TriggerRates]:
    """Per (condition, controller): mean/std of per-episode firing fractions.

    The pooled step-level rates (fired steps over all steps) are reported too.
    """
    if not records:
        raise ValueError("no records")
    groups: dict[tuple, list[EpisodeRecord]] = {}
    for r in records:
        groups.setdefault((r.condition, r.controller), []).append(r)
    out = []
    for (cond, ctrl), recs in groups.items():
        a = _per_episode(recs, "alea_fired")
        e = _per_episode(recs, "epis_fired")
        steps = sum(r.n_steps for r in recs)
        out.append(TriggerRates(cond, ctrl, len(recs), float(a.mean()), float(a.std()),
                                float(e.mean()), float(e.std()),
                                sum(int(r.alea_fired.sum()) for r in recs) / max(steps, 1),
                                sum(int(r.epis_fired.sum()) for r in recs) / max(steps, 1)))
    return out


def signal_correlation(records) -> float:
    """Pearson r between per-step sigma_alea and sigma_epis, pooled over records.

    Steps without a predecessor transition (sigma_epis undefined) are skipped.
    """
    xs = np.concatenate([r.sigma_alea[1:] for r in records]) if records else np.zeros(0)
    ys = np.concatenate([r.sigma_epis[1:] for r in records]) if records else np.zeros(0)
    return pearson(xs, ys)


def sweep_alpha(models: Models, alphas=(0.15, 0.30, 0.50), master_seed: int = 0,
                episodes: int = 1000, conditions=("sensor", "dynamics", "compound"),
                kinds=(ControllerKind.TOTAL_U, ControllerKind.DECOMPOSED),
                plant: E.PlantParams = E.PlantParams(), policy: PolicyParams = PolicyParams(),
                workers: int = 1):
    ctrls = tuple(ControllerConfig(k, a) for a in alphas for k in kinds)
    grid = GridSpec({c: CONDITIONS[c] for c in conditions}, ctrls, plant, policy,
                    baseline=ControllerKind.TOTAL_U.value)
    return run_experiment(grid, models, master_seed, episodes, workers)


SHIFTS = {"mass1.5": (1.5, 1.0), "mass2": (2.0, 1.0),
          "friction0.5": (1.0, 0.5), "friction1.5": (1.0, 1.5)}


def shift_conditions(mass_mult: float, friction_mult: float, tag: str) -> dict:
    return {
        f"{tag}:dynamics": E.PerturbationConfig(mass_mult=mass_mult, friction_mult=friction_mult,
                                                name="dynamics"),
        f"{tag}:compound": E.PerturbationConfig(dict(E.DEFAULT_SENSOR_SIGMA), mass_mult,
                                                friction_mult, name="compound"),
    }


def sweep_shift(models: Models, shifts=tuple(SHIFTS), master_seed: int = 0, episodes: int = 1000,
                kinds=(ControllerKind.VANILLA, ControllerKind.TOTAL_U, ControllerKind.DECOMPOSED),
                alpha: float = 0.30, plant: E.PlantParams = E.PlantParams(),
                policy: PolicyParams = PolicyParams(), workers: int = 1):
    conds = {"sensor": CONDITIONS["sensor"]}
    for tag in shifts:
        conds.update(shift_conditions(*SHIFTS[tag], tag))
    grid = GridSpec(conds, tuple(ControllerConfig(k, alpha) for k in kinds), plant, policy)
    return run_experiment(grid, models, master_seed, episodes, workers)


def offline_threshold_ablation(models: Models, cal: A.CalibrationSet, master_seed: int = 0,
                               episodes: int = 200, plant: E.PlantParams = E.PlantParams(),
                               policy: PolicyParams = PolicyParams()) -> dict:
    """Nominal epistemic trigger rate under the offline vs the runtime threshold."""
    tau_off = EP.offline_threshold(models.ens, cal)
    seeds = [derive_seed(master_seed, PROBE_STREAM, i) for i in range(episodes)]
    recs = run_episodes(ControllerConfig(ControllerKind.VANILLA), E.nominal(), seeds, models,
                        plant, policy, condition="nominal")
    scores = np.concatenate([r.sigma_epis[1:] for r in recs])
    return {"tau_offline": tau_off, "tau_runtime": models.ens.tau, "steps": int(scores.size),
            "rate_offline": float(np.mean(scores > tau_off)),
            "rate_runtime": float(np.mean(scores > models.ens.tau))}


def write_outputs(table: ResultTable, records, out_dir, stem: str = "results"):
    out = Path(out_dir)
    table.write(out, stem)
    (out / "records.csv").write_text(records_to_csv(records))
