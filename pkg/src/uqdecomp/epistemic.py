"""Noise-robust forward-dynamics ensemble and its prediction-error score."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import mlp
from .aleatoric import CalibrationSet
from .env import ACTIVE_DIMS, OBS_DIM
from .stats import derive_seed, nearest_rank


class ConfigurationError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


NOISE_LEVELS = (0.0, 1.0, 2.0)


def _profile_vector(sigma_profile, dim: int = OBS_DIM) -> np.ndarray:
    """Accept a per-component std vector or a PerturbationConfig-like object."""
    if hasattr(sigma_profile, "noise_std"):
        return np.asarray(sigma_profile.noise_std, dtype=float)
    v = np.asarray(sigma_profile, dtype=float)
    if v.shape != (dim,):
        raise ValueError(f"sigma profile must have length {dim}")
    return v


def build_augmented_dataset(cal: CalibrationSet, sigma_profile, rng,
                            levels=NOISE_LEVELS, mask=ACTIVE_DIMS):
    """Inputs ``[o_A + noise, a]`` at each noise level, all with the clean target.

    Rows are grouped by level: the first ``len(cal)`` rows use ``levels[0]``,
    and so on. Targets are ``o'_A - o_A`` from the clean transition.
    """
    if len(cal) == 0:
        raise ValueError("empty calibration set")
    std = _profile_vector(sigma_profile, cal.obs.shape[1])[list(mask)]
    obs = cal.obs[:, list(mask)]
    target = cal.next_obs[:, list(mask)] - obs
    xs, ys = [], []
    for lvl in levels:
        noisy = obs.copy()
        if lvl > 0:
            noisy = noisy + rng.standard_normal(obs.shape) * (lvl * std)
        xs.append(np.concatenate([noisy, cal.act], axis=1))
        ys.append(target)
    return np.concatenate(xs), np.concatenate(ys)


def r2_per_dim(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Coefficient of determination per column; zero-variance columns get -inf."""
    ss_res = ((target - pred) ** 2).sum(0)
    ss_tot = ((target - target.mean(0)) ** 2).sum(0)
    out = np.full(target.shape[1], -np.inf)
    ok = ss_tot > 1e-12
    out[ok] = 1.0 - ss_res[ok] / ss_tot[ok]
    return out


@dataclass
class DynamicsEnsemble:
    members: list[mlp.Network]
    reliable_dims: tuple[int, ...]
    r2: np.ndarray
    mask: tuple[int, ...] = ACTIVE_DIMS
    tau: float | None = None
    m_e: float = 1.5
    sigma_profile: np.ndarray = field(default_factory=lambda: np.zeros(OBS_DIM))
    noise_levels: tuple[float, ...] = NOISE_LEVELS

    def __post_init__(self):
        if len(self.members) < 1:
            raise ConfigurationError("ensemble has no members")

    def member_predictions(self, o_prev, a_prev) -> np.ndarray:
        """Stacked member outputs, shape (K, B, |A|) (or (K, |A|) for one input)."""
        o = np.asarray(o_prev, dtype=float)
        x = np.concatenate([o[..., list(self.mask)], np.asarray(a_prev, dtype=float)], axis=-1)
        return np.stack([mlp.predict(m, x) for m in self.members])

    def predict(self, o_prev, a_prev) -> np.ndarray:
        return self.member_predictions(o_prev, a_prev).mean(axis=0)

    def score(self, o_prev, a_prev, o_cur):
        if not self.reliable_dims:
            raise ConfigurationError("no reliably predicted dimensions")
        o_prev = np.asarray(o_prev, dtype=float)
        o_cur = np.asarray(o_cur, dtype=float)
        delta = o_cur[..., list(self.mask)] - o_prev[..., list(self.mask)]
        err = self.predict(o_prev, a_prev) - delta
        g = list(self.reliable_dims)
        s = np.sqrt(np.mean(err[..., g] ** 2, axis=-1))
        return float(s) if np.ndim(s) == 0 else s

    def trigger(self, o_prev, a_prev, o_cur):
        if self.tau is None:
            raise ConfigurationError("epistemic threshold has not been calibrated")
        return self.score(o_prev, a_prev, o_cur) > self.tau

    def with_threshold(self, tau: float | None, m_e: float | None = None) -> "DynamicsEnsemble":
        return replace(self, tau=tau, m_e=self.m_e if m_e is None else m_e)

    def to_dict(self) -> dict:
        return {
            "members": [mlp.network_to_dict(m) for m in self.members],
            "reliable_dims": list(self.reliable_dims),
            "r2": [float(v) if np.isfinite(v) else None for v in self.r2],
            "mask": list(self.mask),
            "tau": self.tau,
            "m_e": self.m_e,
            "sigma_profile": self.sigma_profile.tolist(),
            "noise_levels": list(self.noise_levels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicsEnsemble":
        return cls(
            [mlp.network_from_dict(m) for m in d["members"]],
            tuple(d["reliable_dims"]),
            np.array([-np.inf if v is None else v for v in d["r2"]]),
            tuple(d["mask"]), d["tau"], d["m_e"],
            np.asarray(d["sigma_profile"], dtype=float), tuple(d["noise_levels"]),
        )


def fit_ensemble(cal: CalibrationSet, k: int = 5, seed: int = 0, sigma_profile=None,
                 levels=NOISE_LEVELS, train_cfg: mlp.TrainConfig | None = None,
                 holdout_frac: float = 0.1, r2_threshold: float = 0.3,
                 mask=ACTIVE_DIMS) -> DynamicsEnsemble:
    """Train ``k`` members on a noise-augmented split of ``cal``.

    Members differ in init seed and in their augmentation noise draws. R^2 per
    output dimension is measured with the ensemble mean on a clean holdout,
    and dimensions above ``r2_threshold`` form the reliable set.
    """
    if k < 1:
        raise ValueError("k must be positive")
    n = len(cal)
    n_hold = max(1, int(round(holdout_frac * n)))
    if n - n_hold < 2:
        raise ValueError("calibration set too small for a train/holdout split")
    dim = cal.obs.shape[1]
    profile = np.zeros(dim) if sigma_profile is None else _profile_vector(sigma_profile, dim)
    split = np.random.default_rng(derive_seed(seed, 0)).permutation(n)
    train, hold = cal.subset(split[n_hold:]), cal.subset(split[:n_hold])

    members = []
    for i in range(k):
        member_seed = derive_seed(seed, 1, i)
        rng = np.random.default_rng(derive_seed(seed, 2, i))
        x, y = build_augmented_dataset(train, profile, rng, levels, mask)
        try:
            net, _ = mlp.fit_network(x, y, member_seed % (2**32), train_cfg)
        except mlp.TrainingDivergedError as exc:
            raise TrainingError(f"member {i} diverged") from exc
        members.append(net)

    ens = DynamicsEnsemble(members, (), np.zeros(len(mask)), tuple(mask),
                           sigma_profile=profile, noise_levels=tuple(levels))
    target = hold.next_obs[:, list(mask)] - hold.obs[:, list(mask)]
    r2 = r2_per_dim(ens.predict(hold.obs, hold.act), target)
    ens.r2 = r2
    ens.reliable_dims = tuple(int(j) for j in np.flatnonzero(r2 > r2_threshold))
    if not ens.reliable_dims:
        raise ConfigurationError("no output dimension reached the R^2 threshold")
    return ens


def threshold_from_scores(scores, m_e: float = 1.5, percentile: float = 95.0) -> float:
    return nearest_rank(scores, percentile) * m_e


def offline_threshold(ens: DynamicsEnsemble, cal: CalibrationSet, m_e: float | None = None) -> float:
    """Threshold from scores on the (independently sampled) calibration transitions."""
    scores = ens.score(cal.obs, cal.act, cal.next_obs)
    return threshold_from_scores(scores, ens.m_e if m_e is None else m_e)


def runtime_calibrate(ens: DynamicsEnsemble, seed: int = 0, t_cal: int = 300,
                      m_e: float | None = None, plant=None, policy=None,
                      config=None) -> DynamicsEnsemble:
    """Set the threshold from a short nominal closed-loop run of the frozen policy.

    Episodes are chained until ``t_cal`` transitions have been scored; the
    first step of each episode has no predecessor and is skipped. Returns a
    copy of ``ens`` carrying the new threshold.
    """
    from . import env as E
    from .control import PolicyParams, frozen_policy

    if t_cal < 100:
        raise ValueError("t_cal must be at least 100")
    plant = plant or E.PlantParams()
    policy = policy or PolicyParams()
    config = config or E.nominal()
    m_e = ens.m_e if m_e is None else m_e
    scores: list[float] = []
    episode = 0
    while len(scores) < t_cal:
        ep_seed = derive_seed(seed, episode)
        state = E.reset(config, ep_seed, plant)
        sensor = [np.random.default_rng([ep_seed, 1])]
        push = [np.random.default_rng([ep_seed, 2])]
        prev_o = prev_a = None
        for _ in range(plant.horizon):
            o = E.observe(state, config, sensor)
            if prev_o is not None:
                scores.append(float(ens.score(prev_o, prev_a, o)[0]))
                if len(scores) >= t_cal:
                    break
            a = frozen_policy(o, policy)
            try:
                state = E.step(state, a, config, plant, E.draw_disturbance(plant, push))
            except E.SimulationDivergedError as exc:
                raise TrainingError("calibration episode diverged") from exc
            prev_o, prev_a = o, a
            if E.is_success(state, plant)[0] or E.is_lost(state)[0]:
                break
        episode += 1
    tau = threshold_from_scores(scores, m_e)
    return ens.with_threshold(tau, m_e)


def epis_score(ens: DynamicsEnsemble, o_prev, a_prev, o_cur):
    return ens.score(o_prev, a_prev, o_cur)


def epis_trigger(ens: DynamicsEnsemble, o_prev, a_prev, o_cur):
    return ens.trigger(o_prev, a_prev, o_cur)


def dumps(ens: DynamicsEnsemble) -> str:
    return json.dumps(ens.to_dict())


def loads(text: str) -> DynamicsEnsemble:
    return DynamicsEnsemble.from_dict(json.loads(text))
