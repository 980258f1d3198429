"""Uncertainty-guided detector capacity selection on a synthetic scene stream.

A stream has two independent latent processes: representation difficulty
``d_t`` (which changes how the scene content evolves) and sensor noise ``n_t``
(which corrupts the frame features). Frame features are a low-rank image of a
latent oscillator on a noisy ring, so noise pushes frames off the nominal
manifold (aleatoric) while difficulty speeds up the phase advance and breaks
the learned feature autoregression (epistemic) without moving the feature
distribution. A five-tier detector ladder turns
``(tier, d_t, n_t)`` into a quality score, and a tabular TD selector moves one
tier at a time.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import aleatoric as A
from . import epistemic as EP
from . import mlp
from .stats import derive_seed, pearson

TIER_NAMES = ("nano", "small", "medium", "large", "xlarge")
PARAM_COUNTS = (3.2, 11.2, 25.9, 43.7, 68.2)      # millions
MAX_PARAMS = PARAM_COUNTS[-1]
N_TIERS = len(PARAM_COUNTS)
FEATURE_DIM = 10
LATENT_DIM = 3

DOWN, STAY, UP = 0, 1, 2
N_ACTIONS = 3
ACTION_NAMES = ("down", "stay", "up")

RISE_STEP = 0.5       # a signal "rises" when it grows by this many thresholds

DECOMPOSED = "decomposed"
TOTAL_U = "total_u"
ADAPTIVE_KINDS = (DECOMPOSED, TOTAL_U)

# seed streams
_CAL_STREAM, _TRAIN_STREAM, _EVAL_STREAM, _POLICY_STREAM = 20000, 20001, 20002, 20003


class ConfigurationError(RuntimeError):
    pass


# --------------------------------------------------------------------------- ladder

@dataclass(frozen=True)
class QualityParams:
    """Per-tier quality curve ``q_max - k_d*max(0, d - margin) - k_n*n + noise``."""

    q_max: tuple[float, ...] = (0.78, 0.83, 0.90, 0.905, 0.91)
    capacity_margin: tuple[float, ...] = (0.0, 0.15, 0.35, 0.6, 0.9)
    k_d: float = 0.6
    k_n: float = 0.05
    noise_std: float = 0.02


@dataclass(frozen=True)
class ModelTier:
    index: int
    name: str
    param_count: float
    q_max: float
    capacity_margin: float

    def base_quality(self, d, n, params: QualityParams) -> np.ndarray | float:
        """Expected (noise-free, unclamped) quality at difficulty ``d`` and noise ``n``."""
        d = np.asarray(d, dtype=float)
        n = np.asarray(n, dtype=float)
        q = self.q_max - params.k_d * np.maximum(0.0, d - self.capacity_margin) - params.k_n * n
        return float(q) if q.ndim == 0 else q


def ladder(params: QualityParams = QualityParams()) -> tuple[ModelTier, ...]:
    if len(params.q_max) != N_TIERS or len(params.capacity_margin) != N_TIERS:
        raise ConfigurationError(f"quality curves need {N_TIERS} entries")
    return tuple(ModelTier(i, TIER_NAMES[i], PARAM_COUNTS[i], params.q_max[i],
                           params.capacity_margin[i]) for i in range(N_TIERS))


def frame_quality(tier: int, d, n, rng=None, params: QualityParams = QualityParams(),
                  noise=None):
    """Quality in [0, 1] of ``tier`` on a frame with latents ``(d, n)``.

    ``noise`` (standard normal draws) may be passed directly so that every
    tier sees the same per-frame perturbation; otherwise it is drawn from ``rng``.
    """
    if not 0 <= tier < N_TIERS:
        raise ValueError(f"tier must be in 0..{N_TIERS - 1}")
    t = ladder(params)[tier]
    base = np.asarray(t.base_quality(d, n, params))
    if noise is None:
        noise = 0.0 if rng is None else rng.standard_normal(base.shape)
    q = np.clip(base + params.noise_std * np.asarray(noise), 0.0, 1.0)
    return float(q) if q.ndim == 0 else q


def savings(tiers) -> float:
    """Compute saved relative to always running the largest tier."""
    tiers = np.asarray(tiers, dtype=int)
    if tiers.size == 0:
        raise ValueError("empty tier sequence")
    # per-tier shortfall keeps always-XLarge exactly zero
    saved = MAX_PARAMS - np.asarray(PARAM_COUNTS)
    return float(np.bincount(tiers, minlength=N_TIERS) @ saved / (tiers.size * MAX_PARAMS))


# --------------------------------------------------------------------------- stream

@dataclass(frozen=True)
class StreamSpec:
    length: int = 1000
    shift_density: float = 0.004          # expected shift events per frame
    noise_density: float = 0.006          # expected noise bursts per frame
    segment_range: tuple[int, int] = (20, 60)
    shift_level: tuple[float, float] = (0.4, 1.0)
    noise_level: tuple[float, float] = (0.5, 1.0)
    omega: float = 0.5                    # nominal phase advance per frame (rad)
    omega_shift: float = 1.0              # extra phase advance per unit difficulty
    radius: float = 5.0                   # ring radius of the latent oscillator
    radial_rho: float = 0.8               # AR(1) pull of the radius towards ``radius``
    process_std: float = 0.5              # radial and third-latent innovation std
    phase_std: float = 0.05               # phase innovation std (rad)
    floor_std: float = 0.05               # isotropic feature floor
    noise_scale: float = 0.2              # feature noise std at n = 1
    mixing_seed: int = 7                  # latent-to-feature map, shared by all streams


@dataclass
class SceneStream:
    seed: int
    difficulty: np.ndarray        # (T,)
    noise: np.ndarray             # (T,)
    features: np.ndarray          # (T, FEATURE_DIM)
    quality_noise: np.ndarray     # (T,) standard normal, shared across tiers

    def __len__(self):
        return len(self.difficulty)

    def quality_table(self, params: QualityParams = QualityParams()) -> np.ndarray:
        """(T, N_TIERS) quality of every tier on every frame."""
        return np.stack([frame_quality(k, self.difficulty, self.noise, params=params,
                                       noise=self.quality_noise) for k in range(N_TIERS)], axis=1)


def mixing_matrix(seed: int) -> np.ndarray:
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((FEATURE_DIM, LATENT_DIM)))
    return q * np.sqrt(FEATURE_DIM / LATENT_DIM)


def segment_levels(rng, length: int, density: float, seg_range, level_range) -> np.ndarray:
    """Piecewise-constant level track: Poisson event count, later events overwrite."""
    out = np.zeros(length)
    n_events = rng.poisson(density * length) if density > 0 else 0
    for _ in range(n_events):
        start = int(rng.integers(0, length))
        dur = int(rng.integers(seg_range[0], seg_range[1] + 1))
        out[start:start + dur] = rng.uniform(*level_range)
    return out


def generate_stream(spec: StreamSpec, seed: int, length: int | None = None,
                    nominal: bool = False) -> SceneStream:
    """Seeded stream; ``nominal`` forces ``d = n = 0`` throughout."""
    t_len = spec.length if length is None else length
    if t_len < 2:
        raise ValueError("stream needs at least two frames")
    if nominal:
        d = np.zeros(t_len)
        n = np.zeros(t_len)
    else:
        d = segment_levels(np.random.default_rng([seed, 0]), t_len, spec.shift_density,
                           spec.segment_range, spec.shift_level)
        n = segment_levels(np.random.default_rng([seed, 1]), t_len, spec.noise_density,
                           spec.segment_range, spec.noise_level)
    rng = np.random.default_rng([seed, 2])
    w = mixing_matrix(spec.mixing_seed)
    innov = rng.standard_normal((t_len, 3))
    theta = rng.uniform(0.0, 2.0 * np.pi)
    r, z3 = spec.radius, 0.0
    latent = np.empty((t_len, LATENT_DIM))
    for t in range(t_len):
        latent[t] = (r * np.cos(theta), r * np.sin(theta), z3)
        theta += spec.omega + spec.omega_shift * d[t] + spec.phase_std * innov[t, 0]
        r = spec.radius + spec.radial_rho * (r - spec.radius) + spec.process_std * innov[t, 1]
        z3 = spec.radial_rho * z3 + spec.process_std * innov[t, 2]
    feats = latent @ w.T + spec.floor_std * rng.standard_normal((t_len, FEATURE_DIM))
    feats += (spec.noise_scale * n)[:, None] * rng.standard_normal((t_len, FEATURE_DIM))
    qn = np.random.default_rng([seed, 3]).standard_normal(t_len)
    return SceneStream(int(seed), d, n, feats, qn)


# --------------------------------------------------------------------------- estimators

@dataclass
class StreamEstimators:
    alea: A.AleatoricModel
    ens: EP.DynamicsEnsemble

    def to_dict(self) -> dict:
        return {"alea": self.alea.to_dict(), "ens": self.ens.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "StreamEstimators":
        return cls(A.AleatoricModel.from_dict(d["alea"]), EP.DynamicsEnsemble.from_dict(d["ens"]))


def _transitions(features: np.ndarray) -> A.CalibrationSet:
    f = np.asarray(features, dtype=float)
    return A.CalibrationSet(f[:-1], np.zeros((len(f) - 1, 0)), f[1:])


def fit_stream_estimators(features, spec: StreamSpec = StreamSpec(), seed: int = 0,
                          k: int = 5, train_cfg: mlp.TrainConfig | None = None,
                          levels=EP.NOISE_LEVELS, m_a: float = 1.0, m_e: float = 1.5,
                          t_cal: int = 300) -> StreamEstimators:
    """Fit both estimators on a nominal feature prefix.

    The final ``t_cal`` frames are held out of ensemble training and set the
    epistemic threshold (nearest-rank Q95 times ``m_e``). Augmentation noise
    uses half the full-burst feature noise as its unit level.
    """
    f = np.asarray(features, dtype=float)
    if len(f) < t_cal + 50:
        raise ValueError("calibration prefix too short")
    mask = tuple(range(FEATURE_DIM))
    alea = A.fit_aleatoric(f, mask, m_a=m_a)
    profile = np.full(FEATURE_DIM, 0.5 * spec.noise_scale)
    ens = EP.fit_ensemble(_transitions(f[:-t_cal]), k, seed, profile, levels=levels,
                          train_cfg=train_cfg, mask=mask)
    held = _transitions(f[-t_cal - 1:])
    scores = ens.score(held.obs, held.act, held.next_obs)
    return StreamEstimators(alea, ens.with_threshold(EP.threshold_from_scores(scores, m_e), m_e))


def stream_uncertainties(stream: SceneStream, est: StreamEstimators) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame ``(sigma_alea, sigma_epis)``; frame 0 has no transition and scores 0."""
    if est.ens.tau is None or est.alea.tau <= 0:
        raise ConfigurationError("estimators are not calibrated")
    f = stream.features
    sa = np.asarray(est.alea.score(f), dtype=float)
    se = np.zeros(len(f))
    se[1:] = est.ens.score(f[:-1], np.zeros((len(f) - 1, 0)), f[1:])
    return sa, se


# --------------------------------------------------------------------------- selector

@dataclass(frozen=True)
class RewardParams:
    c_cap: float = 1.0
    c_up: float = 0.05
    c_down: float = 0.1
    c_fail: float = 5.0
    q_keep: float = 0.88
    q_min: float = 0.82


@dataclass(frozen=True)
class SelectorConfig:
    """Q-learning schedule; a pair's step size is ``max(lr, 1/visits)``."""

    episodes: int = 100
    lr: float = 0.01
    gamma: float = 0.9
    epsilon: float = 0.1                  # exploration of the online (non-synchronous) mode
    start_tier: int = 2


def signal_bin(sigma, tau: float) -> int:
    """0 below threshold, 1 within 1-2x, 2 above 2x."""
    if sigma <= tau:
        return 0
    return 1 if sigma <= 2.0 * tau else 2


def quality_bin(q: float, rp: RewardParams) -> int:
    """1 when the last detection met ``q_keep``."""
    return int(q >= rp.q_keep)


N_QBINS = 2


def n_states(kind: str) -> int:
    if kind == DECOMPOSED:
        return N_TIERS * 3 * 3 * 2 * 2 * N_QBINS
    if kind == TOTAL_U:
        return N_TIERS * 3 * 2 * N_QBINS
    raise ValueError(f"unknown selector kind {kind!r}")


@dataclass
class SignalTrack:
    """Normalized per-frame signals as seen by one selector kind."""

    kind: str
    alea: np.ndarray      # sigma_alea / tau_a
    epis: np.ndarray      # sigma_epis / tau_e

    @property
    def total(self) -> np.ndarray:
        return np.maximum(self.alea, self.epis)

    def credit_signal(self) -> np.ndarray:
        """The signal whose decrease after an escalation earns credit."""
        return self.epis if self.kind == DECOMPOSED else self.total


def normalized_signals(kind: str, sa, se, est: StreamEstimators) -> SignalTrack:
    return SignalTrack(kind, np.asarray(sa) / est.alea.tau, np.asarray(se) / est.ens.tau)


def encode_state(kind: str, tier: int, track: SignalTrack, t: int, q_prev: float,
                 rp: RewardParams) -> int:
    qb = quality_bin(q_prev, rp)
    if kind == DECOMPOSED:
        a, e = track.alea, track.epis
        da = int(t > 0 and a[t] - a[t - 1] > RISE_STEP)
        de = int(t > 0 and e[t] - e[t - 1] > RISE_STEP)
        idx = (signal_bin(a[t], 1.0), signal_bin(e[t], 1.0), da, de, qb)
        dims = (3, 3, 2, 2, N_QBINS)
    else:
        u = track.total
        du = int(t > 0 and u[t] - u[t - 1] > RISE_STEP)
        idx = (signal_bin(u[t], 1.0), du, qb)
        dims = (3, 2, N_QBINS)
    return int(np.ravel_multi_index((tier, *idx), (N_TIERS, *dims)))


def greedy_action(q_row: np.ndarray) -> int:
    """Argmax with ties resolved to ``stay``, then ``down``."""
    best = q_row.max()
    for a in (STAY, DOWN, UP):
        if q_row[a] == best:
            return a
    return STAY


def apply_action(tier: int, action: int) -> int:
    return int(min(max(tier + (action - 1), 0), N_TIERS - 1))


def select_tier(table: np.ndarray, state: int, tier: int, epsilon: float, rng=None) -> tuple[int, int]:
    """Epsilon-greedy action and the resulting (clamped) tier."""
    if epsilon > 0 and rng is not None and rng.random() < epsilon:
        action = int(rng.integers(N_ACTIONS))
    else:
        action = greedy_action(table[state])
    return action, apply_action(tier, action)


def reward(action: int, quality: float, tier: int, d_signal: float,
           rp: RewardParams = RewardParams()) -> float:
    """Capacity cost, escalation credit, de-escalation credit and failure penalty."""
    r = -rp.c_cap * PARAM_COUNTS[tier] / MAX_PARAMS
    if action == UP and d_signal < 0:
        r += rp.c_up
    if action == DOWN and quality >= rp.q_keep:
        r += rp.c_down
    if quality < rp.q_min:
        r -= rp.c_fail
    return r


def q_update(table: np.ndarray, s: int, a: int, r: float, s_next: int | None,
             lr: float, gamma: float) -> np.ndarray:
    """One-step Q-learning update in place; ``s_next=None`` marks a terminal step."""
    if not 0 < lr <= 1:
        raise ValueError("lr must be in (0, 1]")
    if not 0 <= gamma < 1:
        raise ValueError("gamma must be in [0, 1)")
    target = r if s_next is None else r + gamma * table[s_next].max()
    table[s, a] += lr * (target - table[s, a])
    return table


@dataclass
class Rollout:
    tiers: np.ndarray
    actions: np.ndarray       # action taken after frame t (last entry unused)
    quality: np.ndarray
    rewards: np.ndarray


def run_selector(kind: str, table: np.ndarray | None, track: SignalTrack, qtab: np.ndarray,
                 rp: RewardParams = RewardParams(), start_tier: int = 2,
                 epsilon: float = 0.0, rng=None, learn: SelectorConfig | None = None,
                 visits: np.ndarray | None = None) -> Rollout:
    """Roll a selector over one stream; with ``learn`` the table is updated online.

    ``visits`` (same shape as the table) enables the decaying step size.
    """
    t_len = len(qtab)
    tiers = np.empty(t_len, dtype=int)
    actions = np.full(t_len, STAY, dtype=int)
    rewards = np.zeros(t_len)
    credit = track.credit_signal()
    tier = start_tier
    tiers[0] = tier
    s = encode_state(kind, tier, track, 0, qtab[0, tier], rp)
    for t in range(t_len - 1):
        a, nxt = select_tier(table, s, tier, epsilon, rng)
        q = qtab[t + 1, nxt]
        r = reward(a, q, nxt, credit[t + 1] - credit[t], rp)
        s2 = encode_state(kind, nxt, track, t + 1, q, rp)
        if learn is not None:
            lr = learn.lr
            if visits is not None:
                visits[s, a] += 1
                lr = max(lr, 1.0 / visits[s, a])
            q_update(table, s, a, r, s2, lr, learn.gamma)
        actions[t], rewards[t], tiers[t + 1] = a, r, nxt
        tier, s = nxt, s2
    return Rollout(tiers, actions, qtab[np.arange(t_len), tiers], rewards)


def schedule_return(tiers, track: SignalTrack, qtab: np.ndarray,
                    rp: RewardParams = RewardParams()) -> float:
    """Undiscounted return of a given tier schedule (actions are tier-change signs)."""
    tiers = np.asarray(tiers, dtype=int)
    credit = track.credit_signal()
    total = 0.0
    for t in range(len(tiers) - 1):
        a = int(np.sign(tiers[t + 1] - tiers[t])) + 1
        total += reward(a, qtab[t + 1, tiers[t + 1]], tiers[t + 1], credit[t + 1] - credit[t], rp)
    return total


def oracle_schedule(stream: SceneStream, params: QualityParams = QualityParams(),
                    rp: RewardParams = RewardParams()) -> np.ndarray:
    """Smallest tier whose noise-free quality at ``(d_t, 0)`` reaches ``q_keep``."""
    tiers = ladder(params)
    out = np.full(len(stream), N_TIERS - 1, dtype=int)
    for t, d in enumerate(stream.difficulty):
        for k in tiers:
            if k.base_quality(d, 0.0, params) >= rp.q_keep:
                out[t] = k.index
                break
    return out


def exogenous_index(kind: str, track: SignalTrack) -> np.ndarray:
    """Per-frame signal part of the state (everything except tier and quality bin)."""
    def bins(x):
        return np.where(x <= 1.0, 0, np.where(x <= 2.0, 1, 2))

    def rises(x):
        return np.concatenate([[0], (np.diff(x) > RISE_STEP).astype(int)])

    if kind == DECOMPOSED:
        a, e = track.alea, track.epis
        return ((bins(a) * 3 + bins(e)) * 2 + rises(a)) * 2 + rises(e)
    u = track.total
    return bins(u) * 2 + rises(u)


def _n_exogenous(kind: str) -> int:
    return n_states(kind) // (N_TIERS * N_QBINS)


def _quality_bins(qtab: np.ndarray, rp: RewardParams) -> np.ndarray:
    return (qtab >= rp.q_keep).astype(int)


def train_selector(kind: str, tracks: list[SignalTrack], qtabs: list[np.ndarray],
                   cfg: SelectorConfig = SelectorConfig(), rp: RewardParams = RewardParams(),
                   seed: int = 0, synchronous: bool = True) -> np.ndarray:
    """Tabular Q-learning over the training streams.

    The tier never influences the stream, so with ``synchronous`` every
    (tier, action) pair receives its exact one-step update at each frame and
    no exploration is needed. Otherwise a single epsilon-greedy trajectory is
    followed. ``cfg.episodes`` counts stream passes in both modes.
    """
    if not tracks:
        raise ValueError("no training streams")
    table = np.zeros((n_states(kind), N_ACTIONS))
    visits = np.zeros_like(table)
    rng = np.random.default_rng(derive_seed(seed, _POLICY_STREAM))
    if not synchronous:
        for ep in range(cfg.episodes):
            i = ep % len(tracks)
            run_selector(kind, table, tracks[i], qtabs[i], rp, cfg.start_tier,
                         cfg.epsilon, rng, learn=cfg, visits=visits)
        return table

    n_exo = _n_exogenous(kind)
    tiers = np.repeat(np.arange(N_TIERS), N_ACTIONS)
    acts = np.tile(np.arange(N_ACTIONS), N_TIERS)
    nxt = np.clip(tiers + acts - 1, 0, N_TIERS - 1)
    cost = -rp.c_cap * np.asarray(PARAM_COUNTS)[nxt] / MAX_PARAMS
    prep = []
    for track, qtab in zip(tracks, qtabs):
        exo = exogenous_index(kind, track)
        credit = np.diff(track.credit_signal())
        prep.append((exo, _quality_bins(qtab, rp), qtab, credit))
    for ep in range(cfg.episodes):
        exo, qb, qtab, credit = prep[ep % len(prep)]
        for t in range(len(exo) - 1):
            s = (tiers * n_exo + exo[t]) * N_QBINS + qb[t, tiers]
            q = qtab[t + 1, nxt]
            r = cost.copy()
            r += np.where((acts == UP) & (credit[t] < 0), rp.c_up, 0.0)
            r += np.where((acts == DOWN) & (q >= rp.q_keep), rp.c_down, 0.0)
            r -= np.where(q < rp.q_min, rp.c_fail, 0.0)
            s2 = (nxt * n_exo + exo[t + 1]) * N_QBINS + qb[t + 1, nxt]
            visits[s, acts] += 1
            lr = np.maximum(cfg.lr, 1.0 / visits[s, acts])
            target = r + cfg.gamma * table[s2].max(axis=1)
            table[s, acts] += lr * (target - table[s, acts])
    return table


# --------------------------------------------------------------------------- experiment

@dataclass(frozen=True)
class TrackingConfig:
    stream: StreamSpec = StreamSpec()
    quality: QualityParams = QualityParams()
    reward: RewardParams = RewardParams()
    selector: SelectorConfig = SelectorConfig()
    calibration_length: int = 3000
    train_streams: int = 60
    eval_streams: int = 8
    ensemble_k: int = 5
    ensemble_epochs: int = 100

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrackingConfig":
        subs = {"stream": StreamSpec, "quality": QualityParams,
                "reward": RewardParams, "selector": SelectorConfig}
        kw = {}
        names = {f.name for f in fields(cls)}
        for key, val in d.items():
            if key not in names:
                raise ConfigurationError(f"unknown tracking config key {key!r}")
            if key in subs:
                sub_names = {f.name for f in fields(subs[key])}
                bad = set(val) - sub_names
                if bad:
                    raise ConfigurationError(f"unknown {key} keys {sorted(bad)}")
                val = subs[key](**{k: tuple(v) if isinstance(v, list) else v for k, v in val.items()})
            kw[key] = val
        return cls(**kw)


@dataclass
class TrackingReport:
    stream_seed: int
    selector: str
    frames: int
    occupancy: tuple[float, ...]
    switches: int
    mean_quality: float
    savings: float
    alea_rate: float
    epis_rate: float
    up_given_epis: float
    up_given_alea_only: float

    @property
    def switches_per_100(self) -> float:
        return 100.0 * self.switches / self.frames


REPORT_COLUMNS = ("stream_seed", "selector", "frames",
                  *(f"{n}_pct" for n in TIER_NAMES),
                  "switches", "mean_quality", "savings_pct", "alea_rate", "epis_rate",
                  "up_given_epis", "up_given_alea_only")


def _rate(mask: np.ndarray, hits: np.ndarray) -> float:
    return float(hits[mask].mean()) if mask.any() else float("nan")


def make_report(seed: int, selector: str, tiers: np.ndarray, quality: np.ndarray,
                actions: np.ndarray, sa: np.ndarray, se: np.ndarray,
                est: StreamEstimators) -> TrackingReport:
    fa = sa > est.alea.tau
    fe = se > est.ens.tau
    up = actions == UP
    occ = tuple(float(np.mean(tiers == k)) for k in range(N_TIERS))
    return TrackingReport(seed, selector, len(tiers), occ, int(np.sum(tiers[1:] != tiers[:-1])),
                          float(quality.mean()), savings(tiers), float(fa.mean()), float(fe.mean()),
                          _rate(fe[:-1], up[:-1]), _rate((fa & ~fe)[:-1], up[:-1]))


@dataclass
class TrackingStudy:
    config: TrackingConfig
    estimators: StreamEstimators
    tables: dict
    reports: list[TrackingReport] = field(default_factory=list)

    def by_selector(self, name: str) -> list[TrackingReport]:
        return [r for r in self.reports if r.selector == name]

    def escalation_asymmetry(self, name: str = DECOMPOSED) -> float:
        """Pooled P(up | epis fired) / P(up | alea fired, epis not)."""
        rs = self.by_selector(name)
        pe = np.nanmean([r.up_given_epis for r in rs])
        pa = np.nanmean([r.up_given_alea_only for r in rs])
        return float("inf") if pa == 0 else float(pe / pa)

    def summary(self) -> dict:
        out = {}
        for name in dict.fromkeys(r.selector for r in self.reports):
            rs = self.by_selector(name)
            out[name] = {"savings": float(np.mean([r.savings for r in rs])),
                         "mean_quality": float(np.mean([r.mean_quality for r in rs])),
                         "switches_per_100": float(np.mean([r.switches_per_100 for r in rs]))}
        return out


def fixed_name(tier: int) -> str:
    return f"fixed_{TIER_NAMES[tier]}"


def prepare_streams(cfg: TrackingConfig, est: StreamEstimators, seeds):
    """Streams with their raw signals and quality tables."""
    out = []
    for s in seeds:
        st = generate_stream(cfg.stream, s)
        sa, se = stream_uncertainties(st, est)
        out.append((st, sa, se, st.quality_table(cfg.quality)))
    return out


def run_tracking_experiment(cfg: TrackingConfig = TrackingConfig(), seed: int = 0,
                            selectors=(DECOMPOSED, TOTAL_U), fixed_tiers=tuple(range(N_TIERS)),
                            estimators: StreamEstimators | None = None,
                            tables: dict | None = None) -> TrackingStudy:
    """Calibrate, train the adaptive selectors and evaluate every selector on held-out streams."""
    if estimators is None:
        prefix = generate_stream(cfg.stream, derive_seed(seed, _CAL_STREAM),
                                 cfg.calibration_length, nominal=True)
        estimators = fit_stream_estimators(prefix.features, cfg.stream, seed, cfg.ensemble_k,
                                           mlp.TrainConfig(epochs=cfg.ensemble_epochs))
    tables = dict(tables or {})
    missing = [k for k in selectors if k not in tables]
    if missing:
        train = prepare_streams(cfg, estimators,
                                [derive_seed(seed, _TRAIN_STREAM, i) for i in range(cfg.train_streams)])
        for kind in missing:
            tracks = [normalized_signals(kind, sa, se, estimators) for _, sa, se, _ in train]
            tables[kind] = train_selector(kind, tracks, [q for *_, q in train],
                                          cfg.selector, cfg.reward, seed)
    study = TrackingStudy(cfg, estimators, tables)
    evals = prepare_streams(cfg, estimators,
                            [derive_seed(seed, _EVAL_STREAM, i) for i in range(cfg.eval_streams)])
    for st, sa, se, qtab in evals:
        for kind in selectors:
            track = normalized_signals(kind, sa, se, estimators)
            ro = run_selector(kind, tables[kind], track, qtab, cfg.reward, cfg.selector.start_tier)
            study.reports.append(make_report(st.seed, kind, ro.tiers, ro.quality, ro.actions,
                                             sa, se, estimators))
        for k in fixed_tiers:
            tiers = np.full(len(st), k, dtype=int)
            study.reports.append(make_report(st.seed, fixed_name(k), tiers, qtab[:, k],
                                             np.full(len(st), STAY), sa, se, estimators))
    return study


def stream_signal_correlation(study: TrackingStudy) -> float:
    """Pooled Pearson r of the raw signals over the evaluation streams."""
    sa_all, se_all = [], []
    for s in dict.fromkeys(r.stream_seed for r in study.reports):
        st = generate_stream(study.config.stream, s)
        sa, se = stream_uncertainties(st, study.estimators)
        sa_all.append(sa[1:])
        se_all.append(se[1:])
    return pearson(np.concatenate(sa_all), np.concatenate(se_all))


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow([r.stream_seed, r.selector, r.frames,
                    *(f"{100 * v:.2f}" for v in r.occupancy), r.switches,
                    f"{r.mean_quality:.6f}", f"{100 * r.savings:.2f}",
                    f"{r.alea_rate:.6f}", f"{r.epis_rate:.6f}",
                    f"{r.up_given_epis:.6f}", f"{r.up_given_alea_only:.6f}"])
    return buf.getvalue()


def segment_rates(stream: SceneStream, sa, se, est: StreamEstimators, thresh: float = 0.3) -> dict:
    """Trigger rates on noise-burst frames (n high, d low) and shift frames (d high, n low)."""
    burst = (stream.noise > thresh) & (stream.difficulty <= thresh)
    shift = (stream.difficulty > thresh) & (stream.noise <= thresh)
    fa, fe = np.asarray(sa) > est.alea.tau, np.asarray(se) > est.ens.tau
    return {"burst": (_rate(burst, fa), _rate(burst, fe)),
            "shift": (_rate(shift, fa), _rate(shift, fe)),
            "burst_frames": int(burst.sum()), "shift_frames": int(shift.sum())}
