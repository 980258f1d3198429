"""Planar lift plant with a two-stage (physics, then sensor) observation pipeline.

All state arrays carry a leading batch axis so that many independent episodes
can be stepped in lockstep; ``reset`` with a scalar seed gives a batch of one.
Each episode row owns its own random stream, so results never depend on how
episodes are grouped into batches.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

OBS_DIM = 10
ACT_DIM = 3
GOAL_INDEX = 6
ACTIVE_DIMS = (0, 1, 2, 3, 4, 5, 7, 8, 9)
# observation slices per sensor group
SENSOR_GROUPS = {"gripper_pos": slice(0, 2), "gripper_vel": slice(2, 4),
                 "object_pos": slice(4, 6)}
G = 9.81


class SimulationDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlantParams:
    """Physical constants of the lift plant.

    The gripper is light and strong so that a heavier object produces a
    transition mismatch well above the sensor-noise floor of the
    observation differences. ``disturbance_std`` is white process force noise
    (N per axis) present in every condition, nominal included.
    """

    dt: float = 0.02
    horizon: int = 200
    m_gripper: float = 0.2
    m_object: float = 0.2
    f_max: float = 100.0
    mu_ground: float = 0.5
    grasp_radius: float = 0.05
    grip_offset: tuple[float, float] = (0.0, -0.02)
    grip_strength: float = 60.0     # N the fingers hold before slipping
    slip_limit: float = 0.25        # N*s of excess load before the object drops
    settle_steps: int = 1
    gripper_start: tuple[float, float] = (0.0, 0.15)
    object_x_range: tuple[float, float] = (-0.1, 0.1)
    goal_range: tuple[float, float] = (0.25, 0.4)
    success_height: float = 0.2
    disturbance_std: float = 4.0


@dataclass(frozen=True)
class PerturbationConfig:
    sensor_sigma: dict = field(default_factory=lambda: {
        "gripper_pos": 0.0, "gripper_vel": 0.0, "object_pos": 0.0})
    mass_mult: float = 1.0
    friction_mult: float = 1.0
    name: str = "nominal"

    def __post_init__(self):
        for k, v in self.sensor_sigma.items():
            if k not in SENSOR_GROUPS:
                raise ValueError(f"unknown sensor group {k!r}")
            if v < 0:
                raise ValueError(f"negative sigma for {k}")
        if self.mass_mult <= 0 or self.friction_mult <= 0:
            raise ValueError("multipliers must be positive")

    @property
    def noise_std(self) -> np.ndarray:
        """Per-observation-component sensor std (zeros outside sensed groups)."""
        std = np.zeros(OBS_DIM)
        for k, sl in SENSOR_GROUPS.items():
            std[sl] = self.sensor_sigma.get(k, 0.0)
        return std

    @property
    def is_noisy(self) -> bool:
        return any(v > 0 for v in self.sensor_sigma.values())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationConfig":
        sigma = {"gripper_pos": 0.0, "gripper_vel": 0.0, "object_pos": 0.0}
        sigma.update(d.get("sensor_sigma", {}))
        return cls(sigma, float(d.get("mass_mult", 1.0)),
                   float(d.get("friction_mult", 1.0)), d.get("name", "custom"))


DEFAULT_SENSOR_SIGMA = {"gripper_pos": 0.05, "gripper_vel": 0.1, "object_pos": 0.05}


def nominal() -> PerturbationConfig:
    return PerturbationConfig()


def sensor(sigma: dict | None = None) -> PerturbationConfig:
    return PerturbationConfig(dict(sigma or DEFAULT_SENSOR_SIGMA), name="sensor")


def dynamics(mass_mult: float = 2.0, friction_mult: float = 1.0) -> PerturbationConfig:
    return PerturbationConfig(mass_mult=mass_mult, friction_mult=friction_mult,
                              name="dynamics")


def compound(mass_mult: float = 2.0, friction_mult: float = 1.0,
             sigma: dict | None = None) -> PerturbationConfig:
    return PerturbationConfig(dict(sigma or DEFAULT_SENSOR_SIGMA), mass_mult,
                              friction_mult, name="compound")


@dataclass
class PhysicsState:
    gripper_pos: np.ndarray   # (B, 2)
    gripper_vel: np.ndarray   # (B, 2)
    object_pos: np.ndarray    # (B, 2)
    object_vel: np.ndarray    # (B, 2)
    grasped: np.ndarray       # (B,) bool
    goal_height: np.ndarray   # (B,)
    prev_action: np.ndarray   # (B, 3)
    slip: np.ndarray          # (B,) excess impulse absorbed by the grip, N*s
    grip_age: np.ndarray      # (B,) steps since the current grasp was acquired
    t: int = 0

    def __len__(self):
        return len(self.grasped)

    def copy(self) -> "PhysicsState":
        return PhysicsState(*(np.array(getattr(self, f)) for f in _ARRAY_FIELDS), t=self.t)

    def take(self, idx) -> "PhysicsState":
        return PhysicsState(*(np.array(getattr(self, f)[idx]) for f in _ARRAY_FIELDS), t=self.t)


_ARRAY_FIELDS = ("gripper_pos", "gripper_vel", "object_pos", "object_vel",
                 "grasped", "goal_height", "prev_action", "slip", "grip_age")


def make_state(gripper_pos, object_pos, gripper_vel=(0.0, 0.0), object_vel=(0.0, 0.0),
               grasped=False, goal_height=0.3, prev_action=(0.0, 0.0, 0.0),
               t=0) -> PhysicsState:
    """Build a batch-of-one state from plain values (tests, demos)."""
    return PhysicsState(
        np.array([gripper_pos], float), np.array([gripper_vel], float),
        np.array([object_pos], float), np.array([object_vel], float),
        np.array([grasped], bool), np.array([goal_height], float),
        np.array([prev_action], float), np.zeros(1), np.zeros(1, int), t)


def reset(config: PerturbationConfig, seed, params: PlantParams = PlantParams()) -> PhysicsState:
    """Initial state(s): gripper at the fixed start, object on the ground.

    ``seed`` may be an int or a sequence of ints (one episode per seed). The
    object x position is drawn uniformly from ``params.object_x_range`` using
    a stream derived from the seed alone.
    """
    seeds = np.atleast_1d(np.asarray(seed, dtype=np.int64))
    b = len(seeds)
    lo, hi = params.object_x_range
    glo, ghi = params.goal_range
    draws = [np.random.default_rng([int(s), 0]).uniform(size=2) for s in seeds]
    ox = np.array([lo + (hi - lo) * u[0] for u in draws])
    goal = np.array([glo + (ghi - glo) * u[1] for u in draws])
    return PhysicsState(
        gripper_pos=np.tile(np.array(params.gripper_start, float), (b, 1)),
        gripper_vel=np.zeros((b, 2)),
        object_pos=np.stack([ox, np.zeros(b)], axis=1),
        object_vel=np.zeros((b, 2)),
        grasped=np.zeros(b, bool),
        goal_height=goal,
        prev_action=np.zeros((b, 3)),
        slip=np.zeros(b),
        grip_age=np.zeros(b, int),
        t=0,
    )


def clamp_action(action) -> np.ndarray:
    a = np.asarray(action, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite action")
    return np.clip(a, -1.0, 1.0)


def step(state: PhysicsState, action, config: PerturbationConfig,
         params: PlantParams = PlantParams(), disturbance=None) -> PhysicsState:
    """Advance one semi-implicit Euler step (velocities first, then positions).

    ``disturbance`` is an optional ``(B, 2)`` external force on the gripper;
    callers that use one draw it from their own per-episode stream.
    """
    a = clamp_action(np.broadcast_to(action, (len(state), ACT_DIM)))
    dt = params.dt
    force = params.f_max * a[:, :2]
    if disturbance is not None:
        force = force + disturbance
    grasp_cmd = a[:, 2]
    m_obj = config.mass_mult * params.m_object
    offset = np.asarray(params.grip_offset)

    grasped = state.grasped.copy()
    gp, gv = state.gripper_pos.copy(), state.gripper_vel.copy()
    op, ov = state.object_pos.copy(), state.object_vel.copy()
    slip = state.slip.copy()

    # grasp acquisition / release
    dist = np.linalg.norm(op - (gp + offset), axis=1)
    # fingers close once, on the step the command turns positive
    closing = (grasp_cmd > 0.5) & (state.prev_action[:, 2] <= 0.0)
    close = ~grasped & closing & (dist <= params.grasp_radius)
    if close.any():
        m_tot = params.m_gripper + m_obj
        v = (params.m_gripper * gv[close] + m_obj * ov[close]) / m_tot
        gv[close] = v
        ov[close] = v
        op[close] = gp[close] + offset
        slip[close] = 0.0
    # a fresh grasp must keep a firm command while it seats
    unseated = grasped & (state.grip_age < params.settle_steps) & (grasp_cmd <= 0.5)
    grasped &= ~unseated
    grasped |= close
    grasped &= ~(grasp_cmd < -0.5)

    # gripper (free or carrying the object)
    held = grasped
    free = ~held
    acc = np.zeros_like(gv)
    acc[free] = force[free] / params.m_gripper
    if held.any():
        m_tot = params.m_gripper + m_obj
        f_held = force[held] + np.array([0.0, -m_obj * G])
        acc[held] = f_held / m_tot
        # grip load: force the fingers must exert on the object
        load = m_obj * np.linalg.norm(acc[held] + np.array([0.0, G]), axis=1)
        over = np.maximum(load - params.grip_strength, 0.0)
        slip[held] = slip[held] + over * dt
    gv = gv + acc * dt
    gp = gp + gv * dt
    floor = gp[:, 1] < 0.0
    gp[floor, 1] = 0.0
    gv[floor, 1] = np.maximum(gv[floor, 1], 0.0)

    # object
    dropped = held & (slip > params.slip_limit)
    carry = held & ~dropped
    op[carry] = gp[carry] + offset
    ov[carry] = gv[carry]
    loose = ~carry
    if dropped.any():
        ov[dropped] = gv[dropped]
    if loose.any():
        on_ground = loose & (op[:, 1] <= 0.0) & (ov[:, 1] <= 0.0)
        air = loose & ~on_ground
        ov[air, 1] -= G * dt
        if on_ground.any():
            ov[on_ground, 1] = 0.0
            dv = params.mu_ground * config.friction_mult * G * dt
            vx = ov[on_ground, 0]
            ov[on_ground, 0] = np.sign(vx) * np.maximum(np.abs(vx) - dv, 0.0)
        op[loose] = op[loose] + ov[loose] * dt
        land = loose & (op[:, 1] < 0.0)
        op[land, 1] = 0.0
        ov[land, 1] = 0.0
    grasped = carry
    slip = np.where(grasped, slip, 0.0)
    age = np.where(close, 0, state.grip_age + 1)
    age = np.where(grasped, age, 0)

    new = PhysicsState(gp, gv, op, ov, grasped, state.goal_height.copy(), a.copy(),
                       slip, age, state.t + 1)
    if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(gv))
            and np.all(np.isfinite(op)) and np.all(np.isfinite(ov))):
        raise SimulationDivergedError(f"non-finite state at t={new.t}")
    return new


def draw_disturbance(params: PlantParams, rngs) -> np.ndarray | None:
    """Process force noise for one step, one row per episode stream (None when off)."""
    if params.disturbance_std <= 0.0:
        return None
    return np.stack([g.standard_normal(2) for g in rngs]) * params.disturbance_std


def physics_readout(state: PhysicsState) -> np.ndarray:
    """Noiseless observation vector(s), shape (B, 10)."""
    return np.concatenate([state.gripper_pos, state.gripper_vel, state.object_pos,
                           state.goal_height[:, None], state.prev_action], axis=1)


def _draw_noise(config: PerturbationConfig, rngs, n: int = 1) -> np.ndarray:
    std = config.noise_std
    b = len(rngs)
    eps = np.zeros((n, b, OBS_DIM))
    if not config.is_noisy:
        return eps
    idx = np.flatnonzero(std)
    for i, g in enumerate(rngs):
        eps[:, i, idx] = g.standard_normal((n, idx.size)) * std[idx]
    return eps


def _as_rngs(rng, b: int):
    if isinstance(rng, np.random.Generator):
        if b != 1:
            raise ValueError("a single Generator can only drive a batch of one")
        return [rng]
    rngs = list(rng)
    if len(rngs) != b:
        raise ValueError(f"need {b} generators, got {len(rngs)}")
    return rngs


def observe(state: PhysicsState, config: PerturbationConfig, rng) -> np.ndarray:
    """Sensor stage: physics readout plus N(0, sigma_group^2) per sensed component.

    ``rng`` is a Generator (batch of one) or one Generator per batch row. With
    zero sigma nothing is drawn, so noiseless runs consume no randomness.
    """
    rngs = _as_rngs(rng, len(state))
    return physics_readout(state) + _draw_noise(config, rngs)[0]


def resample_observation(state: PhysicsState, config: PerturbationConfig, rng,
                         n: int = 5) -> np.ndarray:
    """Average of ``n`` independent sensor draws from the same physics state."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rngs = _as_rngs(rng, len(state))
    eps = _draw_noise(config, rngs, n)
    return physics_readout(state) + eps.mean(axis=0)


def is_success(state: PhysicsState, params: PlantParams = PlantParams()) -> np.ndarray:
    return state.grasped & (state.object_pos[:, 1] >= params.success_height)


def is_lost(state: PhysicsState) -> np.ndarray:
    """Fingers closed on nothing. Closed fingers cannot re-acquire, so this is terminal."""
    return ~state.grasped & (state.prev_action[:, 2] > 0.0)


def read_mapping(path) -> dict:
    """Parse a ``.toml`` file with tomllib, anything else as JSON."""
    path = str(path)
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


def load_config(path) -> PerturbationConfig:
    """Read a PerturbationConfig from a JSON or TOML file (top level or [perturbation])."""
    d = read_mapping(path)
    return PerturbationConfig.from_dict(d.get("perturbation", d))


def with_params(params: PlantParams, **kw) -> PlantParams:
    return replace(params, **kw)
