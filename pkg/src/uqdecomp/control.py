"""Frozen scripted policy and the five corrective controller variants."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import env as E
from .aleatoric import AleatoricModel
from .epistemic import ConfigurationError, DynamicsEnsemble


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyParams:
    kp: float = 45.0
    kd: float = 6.0
    hover_z: float = 0.06
    x_tol: float = 0.04
    grasp_tol: float = 0.02
    hold_tol: float = math.inf
    lift_kp: float = 300.0
    lift_kd: float = 4.0
    grasp_level: float = 0.65
    f_max: float = E.PlantParams.f_max
    m_object: float = E.PlantParams.m_object
    grip_offset: tuple[float, float] = E.PlantParams.grip_offset


def frozen_policy(obs, params: PolicyParams = PolicyParams()) -> np.ndarray:
    """Three-phase PD controller: hover over the object, descend and close, lift.

    Pure function of the observation row(s). The gripper command of the
    previous action (part of the observation) tells whether the fingers were
    closed. The policy trusts that command: once it has issued a grip it
    lifts, whether or not the fingers actually caught the object.
    """
    o = np.atleast_2d(np.asarray(obs, dtype=float))
    gp, gv, op = o[:, 0:2], o[:, 2:4], o[:, 4:6]
    goal, prev_grip = o[:, E.GOAL_INDEX], o[:, 9]
    off = np.asarray(params.grip_offset)
    rel = op - (gp + off)
    dist = np.hypot(rel[:, 0], rel[:, 1])

    holding = (prev_grip > 0.0) & (dist < params.hold_tol)
    aligned = np.abs(rel[:, 0]) < params.x_tol
    hover = ~holding & ~aligned
    descend = ~holding & aligned

    target = np.empty_like(gp)
    target[:, 0] = np.where(holding, gp[:, 0], op[:, 0] - off[0])
    target[:, 1] = np.where(holding, goal, np.where(hover, params.hover_z, op[:, 1] - off[1]))
    kp = np.where(holding, params.lift_kp, params.kp)[:, None]
    kd = np.where(holding, params.lift_kd, params.kd)[:, None]
    force = kp * (target - gp) - kd * gv
    force[:, 1] += np.where(holding, params.m_object * E.G, 0.0)

    grip = np.where(holding | (descend & (dist < params.grasp_tol)), params.grasp_level, -1.0)
    a = np.empty((len(o), 3))
    a[:, :2] = force / params.f_max
    a[:, 2] = grip
    a = np.clip(a, -1.0, 1.0)
    return a[0] if np.ndim(obs) == 1 else a


def dampen(action, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * np.asarray(action, dtype=float)


class ControllerKind(str, enum.Enum):
    VANILLA = "vanilla"
    RECOVERY_ONLY = "recovery_only"
    DAMPEN_ONLY = "dampen_only"
    TOTAL_U = "total_u"
    DECOMPOSED = "decomposed"

    @property
    def needs_models(self) -> bool:
        return self in (ControllerKind.TOTAL_U, ControllerKind.DECOMPOSED)


ALL_KINDS = tuple(ControllerKind)


@dataclass(frozen=True)
class ControllerConfig:
    kind: ControllerKind = ControllerKind.DECOMPOSED
    alpha: float = 0.30
    n_resample: int = 5

    def __post_init__(self):
        object.__setattr__(self, "kind", ControllerKind(self.kind))
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInputError("alpha must lie in [0, 1]")
        if self.n_resample < 1:
            raise InvalidInputError("n_resample must be >= 1")


@dataclass
class StepDecision:
    """Per-row audit of one control step (every field has a leading batch axis)."""

    alea_fired: np.ndarray
    epis_fired: np.ndarray
    recovery_applied: np.ndarray
    dampen_applied: np.ndarray
    raw_action: np.ndarray
    final_action: np.ndarray
    raw_obs: np.ndarray
    used_obs: np.ndarray
    sigma_alea: np.ndarray
    sigma_epis: np.ndarray


def controller_step(ctrl: ControllerConfig, state: E.PhysicsState, config: E.PerturbationConfig,
                    alea: AleatoricModel | None, ens: DynamicsEnsemble | None,
                    prev_obs, prev_action, rngs,
                    policy_params: PolicyParams = PolicyParams()):
    """One closed-loop step for a batch of episodes.

    ``prev_obs``/``prev_action`` are the previous raw observation and applied
    action (``None`` on the first step, where the epistemic signal is defined
    as zero and never fires). Recovery swaps the observation before the policy
    runs; dampening scales the policy output afterwards. Returns
    ``(final_action, StepDecision)``.
    """
    kind = ctrl.kind
    if kind.needs_models and (alea is None or ens is None or ens.tau is None):
        raise ConfigurationError(f"{kind.value} needs a fitted aleatoric model and a calibrated ensemble")
    b = len(state)
    raw = E.observe(state, config, rngs)

    if alea is not None:
        s_alea = np.atleast_1d(alea.score(raw))
        alea_fired = s_alea > alea.tau
    else:
        s_alea = np.zeros(b)
        alea_fired = np.zeros(b, bool)
    if ens is not None and prev_obs is not None:
        s_epis = np.atleast_1d(ens.score(prev_obs, prev_action, raw))
        epis_fired = s_epis > ens.tau if ens.tau is not None else np.zeros(b, bool)
    else:
        s_epis = np.zeros(b)
        epis_fired = np.zeros(b, bool)

    if kind is ControllerKind.VANILLA:
        recover = damp = np.zeros(b, bool)
    elif kind is ControllerKind.RECOVERY_ONLY:
        recover, damp = np.ones(b, bool), np.zeros(b, bool)
    elif kind is ControllerKind.DAMPEN_ONLY:
        recover, damp = np.zeros(b, bool), np.ones(b, bool)
    elif kind is ControllerKind.TOTAL_U:
        recover = damp = alea_fired | epis_fired
    else:
        recover, damp = alea_fired.copy(), epis_fired.copy()

    used = raw.copy()
    if recover.any():
        idx = np.flatnonzero(recover)
        sub_rngs = [rngs[i] for i in idx]
        used[idx] = E.resample_observation(state.take(idx), config, sub_rngs, ctrl.n_resample)

    raw_action = frozen_policy(used, policy_params)
    final = raw_action.copy()
    if damp.any():
        final[damp] = dampen(raw_action[damp], ctrl.alpha)

    return final, StepDecision(alea_fired, epis_fired, recover.copy(), damp.copy(),
                               raw_action, final, raw, used, s_alea, s_epis)
