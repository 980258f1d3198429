import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from uqdecomp import env as E

P = E.PlantParams()


def test_reset_deterministic_and_on_ground():
    a = E.reset(E.nominal(), 42)
    b = E.reset(E.nominal(), 42)
    for f in E._ARRAY_FIELDS:
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert a.object_pos[0, 1] == 0.0
    assert not a.grasped[0] and a.t == 0
    assert np.array_equal(a.gripper_pos[0], P.gripper_start)


def test_reset_x_uniform_ks():
    s = E.reset(E.nominal(), np.arange(1000))
    lo, hi = P.object_x_range
    x = (s.object_pos[:, 0] - lo) / (hi - lo)
    assert stats.kstest(x, "uniform").pvalue > 0.01


def test_reset_batch_matches_single():
    batch = E.reset(E.nominal(), [5, 6, 7])
    for i, s in enumerate([5, 6, 7]):
        one = E.reset(E.nominal(), s)
        assert np.array_equal(batch.object_pos[i], one.object_pos[0])
        assert batch.goal_height[i] == one.goal_height[0]


def test_zero_action_object_at_rest_unchanged():
    s = E.make_state((0.0, 0.15), (0.03, 0.0))
    n = E.step(s, np.zeros(3), E.nominal())
    assert np.array_equal(n.object_pos, s.object_pos)
    assert np.array_equal(n.object_vel, s.object_vel)


def test_falling_object_one_euler_step():
    # semi-implicit Euler: v -= g dt, then z += v dt, so z drops by g dt^2
    s = E.make_state((0.5, 0.15), (0.0, 1.0))
    n = E.step(s, np.zeros(3), E.nominal())
    assert n.object_pos[0, 1] == pytest.approx(1.0 - E.G * P.dt ** 2, abs=1e-15)
    assert n.object_vel[0, 1] == pytest.approx(-E.G * P.dt, abs=1e-15)


def test_step_deterministic():
    s = E.reset(E.nominal(), 3)
    a = np.array([0.3, -0.2, 0.0])
    n1, n2 = E.step(s, a, E.nominal()), E.step(s, a, E.nominal())
    for f in E._ARRAY_FIELDS:
        assert np.array_equal(getattr(n1, f), getattr(n2, f))


def test_grasp_within_radius_and_success_height():
    s = E.make_state((0.0, 0.02), (0.0, 0.0))
    n = E.step(s, np.array([0.0, 0.0, 1.0]), E.nominal())
    assert n.grasped[0]
    np.testing.assert_allclose(n.object_pos[0], n.gripper_pos[0] + np.array(P.grip_offset))
    far = E.make_state((0.0, 0.2), (0.0, 0.0))
    assert not E.step(far, np.array([0.0, 0.0, 1.0]), E.nominal()).grasped[0]


def test_is_success_examples():
    assert E.is_success(E.make_state((0, 0.27), (0, 0.25), grasped=True))[0]
    assert not E.is_success(E.make_state((0, 0.21), (0, 0.19), grasped=True))[0]
    assert not E.is_success(E.make_state((0, 0.5), (0, 0.3), grasped=False))[0]


def test_clamp_idempotent_and_non_finite():
    a = E.clamp_action([3.0, -2.0, 0.4])
    assert np.array_equal(E.clamp_action(a), a)
    assert np.array_equal(a, [1.0, -1.0, 0.4])
    with pytest.raises(ValueError):
        E.clamp_action([np.nan, 0, 0])


def test_diverged_state_raises():
    s = E.make_state((0.0, 0.15), (0.5, 0.0), gripper_vel=(np.inf, 0.0))
    with pytest.raises(E.SimulationDivergedError):
        E.step(s, np.zeros(3), E.nominal())


def test_nominal_observation_is_readout():
    s = E.reset(E.nominal(), 1)
    o = E.observe(s, E.nominal(), np.random.default_rng(0))
    assert np.array_equal(o, E.physics_readout(s))


def test_sensor_noise_moments_and_goal_untouched():
    s = E.reset(E.nominal(), 1)
    cfg = E.sensor()
    rngs = [np.random.default_rng([9, i]) for i in range(10_000)]
    many = E.PhysicsState(*(np.repeat(getattr(s, f), 10_000, axis=0) for f in E._ARRAY_FIELDS))
    o = E.observe(many, cfg, rngs)
    dev = o - E.physics_readout(s)
    for k, sl in E.SENSOR_GROUPS.items():
        std = dev[:, sl].std(axis=0)
        assert np.all(np.abs(std / E.DEFAULT_SENSOR_SIGMA[k] - 1) < 0.05)
    assert np.all(dev[:, E.GOAL_INDEX] == 0)
    assert np.all(dev[:, 7:] == 0)


def test_resample_variance_law():
    sigma = 0.05
    cfg = E.sensor({"gripper_pos": sigma, "gripper_vel": sigma, "object_pos": sigma})
    s = E.reset(E.nominal(), 2)
    rng = np.random.default_rng(77)
    rec = np.stack([E.resample_observation(s, cfg, rng, 5)[0] for _ in range(10_000)])
    var = rec[:, :6].var(axis=0)
    assert np.all(np.abs(var / (sigma ** 2 / 5) - 1) < 0.10)


def test_resample_zero_noise_and_n1():
    s = E.reset(E.nominal(), 2)
    assert np.array_equal(E.resample_observation(s, E.nominal(), np.random.default_rng(0), 7),
                          E.physics_readout(s))
    a = E.resample_observation(s, E.sensor(), np.random.default_rng(5), 1)
    b = E.observe(s, E.sensor(), np.random.default_rng(5))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        E.resample_observation(s, E.sensor(), np.random.default_rng(0), 0)


def test_sensor_perturbation_leaves_dynamics():
    actions = np.random.default_rng(0).uniform(-1, 1, (60, 3))
    a, b = E.reset(E.nominal(), 4), E.reset(E.sensor(), 4)
    for act in actions:
        a, b = E.step(a, act, E.nominal()), E.step(b, act, E.sensor())
        assert np.array_equal(E.physics_readout(a), E.physics_readout(b))


def test_dynamics_shift_leaves_observation():
    s = E.reset(E.nominal(), 4)
    o1 = E.observe(s, E.sensor(), np.random.default_rng(3))
    o2 = E.observe(s, E.compound(2.0, 0.5), np.random.default_rng(3))
    assert np.array_equal(o1, o2)


def test_heavier_object_lower_after_grasp():
    s = E.make_state((0.0, 0.02), (0.0, 0.0))
    lift = np.array([0.0, 0.6, 1.0])
    a, b = s, s
    for t in range(30):
        a = E.step(a, lift, E.nominal())
        b = E.step(b, lift, E.dynamics(2.0))
        if t > 0:
            assert b.object_pos[0, 1] < a.object_pos[0, 1]


def test_config_validation_and_file_loading(tmp_path):
    with pytest.raises(ValueError):
        E.PerturbationConfig({"gripper_pos": -1.0})
    with pytest.raises(ValueError):
        E.PerturbationConfig(mass_mult=0.0)
    with pytest.raises(ValueError):
        E.PerturbationConfig({"joint": 0.1})
    toml = tmp_path / "c.toml"
    toml.write_text('[perturbation]\nmass_mult = 1.5\nname = "heavy"\n'
                    '[perturbation.sensor_sigma]\nobject_pos = 0.05\n')
    c = E.load_config(toml)
    assert c.mass_mult == 1.5 and c.sensor_sigma["object_pos"] == 0.05 and c.name == "heavy"
    js = tmp_path / "c.json"
    js.write_text(json.dumps(E.sensor().to_dict()))
    assert E.load_config(js) == E.sensor()


@settings(max_examples=25, deadline=None)
@given(st.floats(0.01, 3.0), st.floats(0.1, 3.0), st.integers(0, 10_000))
def test_observe_independent_of_multipliers(m, f, seed):
    s = E.reset(E.nominal(), seed)
    base = E.observe(s, E.sensor(), np.random.default_rng(seed))
    shifted = E.observe(s, E.compound(m, f), np.random.default_rng(seed))
    assert np.array_equal(base, shifted)
