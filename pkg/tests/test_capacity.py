import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uqdecomp import capacity as K
from uqdecomp import mlp
from uqdecomp.stats import derive_seed, pearson

QP = K.QualityParams()
RP = K.RewardParams()


# ---------------------------------------------------------------- ladder and quality

def test_ladder_invariants():
    tiers = K.ladder()
    assert [t.param_count for t in tiers] == [3.2, 11.2, 25.9, 43.7, 68.2]
    for d in np.linspace(0, 1, 21):
        q = [t.base_quality(d, 0.0, QP) for t in tiers]
        assert all(b >= a for a, b in zip(q, q[1:]))


def test_quality_examples():
    for k in range(K.N_TIERS):
        assert K.frame_quality(k, 0.0, 0.0) == pytest.approx(QP.q_max[k])
    assert K.frame_quality(4, 1.0, 0.0) - K.frame_quality(0, 1.0, 0.0) > 0.2
    # noise costs every tier the same amount
    drops = [K.frame_quality(k, 0.2, 0.0) - K.frame_quality(k, 0.2, 0.8) for k in range(5)]
    assert np.ptp(drops) < 1e-12
    with pytest.raises(ValueError):
        K.frame_quality(5, 0.0, 0.0)


def test_quality_noise_shared_and_clipped(rng):
    z = rng.standard_normal(200) * 100
    for k in range(5):
        q = K.frame_quality(k, 0.5, 0.5, noise=z)
        assert np.all((q >= 0) & (q <= 1))


# ---------------------------------------------------------------- savings

def test_savings_matches_loop_oracle(rng):
    tiers = rng.integers(0, 5, 500)
    total = 0.0
    for k in tiers:
        total += K.PARAM_COUNTS[k]
    assert K.savings(tiers) == pytest.approx(1 - total / (len(tiers) * 68.2), abs=1e-14)
    assert K.savings([4] * 10) == 0.0
    assert K.savings([0] * 10) == pytest.approx(1 - 3.2 / 68.2)
    with pytest.raises(ValueError):
        K.savings([])


# ---------------------------------------------------------------- stream

def test_stream_determinism_and_independent_latents():
    spec = K.StreamSpec()
    a, b = K.generate_stream(spec, 5), K.generate_stream(spec, 5)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.difficulty, b.difficulty)
    assert np.all((a.difficulty >= 0) & (a.difficulty <= 1))
    assert np.all((a.noise >= 0) & (a.noise <= 1))
    # the difficulty process does not depend on the noise settings
    c = K.generate_stream(K.StreamSpec(noise_density=0.05), 5)
    assert np.array_equal(a.difficulty, c.difficulty)
    nom = K.generate_stream(spec, 5, length=300, nominal=True)
    assert not nom.difficulty.any() and not nom.noise.any() and len(nom) == 300
    with pytest.raises(ValueError):
        K.generate_stream(spec, 0, length=1)


def test_mixing_matrix_orthogonal_columns():
    w = K.mixing_matrix(7)
    np.testing.assert_allclose(w.T @ w, (10 / 3) * np.eye(3), atol=1e-12)


def test_quality_table_shape():
    s = K.generate_stream(K.StreamSpec(), 1, length=50)
    q = s.quality_table()
    assert q.shape == (50, 5)
    np.testing.assert_allclose(q[:, 2], K.frame_quality(2, s.difficulty, s.noise, noise=s.quality_noise))


# ---------------------------------------------------------------- selector mechanics

def test_q_update_examples():
    t = np.zeros((2, 3))
    K.q_update(t, 0, 1, 2.5, 1, lr=1.0, gamma=0.0)
    assert t[0, 1] == 2.5
    t = np.zeros((2, 3))
    t[1] = [0.0, 4.0, 1.0]
    for _ in range(500):
        K.q_update(t, 0, 2, 1.0, 1, lr=0.1, gamma=0.5)
    assert t[0, 2] == pytest.approx(1.0 + 0.5 * 4.0, abs=1e-9)
    with pytest.raises(ValueError):
        K.q_update(t, 0, 0, 0.0, 1, lr=0.0, gamma=0.5)
    with pytest.raises(ValueError):
        K.q_update(t, 0, 0, 0.0, 1, lr=0.5, gamma=1.0)


def test_q_learning_two_state_chain_vs_value_iteration():
    # action 0 stays, action 1 switches; rewards r[s, a]
    r = np.array([[0.0, 1.0], [2.0, -1.0]])
    nxt = np.array([[0, 1], [1, 0]])
    gamma = 0.8
    v = np.zeros(2)
    for _ in range(2000):
        v = np.max(r + gamma * v[nxt], axis=1)
    q_star = r + gamma * v[nxt]
    q = np.zeros((2, 2))
    for _ in range(3000):
        for s in range(2):
            for a in range(2):
                K.q_update(q, s, a, r[s, a], nxt[s, a], lr=0.5, gamma=gamma)
    np.testing.assert_allclose(q, q_star, atol=1e-3)


def test_select_tier_examples():
    table = np.zeros((K.n_states(K.DECOMPOSED), 3))
    table[:, K.STAY] = 1.0
    tier = 2
    for s in range(0, table.shape[0], 7):
        a, tier = K.select_tier(table, s, tier, 0.0)
        assert a == K.STAY and tier == 2
    assert K.apply_action(4, K.UP) == 4 and K.apply_action(0, K.DOWN) == 0
    assert K.greedy_action(np.zeros(3)) == K.STAY
    # exploration draws every action eventually
    rng = np.random.default_rng(0)
    seen = {K.select_tier(table, 0, 2, 1.0, rng)[0] for _ in range(100)}
    assert seen == {K.DOWN, K.STAY, K.UP}


def test_reward_examples():
    assert K.reward(K.STAY, 0.85, 0, 0.0) == pytest.approx(-RP.c_cap * 3.2 / 68.2)
    helped = K.reward(K.UP, 0.9, 3, -0.2)
    not_helped = K.reward(K.UP, 0.9, 3, 0.1)
    assert helped > not_helped
    assert K.reward(K.DOWN, RP.q_keep, 1, 0.0) == pytest.approx(-RP.c_cap * 11.2 / 68.2 + RP.c_down)
    assert K.reward(K.STAY, RP.q_min - 0.01, 1, 0.0) == pytest.approx(-RP.c_cap * 11.2 / 68.2 - RP.c_fail)


def test_state_encoding_is_a_bijection():
    track = K.SignalTrack(K.DECOMPOSED, np.array([0.5, 1.5, 3.0]), np.array([0.2, 2.5, 0.1]))
    seen = set()
    for tier in range(5):
        for t in range(3):
            for q in (0.5, 0.95):
                s = K.encode_state(K.DECOMPOSED, tier, track, t, q, RP)
                assert 0 <= s < K.n_states(K.DECOMPOSED)
                seen.add((tier, t, q, s))
    assert len({x[3] for x in seen}) == len(seen)
    assert K.signal_bin(1.0, 1.0) == 0 and K.signal_bin(1.5, 1.0) == 1 and K.signal_bin(2.01, 1.0) == 2
    with pytest.raises(ValueError):
        K.n_states("bogus")


def test_oracle_schedule_beats_always_xlarge():
    spec = K.StreamSpec(shift_density=0.0035)
    stream = next(s for s in (K.generate_stream(spec, i) for i in range(200))
                  if 0.07 <= np.mean(s.difficulty > 0) <= 0.13)
    qtab = stream.quality_table()
    track = K.SignalTrack(K.DECOMPOSED, np.zeros(len(stream)), np.zeros(len(stream)))
    oracle = K.oracle_schedule(stream)
    xl = np.full(len(stream), 4)
    assert K.schedule_return(xl, track, qtab) < K.schedule_return(oracle, track, qtab)


def test_training_deterministic_and_finite():
    spec = K.StreamSpec(length=300)
    tracks, qtabs = [], []
    for i in range(3):
        s = K.generate_stream(spec, i)
        r = np.random.default_rng(i)
        tracks.append(K.SignalTrack(K.DECOMPOSED, r.exponential(size=300), r.exponential(size=300)))
        qtabs.append(s.quality_table())
    cfg = K.SelectorConfig(episodes=4)
    a = K.train_selector(K.DECOMPOSED, tracks, qtabs, cfg)
    b = K.train_selector(K.DECOMPOSED, tracks, qtabs, cfg)
    assert np.array_equal(a, b) and np.all(np.isfinite(a))
    online = K.train_selector(K.DECOMPOSED, tracks, qtabs, cfg, synchronous=False)
    assert np.all(np.isfinite(online)) and online.shape == a.shape
    with pytest.raises(ValueError):
        K.train_selector(K.DECOMPOSED, [], [], cfg)


# ---------------------------------------------------------------- estimators on streams

@pytest.fixture(scope="module")
def estimators():
    spec = K.StreamSpec()
    prefix = K.generate_stream(spec, 99, 3000, nominal=True)
    return prefix, K.fit_stream_estimators(prefix.features, spec, 0, k=5,
                                           train_cfg=mlp.TrainConfig(epochs=100))


def test_calibration_prefix_quiet(estimators):
    prefix, est = estimators
    sa, se = K.stream_uncertainties(prefix, est)
    quiet = (sa <= est.alea.tau) & (se <= est.ens.tau)
    assert quiet.mean() >= 0.94


def test_segment_trigger_rates(estimators):
    _, est = estimators
    rates = {"burst": [], "shift": []}
    for i in range(6):
        s = K.generate_stream(K.StreamSpec(), derive_seed(5, i))
        sa, se = K.stream_uncertainties(s, est)
        r = K.segment_rates(s, sa, se, est)
        for key in rates:
            if r[f"{key}_frames"]:
                rates[key].append((r[f"{key}_frames"], *r[key]))
    def pooled(rows, i):
        n = sum(r[0] for r in rows)
        return sum(r[0] * r[i] for r in rows) / n
    assert pooled(rates["burst"], 1) > 0.5 and pooled(rates["burst"], 2) < 0.10
    assert pooled(rates["shift"], 2) > 0.3 and pooled(rates["shift"], 1) < 0.15


def test_uncalibrated_estimators_raise(estimators):
    prefix, est = estimators
    bad = K.StreamEstimators(est.alea, est.ens.with_threshold(None))
    with pytest.raises(K.ConfigurationError):
        K.stream_uncertainties(prefix, bad)


def test_estimators_round_trip(estimators):
    prefix, est = estimators
    back = K.StreamEstimators.from_dict(json.loads(json.dumps(est.to_dict())))
    a, b = K.stream_uncertainties(prefix, est), K.stream_uncertainties(prefix, back)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-12)
    assert np.array_equal(a[1], b[1])


# ---------------------------------------------------------------- trained study

def test_fixed_baselines(tracking_study):
    nano = tracking_study.by_selector(K.fixed_name(0))
    xl = tracking_study.by_selector(K.fixed_name(4))
    assert all(r.savings == pytest.approx(1 - 3.2 / 68.2) for r in nano)
    assert all(r.savings == 0.0 and r.switches == 0 for r in xl)
    assert np.mean([r.mean_quality for r in nano]) < np.mean([r.mean_quality for r in xl]) - 0.1


def test_switch_sparsity(tracking_study):
    s = tracking_study.summary()[K.DECOMPOSED]
    assert s["switches_per_100"] < 10


def test_signal_independence(tracking_study):
    assert abs(K.stream_signal_correlation(tracking_study)) < 0.25


def test_up_given_epis_vs_alea(tracking_study):
    ratio = tracking_study.escalation_asymmetry(K.DECOMPOSED)
    assert ratio >= 2.0


def test_occupancy_and_report_csv(tracking_study):
    for r in tracking_study.reports:
        assert sum(r.occupancy) == pytest.approx(1.0)
    text = K.reports_to_csv(tracking_study.reports)
    header = text.splitlines()[0].split(",")
    assert header == list(K.REPORT_COLUMNS)
    assert len(text.splitlines()) == len(tracking_study.reports) + 1


def test_cached_tables_reproduce(tracking_study):
    again = K.run_tracking_experiment(tracking_study.config, 0,
                                      estimators=tracking_study.estimators,
                                      tables=tracking_study.tables)
    assert K.reports_to_csv(again.reports) == K.reports_to_csv(tracking_study.reports)


def test_tracking_config_round_trip():
    cfg = K.TrackingConfig(eval_streams=3)
    back = K.TrackingConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    with pytest.raises(K.ConfigurationError):
        K.TrackingConfig.from_dict({"bogus": 1})
    with pytest.raises(K.ConfigurationError):
        K.TrackingConfig.from_dict({"reward": {"c_nope": 1}})


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=60))
def test_savings_bounds_property(tiers):
    s = K.savings(tiers)
    assert 0.0 <= s <= 1 - 3.2 / 68.2 + 1e-12
