import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from needletrack.pf import (AllZeroWeights, PfConfig, PfState, PfTracker, ess, normalize_log,
                            pf_predict, pf_step, pf_update, systematic_resample)
from needletrack.residuals import Observation
from needletrack.synth import TrajectorySpec, generate

from conftest import random_pose


@given(arrays(np.float64, st.integers(2, 60), elements=st.floats(1e-6, 1.0)),
       st.integers(0, 2**31 - 1))
def test_systematic_counts_within_floor_ceil(raw, seed):
    w = raw / raw.sum()
    n = len(w)
    idx = systematic_resample(w, np.random.default_rng(seed))
    counts = np.bincount(idx, minlength=n)
    assert len(idx) == n and counts.sum() == n
    assert np.all(counts >= np.floor(n * w) - 1e-9) and np.all(counts <= np.ceil(n * w) + 1e-9)


def test_systematic_point_mass():
    w = np.zeros(7)
    w[3] = 1.0
    assert np.all(systematic_resample(w, np.random.default_rng(0)) == 3)


def test_ess_limits():
    assert np.isclose(ess(np.full(40, 1 / 40)), 40)
    assert np.isclose(ess(np.eye(1, 40)[0]), 1)


def test_update_matches_linear_oracle(rng):
    w0 = rng.dirichlet(np.ones(10))
    nll = rng.uniform(0, 5, size=10)
    ref = w0 * np.exp(-nll)
    ref /= ref.sum()
    assert np.allclose(np.exp(pf_update(np.log(w0), nll)), ref, rtol=1e-12)


def test_update_survives_underflow():
    # linear weights would all be exactly zero here
    nll = np.array([2000.0, 2001.0, np.inf])
    w = np.exp(pf_update(np.log(np.full(3, 1 / 3)), nll))
    assert np.allclose(w, [1 / (1 + np.e**-1), np.e**-1 / (1 + np.e**-1), 0.0])


def test_all_non_finite_warns_and_resets():
    with pytest.warns(AllZeroWeights):
        lw = pf_update(np.log(np.full(4, 0.25)), np.full(4, np.inf))
    assert np.allclose(np.exp(lw), 0.25)


def test_normalize_log():
    lw = normalize_log(np.array([0.0, np.log(3.0)]))
    assert np.allclose(np.exp(lw), [0.25, 0.75])


def test_predict_zero_walk_applies_twist(rng):
    from needletrack import geometry as geo
    T = random_pose(rng)
    cfg = PfConfig(n_particles=2, rw_sigma_t=0.0, rw_sigma_r=0.0)
    tw = np.array([1e-3, 0, 0, 0, 0, 0.02])
    R, t = pf_predict(T.rotation[None], T.translation[None], tw, cfg, rng)
    ref = geo.exp_se3(tw) @ T
    assert np.allclose(R[0], ref.rotation) and np.allclose(t[0], ref.translation)


def test_random_walk_scale(rng):
    cfg = PfConfig(n_particles=4000)
    R0 = np.broadcast_to(np.eye(3), (4000, 3, 3))
    t0 = np.zeros((4000, 3))
    _, t = pf_predict(R0, t0, None, cfg, rng)
    assert np.allclose(t.std(0), 1e-3, rtol=0.06)


def test_empty_frame_leaves_weights(intr, model, calib):
    frames = generate(TrajectorySpec(kind="slow", n_frames=3, seed=1), intr, model, calib)
    tr = PfTracker(intr, model, calib, PfConfig(n_particles=200, seed=3))
    tr.step(frames[0].observation)
    before = tr.state.log_w.copy()
    res = tr.step(Observation(timestamp=frames[1].observation.timestamp))
    assert res.stop_reason == "no_terms"
    assert np.array_equal(tr.state.log_w, before)


def test_step_resamples_on_low_ess(rng):
    R = np.broadcast_to(np.eye(3), (50, 3, 3)).copy()
    t = np.zeros((50, 3))
    st_ = PfState(R, t, np.full(50, -np.log(50)))

    class Peaked:
        def nll(self, R, t):
            return 1e3 * np.sum(t**2, axis=1) / 1e-6

    new, summary, weighted, res = pf_step(st_, Peaked(), None, PfConfig(n_particles=50), rng)
    assert res and np.allclose(new.weights, 1 / 50)
    assert np.isclose(np.exp(weighted.log_post).sum(), 1.0)


def test_tracker_deterministic(intr, model, calib):
    frames = generate(TrajectorySpec(kind="slow", n_frames=5, seed=0), intr, model, calib)
    out = []
    for _ in range(2):
        tr = PfTracker(intr, model, calib, PfConfig(n_particles=300, seed=9))
        out.append([tr.step(f.observation).summary.map_pose.matrix() for f in frames])
    assert all(np.array_equal(a, b) for a, b in zip(*out))
    assert tr.terms.motion_prior is False


def test_config_validation_roundtrip():
    cfg = PfConfig(n_particles=10)
    assert PfConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        PfConfig(ess_frac=0.0)
    with pytest.raises(ValueError):
        PfConfig(n_particles=1)
