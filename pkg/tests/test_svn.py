import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from needletrack import geometry as geo
from needletrack.errors import ZeroHessian
from needletrack.residuals import FrameLikelihood, TermMask
from needletrack.svn import (ParticleSet, SvnConfig, SvnTracker, bandwidth, body_chart, extract_map,
                             floored_inverse, floored_spectrum, initialize, kernel, kernel_matrix,
                             predict, softmax, stein_velocity, summarize, svn_direction, transport,
                             weighted_quantile)
from needletrack.synth import TrajectorySpec, generate, render

from conftest import random_pose

S = np.array([1e-3] * 3 + [np.deg2rad(5.0)] * 3)


def _cloud(rng, n=12):
    return rng.normal(size=(n, 6)) * S


def test_kernel_gradient_fd(rng):
    X = _cloud(rng, 2)
    h = 0.7
    k, g = kernel(X[0], X[1], S, h)
    fd = np.zeros(6)
    for a in range(6):
        e = np.zeros(6)
        e[a] = 1e-9 * S[a]
        fd[a] = (kernel(X[0], X[1] + e, S, h)[0] - kernel(X[0], X[1] - e, S, h)[0]) / (2 * e[a])
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-8 * np.max(np.abs(fd)))


def test_kernel_matrix_matches_pairwise(rng):
    X = _cloud(rng, 7)
    K, G = kernel_matrix(X, S, 0.9)
    for j in range(7):
        for i in range(7):
            k, g = kernel(X[i], X[j], S, 0.9)
            assert np.isclose(K[j, i], k) and np.allclose(G[j, i], g)
    assert np.allclose(K, K.T) and np.allclose(np.diag(K), 1.0)


def test_bandwidth_brute_force(rng):
    X = _cloud(rng, 9)
    d = [np.sum(((X[i] - X[j]) / S) ** 2) for i in range(9) for j in range(i + 1, 9)]
    assert np.isclose(bandwidth(X, S, floor=False), np.median(d) / np.log(9))
    Q = np.diag([1.0] * 6) * 1e6                 # huge process noise: the floor wins
    assert np.isclose(bandwidth(X, S, Q), np.trace(Q / np.outer(S, S)) / 6)


def test_bandwidth_collapsed_cloud_uses_floor():
    X = np.zeros((5, 6))
    Q = np.diag([1e-8] * 3 + [1e-4] * 3)
    assert np.isclose(bandwidth(X, S, Q), np.trace(Q / np.outer(S, S)) / 6)
    assert bandwidth(X, S, floor=False) == 1.0


def test_stein_velocity_brute_force(rng):
    X = _cloud(rng, 6)
    g = rng.normal(size=(6, 6))
    h = 0.8
    ref = np.zeros_like(X)
    for i in range(6):
        for j in range(6):
            k, gk = kernel(X[i], X[j], S, h)
            ref[i] += k * g[j] + gk
    assert np.allclose(stein_velocity(X, g, S, h), ref / 6)


def test_direction_forms_brute_force(rng):
    X = _cloud(rng, 5)
    g = rng.normal(size=(5, 6))
    A = rng.normal(size=(5, 6, 6))
    Hinv = A @ np.swapaxes(A, 1, 2) + np.eye(6)
    h = 0.6
    lit = np.zeros_like(X)
    new = np.zeros_like(X)
    for i in range(5):
        kmass, rep = 0.0, np.zeros(6)
        for j in range(5):
            k, gk = kernel(X[i], X[j], S, h)
            lit[i] += k * Hinv[j] @ g[j] + Hinv[i] @ gk
            kmass += k
            rep += gk
        new[i] = Hinv[i] @ g[i] + Hinv[i] @ rep / kmass
    assert np.allclose(svn_direction(X, g, Hinv, S, h, "literal"), lit / 5)
    assert np.allclose(svn_direction(X, g, Hinv, S, h, "newton"), new)
    eye = np.broadcast_to(np.eye(6), (5, 6, 6))
    assert np.allclose(svn_direction(X, g, eye, S, h, "literal"), stein_velocity(X, g, S, h))
    with pytest.raises(ValueError):
        svn_direction(X, g, Hinv, S, h, "other")


@given(arrays(np.float64, 6, elements=st.floats(-12, 2)), st.sampled_from([1e-1, 1e-2, 1e-3]))
def test_floored_condition_number(logs, eps):
    rng = np.random.default_rng(0)
    V, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    H = V @ np.diag(10.0 ** logs) @ V.T
    w = floored_spectrum(H, eps)
    assert w[-1] / w[0] <= 1 / eps * (1 + 1e-9)
    Hinv = floored_inverse(H, eps)
    wi = np.linalg.eigvalsh(Hinv)
    assert wi[-1] / wi[0] <= 1 / eps * (1 + 1e-6)


def test_floored_inverse_oracle(rng):
    A = rng.normal(size=(6, 3))
    H = A @ A.T + np.diag([1e-9] * 6)             # rank 3 plus a whisker
    w, V = np.linalg.eigh(H)
    ref = V @ np.diag(1 / np.maximum(w, 1e-2 * w[-1])) @ V.T
    assert np.allclose(floored_inverse(H, 1e-2), ref)
    d = rng.uniform(0.1, 10, size=6)
    D = np.diag(d)
    ws, Vs = np.linalg.eigh(D @ H @ D)
    ref_s = D @ Vs @ np.diag(1 / np.maximum(ws, 1e-2 * ws[-1])) @ Vs.T @ D
    assert np.allclose(floored_inverse(H, 1e-2, d), ref_s)
    # full-rank H with eps small enough leaves the inverse untouched
    B = A @ A.T + np.eye(6)
    assert np.allclose(floored_inverse(B, 1e-6), np.linalg.inv(B))
    with pytest.raises(ZeroHessian):
        floored_inverse(np.zeros((6, 6)), 1e-2)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50), st.floats(0, 1))
def test_weighted_quantile_uniform_matches_numpy(vals, q):
    v = np.array(vals)
    assert np.isclose(weighted_quantile(v, np.ones(len(v)), q), np.quantile(v, q), atol=1e-9)


def test_weighted_quantile_monotone_and_example():
    v = np.arange(1, 101, dtype=float)
    assert np.isclose(weighted_quantile(v, np.ones(100), 0.95), 95.05)
    w = np.zeros(100)
    w[10] = 1.0
    assert weighted_quantile(v, w, 0.5) == 11.0


def test_summarize_body_frame(rng):
    T = random_pose(rng)
    xi = rng.normal(size=(40, 6)) * S
    xi[0] = 0.0
    poses = [T @ geo.exp_se3(x) for x in xi]
    ps = ParticleSet.from_poses(poses, log_post=-np.arange(40.0))
    assert np.allclose(extract_map(ps).matrix(), T.matrix())
    s = summarize(ps)
    c = xi - xi.mean(0)
    assert np.allclose(s.covariance, c.T @ c / 40, rtol=1e-6, atol=1e-14)
    rt = np.linalg.norm(xi[:, :3], axis=1)
    assert np.isclose(s.q95_trans, np.quantile(rt, 0.95))
    assert np.isclose(s.sigma_rot, np.sqrt(np.mean(np.sum(xi[:, 3:] ** 2, axis=1))))
    assert s.low_trans <= s.q95_trans <= s.upp_trans
    X = body_chart(ps.R, ps.t, T.rotation, T.translation)
    assert np.allclose(X, xi, atol=1e-12)


def test_softmax_stable():
    w = softmax(np.array([-1e6, -1e6 + 1.0, -np.inf]))
    assert np.isclose(w.sum(), 1.0) and w[2] == 0.0 and w[1] > w[0]


def test_predict_zero_noise_applies_twist(rng):
    ps = ParticleSet.from_poses([random_pose(rng) for _ in range(3)])
    tw = rng.normal(size=6) * 1e-3
    out = predict(ps, tw, np.zeros((6, 6)), rng)
    for k in range(3):
        ref = geo.exp_se3(tw) @ ps.poses[k]
        assert np.allclose(out.R[k], ref.rotation) and np.allclose(out.t[k], ref.translation)


def test_initialize_is_grasp_consistent(intr, model, calib, rng):
    T = random_pose(rng)
    obs = render(T, intr, model, calib, rng=rng)
    ps = initialize(obs, model, 30, rng, jitter=0.0)
    grasp = np.einsum("nij,j->ni", ps.R, model.grasp_point) + ps.t
    assert np.allclose(grasp, obs.grasp_pos, atol=1e-12)
    normals = ps.R[:, :, 2]
    assert np.allclose(np.abs(normals @ obs.grasper_axis), 1.0, atol=1e-9)


def test_transport_converges_on_one_frame(intr, model, calib, rng):
    T = random_pose(rng)
    obs = render(T, intr, model, calib, rng=rng)
    lik = FrameLikelihood(intr, model, obs, calib, TermMask(motion_prior=False))
    xi = rng.normal(size=(20, 6)) * np.array([5e-4] * 3 + [0.05] * 3)
    R, t = geo.left_perturb_batch(xi, np.broadcast_to(T.rotation, (20, 3, 3)),
                                  np.broadcast_to(T.translation, (20, 3)))
    ps = ParticleSet(R, t, np.zeros(20))
    out, info = transport(ps, lik, SvnConfig(n_particles=20), max_iters=30)
    assert info.best_nll < info.initial_best_nll
    gt_nll = lik.nll(T.rotation[None], T.translation[None])[0]
    assert info.best_nll <= gt_nll + 1e-6          # at least as good as the truth
    best = extract_map(out)
    assert np.linalg.norm(best.translation - T.translation) < 2e-3


def test_tracker_is_deterministic_and_coasts(intr, model, calib):
    frames = generate(TrajectorySpec(kind="slow", n_frames=6, seed=2), intr, model, calib)
    runs = []
    for _ in range(2):
        tr = SvnTracker(intr, model, calib, SvnConfig(n_particles=16, seed=4))
        out = [tr.step(f.observation) for f in frames[:4]]
        out.append(tr.coast(frames[4].observation, error="X"))
        runs.append(out)
    for a, b in zip(*runs):
        assert np.array_equal(a.particles.R, b.particles.R)
        assert np.array_equal(a.summary.map_pose.matrix(), b.summary.map_pose.matrix())
    assert runs[0][-1].stop_reason == "prediction_only" and runs[0][-1].error == "X"


def test_config_roundtrip_and_validation():
    cfg = SvnConfig(n_particles=10, form="literal")
    back = SvnConfig.from_dict(cfg.to_dict())
    assert back.n_particles == 10 and np.array_equal(back.process_noise_Q, cfg.process_noise_Q)
    assert np.array_equal(SvnConfig(svgd_mode=True).S, np.ones(6))
    with pytest.raises(ValueError):
        SvnConfig(eig_floor_eps=0.0)
    with pytest.raises(ValueError):
        SvnConfig(n_particles=0)


def test_kernel_and_bandwidth_hand_values():
    k, g = kernel(np.zeros(6), np.array([1.0, 1.0, 0, 0, 0, 0]), np.ones(6), 1.0)
    assert np.isclose(k, np.exp(-1.0)) and np.allclose(g, -np.exp(-1.0) * np.array([1.0, 1, 0, 0, 0, 0]))
    k, g = kernel(np.ones(6), np.ones(6), S, 0.3)
    assert k == 1.0 and np.all(g == 0)
    X = np.zeros((2, 6))
    X[1, 0] = 2.0
    assert np.isclose(bandwidth(X, np.ones(6), np.eye(6) * 1e-12), 4 / np.log(2), atol=1e-12)
    Q = np.diag([1e-8] * 3 + [1e-4] * 3)
    z = np.zeros((4, 6))
    assert np.isclose(bandwidth(z, S, 100 * Q), 100 * bandwidth(z, S, Q))
