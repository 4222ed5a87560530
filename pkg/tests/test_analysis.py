import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from needletrack import geometry as geo
from needletrack.analysis import (Gmm, InsufficientPoints, UNIT_SCALE, ashman_d, assign_component,
                                  axis_errors, bic, classify_modality, classify_points, decide, fit_gmm,
                                  interval_score, marginal, n_parameters, nll_score, pose_error,
                                  posterior_nll, tangent_coordinates)
from needletrack.errors import CoincidentMeans, InvalidInterval, NonPositiveSigma

from conftest import random_pose


def _nll_ref(e, s):
    return math.log(math.sqrt(2 * math.pi) * s) + e * e / (2 * s * s)


def _is_ref(e, lo, hi, a):
    pen = 0.0
    if e < lo:
        pen = 2 / a * (lo - e)
    elif e > hi:
        pen = 2 / a * (e - hi)
    return (hi - lo) + pen


def test_scores_match_scalar_reimplementation(rng):
    e = rng.normal(size=1000) * 3
    s = rng.uniform(0.01, 5, size=1000)
    lo = rng.normal(size=1000)
    hi = lo + rng.uniform(0, 3, size=1000)
    ours = nll_score(e, s)
    ref = np.array([_nll_ref(*z) for z in zip(e, s)])
    assert np.max(np.abs(ours - ref) / np.maximum(1, np.abs(ref))) < 1e-12
    ours = interval_score(e, lo, hi)
    ref = np.array([_is_ref(a, b, c, 0.05) for a, b, c in zip(e, lo, hi)])
    assert np.max(np.abs(ours - ref) / np.maximum(1, np.abs(ref))) < 1e-12


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(0, 1e3), st.floats(0.01, 0.5))
def test_interval_score_properties(e, lo, width, alpha):
    hi = lo + width
    s = interval_score(e, lo, hi, alpha)
    assert s >= hi - lo
    if lo <= e <= hi:
        assert s == hi - lo
    # the penalty grows with the distance outside the interval
    assert interval_score(hi + 1.0, lo, hi, alpha) < interval_score(hi + 2.0, lo, hi, alpha)


def test_score_errors():
    with pytest.raises(NonPositiveSigma):
        nll_score(0.1, 0.0)
    with pytest.raises(InvalidInterval):
        interval_score(0.0, 1.0, 0.5)
    assert interval_score(0.5, 0.0, 1.0) == 1.0


def test_pose_and_axis_errors(rng):
    T = random_pose(rng)
    xi = np.array([1e-3, -2e-3, 5e-4, 0.1, -0.05, 0.2])
    T2 = geo.exp_se3(xi) @ T
    e_t, e_r = pose_error(T2, T)
    et, er = axis_errors(T2, T)
    assert abs(np.linalg.norm(et) - e_t) < 1e-12
    assert abs(np.linalg.norm(er) - e_r) < 1e-9
    assert abs(e_r - np.linalg.norm(xi[3:])) < 1e-9


def test_ashman_canonical_case():
    g = Gmm(np.array([[0.0] * 6, [2.0] + [0.0] * 5]), np.stack([np.eye(6)] * 2), np.array([0.5, 0.5]), 0.0)
    assert abs(ashman_d(g) - 2.0) < 1e-12
    with pytest.raises(CoincidentMeans):
        ashman_d(Gmm(np.zeros((2, 6)), np.stack([np.eye(6)] * 2), np.array([0.5, 0.5]), 0.0))


def test_parameter_count():
    assert n_parameters(1) == 27 and n_parameters(2) == 55


def _two_blobs(rng, n=400, sep=8.0, w=0.3):
    m = int(n * w)
    A = rng.normal(size=(m, 6))
    B = rng.normal(size=(n - m, 6)) * 0.7
    B[:, 0] += sep
    return np.vstack([A, B])


def test_gmm_recovers_components(rng):
    X = _two_blobs(rng)
    g = fit_gmm(X, 2)
    assert np.allclose(sorted(g.weights), [0.3, 0.7], atol=0.02)
    assert abs(g.means[0, 0]) < 0.3 and abs(g.means[1, 0] - 8) < 0.3
    assert np.allclose(np.diag(g.covariances[1]), 0.49, atol=0.15)


def test_em_is_monotone(rng):
    X = _two_blobs(rng, sep=3.0, w=0.45)
    _, hist = fit_gmm(X, 2, return_history=True)
    assert np.all(np.diff(hist) >= -1e-9 * (1 + np.abs(hist[:-1])))


def test_fit_is_permutation_invariant(rng):
    X = _two_blobs(rng, sep=5.0)
    g1 = fit_gmm(X, 2)
    g2 = fit_gmm(X[rng.permutation(len(X))], 2)
    assert np.allclose(g1.means, g2.means) and np.isclose(g1.log_lik, g2.log_lik)


def test_bic_matches_definition(rng):
    X = rng.normal(size=(50, 6))
    g = fit_gmm(X, 1)
    ll = np.sum([-0.5 * (x - g.means[0]) @ np.linalg.solve(g.covariances[0], x - g.means[0])
                 - 0.5 * np.log(np.linalg.det(2 * np.pi * g.covariances[0])) for x in X])
    assert np.isclose(g.log_lik, ll)
    assert np.isclose(bic(g, X), -2 * ll + 27 * np.log(50))


def test_bic_false_positive_rate_low():
    hits = 0
    for s in range(40):
        X = np.random.default_rng(s).normal(size=(300, 6))
        hits += classify_points(X).bimodal
    assert hits <= 2


def test_bic_detects_separated_modes():
    hits = sum(classify_points(_two_blobs(np.random.default_rng(s))).bimodal for s in range(20))
    assert hits == 20


def test_minor_weight_rule():
    assert decide(10.0, 5.0, 3.0, 0.10) == "bimodal"
    assert decide(10.0, 5.0, 3.0, 0.09) == "unimodal"
    assert decide(10.0, 5.0, 2.0, 0.5) == "unimodal"
    assert decide(5.0, 10.0, 3.0, 0.5) == "unimodal"


def test_gt_dominance_and_component_swap(rng):
    X = _two_blobs(rng, w=0.3)
    v = classify_points(X, gt=np.array([8.0] + [0.0] * 5))
    assert v.bimodal and v.gt_in_dominant is True
    v = classify_points(X, gt=np.zeros(6))
    assert v.gt_in_dominant is False
    g = v.gmm
    swapped = Gmm(g.means[::-1], g.covariances[::-1], g.weights[::-1], g.log_lik)
    for x in (np.zeros(6), np.full(6, 4.0), np.array([8.0] + [0.0] * 5)):
        assert assign_component(g, x) == 1 - assign_component(swapped, x)


def test_insufficient_points():
    with pytest.raises(InsufficientPoints):
        fit_gmm(np.zeros((5, 6)), 1)


def test_tangent_coordinates_and_marginals(rng):
    T = random_pose(rng)
    xi = rng.normal(size=(30, 6)) * UNIT_SCALE
    poses = [T @ geo.exp_se3(x) for x in xi]
    R = np.array([p.rotation for p in poses])
    t = np.array([p.translation for p in poses])
    assert np.allclose(tangent_coordinates(R, t, T), xi / UNIT_SCALE, atol=1e-9)
    g = fit_gmm(xi / UNIT_SCALE, 1)
    nt, nr = posterior_nll(g, np.zeros(6))
    mt = marginal(g, [0, 1, 2])
    C = mt.covariances[0]
    ref = 0.5 * mt.means[0] @ np.linalg.solve(C, mt.means[0]) + 0.5 * np.log(np.linalg.det(2 * np.pi * C))
    assert np.isclose(nt, ref) and np.isfinite(nr)


def test_classify_modality_mirror_cloud(rng):
    T = random_pose(rng)
    a = rng.normal(size=(150, 6)) * UNIT_SCALE * 0.3
    b = rng.normal(size=(150, 6)) * UNIT_SCALE * 0.3
    b[:, 3] += np.deg2rad(30)
    xs = np.vstack([a, b])
    poses = [T @ geo.exp_se3(x) for x in xs]
    v = classify_modality(np.array([p.rotation for p in poses]), np.array([p.translation for p in poses]),
                          T, gt_pose=T)
    assert v.bimodal and v.minor_weight > 0.4
