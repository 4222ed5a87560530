"""Evaluation: pose errors, scoring rules and the multimodality classifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .errors import CoincidentMeans, DegenerateFit, InsufficientPoints, InvalidInterval, NonPositiveSigma
from .geometry import Pose

JITTER = 1e-9
EM_TOL = 1e-8
EM_MAX_ITERS = 200
MIN_POINTS = 12
MIN_COMPONENT_MASS = 2.0
# one tangent-space unit is 1 mm of translation or 5 degrees of rotation
UNIT_SCALE = np.array([1e-3] * 3 + [np.deg2rad(5.0)] * 3)


def pose_error(T: Pose, T_gt: Pose) -> tuple[float, float]:
    e_t = float(np.linalg.norm(T.translation - T_gt.translation))
    c = 0.5 * (np.trace(T_gt.rotation.T @ T.rotation) - 1.0)
    return e_t, float(np.arccos(np.clip(c, -1.0, 1.0)))


def axis_errors(T: Pose, T_gt: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis absolute errors in the camera frame.

    Translation: ``|t - t_gt|`` componentwise, so the norm equals e_t.
    Rotation: components of the rotation vector of ``R R_gt^T``, so the
    norm equals e_r away from a half turn.
    """
    et = np.abs(T.translation - T_gt.translation)
    w = geo.log_so3_batch((T.rotation @ T_gt.rotation.T)[None], strict=False)[0]
    return et, np.abs(w)


def nll_score(err, sigma):
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise NonPositiveSigma("sigma must be positive")
    err = np.asarray(err, dtype=float)
    out = 0.5 * np.log(2 * np.pi * sigma**2) + err**2 / (2 * sigma**2)
    return float(out) if out.ndim == 0 else out


def interval_score(err, low, upp, alpha: float = 0.05):
    err, low, upp = (np.asarray(x, dtype=float) for x in (err, low, upp))
    if np.any(low > upp) or not 0 < alpha < 1:
        raise InvalidInterval("need low <= upp and alpha in (0, 1)")
    out = (upp - low) + (2 / alpha) * np.maximum(0.0, low - err) + (2 / alpha) * np.maximum(0.0, err - upp)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Gaussian mixtures


@dataclass
class Gmm:
    means: np.ndarray        # (k, d)
    covariances: np.ndarray  # (k, d, d)
    weights: np.ndarray      # (k,)
    log_lik: float
    n_iter: int = 0

    @property
    def k(self) -> int:
        return len(self.weights)

    def component_log_density(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.stack([_gauss_logpdf(X, m, C) for m, C in zip(self.means, self.covariances)], axis=1)

    def log_density(self, X) -> np.ndarray:
        lp = self.component_log_density(X) + np.log(self.weights)
        return _logsumexp(lp, axis=1)


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _gauss_logpdf(X, mean, cov):
    d = X.shape[1]
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, (X - mean).T)
    return -0.5 * np.sum(z**2, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * d * np.log(2 * np.pi)


def _mstep(X, resp):
    nk = resp.sum(axis=0)
    means = (resp.T @ X) / nk[:, None]
    covs = []
    for j in range(resp.shape[1]):
        d = X - means[j]
        C = (resp[:, j, None] * d).T @ d / nk[j]
        covs.append(0.5 * (C + C.T) + JITTER * np.eye(X.shape[1]))
    return means, np.array(covs), nk / len(X), nk


def _em(X, means, covs, weights):
    prev = -np.inf
    history = []
    for it in range(1, EM_MAX_ITERS + 1):
        lp = np.stack([_gauss_logpdf(X, m, C) for m, C in zip(means, covs)], axis=1) + np.log(weights)
        ll_i = _logsumexp(lp, axis=1)
        ll = float(ll_i.sum())
        history.append(ll)
        if ll < prev - 1e-9 * (1.0 + abs(prev)):
            raise DegenerateFit(f"EM log-likelihood decreased ({prev} -> {ll})")
        resp = np.exp(lp - ll_i[:, None])
        means, covs, weights, nk = _mstep(X, resp)
        if np.any(nk < MIN_COMPONENT_MASS):
            raise DegenerateFit("a mixture component holds less than two points of mass")
        if ll - prev < EM_TOL:
            break
        prev = ll
    # log-likelihood of the final parameters
    lp = np.stack([_gauss_logpdf(X, m, C) for m, C in zip(means, covs)], axis=1) + np.log(weights)
    ll = float(_logsumexp(lp, axis=1).sum())
    if ll < history[-1] - 1e-9 * (1.0 + abs(history[-1])):
        raise DegenerateFit("EM log-likelihood decreased on the final step")
    return Gmm(means, covs, weights, ll, it), history + [ll]


def fit_gmm(points, k: int, rng=None, restarts: int = 3, return_history: bool = False):
    """EM fit of a 1- or 2-component full-covariance mixture.

    Points are put in a canonical (lexicographic) order first so the
    result does not depend on the input order. The two-component fit
    starts from the farthest pair of points, then from ``restarts``
    random pairs, keeping the best log-likelihood.
    """
    X = np.asarray(points, dtype=float)
    n, d = X.shape
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    if n < MIN_POINTS:
        raise InsufficientPoints(f"need at least {MIN_POINTS} points, got {n}")
    X = X[np.lexsort(X.T[::-1])]
    if k == 1:
        mu = X.mean(axis=0)
        C = np.cov(X.T, bias=True).reshape(d, d) + JITTER * np.eye(d)
        ll = float(_gauss_logpdf(X, mu, C).sum())
        g = Gmm(mu[None], C[None], np.ones(1), ll, 0)
        return (g, [ll]) if return_history else g

    rng = np.random.default_rng(0) if rng is None else rng
    D2 = np.sum((X[:, None] - X[None]) ** 2, axis=-1)
    i, j = np.unravel_index(np.argmax(D2), D2.shape)
    seeds = [(i, j)] + [tuple(rng.choice(n, 2, replace=False)) for _ in range(restarts)]
    best, best_hist, last_err = None, None, None
    for a, b in seeds:
        if a == b or D2[a, b] <= 0:
            continue
        # hard assignment to the nearer seed gives the starting responsibilities
        resp = np.zeros((n, 2))
        resp[np.arange(n), (D2[:, b] < D2[:, a]).astype(int)] = 1.0
        if resp.sum(axis=0).min() < MIN_COMPONENT_MASS:
            continue
        means, covs, weights, _ = _mstep(X, resp)
        try:
            g, hist = _em(X, means, covs, weights)
        except DegenerateFit as exc:
            last_err = exc
            continue
        if best is None or g.log_lik > best.log_lik + 1e-12:
            best, best_hist = g, hist
    if best is None:
        raise last_err or DegenerateFit("no usable two-component initialisation")
    if best.means[0][0] > best.means[1][0]:
        # canonical component order by the first coordinate
        best = Gmm(best.means[::-1].copy(), best.covariances[::-1].copy(), best.weights[::-1].copy(),
                   best.log_lik, best.n_iter)
    return (best, best_hist) if return_history else best


def n_parameters(k: int, d: int = 6) -> int:
    return k * (d + d * (d + 1) // 2) + (k - 1)


def bic(gmm: Gmm, points) -> float:
    n, d = np.asarray(points).shape
    return -2.0 * gmm.log_lik + n_parameters(gmm.k, d) * np.log(n)


def ashman_d(gmm: Gmm) -> float:
    if gmm.k != 2:
        raise ValueError("Ashman's D needs a two-component mixture")
    diff = gmm.means[1] - gmm.means[0]
    dist = np.linalg.norm(diff)
    if dist <= 1e-12:
        raise CoincidentMeans("mixture means coincide")
    u = diff / dist
    s1 = u @ gmm.covariances[0] @ u
    s2 = u @ gmm.covariances[1] @ u
    return float(np.sqrt(2.0) * dist / np.sqrt(s1 + s2))


# ---------------------------------------------------------------------------
# modality verdicts


@dataclass
class ModalityVerdict:
    label: str
    bic_1: float
    bic_2: float
    ashman_d: float = float("nan")
    minor_weight: float = 0.0
    gt_in_dominant: bool | None = None
    gmm: Gmm | None = None
    gmm_1: Gmm | None = None

    @property
    def bimodal(self) -> bool:
        return self.label == "bimodal"

    @property
    def selected(self) -> Gmm | None:
        """The mixture the verdict stands on: two components if bimodal."""
        return self.gmm if self.bimodal else self.gmm_1

    def to_dict(self) -> dict:
        return {"label": self.label, "bic_1": self.bic_1, "bic_2": self.bic_2,
                "ashman_d": self.ashman_d, "minor_weight": self.minor_weight,
                "gt_in_dominant": self.gt_in_dominant}


def tangent_coordinates(R, t, ref: Pose, scale=UNIT_SCALE) -> np.ndarray:
    """``log(T_ref^-1 T_i)`` divided componentwise by ``scale``."""
    Ri, ti = geo.inverse_batch(ref.rotation, ref.translation)
    Rr, tr = geo.compose_batch(Ri[None], ti[None], np.asarray(R), np.asarray(t))
    return geo.log_se3_batch(Rr, tr, strict=False) / scale


def decide(bic_1: float, bic_2: float, d: float, minor: float) -> str:
    return "bimodal" if (bic_2 < bic_1 and d > 2.0 and minor >= 0.10) else "unimodal"


def assign_component(gmm: Gmm, x) -> int:
    """Nearest mean in the Mahalanobis metric of each component."""
    x = np.asarray(x, dtype=float)
    if max(np.linalg.cond(C) for C in gmm.covariances) < 1e12:
        dist = [float((x - m) @ np.linalg.solve(C, x - m)) for m, C in zip(gmm.means, gmm.covariances)]
    else:
        # near-singular component: fall back to Euclidean distance
        dist = [float(np.sum((x - m) ** 2)) for m in gmm.means]
    return int(np.argmin(dist))


def classify_points(X, gt=None, rng=None) -> ModalityVerdict:
    X = np.asarray(X, dtype=float)
    g1 = fit_gmm(X, 1)
    b1 = bic(g1, X)
    try:
        g2 = fit_gmm(X, 2, rng=np.random.default_rng(0) if rng is None else rng)
    except DegenerateFit:
        return ModalityVerdict("unimodal", b1, float("inf"), gmm_1=g1)
    b2 = bic(g2, X)
    try:
        d = ashman_d(g2)
    except CoincidentMeans:
        d = 0.0
    minor = float(g2.weights.min())
    label = decide(b1, b2, d, minor)
    gt_dom = None
    if label == "bimodal" and gt is not None:
        gt_dom = assign_component(g2, gt) == int(np.argmax(g2.weights))
    return ModalityVerdict(label, b1, b2, d, minor, gt_dom, g2, g1)


def classify_modality(R, t, map_pose: Pose, gt_pose: Pose | None = None, rng=None) -> ModalityVerdict:
    """Unimodal/bimodal verdict for a particle cloud given as stacked arrays."""
    X = tangent_coordinates(R, t, map_pose)
    gt = None
    if gt_pose is not None:
        gt = tangent_coordinates(gt_pose.rotation[None], gt_pose.translation[None], map_pose)[0]
    return classify_points(X, gt, rng)


def gmm_nll(gmm: Gmm, x) -> float:
    """Negative log density of a point under a fitted mixture."""
    return -float(gmm.log_density(np.atleast_2d(x))[0])


def marginal(gmm: Gmm, dims) -> Gmm:
    """The mixture restricted to a subset of coordinates."""
    dims = np.asarray(dims)
    return Gmm(gmm.means[:, dims], gmm.covariances[:, dims][:, :, dims], gmm.weights, gmm.log_lik, gmm.n_iter)


def posterior_nll(gmm: Gmm, x) -> tuple[float, float]:
    """Translation and rotation NLL of a normalised tangent point under the
    marginals of a fitted mixture (units: 1 mm and 5 degrees)."""
    x = np.asarray(x, dtype=float)
    return gmm_nll(marginal(gmm, [0, 1, 2]), x[:3]), gmm_nll(marginal(gmm, [3, 4, 5]), x[3:])
