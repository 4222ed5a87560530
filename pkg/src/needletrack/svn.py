"""Stein Variational Newton transport of pose particles on SE(3).

Particles are kept as stacked arrays. Each transport iteration linearises
the stacked whitened objective at every particle, floors the eigenvalues
of the Gauss-Newton Hessian, and moves particles by a Newton step plus a
preconditioned kernel repulsion, all in the tangent space at the current
best particle.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .camera import CameraIntrinsics
from .errors import EmptyObservation, ZeroHessian
from .geometry import Pose
from .needle import NeedleModel
from .residuals import FrameLikelihood, MotionPrior, NoiseCalibration, Observation, TermMask
from .synth import needle_in_grasper

ZERO_HESSIAN = 1e-12


def default_process_noise() -> np.ndarray:
    return np.diag([2e-4**2] * 3 + [np.deg2rad(1.0) ** 2] * 3)


@dataclass
class SvnConfig:
    n_particles: int = 50
    max_iters_initial: int = 30
    max_iters_steady: int = 15
    warmup_frames: int = 10
    eig_floor_eps: float = 1e-2
    kernel_scale_t: float = 1e-3
    kernel_scale_r: float = float(np.deg2rad(5.0))
    process_noise_Q: np.ndarray = field(default_factory=default_process_noise)
    stop_trans: float = 1e-4
    stop_rot: float = float(np.deg2rad(0.5))
    stop_logpost_delta: float = 0.02
    stop_patience: int = 2
    step_scale: float = 1.0
    backoff: bool = True
    svgd_mode: bool = False
    form: str = "newton"
    floor_metric: str = "jacobi"
    svgd_step: float = 0.5       # fraction of 1/lambda_max used as SVGD learning rate
    init_jitter: float = float(np.deg2rad(10.0))
    init_oversample: int = 20
    seed: int = 0

    def __post_init__(self):
        self.process_noise_Q = np.asarray(self.process_noise_Q, dtype=float).reshape(6, 6)
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if not 0 < self.eig_floor_eps < 1:
            raise ValueError("eig_floor_eps must lie in (0, 1)")
        tols = (self.kernel_scale_t, self.kernel_scale_r, self.stop_trans, self.stop_rot,
                self.stop_logpost_delta)
        if min(tols) <= 0 or not 0 < self.step_scale <= 1:
            raise ValueError("tolerances must be positive and step_scale in (0, 1]")

    @property
    def S(self) -> np.ndarray:
        if self.svgd_mode:
            return np.ones(6)
        return np.array([self.kernel_scale_t] * 3 + [self.kernel_scale_r] * 3)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["process_noise_Q"] = self.process_noise_Q.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SvnConfig":
        return cls(**d)


@dataclass
class ParticleSet:
    R: np.ndarray
    t: np.ndarray
    log_post: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(-1, 3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(-1, 3)
        self.log_post = np.asarray(self.log_post, dtype=float).reshape(-1)
        if not (len(self.R) == len(self.t) == len(self.log_post)):
            raise ValueError("particle arrays disagree in length")

    @classmethod
    def from_poses(cls, poses, log_post=None) -> "ParticleSet":
        R, t = geo.poses_to_arrays(poses)
        lp = np.zeros(len(R)) if log_post is None else log_post
        return cls(R, t, lp)

    def __len__(self):
        return len(self.R)

    @property
    def poses(self) -> list[Pose]:
        return [Pose(R, t) for R, t in zip(self.R, self.t)]

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.log_post)

    def copy(self) -> "ParticleSet":
        return ParticleSet(self.R.copy(), self.t.copy(), self.log_post.copy())


@dataclass
class PosteriorSummary:
    map_pose: Pose
    covariance: np.ndarray
    q95_trans: float
    q95_rot: float
    sigma_trans: float = 0.0     # weighted RMS of tangent radii about the MAP
    sigma_rot: float = 0.0
    low_trans: float = 0.0       # weighted 2.5% / 97.5% quantiles of the radii
    upp_trans: float = 0.0
    low_rot: float = 0.0
    upp_rot: float = 0.0


def softmax(log_w) -> np.ndarray:
    lw = np.asarray(log_w, dtype=float)
    finite = np.isfinite(lw)
    if not finite.any():
        return np.full(len(lw), 1.0 / len(lw))
    w = np.zeros(len(lw))
    w[finite] = np.exp(lw[finite] - lw[finite].max())
    return w / w.sum()


# ---------------------------------------------------------------------------
# kernel and velocity


def kernel(xi_i, xi_j, S, h):
    """``k(xi_j, xi_i)`` and its gradient with respect to ``xi_j``."""
    d = (np.asarray(xi_i, dtype=float) - np.asarray(xi_j, dtype=float)) / S
    k = float(np.exp(-d @ d / (2.0 * h)))
    return k, k * d / S / h


def kernel_matrix(X, S, h):
    """``K[j, i] = k(xi_j, xi_i)`` and ``G[j, i] = grad_{xi_j} k(xi_j, xi_i)``."""
    D = (X[None, :, :] - X[:, None, :]) / S       # D[j, i] = S^-1 (xi_i - xi_j)
    K = np.exp(-np.einsum("jik,jik->ji", D, D) / (2.0 * h))
    G = K[..., None] * D / S / h
    return K, G


def pairwise_sq(X, S):
    Z = X / S
    d = Z[:, None, :] - Z[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def bandwidth(X, S, Q=None, floor: bool = True) -> float:
    """Median heuristic ``median / log N`` floored at the mean whitened process variance."""
    X = np.asarray(X, dtype=float)
    n = len(X)
    if n < 2:
        raise ValueError("bandwidth needs at least two particles")
    iu = np.triu_indices(n, 1)
    m = float(np.median(pairwise_sq(X, S)[iu]))
    h = m / np.log(n)
    if floor and Q is not None:
        Qw = np.asarray(Q) / np.outer(S, S)
        h = max(h, float(np.trace(Qw)) / 6.0)
    if h <= 0:
        # collapsed cloud with no floor; any positive value gives k = 1
        h = 1.0
    return h


def stein_velocity(X, grads, S, h):
    """Standard Stein variational velocity in the tangent chart."""
    X = np.atleast_2d(X)
    grads = np.atleast_2d(grads)
    n = len(X)
    if n == 1:
        return grads.copy()
    K, G = kernel_matrix(X, S, h)
    return (K.T @ grads + G.sum(axis=0)) / n


def floored_inverse(H, eps, scale=None):
    """Inverse of the symmetrised ``H`` with eigenvalues floored at ``eps * max``.

    With ``scale`` the floor is applied to ``diag(scale) H diag(scale)`` so
    that metres and radians are compared in commensurable units.
    Works on a single matrix or a stack.
    """
    H = np.asarray(H, dtype=float)
    Hs = 0.5 * (H + np.swapaxes(H, -1, -2))
    s = np.ones(H.shape[-1]) if scale is None else np.asarray(scale, dtype=float)
    ss = s[..., :, None] * s[..., None, :]
    Hs = Hs * ss
    w, V = np.linalg.eigh(Hs)
    wmax = w[..., -1:]
    if np.any(wmax < ZERO_HESSIAN):
        raise ZeroHessian("Gauss-Newton Hessian vanishes")
    wf = np.maximum(w, eps * wmax)
    Hinv = np.einsum("...ik,...k,...jk->...ij", V, 1.0 / wf, V)
    return Hinv * ss


def floored_spectrum(H, eps, scale=None) -> np.ndarray:
    H = np.asarray(H, dtype=float)
    s = np.ones(H.shape[-1]) if scale is None else np.asarray(scale, dtype=float)
    w = np.linalg.eigvalsh(0.5 * (H + H.T) * np.outer(s, s))
    return np.maximum(w, eps * w[-1])


def precondition_solve(H, phi, eps, scale=None) -> np.ndarray:
    return floored_inverse(H, eps, scale) @ np.asarray(phi, dtype=float)


def svn_direction(X, grads, Hinv, S, h, form: str = "newton"):
    """Preconditioned Stein direction for every particle.

    ``literal``: ``1/N sum_j [k_ji Hinv_j g_j + Hinv_i grad_j k_ji]``, the
    donor-averaged Newton step. With all ``Hinv = I`` this is exactly the
    SVGD velocity.

    ``newton`` (default): each particle takes its own floored Newton step,
    plus the repulsion preconditioned by its own Hessian and normalised by
    the kernel mass ``sum_j k_ji``. This is the narrow-kernel limit of the
    averaged attraction. The averaged form only translates the cloud when
    the kernel is wider than the posterior, which is the usual situation
    for this problem.
    """
    n = len(X)
    K, G = kernel_matrix(X, S, h)
    newton = np.einsum("jab,jb->ja", Hinv, grads)
    rep = np.einsum("iab,ib->ia", Hinv, G.sum(axis=0))
    if form == "literal":
        return (K.T @ newton + rep) / n
    if form == "newton":
        return newton + rep / K.sum(axis=0)[:, None]
    raise ValueError(f"unknown update form {form!r}")


# ---------------------------------------------------------------------------
# chart helpers


def to_chart(R, t, R_ref, t_ref):
    """``log(T T_ref^-1)``: the chart matching left perturbations."""
    Ri, ti = geo.inverse_batch(R_ref, t_ref)
    Rr, tr = geo.compose_batch(R, t, Ri[None], ti[None])
    return geo.log_se3_batch(Rr, tr, strict=False)


def body_chart(R, t, R_ref, t_ref):
    """``log(T_ref^-1 T)``: errors in the reference pose's own frame."""
    Ri, ti = geo.inverse_batch(R_ref, t_ref)
    Rr, tr = geo.compose_batch(Ri[None], ti[None], R, t)
    return geo.log_se3_batch(Rr, tr, strict=False)


def predict(ps: ParticleSet, robot_twist, Q, rng) -> ParticleSet:
    """``T <- exp(xi_robot + eta) T`` with ``eta ~ N(0, Q)``."""
    n = len(ps)
    tw = np.zeros(6) if robot_twist is None else np.asarray(robot_twist, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if np.any(Q):
        eta = rng.multivariate_normal(np.zeros(6), Q, size=n, method="cholesky")
    else:
        eta = np.zeros((n, 6))
    R, t = geo.left_perturb_batch(tw[None] + eta, ps.R, ps.t)
    return ParticleSet(R, t, ps.log_post.copy())


def extract_map(ps: ParticleSet) -> Pose:
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    i = int(np.argmax(np.where(np.isnan(ps.log_post), -np.inf, ps.log_post)))
    return Pose(ps.R[i], ps.t[i])


def weighted_quantile(values, weights, q) -> float:
    """Linear interpolation on the weighted CDF; reduces to numpy's default
    quantile for uniform weights."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    keep = w > 0                                   # massless points must not anchor the CDF
    v, w = v[keep], w[keep]
    o = np.argsort(v, kind="stable")
    v, w = v[o], w[o] / w.sum()
    if len(v) == 1 or w[-1] >= 1.0 - 1e-15:
        return float(v[-1])
    c = np.cumsum(w) - w
    p = c / (1.0 - w[-1])
    return float(np.interp(q, p, v))


def summarize(ps: ParticleSet, map_pose: Pose | None = None, weights=None) -> PosteriorSummary:
    """Tangent-space spread about the MAP particle.

    ``weights`` default to uniform: transported Stein particles are equally
    weighted samples. The particle filter passes its importance weights.
    """
    map_pose = extract_map(ps) if map_pose is None else map_pose
    w = np.ones(len(ps)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    xi = body_chart(ps.R, ps.t, map_pose.rotation, map_pose.translation)
    rt = np.linalg.norm(xi[:, :3], axis=1)
    rr = np.linalg.norm(xi[:, 3:], axis=1)
    mu = w @ xi
    d = xi - mu
    cov = (w[:, None] * d).T @ d
    cov = 0.5 * (cov + cov.T)
    return PosteriorSummary(
        map_pose=map_pose, covariance=cov,
        q95_trans=weighted_quantile(rt, w, 0.95), q95_rot=weighted_quantile(rr, w, 0.95),
        sigma_trans=float(np.sqrt(w @ rt**2)), sigma_rot=float(np.sqrt(w @ rr**2)),
        low_trans=weighted_quantile(rt, w, 0.025), upp_trans=weighted_quantile(rt, w, 0.975),
        low_rot=weighted_quantile(rr, w, 0.025), upp_rot=weighted_quantile(rr, w, 0.975))


# ---------------------------------------------------------------------------
# initialisation


def initialize(obs: Observation, model: NeedleModel, n: int, rng,
               jitter: float = np.deg2rad(10.0), lik: FrameLikelihood | None = None,
               oversample: int = 1) -> ParticleSet:
    """Particles around the grasp-anchored pose.

    The needle normal is aligned with the measured grasper axis and the
    roll about it is drawn uniformly, which spans the one-parameter family
    of perpendicularity-consistent orientations; every particle then gets
    ``N(0, jitter)`` rotation noise and is translated so that its grasp
    point lands on the measured anchor.

    With ``lik`` and ``oversample > 1``, ``oversample * n`` candidates are
    drawn and the ``n`` with the lowest NLL are kept.
    """
    if obs.grasp_pos is None or obs.grasper_axis is None:
        raise EmptyObservation("initialisation needs the grasp anchor and axis")
    z = obs.grasper_axis / np.linalg.norm(obs.grasper_axis)
    a = np.eye(3)[np.argmin(np.abs(z))]
    x = np.cross(a, z)
    x /= np.linalg.norm(x)
    G0 = np.column_stack([x, np.cross(z, x), z])
    T_gn = needle_in_grasper(model)
    m = n * max(int(oversample), 1) if lik is not None else n
    roll = rng.uniform(-np.pi, np.pi, size=m)
    Rroll = geo.exp_so3_batch(roll[:, None] * z[None])
    Rj = geo.exp_so3_batch(rng.normal(size=(m, 3)) * jitter)
    R = Rj @ Rroll @ G0 @ T_gn.rotation
    t = obs.grasp_pos[None] - np.einsum("nij,j->ni", R, model.grasp_point)
    if m == n:
        return ParticleSet(R, t, np.zeros(n))
    nll = lik.nll(R, t)
    keep = np.sort(np.argsort(nll, kind="stable")[:n])
    return ParticleSet(R[keep], t[keep], -nll[keep])


# ---------------------------------------------------------------------------
# transport


@dataclass
class TransportInfo:
    iterations: int
    stop_reason: str
    best_nll: float
    initial_best_nll: float
    backoffs: int = 0


def transport(ps: ParticleSet, lik: FrameLikelihood, cfg: SvnConfig, max_iters: int | None = None,
              record=None) -> tuple[ParticleSet, TransportInfo]:
    """Run the SVN (or SVGD) transport loop on one frame.

    ``record`` (a list) receives one dict per iteration with the chart
    coordinates ``X``, gradients, bandwidth ``h``, step ``delta`` and, in
    SVGD mode, the learning rate ``lr``.
    """
    max_iters = cfg.max_iters_initial if max_iters is None else max_iters
    S = cfg.S
    R, t = ps.R.copy(), ps.t.copy()
    n = len(R)
    r, J, valid = lik.evaluate(R, t)
    nll = _nll(r, valid)
    initial = float(nll.min())
    best = initial
    calm = 0
    reason = "max_iters"
    backoffs = 0
    lr = None
    it = 0
    for it in range(1, max_iters + 1):
        grads = -np.einsum("nmi,nm->ni", J, r)
        H = np.einsum("nmi,nmj->nij", J, J)
        ref = int(np.argmin(nll))
        X = to_chart(R, t, R[ref], t[ref])
        if cfg.svgd_mode:
            if lr is None:
                lr = svgd_learning_rate(H[valid], cfg.svgd_step)
            h = bandwidth(X, S, floor=False) if n > 1 else 1.0
            delta = lr * stein_velocity(X, grads, S, h)
        else:
            Hinv = _safe_floored_inverse(H, cfg.eig_floor_eps, _floor_scale(H, cfg))
            h = bandwidth(X, S, cfg.process_noise_Q) if n > 1 else 1.0
            if n > 1:
                delta = svn_direction(X, grads, Hinv, S, h, cfg.form)
            else:
                delta = np.einsum("nab,nb->na", Hinv, grads)
        delta[~valid] = 0.0
        if record is not None:
            record.append({"X": X, "grads": grads, "h": h, "delta": delta.copy(), "lr": lr,
                           "valid": valid.copy()})

        step = cfg.step_scale
        R1, t1 = geo.left_perturb_batch(step * delta, R, t)
        r1, J1, v1 = lik.evaluate(R1, t1)
        nll1 = _nll(r1, v1)
        if cfg.backoff and nll1.min() > best + 0.1 * abs(best):
            backoffs += 1
            step *= 0.5
            R1, t1 = geo.left_perturb_batch(step * delta, R, t)
            r1, J1, v1 = lik.evaluate(R1, t1)
            nll1 = _nll(r1, v1)
        R, t, r, J, valid, nll = R1, t1, r1, J1, v1, nll1

        new_best = float(nll.min())
        moved = step * delta
        p95_t = np.percentile(np.linalg.norm(moved[:, :3], axis=1), 95)
        p95_r = np.percentile(np.linalg.norm(moved[:, 3:], axis=1), 95)
        if p95_t < cfg.stop_trans and p95_r < cfg.stop_rot and abs(new_best - best) < cfg.stop_logpost_delta:
            calm += 1
        else:
            calm = 0
        best = new_best
        if calm >= cfg.stop_patience:
            reason = "converged"
            break
    out = ParticleSet(R, t, -nll)
    return out, TransportInfo(it, reason, best, initial, backoffs)


def svgd_learning_rate(H, frac: float) -> float:
    """Scalar step ``frac / lambda_max`` of the mean Gauss-Newton Hessian."""
    if len(H) == 0:
        return frac
    lam = np.linalg.eigvalsh(0.5 * (H.mean(axis=0) + H.mean(axis=0).T))[-1]
    return frac / max(lam, ZERO_HESSIAN)


def _nll(r, valid):
    out = 0.5 * np.einsum("ni,ni->n", r, r)
    out[~valid] = np.inf
    return out


def _floor_scale(H, cfg):
    if cfg.floor_metric == "jacobi":
        d = np.einsum("nii->ni", H)
        return 1.0 / np.sqrt(np.maximum(d, ZERO_HESSIAN))
    if cfg.floor_metric == "kernel":
        return np.broadcast_to(cfg.S, (len(H), 6))
    return np.ones((len(H), 6))


def _safe_floored_inverse(H, eps, scale):
    try:
        return floored_inverse(H, eps, scale)
    except ZeroHessian:
        # particles without curvature (invalid poses) take a plain gradient step
        out = np.empty_like(H)
        scale = np.broadcast_to(scale, (len(H), 6))
        for i, Hi in enumerate(H):
            try:
                out[i] = floored_inverse(Hi, eps, scale[i])
            except ZeroHessian:
                out[i] = np.eye(6)
        return out


# ---------------------------------------------------------------------------
# tracking session


@dataclass
class FrameResult:
    summary: PosteriorSummary | None
    particles: ParticleSet
    iterations: int = 0
    stop_reason: str = ""
    nll: float = float("nan")
    error: str = ""


class SvnTracker:
    """Frame-by-frame SVN tracking session (single owner, sequential frames)."""

    def __init__(self, intr: CameraIntrinsics, model: NeedleModel, calib: NoiseCalibration,
                 cfg: SvnConfig = SvnConfig(), terms: TermMask = TermMask(), use_twist: bool = True):
        self.intr, self.model, self.calib, self.cfg = intr, model, calib, cfg
        self.terms, self.use_twist = terms, use_twist
        self.rng = np.random.default_rng(cfg.seed)
        self.particles: ParticleSet | None = None
        self.frame_index = 0

    def step(self, obs: Observation) -> FrameResult:
        cfg = self.cfg
        prior = None
        if self.particles is None:
            # the initialiser always sees the grasp terms, whatever the ablation
            init_lik = FrameLikelihood(self.intr, self.model, obs, self.calib)
            ps = initialize(obs, self.model, cfg.n_particles, self.rng, cfg.init_jitter,
                            init_lik, cfg.init_oversample)
        else:
            twist = obs.robot_twist if self.use_twist else None
            if self.terms.motion_prior:
                tw = np.zeros(6) if twist is None else np.asarray(twist)
                Rp, tp = geo.left_perturb_batch(np.broadcast_to(tw, (len(self.particles), 6)),
                                                self.particles.R, self.particles.t)
                prior = MotionPrior(Rp, tp, cfg.process_noise_Q)
            ps = predict(self.particles, twist, cfg.process_noise_Q, self.rng)
        max_iters = cfg.max_iters_initial if self.frame_index < cfg.warmup_frames else cfg.max_iters_steady
        self.frame_index += 1
        try:
            lik = FrameLikelihood(self.intr, self.model, obs, self.calib, self.terms, prior)
        except EmptyObservation as exc:
            self.particles = ps
            return FrameResult(summarize(ps), ps, 0, "no_terms", error=type(exc).__name__)
        ps, info = transport(ps, lik, cfg, max_iters)
        if not np.isfinite(ps.log_post).any():
            warnings.warn("all particles invalid after transport")
        self.particles = ps
        return FrameResult(summarize(ps), ps, info.iterations, info.stop_reason, info.best_nll)

    def coast(self, obs: Observation, error: str = "") -> FrameResult:
        """Prediction-only step, used when a frame cannot be processed."""
        if self.particles is None:
            raise EmptyObservation("cannot coast before the first processed frame")
        twist = obs.robot_twist if self.use_twist else None
        ps = predict(self.particles, twist, self.cfg.process_noise_Q, self.rng)
        self.particles = ps
        self.frame_index += 1
        return FrameResult(summarize(ps), ps, 0, "prediction_only", error=error)
