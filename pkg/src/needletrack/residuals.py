"""Measurement residuals, their Jacobians and the stacked whitened objective.

Four terms contribute: tip/tail keypoint reprojection, Sampson distance of
backbone pixels to the projected needle conic, grasp-point position and
grasper/tangent perpendicularity. Jacobians are taken with respect to a
left perturbation ``exp(hat(dxi)) @ T`` with translation-first twists.

The estimators work with :class:`FrameLikelihood`, which evaluates all
terms for a whole stack of candidate poses at once. The single-pose
functions below (``sparse_residual`` and friends) are thin wrappers.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .camera import (DEGENERATE_H, MIN_DEPTH, CameraIntrinsics, homography_batch,
                     homography_degeneracy, projection_jacobian_batch, project_batch)
from .errors import (BehindCamera, DataError, DegenerateHomography, EmptyObservation,
                     InsufficientData, NoKeypoints)
from .geometry import Pose
from .needle import NeedleModel

SCHEMA_VERSION = 1
SIGMA_FLOOR = 1e-6
MAX_BACKBONE = 100
SINGULAR_GRADIENT = 1e-12

_PLANE_P = np.hstack([np.eye(3), np.zeros((3, 1))])
_K9 = geo.commutation_3x3()
_GENERATORS = geo.generators()


def _opt_array(x, n):
    return None if x is None else np.asarray(x, dtype=float).reshape(n)


@dataclass
class Observation:
    """One frame of measurements. Missing detections are ``None`` / empty."""

    tip_px: np.ndarray | None = None
    tail_px: np.ndarray | None = None
    backbone_px: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    grasp_pos: np.ndarray | None = None
    grasper_axis: np.ndarray | None = None
    robot_twist: np.ndarray | None = None
    timestamp: float = 0.0

    def __post_init__(self):
        self.tip_px = _opt_array(self.tip_px, 2)
        self.tail_px = _opt_array(self.tail_px, 2)
        self.backbone_px = np.asarray(self.backbone_px, dtype=float).reshape(-1, 2)
        self.grasp_pos = _opt_array(self.grasp_pos, 3)
        self.grasper_axis = _opt_array(self.grasper_axis, 3)
        self.robot_twist = _opt_array(self.robot_twist, 6)
        if self.grasper_axis is not None and abs(np.linalg.norm(self.grasper_axis) - 1) > 1e-9:
            raise DataError("grasper axis must be a unit vector")

    @property
    def has_keypoints(self) -> bool:
        return self.tip_px is not None or self.tail_px is not None

    def to_dict(self) -> dict:
        def lst(a):
            return None if a is None else a.tolist()
        return {"timestamp": float(self.timestamp),
                "tip_px": lst(self.tip_px),
                "tail_px": lst(self.tail_px),
                "backbone_px": self.backbone_px.tolist(),
                "grasp_pos": lst(self.grasp_pos),
                "grasper_axis": lst(self.grasper_axis),
                "robot_twist": lst(self.robot_twist)}

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        return cls(tip_px=d.get("tip_px"), tail_px=d.get("tail_px"),
                   backbone_px=d.get("backbone_px") or np.zeros((0, 2)),
                   grasp_pos=d.get("grasp_pos"), grasper_axis=d.get("grasper_axis"),
                   robot_twist=d.get("robot_twist"), timestamp=d.get("timestamp", 0.0))


@dataclass(frozen=True)
class NoiseCalibration:
    """Per-residual standard deviations in native units (px, m, unitless)."""

    sigma_keypoint: tuple = (1.006, 1.012, 0.921, 0.680)
    sigma_conic: float = 1.235
    sigma_anchor: tuple = (0.41e-3, 0.44e-3, 1.00e-3)
    sigma_perp: float = 0.138

    def __post_init__(self):
        object.__setattr__(self, "sigma_keypoint", tuple(float(s) for s in self.sigma_keypoint))
        object.__setattr__(self, "sigma_anchor", tuple(float(s) for s in self.sigma_anchor))
        if len(self.sigma_keypoint) != 4 or len(self.sigma_anchor) != 3:
            raise DataError("calibration needs 4 keypoint and 3 anchor sigmas")
        if min(self.sigma_keypoint + self.sigma_anchor + (self.sigma_conic, self.sigma_perp)) <= 0:
            raise DataError("calibration sigmas must be strictly positive")

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION,
                "units": {"keypoint": "px", "conic": "px", "anchor": "m", "perp": "unitless"},
                "sigma_keypoint_px": list(self.sigma_keypoint),
                "sigma_conic_px": float(self.sigma_conic),
                "sigma_anchor_m": list(self.sigma_anchor),
                "sigma_perp": float(self.sigma_perp)}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseCalibration":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported calibration schema {d.get('schema_version')!r}")
        return cls(sigma_keypoint=d["sigma_keypoint_px"], sigma_conic=d["sigma_conic_px"],
                   sigma_anchor=d["sigma_anchor_m"],
                   sigma_perp=d["sigma_perp"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NoiseCalibration":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TermMask:
    """Which likelihood blocks take part. Used for the ablation study."""

    sparse: bool = True
    dense: bool = True
    use_tip: bool = True
    grasp_position: bool = True
    grasp_perp: bool = True
    motion_prior: bool = True


@dataclass
class MotionPrior:
    """Max-mixture Gaussian prior over predicted poses.

    Each candidate pose is scored against its nearest component (in the
    whitened metric) through the camera-frame error ``log(T @ T_pred^-1)``.
    With a single component this is the usual prior around one prediction.
    """

    R: np.ndarray
    t: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(-1, 3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(-1, 3)
        self.Q = np.asarray(self.Q, dtype=float).reshape(6, 6)
        # rows of L whiten: L^T L = Q^-1
        self.L = np.linalg.cholesky(np.linalg.inv(self.Q)).T
        self.Rinv, self.tinv = geo.inverse_batch(self.R, self.t)

    @classmethod
    def from_poses(cls, poses, Q) -> "MotionPrior":
        R, t = geo.poses_to_arrays(poses)
        return cls(R, t, Q)


@dataclass
class ResidualBundle:
    r: np.ndarray
    J: np.ndarray
    nll: float
    blocks: dict

    def breakdown(self) -> dict:
        return {name: 0.5 * float(self.r[sl] @ self.r[sl]) for name, sl in self.blocks.items()}


# ---------------------------------------------------------------------------
# batched residual kernels (unwhitened)


def sparse_batch(intr, points, targets, R, t, jacobian=True):
    """Keypoint reprojection error for needle-frame ``points`` (k, 3).

    Returns r (N, 2k), J (N, 2k, 6) or None, valid (N,).
    """
    p = np.einsum("nij,kj->nki", R, points) + t[:, None, :]
    valid = np.all(p[..., 2] > MIN_DEPTH, axis=1)
    safe = np.where(valid[:, None, None], p, np.array([0.0, 0.0, 1.0]))
    r = (project_batch(intr, safe) - targets[None]).reshape(len(R), -1)
    if not jacobian:
        return r, None, valid
    dp = np.concatenate([np.broadcast_to(np.eye(3), safe.shape[:2] + (3, 3)),
                         -geo.skew_batch(safe)], axis=-1)
    J = projection_jacobian_batch(intr, safe) @ dp
    return r, J.reshape(len(R), -1, 6), valid


def conic_batch(intr, radius, R, t):
    """Unnormalised conic stack plus the homography pieces it came from."""
    H = homography_batch(intr, R, t)
    valid = homography_degeneracy(H) > DEGENERATE_H
    H = np.where(valid[:, None, None], H, np.eye(3))
    Hinv = np.linalg.inv(H)
    HinvT = np.swapaxes(Hinv, 1, 2)
    C = HinvT @ np.diag([1.0, 1.0, -radius**2]) @ Hinv
    C = 0.5 * (C + np.swapaxes(C, 1, 2))
    # rescale to unit norm; the Sampson ratio does not see the scale and
    # treating it as a constant keeps the derivative consistent
    s = 1.0 / np.linalg.norm(C, axis=(1, 2))
    return C * s[:, None, None], HinvT, s, valid


def conic_jacobian_batch(intr, C, HinvT, R, t):
    """vec(dC/dxi) (N, 9, 6) through the Kronecker form ``D_H A``.

    ``D_H = -[(C^T kron H^-T) K + (H^-T kron C)]`` maps vec(dH) to vec(dC)
    and column j of ``A`` is ``vec(P E_j T M)``.
    """
    n = len(C)
    D_H = -(geo.kron_batch(np.swapaxes(C, 1, 2), HinvT) @ _K9 + geo.kron_batch(HinvT, C))
    TM = np.zeros((n, 4, 3))
    TM[:, :3, :2] = R[:, :, :2]
    TM[:, :3, 2] = t
    TM[:, 3, 2] = 1.0
    PE = intr.K @ _PLANE_P @ _GENERATORS                     # (6, 3, 4)
    dH = np.einsum("jab,nbc->njac", PE, TM)                   # (N, 6, 3, 3)
    A = np.swapaxes(geo.vec(dH), 1, 2)                        # (N, 9, 6)
    return D_H @ A


def dense_batch(intr, radius, x, R, t, jacobian=True):
    """Sampson distances of homogeneous pixels ``x`` (m, 3) to each conic.

    The gradient norm uses the image-plane components of ``(C + C^T) x``;
    singular points (gradient below threshold) get zero rows.
    Returns r (N, m), J (N, m, 6) or None, valid (N,).
    """
    C, HinvT, _, valid = conic_batch(intr, radius, R, t)
    Cx = np.einsum("nij,mj->nmi", C, x)
    g = np.einsum("mi,nmi->nm", x, Cx)
    grad = 2.0 * Cx[..., :2]
    nrm = np.linalg.norm(grad, axis=-1)
    ok = nrm > SINGULAR_GRADIENT * np.linalg.norm(x[:, :2], axis=1)[None]
    nrm_s = np.where(ok, nrm, 1.0)
    r = np.where(ok, g / nrm_s, 0.0)
    if not jacobian:
        return r, None, valid
    # C already carries the constant scale, so D_H A is d(scale * C_raw)
    dvecC = conic_jacobian_batch(intr, C, HinvT, R, t)
    X2 = geo.vec(x[:, :, None] * x[:, None, :])              # (m, 9)
    dg = np.einsum("mk,nkj->nmj", X2, dvecC)                  # (N, m, 6)
    dC = geo.unvec3(np.swapaxes(dvecC, 1, 2))                 # (N, 6, 3, 3)
    dCx = np.einsum("njab,mb->nmja", dC[..., :2, :], x)       # (N, m, 6, 2)
    dn = np.einsum("nma,nmja->nmj", grad, 2.0 * dCx) / nrm_s[..., None]
    J = (dg * nrm_s[..., None] - g[..., None] * dn) / nrm_s[..., None] ** 2
    J = np.where(ok[..., None], J, 0.0)
    return r, J, valid


def grasp_position_batch(point, target, R, t, jacobian=True):
    p = R @ point + t
    r = p - target
    if not jacobian:
        return r, None
    J = np.concatenate([np.broadcast_to(np.eye(3), (len(R), 3, 3)), -geo.skew_batch(p)], axis=-1)
    return r, J


def grasp_perp_batch(tangent, axis, R, jacobian=True):
    tc = R @ tangent
    nrm = np.linalg.norm(tc, axis=-1)
    th = tc / nrm[:, None]
    r = th @ axis
    if not jacobian:
        return r[:, None], None
    proj = np.eye(3) - th[:, :, None] * th[:, None, :]
    J_rot = np.einsum("i,nij,njk->nk", axis, proj, -geo.skew_batch(tc)) / nrm[:, None]
    J = np.concatenate([np.zeros((len(R), 3)), J_rot], axis=-1)
    return r[:, None], J[:, None, :]


def prior_batch(prior: MotionPrior, R, t, jacobian=True):
    """Whitened camera-frame error to the nearest prior component.

    The Jacobian uses the first-order left Jacobian (identity), so it is
    exact only at the component itself.
    """
    Rr, tr = geo.compose_batch(R[:, None], t[:, None], prior.Rinv[None], prior.tinv[None])
    e = geo.log_se3_batch(Rr, tr, strict=False)              # (N, M, 6)
    w = e @ prior.L.T
    j = np.argmin(np.einsum("nmi,nmi->nm", w, w), axis=1)
    r = w[np.arange(len(R)), j]
    if not jacobian:
        return r, None
    return r, np.broadcast_to(prior.L, (len(R), 6, 6))


# ---------------------------------------------------------------------------


class FrameLikelihood:
    """Whitened stacked objective for one observation frame.

    ``evaluate(R, t)`` returns residuals (N, m), Jacobians (N, m, 6) and a
    validity mask. Invalid poses (points behind the camera, degenerate
    homography) get zero rows and an infinite NLL.
    """

    def __init__(self, intr: CameraIntrinsics, model: NeedleModel, obs: Observation,
                 calib: NoiseCalibration, terms: TermMask = TermMask(),
                 prior: MotionPrior | None = None, max_backbone: int = MAX_BACKBONE,
                 rng: np.random.Generator | None = None):
        self.intr, self.model, self.obs, self.calib, self.terms = intr, model, obs, calib, terms
        self.prior = prior if terms.motion_prior else None
        self.blocks: dict[str, slice] = {}
        row = 0

        kp_pts, kp_tgt, kp_sig = [], [], []
        if terms.sparse:
            sk = calib.sigma_keypoint
            if obs.tip_px is not None and terms.use_tip:
                kp_pts.append(model.tip); kp_tgt.append(obs.tip_px); kp_sig += sk[:2]
            if obs.tail_px is not None:
                kp_pts.append(model.tail); kp_tgt.append(obs.tail_px); kp_sig += sk[2:]
        self.kp_points = np.array(kp_pts).reshape(-1, 3)
        self.kp_targets = np.array(kp_tgt).reshape(-1, 2)
        self.kp_inv_sigma = 1.0 / np.array(kp_sig, dtype=float)
        if len(self.kp_points):
            self.blocks["sparse"] = slice(row, row + 2 * len(self.kp_points))
            row += 2 * len(self.kp_points)

        px = obs.backbone_px if terms.dense else np.zeros((0, 2))
        if len(px) > max_backbone:
            rng = np.random.default_rng(0) if rng is None else rng
            px = px[np.sort(rng.choice(len(px), max_backbone, replace=False))]
        self.backbone = np.column_stack([px, np.ones(len(px))])
        if len(px):
            self.blocks["dense"] = slice(row, row + len(px))
            row += len(px)

        self.use_grasp_pos = terms.grasp_position and obs.grasp_pos is not None
        if self.use_grasp_pos:
            self.blocks["grasp_position"] = slice(row, row + 3)
            row += 3
        self.use_perp = terms.grasp_perp and obs.grasper_axis is not None
        if self.use_perp:
            self.blocks["grasp_perp"] = slice(row, row + 1)
            row += 1
        if self.prior is not None:
            self.blocks["motion_prior"] = slice(row, row + 6)
            row += 6
        self.n_rows = row
        if row == 0:
            raise EmptyObservation("no residual term available for this frame")

    @property
    def has_image_terms(self) -> bool:
        return "sparse" in self.blocks or "dense" in self.blocks

    def evaluate(self, R, t, jacobian: bool = True):
        R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
        t = np.asarray(t, dtype=float).reshape(-1, 3)
        n = len(R)
        r = np.zeros((n, self.n_rows))
        J = np.zeros((n, self.n_rows, 6)) if jacobian else None
        valid = np.ones(n, dtype=bool)
        c = self.calib
        for name, sl in self.blocks.items():
            if name == "sparse":
                rb, Jb, ok = sparse_batch(self.intr, self.kp_points, self.kp_targets, R, t, jacobian)
                w = self.kp_inv_sigma
                valid &= ok
            elif name == "dense":
                rb, Jb, ok = dense_batch(self.intr, self.model.radius, self.backbone, R, t, jacobian)
                w = np.full(rb.shape[1], 1.0 / c.sigma_conic)
                valid &= ok
            elif name == "grasp_position":
                rb, Jb = grasp_position_batch(self.model.grasp_point, self.obs.grasp_pos, R, t, jacobian)
                w = 1.0 / np.array(c.sigma_anchor)
            elif name == "grasp_perp":
                rb, Jb = grasp_perp_batch(self.model.grasp_tangent, self.obs.grasper_axis, R, jacobian)
                w = np.array([1.0 / c.sigma_perp])
            else:
                rb, Jb = prior_batch(self.prior, R, t, jacobian)
                w = np.ones(6)
            r[:, sl] = rb * w
            if jacobian:
                J[:, sl] = Jb * w[:, None]
        r[~valid] = 0.0
        if jacobian:
            J[~valid] = 0.0
        return r, J, valid

    def nll(self, R, t) -> np.ndarray:
        r, _, valid = self.evaluate(R, t, jacobian=False)
        out = 0.5 * np.einsum("ni,ni->n", r, r)
        out[~valid] = np.inf
        return out


# ---------------------------------------------------------------------------
# single-pose API


def sparse_residual(T: Pose, intr: CameraIntrinsics, model: NeedleModel, obs: Observation):
    """Tip then tail reprojection error (px) and its 2k x 6 Jacobian."""
    pts, tgt = [], []
    if obs.tip_px is not None:
        pts.append(model.tip); tgt.append(obs.tip_px)
    if obs.tail_px is not None:
        pts.append(model.tail); tgt.append(obs.tail_px)
    if not pts:
        raise NoKeypoints("observation carries no keypoints")
    r, J, valid = sparse_batch(intr, np.array(pts), np.array(tgt),
                               T.rotation[None], T.translation[None])
    if not valid[0]:
        raise BehindCamera("keypoint projects from behind the camera")
    return r[0], J[0]


def dense_residual(T: Pose, intr: CameraIntrinsics, model: NeedleModel, backbone_px):
    """Sampson distances (px) of backbone pixels to the projected conic.

    Pixels sitting where the conic gradient vanishes are dropped with a
    warning instead of failing the whole frame.
    """
    px = np.asarray(backbone_px, dtype=float).reshape(-1, 2)
    if len(px) == 0:
        raise DataError("no backbone pixels")
    x = np.column_stack([px, np.ones(len(px))])
    R, t = T.rotation[None], T.translation[None]
    r, J, valid = dense_batch(intr, model.radius, x, R, t)
    if not valid[0]:
        raise DegenerateHomography("needle plane passes through the camera centre")
    C = conic_batch(intr, model.radius, R, t)[0][0]
    grad = 2.0 * (x @ C)[:, :2]
    keep = np.linalg.norm(grad, axis=1) > SINGULAR_GRADIENT * np.linalg.norm(px, axis=1)
    if not np.all(keep):
        warnings.warn(f"dropped {np.sum(~keep)} backbone pixels with singular conic gradient")
    return r[0][keep], J[0][keep]


def grasp_position_residual(T: Pose, model: NeedleModel, grasp_pos):
    r, J = grasp_position_batch(model.grasp_point, np.asarray(grasp_pos, dtype=float),
                                T.rotation[None], T.translation[None])
    return r[0], J[0]


def grasp_perp_residual(T: Pose, model: NeedleModel, grasper_axis):
    r, J = grasp_perp_batch(model.grasp_tangent, np.asarray(grasper_axis, dtype=float),
                            T.rotation[None])
    return float(r[0, 0]), J[0]


def assemble(T: Pose, intr: CameraIntrinsics, model: NeedleModel, obs: Observation,
             calib: NoiseCalibration, motion_prior: MotionPrior | None = None,
             terms: TermMask = TermMask(), rng=None) -> ResidualBundle:
    lik = FrameLikelihood(intr, model, obs, calib, terms, motion_prior, rng=rng)
    r, J, valid = lik.evaluate(T.rotation[None], T.translation[None])
    if not valid[0]:
        raise BehindCamera("pose puts the needle behind the camera or edge-on")
    return ResidualBundle(r[0], J[0], 0.5 * float(r[0] @ r[0]), dict(lik.blocks))


def calibrate_noise(frames, intr: CameraIntrinsics, model: NeedleModel,
                    min_frames: int = 30) -> NoiseCalibration:
    """Sample standard deviations of residuals evaluated at ground truth.

    ``frames`` is a sequence of ``(Observation, Pose)``. Components that
    never appear fall back to the default calibration with a warning.
    """
    frames = [(o, T) for o, T in frames if T is not None]
    if len(frames) < min_frames:
        raise InsufficientData(f"need at least {min_frames} ground-truth frames, got {len(frames)}")
    tip, tail, conic, anchor, perp = [], [], [], [], []
    for obs, T in frames:
        R, t = T.rotation[None], T.translation[None]
        if obs.tip_px is not None:
            tip.append(sparse_batch(intr, model.tip[None], obs.tip_px[None], R, t, False)[0][0])
        if obs.tail_px is not None:
            tail.append(sparse_batch(intr, model.tail[None], obs.tail_px[None], R, t, False)[0][0])
        if len(obs.backbone_px):
            x = np.column_stack([obs.backbone_px, np.ones(len(obs.backbone_px))])
            conic.append(dense_batch(intr, model.radius, x, R, t, False)[0][0])
        if obs.grasp_pos is not None:
            anchor.append(grasp_position_batch(model.grasp_point, obs.grasp_pos, R, t, False)[0][0])
        if obs.grasper_axis is not None:
            perp.append(grasp_perp_batch(model.grasp_tangent, obs.grasper_axis, R, False)[0][0, 0])

    default = NoiseCalibration()

    def std(samples, fallback, name):
        a = np.asarray(samples, dtype=float)
        if len(a) < 2:
            warnings.warn(f"no {name} residuals in calibration set; keeping default")
            return np.asarray(fallback, dtype=float)
        return np.maximum(a.std(axis=0, ddof=1), SIGMA_FLOOR)

    kp = np.concatenate([std(tip, default.sigma_keypoint[:2], "tip"),
                         std(tail, default.sigma_keypoint[2:], "tail")])
    pooled = np.concatenate(conic) if conic else []
    return NoiseCalibration(sigma_keypoint=kp,
                            sigma_conic=float(std(pooled, default.sigma_conic, "conic")),
                            sigma_anchor=std(anchor, default.sigma_anchor, "anchor"),
                            sigma_perp=float(std(perp, default.sigma_perp, "perp")))
