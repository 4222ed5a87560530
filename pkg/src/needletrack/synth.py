"""Synthetic ground truth: grasper trajectories, noisy rendering, occlusion.

The needle is rigidly held in a grasper frame ``G`` whose origin is the
grasp point and whose z axis is the grasper axis (the needle-plane normal
at rest), so ``T = G @ T_gn``. Robot twists describe the motion of ``G``
only; induced rotations act between grasper and needle and are therefore
invisible to the robot, like an external force would be.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import geometry as geo
from .camera import CameraIntrinsics, project
from .errors import BehindCamera, DataError
from .geometry import Pose
from .needle import NeedleModel, sample_backbone
from .residuals import NoiseCalibration, Observation, dense_residual

KINDS = ("slow", "normal", "induced_rotation", "suturing_occlusion")
OCCLUSION_LEVELS = ("none", "partial", "heavy")


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "normal"
    n_frames: int = 300
    dt: float = 0.1
    speed: float = 2e-3
    rot_amplitude: float = np.deg2rad(25.0)
    seed: int = 0
    depth: float = 0.05           # grasp-point depth at rest (m)
    base_tilt: float | None = None  # needle-plane tilt about camera x; None = per kind
    slip_bias: float = 0.0        # twist scale error while occluded (suturing only)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown trajectory kind {self.kind!r}")
        if self.n_frames < 1 or self.speed <= 0 or self.dt <= 0:
            raise DataError("n_frames >= 1, speed > 0 and dt > 0 required")

    @property
    def tilt(self) -> float:
        if self.base_tilt is not None:
            return self.base_tilt
        return 0.0 if self.kind == "induced_rotation" else np.deg2rad(30.0)

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v)
                for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectorySpec":
        return cls(**d)


class TrajectoryFrame(NamedTuple):
    gt_pose: Pose
    robot_twist: np.ndarray
    grasper_axis: np.ndarray   # true grasper z axis, camera frame


@dataclass
class SyntheticFrame:
    gt_pose: Pose
    observation: Observation
    occlusion: str = "none"


def needle_in_grasper(model: NeedleModel) -> Pose:
    """Needle pose in the grasper frame: grasp point at the origin,
    tangent along x, needle normal along z."""
    t0 = model.grasp_tangent
    n0 = np.array([0.0, 0.0, 1.0])
    b0 = np.cross(n0, t0)
    R = np.stack([t0, b0, n0])          # rows: needle axes expressed in grasper axes
    return Pose(R, -R @ model.grasp_point)


def _base_grasper(spec: TrajectorySpec, model: NeedleModel) -> Pose:
    # needle normal pointing back at the camera, then tilted about camera x;
    # the grasp point is offset so the circle centre sits on the optical axis
    R0 = geo.rotation_about([1.0, 0.0, 0.0], np.pi + spec.tilt)
    T_gn = needle_in_grasper(model)
    centre_in_g = T_gn.apply(np.zeros(3))
    p = np.array([0.0, 0.0, spec.depth]) - R0 @ centre_in_g
    return Pose(R0, p)


def _smooth_signal(rng, times, n_terms=3, fmin=0.04, fmax=0.15):
    """Sum of random sinusoids per axis, zero at t=0, shape (len(times), 3)."""
    f = rng.uniform(fmin, fmax, size=(n_terms, 3))
    ph = rng.uniform(0, 2 * np.pi, size=(n_terms, 3))
    a = rng.uniform(0.5, 1.0, size=(n_terms, 3))
    s = np.sum(a[None] * (np.sin(2 * np.pi * f[None] * times[:, None, None] + ph[None])
                          - np.sin(ph[None])), axis=1)
    return s


def _grasper_path(spec: TrajectorySpec, model: NeedleModel, rng):
    n, dt = spec.n_frames, spec.dt
    G0 = _base_grasper(spec, model)
    times = np.arange(n) * dt
    if spec.kind == "slow":
        return _slow_path(spec, G0)
    pos = _smooth_signal(rng, times)
    if n > 1:
        speed = np.linalg.norm(np.diff(pos, axis=0), axis=1).mean() / dt
        pos *= spec.speed / max(speed, 1e-12)
    rot = _smooth_signal(rng, times)
    if n > 1:
        rot *= np.deg2rad(8.0) / max(np.abs(rot).max(), 1e-12)
    if spec.kind == "induced_rotation":
        rot *= 0.5   # keep the grasper near the frontal configuration
    out = []
    for k in range(n):
        dR = geo.exp_so3_batch(rot[k][None])[0]
        out.append(Pose(dR @ G0.rotation, G0.translation + pos[k]))
    return out


def _slow_path(spec: TrajectorySpec, G0: Pose, seg_frames: int = 15):
    """One axis at a time: +-x, +-y, +-z translation, then +-tool roll."""
    step = spec.speed * spec.dt
    roll_step = np.deg2rad(10.0) * spec.dt
    moves = [("t", 0, 1), ("t", 0, -1), ("t", 1, 1), ("t", 1, -1),
             ("t", 2, 1), ("t", 2, -1), ("r", 2, 1), ("r", 2, -1)]
    G = G0
    out = [G]
    for k in range(1, spec.n_frames):
        kind, axis, sign = moves[((k - 1) // seg_frames) % len(moves)]
        if kind == "t":
            d = np.zeros(3)
            d[axis] = sign * step
            G = Pose(G.rotation, G.translation + d)
        else:
            # roll about the grasper's own axis through the grasp point
            dR = geo.rotation_about(G.rotation[:, 2], sign * roll_step)
            G = Pose(dR @ G.rotation, G.translation)
        out.append(G)
    return out


def make_trajectory(spec: TrajectorySpec, model: NeedleModel = NeedleModel()) -> list[TrajectoryFrame]:
    rng = np.random.default_rng(spec.seed)
    grasper = _grasper_path(spec, model, rng)
    T_gn = needle_in_grasper(model)
    period = 8.0
    out = []
    for k, G in enumerate(grasper):
        if k == 0:
            twist = np.zeros(6)
        else:
            Gp = grasper[k - 1]
            twist = geo.log_se3(G @ Gp.inverse())
        if spec.kind == "induced_rotation":
            phi = spec.rot_amplitude * np.sin(2 * np.pi * k * spec.dt / period)
            # about the grasper y axis: tips the tangent (grasper x) towards the
            # grasper axis, breaking perpendicularity by sin(phi)
            rel = Pose(geo.rotation_about([0.0, 1.0, 0.0], -phi), np.zeros(3))
            T = G @ rel @ T_gn
        else:
            T = G @ T_gn
        out.append(TrajectoryFrame(T, twist, G.rotation[:, 2].copy()))
    return out


def occlusion_schedule(n_frames: int, profile: str = "suturing") -> list[str]:
    """none -> partial -> heavy -> partial -> none, about half the frames occluded."""
    if profile != "suturing":
        raise DataError(f"unknown occlusion profile {profile!r}")
    if n_frames < 10:
        raise DataError("occlusion schedule needs at least 10 frames")
    a = n_frames // 4
    m = n_frames - 2 * a
    p = m // 3
    h = m - 2 * p
    return ["none"] * a + ["partial"] * p + ["heavy"] * h + ["partial"] * p + ["none"] * a


def render(gt_pose: Pose, intr: CameraIntrinsics, model: NeedleModel, calib: NoiseCalibration,
           occlusion: str = "none", rng: np.random.Generator | None = None,
           grasper_axis=None, n_backbone: int = 100, noise: bool = True) -> Observation:
    """Noisy observation of a needle at ``gt_pose``.

    ``grasper_axis`` defaults to the needle-plane normal, i.e. the exactly
    perpendicular axis. The measured axis is that axis tipped towards the
    needle tangent by ``asin(clip(N(0, sigma_perp)))``.
    """
    if occlusion not in OCCLUSION_LEVELS:
        raise DataError(f"unknown occlusion level {occlusion!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    s = 1.0 if noise else 0.0
    sk = np.array(calib.sigma_keypoint)
    R = gt_pose.rotation

    tip = project(intr, gt_pose.apply(model.tip)) + s * rng.normal(size=2) * sk[:2]
    tail = project(intr, gt_pose.apply(model.tail)) + s * rng.normal(size=2) * sk[2:]
    pts = gt_pose.apply(sample_backbone(model, n_backbone))
    if np.any(pts[:, 2] <= 1e-6):
        raise BehindCamera("needle crosses the camera plane")
    backbone = project(intr, pts) + s * rng.normal(size=(n_backbone, 2)) * calib.sigma_conic
    grasp = gt_pose.apply(model.grasp_point) + s * rng.normal(size=3) * np.array(calib.sigma_anchor)

    z = R[:, 2] if grasper_axis is None else np.asarray(grasper_axis, dtype=float)
    z = z / np.linalg.norm(z)
    tangent = R @ model.grasp_tangent
    angle = np.arcsin(np.clip(s * rng.normal() * calib.sigma_perp, -1.0, 1.0))
    axis = np.cross(tangent, z)
    if np.linalg.norm(axis) > 1e-12 and angle != 0.0:
        # rotating z about (t x z) by -angle moves it towards t
        z = geo.rotation_about(axis, -angle) @ z
        z /= np.linalg.norm(z)

    backbone = backbone[intr.in_bounds(backbone)]
    obs = Observation(tip_px=tip, tail_px=tail, backbone_px=backbone, grasp_pos=grasp, grasper_axis=z)
    if occlusion == "partial":
        obs.tip_px = None
        obs.backbone_px = obs.backbone_px[len(obs.backbone_px) // 2:]
    elif occlusion == "heavy":
        obs.tip_px = None
        obs.backbone_px = np.zeros((0, 2))
    return obs


def reflect_depth(T: Pose, pivot) -> Pose:
    """Depth reflection of ``T`` through the plane ``z = pivot_z``.

    Conjugating by ``diag(1, 1, -1)`` flips the out-of-plane tilt while
    keeping the pivot fixed; under near-orthographic viewing the reflected
    needle projects almost onto the original.
    """
    D = np.diag([1.0, 1.0, -1.0])
    p = np.asarray(pivot, dtype=float)
    return Pose(D @ T.rotation @ D, D @ (T.translation - p) + p)


def mirror_pose(T: Pose, intr: CameraIntrinsics, model: NeedleModel, iters: int = 15) -> Pose:
    """The second circle pose sharing ``T``'s image conic.

    Starts from the depth reflection about the grasp point and runs
    Gauss-Newton on the Sampson distances of ``T``'s projected backbone,
    which converges to the exact dual solution of the circle pose problem.
    """
    x = project(intr, T.apply(sample_backbone(model, 100)))
    Tm = reflect_depth(T, T.apply(model.grasp_point))
    for _ in range(iters):
        r, J = dense_residual(Tm, intr, model, x)
        Tm = geo.exp_se3(np.linalg.lstsq(J, -r, rcond=1e-10)[0]) @ Tm
    return Tm


def generate(spec: TrajectorySpec, intr: CameraIntrinsics = CameraIntrinsics(),
             model: NeedleModel = NeedleModel(), calib: NoiseCalibration = NoiseCalibration(),
             noise: bool = True) -> list[SyntheticFrame]:
    """Full synthetic sequence: trajectory, occlusion levels and observations."""
    traj = make_trajectory(spec, model)
    if spec.kind == "suturing_occlusion" and spec.n_frames >= 10:
        levels = occlusion_schedule(spec.n_frames)
    else:
        levels = ["none"] * spec.n_frames
    rng = np.random.default_rng([spec.seed, 1])
    frames = []
    for k, (tf, occ) in enumerate(zip(traj, levels)):
        obs = render(tf.gt_pose, intr, model, calib, occ, rng, grasper_axis=tf.grasper_axis, noise=noise)
        twist = tf.robot_twist.copy()
        if spec.slip_bias and occ != "none":
            twist *= 1.0 + spec.slip_bias
        obs.robot_twist = twist
        obs.timestamp = k * spec.dt
        frames.append(SyntheticFrame(tf.gt_pose, obs, occ))
    return frames
