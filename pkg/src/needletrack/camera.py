"""Pinhole projection and the plane-to-image homography used for conics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import BehindCamera, DataError, DegenerateHomography
from .geometry import Pose

MIN_DEPTH = 1e-6
# Hadamard-normalised determinant below which H counts as singular
DEGENERATE_H = 1e-12

# Embeds plane coordinates [x, y, 1] as homogeneous 3D points [x, y, 0, 1]
PLANE_EMBED = np.array([[1.0, 0.0, 0.0],
                        [0.0, 1.0, 0.0],
                        [0.0, 0.0, 0.0],
                        [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 1000.0
    fy: float = 1000.0
    cx: float = 540.0
    cy: float = 540.0
    width: int = 1080
    height: int = 1080

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DataError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DataError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(**{k: d[k] for k in ("fx", "fy", "cx", "cy", "width", "height")})

    def in_bounds(self, px: np.ndarray) -> np.ndarray:
        px = np.atleast_2d(px)
        return ((px[:, 0] >= 0) & (px[:, 0] < self.width)
                & (px[:, 1] >= 0) & (px[:, 1] < self.height))


@dataclass(frozen=True)
class Conic:
    """Symmetric 3x3 conic, Frobenius-normalised, interior points negative."""

    C: np.ndarray

    def evaluate(self, px) -> np.ndarray:
        px = np.atleast_2d(np.asarray(px, dtype=float))
        x = np.column_stack([px, np.ones(len(px))])
        return np.einsum("mi,ij,mj->m", x, self.C, x)


def project_batch(intr: CameraIntrinsics, p: np.ndarray) -> np.ndarray:
    """Pinhole projection of ``(..., 3)`` points without depth checks."""
    z = p[..., 2]
    return np.stack([intr.fx * p[..., 0] / z + intr.cx,
                     intr.fy * p[..., 1] / z + intr.cy], axis=-1)


def projection_jacobian_batch(intr: CameraIntrinsics, p: np.ndarray) -> np.ndarray:
    X, Y, Z = p[..., 0], p[..., 1], p[..., 2]
    J = np.zeros(p.shape[:-1] + (2, 3))
    J[..., 0, 0] = intr.fx / Z
    J[..., 0, 2] = -intr.fx * X / Z**2
    J[..., 1, 1] = intr.fy / Z
    J[..., 1, 2] = -intr.fy * Y / Z**2
    return J


def _check_depth(p: np.ndarray):
    if np.any(p[..., 2] <= MIN_DEPTH):
        raise BehindCamera(f"point depth {np.min(p[..., 2]):.3g} m is not in front of the camera")


def project(intr: CameraIntrinsics, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    _check_depth(p)
    return project_batch(intr, p)


def projection_jacobian(intr: CameraIntrinsics, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    _check_depth(p)
    return projection_jacobian_batch(intr, p)


def homography_batch(intr: CameraIntrinsics, R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``K [I|0] T M`` for stacked poses; ``T M`` keeps columns r1, r2, t."""
    TM = np.concatenate([R[..., :, :2], t[..., :, None]], axis=-1)
    return intr.K @ TM


def homography_degeneracy(H: np.ndarray) -> np.ndarray:
    """|det H| divided by the product of column norms (0 = singular, 1 = orthogonal)."""
    norms = np.prod(np.linalg.norm(H, axis=-2), axis=-1)
    return np.abs(np.linalg.det(H)) / np.maximum(norms, 1e-300)


def conic_homography(intr: CameraIntrinsics, T: Pose) -> np.ndarray:
    H = homography_batch(intr, T.rotation[None], T.translation[None])[0]
    if homography_degeneracy(H) <= DEGENERATE_H:
        raise DegenerateHomography("needle plane passes through the camera centre")
    return H


def conic_from_homography(H: np.ndarray, radius: float) -> np.ndarray:
    """Unnormalised ``H^-T diag(1, 1, -r^2) H^-1`` (batched), symmetrised."""
    Hinv = np.linalg.inv(H)
    Q = np.diag([1.0, 1.0, -radius**2])
    C = np.swapaxes(Hinv, -1, -2) @ Q @ Hinv
    return 0.5 * (C + np.swapaxes(C, -1, -2))


def normalize_conic(C: np.ndarray) -> np.ndarray:
    # the plane quadric maps interior points to negative values already;
    # dividing by a positive norm keeps that orientation
    return C / np.linalg.norm(C)


def project_conic(intr: CameraIntrinsics, T: Pose, radius: float) -> Conic:
    H = conic_homography(intr, T)
    return Conic(normalize_conic(conic_from_homography(H, radius)))


def sample_conic_points(conic: Conic, n: int = 64):
    """Points on an ellipse conic (helper for tests and rendering)."""
    C = conic.C
    A = C[:2, :2]
    b = C[:2, 2]
    centre = -np.linalg.solve(A, b)
    k = centre @ A @ centre - C[2, 2]
    w, V = np.linalg.eigh(A / k)
    th = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    circ = np.column_stack([np.cos(th) / np.sqrt(w[0]), np.sin(th) / np.sqrt(w[1])])
    return centre + circ @ V.T
