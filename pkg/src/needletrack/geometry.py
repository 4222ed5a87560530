"""SE(3)/SO(3) primitives.

Twists are 6-vectors ordered translation first, ``[v; w]``. All
perturbations are left-multiplicative: ``T <- exp(hat(xi)) @ T``.

Most functions come in two flavours: a single-pose version working on
:class:`Pose` and a ``*_batch`` version working on stacked arrays
``R (N, 3, 3)`` / ``t (N, 3)`` which the estimators use internally.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi

SMALL_ANGLE = 1e-6
PI_MARGIN = 1e-6


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping needle-frame points into the camera frame."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform one point (3,) or many (M, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (np.linalg.norm(R.T @ R - np.eye(3)) < tol
                and abs(np.linalg.det(R) - 1.0) < tol)


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ w == cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee3(W: np.ndarray) -> np.ndarray:
    W = np.asarray(W)
    return 0.5 * np.stack([W[..., 2, 1] - W[..., 1, 2],
                           W[..., 0, 2] - W[..., 2, 0],
                           W[..., 1, 0] - W[..., 0, 1]], axis=-1)


def hat(xi) -> np.ndarray:
    """4x4 Lie-algebra matrix of a twist ``[v; w]``."""
    xi = np.asarray(xi, dtype=float)
    X = np.zeros(xi.shape[:-1] + (4, 4))
    X[..., :3, :3] = skew_batch(xi[..., 3:])
    X[..., :3, 3] = xi[..., :3]
    return X


def vee(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.concatenate([X[..., :3, 3], vee3(X[..., :3, :3])], axis=-1)


def _exp_coeffs(theta: np.ndarray):
    """A = sin/th, B = (1-cos)/th^2, C = (th-sin)/th^3 with Taylor fallbacks."""
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    th2 = theta * theta
    A = np.where(small, 1.0 - th2 / 6.0, np.sin(th) / th)
    B = np.where(small, 0.5 - th2 / 24.0, (1.0 - np.cos(th)) / th**2)
    C = np.where(small, 1.0 / 6.0 - th2 / 120.0, (th - np.sin(th)) / th**3)
    return A, B, C


def exp_so3_batch(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)
    A, B, _ = _exp_coeffs(theta)
    W = skew_batch(w)
    I = np.broadcast_to(np.eye(3), W.shape)
    return I + A[..., None, None] * W + B[..., None, None] * (W @ W)


def exp_se3_batch(xi: np.ndarray):
    """Batched exponential: ``(N, 6) -> (R (N,3,3), t (N,3))``."""
    xi = np.asarray(xi, dtype=float)
    v, w = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(w, axis=-1)
    A, B, C = _exp_coeffs(theta)
    W = skew_batch(w)
    W2 = W @ W
    I = np.broadcast_to(np.eye(3), W.shape)
    R = I + A[..., None, None] * W + B[..., None, None] * W2
    V = I + B[..., None, None] * W + C[..., None, None] * W2
    t = np.einsum("...ij,...j->...i", V, v)
    return R, t


def exp_se3(xi) -> Pose:
    R, t = exp_se3_batch(np.asarray(xi, dtype=float)[None])
    return Pose(R[0], t[0])


def rotation_angle_batch(R: np.ndarray) -> np.ndarray:
    """Geodesic angle of rotation matrices, robust at both ends of [0, pi]."""
    s = np.linalg.norm(vee3(R), axis=-1)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(s, c)


def log_so3_batch(R: np.ndarray, strict: bool = True) -> np.ndarray:
    """Rotation vectors of ``R``.

    With ``strict`` an :class:`AngleNearPi` is raised when any angle lies
    within ``PI_MARGIN`` of pi. Non-strict mode resolves the axis near pi
    from the symmetric part instead, which is what the kernel and the
    diagnostics need (they must not abort on a stray particle).
    """
    R = np.asarray(R, dtype=float)
    theta = rotation_angle_batch(R)
    near_pi = theta > np.pi - PI_MARGIN
    if strict and np.any(near_pi):
        raise AngleNearPi(f"rotation angle {theta.max():.9f} too close to pi")
    small = theta < SMALL_ANGLE
    th = np.where(small | near_pi, 1.0, theta)
    scale = np.where(small, 0.5 + theta**2 / 12.0, 0.5 * th / np.sin(th))
    w = 2.0 * scale[..., None] * vee3(R)
    if np.any(near_pi):
        Rf, wf, thf = R.reshape(-1, 3, 3), w.reshape(-1, 3), np.reshape(theta, -1)
        for k in np.flatnonzero(np.reshape(near_pi, -1)):
            wf[k] = _axis_near_pi(Rf[k]) * thf[k]
        w = wf.reshape(w.shape)
    return w


def _axis_near_pi(R: np.ndarray) -> np.ndarray:
    # R + I = 2 a a^T at exactly pi; take the best-conditioned column
    M = 0.5 * (R + np.eye(3))
    j = int(np.argmax(np.diag(M)))
    a = M[:, j] / np.sqrt(max(M[j, j], 1e-300))
    a /= np.linalg.norm(a)
    # fix the sign from the residual antisymmetric part
    if np.dot(a, vee3(R)) < 0:
        a = -a
    return a


def log_se3_batch(R: np.ndarray, t: np.ndarray, strict: bool = True) -> np.ndarray:
    """Batched logarithm: ``(R, t) -> (N, 6)`` twists."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    w = log_so3_batch(R, strict=strict)
    theta = np.linalg.norm(w, axis=-1)
    A, B, _ = _exp_coeffs(theta)
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    # V^-1 = I - W/2 + D W^2, D = (1 - A/(2B)) / th^2
    D = np.where(small, 1.0 / 12.0 + theta**2 / 720.0,
                 (1.0 - A / (2.0 * np.where(small, 1.0, B))) / th**2)
    W = skew_batch(w)
    I = np.broadcast_to(np.eye(3), W.shape)
    Vinv = I - 0.5 * W + D[..., None, None] * (W @ W)
    v = np.einsum("...ij,...j->...i", Vinv, t)
    return np.concatenate([v, w], axis=-1)


def log_se3(T: Pose) -> np.ndarray:
    """Twist ``xi`` with ``exp_se3(xi) == T``; raises near a half turn."""
    return log_se3_batch(T.rotation[None], T.translation[None])[0]


def generators() -> np.ndarray:
    """The six 4x4 basis matrices of se(3), translation generators first."""
    E = np.zeros((6, 4, 4))
    for j in range(3):
        E[j, j, 3] = 1.0
        E[3 + j, :3, :3] = skew(np.eye(3)[j])
    return E


def commutation_3x3() -> np.ndarray:
    """Permutation K with ``K @ vec(A) == vec(A.T)`` (column-major vec)."""
    K = np.zeros((9, 9))
    for i in range(3):
        for j in range(3):
            K[3 * i + j, 3 * j + i] = 1.0
    return K


def vec(A: np.ndarray) -> np.ndarray:
    """Column-stacking vectorisation; works on trailing 3x3 (or m x n) axes."""
    A = np.asarray(A)
    return np.swapaxes(A, -1, -2).reshape(A.shape[:-2] + (-1,))


def unvec3(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    return np.swapaxes(v.reshape(v.shape[:-1] + (3, 3)), -1, -2)


def kron(A, B) -> np.ndarray:
    return np.kron(np.asarray(A, dtype=float), np.asarray(B, dtype=float))


def kron_batch(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Kronecker product over a leading batch axis."""
    n, m, p = A.shape
    _, q, r = B.shape
    return np.einsum("nij,nkl->nikjl", A, B).reshape(n, m * q, p * r)


def compose_batch(R1, t1, R2, t2):
    """``T1 @ T2`` for broadcastable stacks."""
    R = R1 @ R2
    t = np.einsum("...ij,...j->...i", R1, t2) + t1
    return R, t


def inverse_batch(R, t):
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -np.einsum("...ij,...j->...i", Rt, t)


def left_perturb_batch(xi, R, t):
    """``exp(hat(xi)) @ T`` for stacks of twists and poses."""
    dR, dt = exp_se3_batch(xi)
    return compose_batch(dR, dt, R, t)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation (polar projection) of one or many 3x3 matrices."""
    U, _, Vt = np.linalg.svd(R)
    d = np.sign(np.linalg.det(U @ Vt))
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    return U @ Vt


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return exp_so3_batch((axis * angle)[None])[0]


def poses_to_arrays(poses) -> tuple[np.ndarray, np.ndarray]:
    R = np.stack([p.rotation for p in poses])
    t = np.stack([p.translation for p in poses])
    return R, t
