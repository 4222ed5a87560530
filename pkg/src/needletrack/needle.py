"""Circular-arc needle model.

The needle frame puts the circle centre at the origin in the z = 0 plane,
symmetric about +x: the tip sits at +3pi/8 and the tail at -3pi/8 for the
default 3/8-circle needle.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError, OutOfArc

ARC_TOL = 1e-12


@dataclass(frozen=True)
class NeedleModel:
    radius: float = 4.5e-3
    theta_tip: float = 3 * np.pi / 8
    theta_tail: float = -3 * np.pi / 8
    theta_grasp: float = -np.pi / 8
    wire_diameter: float = 0.4e-3  # metadata; residuals use the centreline

    def __post_init__(self):
        if self.radius <= 0:
            raise DataError("needle radius must be positive")
        if not 0 < self.arc_span <= 2 * np.pi + ARC_TOL:
            raise DataError("arc span must lie in (0, 2pi]")
        if not self.contains(self.theta_grasp):
            raise DataError("grasp parameter must lie on the arc")

    @property
    def arc_span(self) -> float:
        return abs(self.theta_tip - self.theta_tail)

    @property
    def theta_range(self) -> tuple[float, float]:
        return min(self.theta_tip, self.theta_tail), max(self.theta_tip, self.theta_tail)

    def contains(self, theta) -> bool:
        lo, hi = self.theta_range
        theta = np.asarray(theta)
        return bool(np.all((theta >= lo - ARC_TOL) & (theta <= hi + ARC_TOL)))

    @property
    def tip(self) -> np.ndarray:
        return point_at(self, self.theta_tip)

    @property
    def tail(self) -> np.ndarray:
        return point_at(self, self.theta_tail)

    @property
    def grasp_point(self) -> np.ndarray:
        return point_at(self, self.theta_grasp)

    @property
    def grasp_tangent(self) -> np.ndarray:
        return tangent_at(self, self.theta_grasp)

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NeedleModel":
        return cls(**{k: float(d[k]) for k in
                      ("radius", "theta_tip", "theta_tail", "theta_grasp", "wire_diameter")})


def point_at(model: NeedleModel, theta) -> np.ndarray:
    if not model.contains(theta):
        raise OutOfArc(f"theta={theta} outside the needle arc {model.theta_range}")
    theta = np.asarray(theta, dtype=float)
    r = model.radius
    return np.stack([r * np.cos(theta), r * np.sin(theta), np.zeros_like(theta)], axis=-1)


def tangent_at(model: NeedleModel, theta) -> np.ndarray:
    """Unit tangent in the direction of increasing theta."""
    if not model.contains(theta):
        raise OutOfArc(f"theta={theta} outside the needle arc {model.theta_range}")
    theta = np.asarray(theta, dtype=float)
    return np.stack([-np.sin(theta), np.cos(theta), np.zeros_like(theta)], axis=-1)


def sample_backbone(model: NeedleModel, n: int) -> np.ndarray:
    """``n`` points uniformly spaced in theta, tip first, both endpoints included."""
    if n < 2:
        raise DataError("need at least two backbone samples")
    theta = np.linspace(model.theta_tip, model.theta_tail, n)
    return point_at(model, theta)
