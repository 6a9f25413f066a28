"""Planar poses and angle helpers.

The agent lives on the XZ ground plane; theta is the heading angle around
the vertical axis, measured from +X towards +Z.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Normalize an angle to [0, 2*pi)."""
    theta = math.fmod(theta, TWO_PI)
    if theta < 0.0:
        theta += TWO_PI
    if theta >= TWO_PI:  # fmod can land exactly on 2*pi after the add
        theta -= TWO_PI
    return theta


@dataclass(frozen=True)
class Pose:
    """Planar agent state: position (x, z) in meters, heading theta in radians."""

    x: float
    z: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "z", float(self.z))

    @property
    def heading_vec(self) -> tuple[float, float]:
        """Unit heading vector (u, v) = (cos theta, sin theta)."""
        return (math.cos(self.theta), math.sin(self.theta))

    def moved(self, dist: float) -> "Pose":
        """Pose translated `dist` meters along the current heading."""
        u, v = self.heading_vec
        return Pose(self.x + dist * u, self.z + dist * v, self.theta)

    def turned(self, dtheta: float) -> "Pose":
        return Pose(self.x, self.z, self.theta + dtheta)


def euclidean(ax: float, az: float, bx: float, bz: float) -> float:
    return math.hypot(bx - ax, bz - az)
