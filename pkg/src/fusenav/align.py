"""Similarity-transform estimation between coordinate frames.

The replayed-observation database is built in its own frame, which may be
scaled, rotated, and shifted relative to the training world. A weighted
least-squares similarity fit (closed form, SVD-based) over pose
correspondences recovers the transform; headings are carried rigidly by the
fitted rotation and validated post hoc rather than entering the fit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, wrap_angle


class DegenerateCorrespondences(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityTransform2D:
    """p -> scale * R(rotation) @ p + (dx, dz); headings shift by rotation."""

    scale: float = 1.0
    rotation: float = 0.0
    dx: float = 0.0
    dz: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply_xy(self, x: float, z: float) -> tuple[float, float]:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return (self.scale * (c * x - s * z) + self.dx,
                self.scale * (s * x + c * z) + self.dz)

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.matrix.T + np.array([self.dx, self.dz])

    def apply(self, pose: Pose) -> Pose:
        x, z = self.apply_xy(pose.x, pose.z)
        return Pose(x, z, pose.theta + self.rotation)

    def inverse(self) -> "SimilarityTransform2D":
        inv_scale = 1.0 / self.scale
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        return SimilarityTransform2D(
            scale=inv_scale, rotation=wrap_angle(-self.rotation),
            dx=inv_scale * (c * -self.dx - s * -self.dz),
            dz=inv_scale * (s * -self.dx + c * -self.dz))

    @classmethod
    def identity(cls) -> "SimilarityTransform2D":
        return cls()

    def to_dict(self) -> dict:
        return {"scale": self.scale, "rotation_rad": self.rotation,
                "dx": self.dx, "dz": self.dz}

    @classmethod
    def from_dict(cls, doc: dict) -> "SimilarityTransform2D":
        return cls(scale=float(doc["scale"]), rotation=float(doc["rotation_rad"]),
                   dx=float(doc["dx"]), dz=float(doc["dz"]))


def save_transform(transform: SimilarityTransform2D, residual_rms: float, path: str):
    doc = transform.to_dict()
    doc["residual_rms"] = residual_rms
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)


def load_transform(path: str) -> tuple[SimilarityTransform2D, float]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return SimilarityTransform2D.from_dict(doc), float(doc.get("residual_rms", math.nan))


@dataclass(frozen=True)
class CorrespondenceSet:
    """Paired poses (source frame -> target frame) with optional weights."""

    source: tuple[Pose, ...]
    target: tuple[Pose, ...]
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.source) != len(self.target):
            raise ValueError("source and target must pair up")
        if self.weights is not None:
            if len(self.weights) != len(self.source):
                raise ValueError("weights must match pair count")
            if any(w < 0 for w in self.weights):
                raise ValueError("weights must be nonnegative")

    def __len__(self):
        return len(self.source)


@dataclass(frozen=True)
class Camera6DoF:
    """Raw camera pose record before ground-plane reduction."""

    x: float
    height: float
    z: float
    yaw: float
    pitch: float = 0.0
    roll: float = 0.0


class BadCameraRecord(ValueError):
    pass


def reduce_pose(camera: Camera6DoF, rig_height: float = 0.6,
                tolerance_rad: float = math.radians(5.0),
                height_tolerance: float = 0.05) -> Pose:
    """Project a 6DoF camera pose onto the ground plane.

    The rig keeps height, pitch, and roll fixed; records outside tolerance
    indicate a bad capture and are rejected.
    """
    if abs(camera.pitch) > tolerance_rad or abs(camera.roll) > tolerance_rad:
        raise BadCameraRecord(
            f"pitch/roll ({camera.pitch:.3f}, {camera.roll:.3f}) outside "
            f"+/-{tolerance_rad:.3f} rad")
    if abs(camera.height - rig_height) > height_tolerance:
        raise BadCameraRecord(
            f"camera height {camera.height:.3f} departs from rig {rig_height:.3f}")
    return Pose(camera.x, camera.z, camera.yaw)


def estimate_similarity(corr: CorrespondenceSet,
                        min_pairs: int = 3) -> tuple[SimilarityTransform2D, float]:
    """Weighted least-squares similarity fit of source onto target positions.

    Minimizes sum_i w_i * ||s R p_i + t - q_i||^2 in closed form. Reflections
    are disallowed (det R forced +1). Returns (transform, residual RMS).
    """
    n = len(corr)
    if n < min_pairs:
        raise DegenerateCorrespondences(f"need >= {min_pairs} pairs, got {n}")
    p = np.array([[ps.x, ps.z] for ps in corr.source])
    q = np.array([[pt.x, pt.z] for pt in corr.target])
    w = (np.ones(n) if corr.weights is None else np.asarray(corr.weights, dtype=float))
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateCorrespondences("all weights are zero")
    w = w / wsum

    mu_p = w @ p
    mu_q = w @ q
    dp = p - mu_p
    dq = q - mu_q
    var_p = float((w * (dp ** 2).sum(axis=1)).sum())
    if var_p < 1e-24:
        raise DegenerateCorrespondences("source positions are coincident")

    cov = (dq * w[:, None]).T @ dp
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[1] = -1.0
    rot_mat = u @ np.diag(sign) @ vt
    scale = float((d * sign).sum() / var_p)
    if scale <= 0:
        raise DegenerateCorrespondences("degenerate fit: nonpositive scale")
    rotation = wrap_angle(math.atan2(rot_mat[1, 0], rot_mat[0, 0]))
    t = mu_q - scale * (rot_mat @ mu_p)

    transform = SimilarityTransform2D(scale=scale, rotation=rotation,
                                      dx=float(t[0]), dz=float(t[1]))
    residuals = transform.apply_points(p) - q
    rms = math.sqrt(float((w * (residuals ** 2).sum(axis=1)).sum()))
    return transform, rms
