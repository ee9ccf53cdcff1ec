"""Rigid transforms and constant-curvature kinematics of a single flexible instrument."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

__all__ = [
    "Pose",
    "JointState",
    "ContinuumParams",
    "Centerline",
    "pose_from_vector",
    "pose_to_vector",
    "compose",
    "invert",
    "transform_point",
    "arc_points",
    "forward_kinematics",
]

# below this |kappa * s| the arc is evaluated as a straight segment
STRAIGHT_EPS = 1e-7
ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``p -> R p + t`` (translation in millimetres)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("Pose entries must be finite")
        if np.linalg.norm(R.T @ R - np.eye(3)) >= ORTHONORMAL_TOL or np.linalg.det(R) <= 0:
            raise ValueError("Pose rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        """3x4 ``[R|t]`` matrix."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __repr__(self):
        v = pose_to_vector(self)
        return f"Pose(rotvec={np.round(v[:3], 6).tolist()}, t={np.round(v[3:], 6).tolist()})"


def _orthonormalize(R):
    # project back onto SO(3) to keep products inside the invariant tolerance
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    if np.linalg.det(R) < 0:
        u[:, -1] *= -1
        R = u @ vt
    return R


def compose(a: Pose, b: Pose) -> Pose:
    """Return ``a o b``: apply ``b`` first, then ``a``."""
    return Pose(_orthonormalize(a.rotation @ b.rotation), a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt, -Rt @ a.translation)


def transform_point(a: Pose, p) -> np.ndarray:
    """Apply ``a`` to a point or an ``(..., 3)`` array of points."""
    p = np.asarray(p, dtype=float)
    return p @ a.rotation.T + a.translation


def pose_from_vector(v) -> Pose:
    """Pose from ``[rotation vector (rad); translation (mm)]``."""
    v = np.asarray(v, dtype=float).reshape(6)
    if not np.all(np.isfinite(v)):
        raise ValueError("pose vector must be finite")
    if np.linalg.norm(v[:3]) > np.pi + 1e-12:
        raise ValueError("rotation-vector norm must not exceed pi")
    return Pose(Rotation.from_rotvec(v[:3]).as_matrix(), v[3:])


def pose_to_vector(a: Pose) -> np.ndarray:
    return np.concatenate([Rotation.from_matrix(a.rotation).as_rotvec(), a.translation])


@dataclass(frozen=True)
class JointState:
    """Joint vector q: roll (rad), insertion (mm), bending command (unitless)."""

    rotation: float
    insertion: float
    bending: float

    def __post_init__(self):
        if not all(np.isfinite([self.rotation, self.insertion, self.bending])):
            raise ValueError(f"non-finite joint values: {self}")
        if self.insertion < 0:
            raise ValueError(f"insertion must be >= 0, got {self.insertion}")

    def as_array(self) -> np.ndarray:
        return np.array([self.rotation, self.insertion, self.bending])

    @classmethod
    def from_array(cls, a) -> "JointState":
        r, i, b = (float(x) for x in a)
        return cls(r, i, b)


@dataclass(frozen=True)
class ContinuumParams:
    """Kinematic model of one cable-driven instrument.

    ``curvature_gain`` maps the bending command linearly to curvature (1/mm).
    ``channel_pose`` places the channel exit in the robot base frame; the
    instrument leaves the channel along its local +z axis.
    """

    tube_radius: float = 1.75
    curvature_gain: float = 0.04
    max_insertion: float = 60.0
    bending_range: float = 1.0
    channel_pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        if not self.tube_radius > 0:
            raise ValueError("tube_radius must be > 0")
        if not self.max_insertion > 0:
            raise ValueError("max_insertion must be > 0")
        if not np.isfinite(self.curvature_gain):
            raise ValueError("curvature_gain must be finite")
        if not self.bending_range > 0:
            raise ValueError("bending_range must be > 0")

    def check_joints(self, q: JointState) -> None:
        if q.insertion > self.max_insertion:
            raise ValueError(f"insertion {q.insertion} exceeds max_insertion {self.max_insertion}")
        if abs(q.bending) > self.bending_range:
            raise ValueError(f"bending {q.bending} outside +/-{self.bending_range}")


@dataclass(frozen=True, eq=False)
class Centerline:
    points: np.ndarray  # (n, 3), robot base frame, mm
    arc_lengths: np.ndarray  # (n,), mm

    def __len__(self):
        return len(self.arc_lengths)

    @property
    def tip(self) -> np.ndarray:
        return self.points[-1]


def arc_points(q: JointState, params: ContinuumParams, n_samples: int = 64):
    """Centerline samples in the channel frame; returns ``(points, s)``."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    params.check_joints(q)
    s = q.insertion * np.arange(n_samples) / (n_samples - 1)
    kappa = q.bending * params.curvature_gain
    ks = kappa * s
    straight = np.abs(ks) < STRAIGHT_EPS
    safe_k = kappa if kappa != 0 else 1.0
    # 1 - cos(x) = 2 sin^2(x/2), free of cancellation for small x
    radial = np.where(straight, 0.0, 2.0 * np.sin(ks / 2.0) ** 2 / safe_k)
    axial = np.where(straight, s, np.sin(ks) / safe_k)
    pts = np.column_stack([radial * np.cos(q.rotation), radial * np.sin(q.rotation), axial])
    return pts, s


def forward_kinematics(q: JointState, params: ContinuumParams, n_samples: int = 64) -> Centerline:
    """Sample the constant-curvature backbone at ``n_samples`` equally spaced arc lengths."""
    pts, s = arc_points(q, params, n_samples)
    return Centerline(transform_point(params.channel_pose, pts), s)
