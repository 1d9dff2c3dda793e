"""Rigid-body primitives: poses, vector alignment, reflection and interpolation.

All rotations are 3x3 float64 matrices.  Batched helpers (``*_batch``) operate on
stacks of shape ``(..., 3, 3)`` / ``(..., 3)`` and are what the augmentation
engine uses on whole trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateVector

EPS_VEC = 1e-9
# 1 + cos(angle) below this is handled by the antipodal branch
_ANTIPODAL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.eye(3), t)

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return invert(self)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        ortho = np.max(np.abs(R.T @ R - np.eye(3)))
        return bool(ortho <= tol and abs(np.linalg.det(R) - 1.0) <= tol and np.all(np.isfinite(self.translation)))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class Plane:
    """Plane ``{x : normal . x = offset}`` with unit normal."""

    normal: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm < EPS_VEC:
            raise DegenerateVector("plane normal has zero length")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def householder(self) -> np.ndarray:
        n = self.normal
        return np.eye(3) - 2.0 * np.outer(n, n)


YZ_PLANE = Plane(np.array([1.0, 0.0, 0.0]), 0.0)


def compose(p: Pose, q: Pose) -> Pose:
    return Pose(p.rotation @ q.rotation, p.rotation @ q.translation + p.translation)


def invert(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


def apply(p: Pose, x) -> np.ndarray:
    """Apply ``p`` to a point or an ``(n, 3)`` array of points."""
    x = np.asarray(x, dtype=float)
    return x @ p.rotation.T + p.translation


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


class Alignment(NamedTuple):
    rotation: np.ndarray
    antipodal: bool


def _fallback_axis(a_hat: np.ndarray) -> np.ndarray:
    # smallest |component| wins; ties go to the later axis so x-aligned input picks z
    mags = np.abs(a_hat)
    idx = 2 - int(np.argmin(mags[::-1]))
    e = np.zeros(3)
    e[idx] = 1.0
    p = e - (e @ a_hat) * a_hat
    return p / np.linalg.norm(p)


def _rodrigues_align(a_hat: np.ndarray, b_hat: np.ndarray) -> np.ndarray:
    v = np.cross(a_hat, b_hat)
    c = float(a_hat @ b_hat)
    vx = skew(v)
    return np.eye(3) + vx + (vx @ vx) / (1.0 + c)


def rotation_between(a, b) -> Alignment:
    """Minimal rotation taking direction ``a`` onto direction ``b``.

    Uses the vector-alignment form of Rodrigues' formula with the unnormalised
    cross product ``v = a x b``, i.e. ``R = I + [v] + [v]^2 (1 - a.b) / |v|^2``
    written as ``[v]^2 / (1 + a.b)``.  Exactly or nearly opposite inputs are
    resolved by a half-turn about a deterministic perpendicular axis (followed
    by the residual small alignment), and flagged.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < EPS_VEC or nb < EPS_VEC:
        raise DegenerateVector(f"cannot align vectors with norms {na:g}, {nb:g}")
    a_hat, b_hat = a / na, b / nb
    if 1.0 + float(a_hat @ b_hat) >= _ANTIPODAL_TOL:
        return Alignment(_rodrigues_align(a_hat, b_hat), False)
    p = _fallback_axis(a_hat)
    half_turn = 2.0 * np.outer(p, p) - np.eye(3)
    residual = _rodrigues_align(-a_hat, b_hat)
    return Alignment(residual @ half_turn, True)


def reflect_point(x, plane: Plane) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = plane.normal
    dist = x @ n - plane.offset
    return x - 2.0 * np.multiply.outer(dist, n)


def reflect_pose(p: Pose, plane: Plane) -> Pose:
    S = plane.householder
    return Pose(S @ p.rotation @ S, reflect_point(p.translation, plane))


def reflect_rotations(R: np.ndarray, plane: Plane) -> np.ndarray:
    S = plane.householder
    return S @ R @ S


def rotation_angle(R1: np.ndarray, R2: np.ndarray) -> np.ndarray:
    """Geodesic angle between rotations, accurate near zero."""
    d = np.linalg.norm(np.asarray(R1) - np.asarray(R2), axis=(-2, -1))
    return 2.0 * np.arcsin(np.clip(d / (2.0 * np.sqrt(2.0)), 0.0, 1.0))


def rotvec(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def exp_rotvec(w: np.ndarray) -> np.ndarray:
    return Rotation.from_rotvec(w).as_matrix()


def yaw_rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def interpolate_poses(p: Pose, q: Pose, ts) -> tuple[np.ndarray, np.ndarray]:
    """Batched geodesic interpolation; returns ``(rotations (n,3,3), translations (n,3))``.

    Endpoints ``t == 0`` and ``t == 1`` are returned exactly.
    """
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    if np.any((ts < 0.0) | (ts > 1.0)):
        raise ValueError("interpolation parameter outside [0, 1]")
    trans = p.translation + ts[:, None] * (q.translation - p.translation)
    w = rotvec(p.rotation.T @ q.rotation)
    rots = p.rotation @ exp_rotvec(ts[:, None] * w)
    rots[ts == 0.0] = p.rotation
    rots[ts == 1.0] = q.rotation
    trans[ts == 0.0] = p.translation
    trans[ts == 1.0] = q.translation
    return rots, trans


def interpolate_pose(p: Pose, q: Pose, t: float) -> Pose:
    rots, trans = interpolate_poses(p, q, [t])
    return Pose(rots[0], trans[0])


# batched helpers -------------------------------------------------------------

def compose_batch(Ra, ta, Rb, tb):
    R = Ra @ Rb
    t = np.einsum("...ij,...j->...i", Ra, tb) + ta
    return R, t


def invert_batch(R, t):
    Rt = np.swapaxes(R, -1, -2)
    return Rt, -np.einsum("...ij,...j->...i", Rt, t)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Rotation.from_quat(q).as_matrix()


def random_pose(rng: np.random.Generator, scale: float = 1.0) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-scale, scale, size=3))
