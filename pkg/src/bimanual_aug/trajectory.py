"""State-action trajectory container and its ``traj.json`` encoding."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .geometry import Plane, Pose, reflect_point, reflect_rotations


@dataclass(frozen=True)
class KeypointMeta:
    id: int
    label: str
    group: int
    owner: int  # object index, 1-based


@dataclass(eq=False)
class Trajectory:
    """Keypoint states plus bimanual actions, sampled every ``dt`` seconds.

    Arrays: ``keypoints (L, N, 3)``, ``rotations (L, 2, 3, 3)``,
    ``positions (L, 2, 3)``, ``gripper (L, 2)`` with values in {0, 1}.
    """

    dt: float
    keypoints: np.ndarray
    rotations: np.ndarray
    positions: np.ndarray
    gripper: np.ndarray
    meta: tuple[KeypointMeta, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float)
        self.rotations = np.asarray(self.rotations, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        self.gripper = np.asarray(self.gripper, dtype=np.int8)
        self.meta = tuple(self.meta)
        L = self.positions.shape[0]
        if self.rotations.shape != (L, 2, 3, 3) or self.positions.shape != (L, 2, 3):
            raise ValidationError("action arrays must have shapes (L,2,3,3) and (L,2,3)")
        if self.gripper.shape != (L, 2):
            raise ValidationError("gripper must have shape (L, 2)")
        if self.keypoints.ndim != 3 or self.keypoints.shape[0] != L or self.keypoints.shape[2] != 3:
            raise ValidationError("keypoints must have shape (L, N, 3)")
        if self.meta and len(self.meta) != self.keypoints.shape[1]:
            raise ValidationError("keypoint metadata count does not match N")

    @property
    def length(self) -> int:
        return self.positions.shape[0]

    @property
    def num_keypoints(self) -> int:
        return self.keypoints.shape[1]

    @property
    def owners(self) -> np.ndarray:
        return np.array([m.owner for m in self.meta], dtype=int)

    def pose(self, t: int, arm: int) -> Pose:
        return Pose(self.rotations[t, arm], self.positions[t, arm])

    def copy(self) -> "Trajectory":
        return replace(
            self,
            keypoints=self.keypoints.copy(),
            rotations=self.rotations.copy(),
            positions=self.positions.copy(),
            gripper=self.gripper.copy(),
        )

    def mirrored(self, plane: Plane) -> "Trajectory":
        """Reflect every keypoint and pose across ``plane`` and swap the arm streams."""
        rots = reflect_rotations(self.rotations[:, ::-1], plane)
        return replace(
            self,
            keypoints=reflect_point(self.keypoints, plane),
            rotations=rots,
            positions=reflect_point(self.positions[:, ::-1], plane),
            gripper=self.gripper[:, ::-1].copy(),
        )

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.keypoints)) and np.all(np.isfinite(self.positions))
                    and np.all(np.isfinite(self.rotations)))

    # --- traj.json ---------------------------------------------------------

    def to_json_dict(self) -> dict:
        frames = []
        for t in range(self.length):
            arms = [
                {
                    "position": self.positions[t, j].tolist(),
                    "rotation": self.rotations[t, j].reshape(9).tolist(),
                    "gripper": int(self.gripper[t, j]),
                }
                for j in range(2)
            ]
            frames.append({"state": self.keypoints[t].tolist(), "arms": arms})
        return {
            "dt": self.dt,
            "keypoints": [
                {"id": m.id, "label": m.label, "group": m.group, "object": m.owner} for m in self.meta
            ],
            "frames": frames,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Trajectory":
        try:
            meta = tuple(
                KeypointMeta(int(k["id"]), str(k["label"]), int(k["group"]), int(k["object"]))
                for k in d["keypoints"]
            )
            frames = d["frames"]
            n = len(meta)
            kps = np.array([f["state"] for f in frames], dtype=float).reshape(len(frames), n, 3)
            pos = np.array([[a["position"] for a in f["arms"]] for f in frames], dtype=float)
            rot = np.array([[a["rotation"] for a in f["arms"]] for f in frames], dtype=float)
            grip = np.array([[a["gripper"] for a in f["arms"]] for f in frames], dtype=np.int8)
            return cls(float(d["dt"]), kps, rot.reshape(len(frames), 2, 3, 3), pos, grip, meta)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed trajectory: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()))

    @classmethod
    def load(cls, path) -> "Trajectory":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"trajectory file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
        return cls.from_json_dict(d)


def gripper_events(gripper: np.ndarray) -> list[tuple[int, int]]:
    """``(t, +1/-1)`` for every frame where a single arm's gripper changes."""
    g = np.asarray(gripper, dtype=int)
    d = np.diff(g)
    idx = np.nonzero(d)[0]
    return [(int(i) + 1, int(np.sign(d[i]))) for i in idx]
