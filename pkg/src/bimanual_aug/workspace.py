"""Axis-aligned workspace box plus a reach sphere per arm."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class Workspace:
    box_min: tuple[float, float, float] = (-0.6, -0.1, -0.05)
    box_max: tuple[float, float, float] = (0.6, 0.7, 0.7)
    bases: tuple[tuple[float, float, float], tuple[float, float, float]] = ((-0.45, 0.0, 0.0), (0.45, 0.0, 0.0))
    reach_radius: float = 0.75

    def in_box(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.all((pts >= np.asarray(self.box_min)) & (pts <= np.asarray(self.box_max)), axis=-1)

    def in_reach(self, pts, arm: int) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.linalg.norm(pts - np.asarray(self.bases[arm]), axis=-1) <= self.reach_radius

    def predicate(self, arm: int) -> Callable[[np.ndarray], np.ndarray]:
        def reach(pts):
            return self.in_box(pts) & self.in_reach(pts, arm)

        return reach

    def to_dict(self) -> dict:
        return {
            "box_min": list(self.box_min),
            "box_max": list(self.box_max),
            "bases": [list(b) for b in self.bases],
            "reach_radius": self.reach_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Workspace":
        return cls(
            tuple(float(v) for v in d["box_min"]),
            tuple(float(v) for v in d["box_max"]),
            tuple(tuple(float(v) for v in b) for b in d["bases"]),
            float(d["reach_radius"]),
        )
