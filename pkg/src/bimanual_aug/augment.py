"""Spatial augmentation of a grounded bimanual demo.

Skill segments are moved rigidly with their assigned object, motion segments are
re-planned between the transformed skills, the two arms are re-synchronised in
front of every sync skill, and keypoints are propagated under the rigidity
assumption.  ``generate_dataset`` runs the whole thing for many sampled object
configurations.

Convention: a per-object delta ``W_k`` is the world-frame rigid motion that takes
the demo object frame to the sampled one, ``T_new = W_k @ T_demo``.  Applying it
on the left keeps every EE pose fixed relative to the moved object frame.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import (
    AugError,
    BatchFailure,
    PlannerFailure,
    UnownedKeypoints,
    UnsatisfiableSpec,
    ValidationError,
)
from .geometry import YZ_PLANE, Plane, Pose, interpolate_poses, yaw_rotation
from .template import (
    IDLE,
    MOTION,
    SKILL_ASYNC,
    SKILL_KINDS,
    SKILL_SYNC,
    GraspEvent,
    ObjectConfiguration,
    SegmentTimeline,
    TaskTemplate,
    ground_segments,
    mirror_template_inputs,
)
from .trajectory import Trajectory, gripper_events
from .workspace import Workspace

log = logging.getLogger(__name__)

PAD = "pad"
Planner = Callable[[Pose, Pose, int], tuple[np.ndarray, np.ndarray]]


# --- augmentation settings -------------------------------------------------------

@dataclass(frozen=True)
class ObjectSampler:
    translation_range: tuple[tuple[float, float], ...] = ((-0.1, 0.1), (-0.1, 0.1), (0.0, 0.0))
    yaw_range: tuple[float, float] = (-math.pi / 6, math.pi / 6)

    def to_dict(self) -> dict:
        return {"translation_range": [list(r) for r in self.translation_range], "yaw_range": list(self.yaw_range)}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectSampler":
        tr = tuple(tuple(float(v) for v in r) for r in d["translation_range"])
        if len(tr) != 3 or any(len(r) != 2 or r[0] > r[1] for r in tr):
            raise ValidationError("translation_range needs three [lo, hi] pairs")
        yr = tuple(float(v) for v in d["yaw_range"])
        if len(yr) != 2 or yr[0] > yr[1]:
            raise ValidationError("yaw_range must be [lo, hi]")
        return cls(tr, yr)


@dataclass(frozen=True)
class AugmentationSpec:
    workspace: Workspace = field(default_factory=Workspace)
    symmetry_plane: Plane = YZ_PLANE
    object_samplers: tuple[ObjectSampler, ...] = ()
    min_separation: float = 0.08
    velocity: float = 0.25
    dt: float = 0.1
    seed: int = 0
    count: int = 1000
    max_retries: int = 1000
    allow_mirror: bool = True

    def __post_init__(self):
        if not self.velocity > 0 or not self.dt > 0:
            raise ValidationError("velocity and dt must be positive")
        if self.min_separation < 0:
            raise ValidationError("min_separation must be >= 0")
        if self.count < 0:
            raise ValidationError("count must be >= 0")
        for s in self.object_samplers:
            if not all(np.isfinite(v) for r in s.translation_range for v in r) or not all(np.isfinite(s.yaw_range)):
                raise ValidationError("sampler ranges must be finite")

    def to_dict(self) -> dict:
        ws = self.workspace
        return {
            "workspace_box": {"min": list(ws.box_min), "max": list(ws.box_max)},
            "arm_bases": [list(b) for b in ws.bases],
            "reach_radius": ws.reach_radius,
            "symmetry_plane": {"normal": self.symmetry_plane.normal.tolist(), "offset": self.symmetry_plane.offset},
            "object_samplers": [s.to_dict() for s in self.object_samplers],
            "min_separation": self.min_separation,
            "velocity": self.velocity,
            "dt": self.dt,
            "seed": self.seed,
            "count": self.count,
            "max_retries": self.max_retries,
            "allow_mirror": self.allow_mirror,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        try:
            ws = Workspace(
                tuple(float(v) for v in d["workspace_box"]["min"]),
                tuple(float(v) for v in d["workspace_box"]["max"]),
                tuple(tuple(float(v) for v in b) for b in d["arm_bases"]),
                float(d["reach_radius"]),
            )
            plane = d.get("symmetry_plane", {"normal": [1, 0, 0], "offset": 0})
            return cls(
                workspace=ws,
                symmetry_plane=Plane(np.asarray(plane["normal"], dtype=float), float(plane.get("offset", 0.0))),
                object_samplers=tuple(ObjectSampler.from_dict(s) for s in d["object_samplers"]),
                min_separation=float(d.get("min_separation", 0.08)),
                velocity=float(d.get("velocity", 0.25)),
                dt=float(d.get("dt", 0.1)),
                seed=int(d.get("seed", 0)),
                count=int(d.get("count", 1000)),
                max_retries=int(d.get("max_retries", 1000)),
                allow_mirror=bool(d.get("allow_mirror", True)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed augmentation spec: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "AugmentationSpec":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"spec file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc


def rng_for(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)]))


# --- configuration sampling ----------------------------------------------------------

class SampledConfiguration(NamedTuple):
    config: ObjectConfiguration     # sampled object frames
    deltas: tuple[Pose, ...]        # world-frame motion from the (possibly mirrored) demo frames
    use_mirror: bool


def sample_configuration(
    spec: AugmentationSpec,
    source: ObjectConfiguration,
    template: TaskTemplate,
    rng: np.random.Generator,
) -> SampledConfiguration:
    """Draw object offsets and yaws until the layout is in the box, separated and reachable.

    Offsets are relative to each demo object centre.  If an object is out of
    reach of its template arm but every object is reachable with the arm roles
    swapped, the sample is accepted in mirrored form.
    """
    K = source.num_objects
    if len(spec.object_samplers) != K:
        raise ValidationError(f"spec has {len(spec.object_samplers)} object samplers, configuration has {K}")
    ws = spec.workspace
    centers = source.centers()
    arms = [template.assigned_arm(k) for k in range(1, K + 1)]
    lo = np.array([[r[0] for r in s.translation_range] for s in spec.object_samplers])
    hi = np.array([[r[1] for r in s.translation_range] for s in spec.object_samplers])
    ylo = np.array([s.yaw_range[0] for s in spec.object_samplers])
    yhi = np.array([s.yaw_range[1] for s in spec.object_samplers])

    for _ in range(spec.max_retries):
        offsets = lo + (hi - lo) * rng.random((K, 3))
        yaws = ylo + (yhi - ylo) * rng.random(K)
        new_c = centers + offsets
        if not np.all(ws.in_box(new_c)):
            continue
        if K > 1:
            d = np.linalg.norm(new_c[:, None] - new_c[None], axis=-1)
            if np.min(d[np.triu_indices(K, 1)]) < spec.min_separation:
                continue
        ok = all(a is None or ws.in_reach(new_c[k], a) for k, a in enumerate(arms))
        mirror = False
        if not ok:
            if not spec.allow_mirror:
                continue
            if not all(a is None or ws.in_reach(new_c[k], 1 - a) for k, a in enumerate(arms)):
                continue
            mirror = True
        src = source.mirrored(spec.symmetry_plane) if mirror else source
        poses, deltas = [], []
        for k in range(K):
            R = yaw_rotation(yaws[k]) if yaws[k] != 0.0 else np.eye(3)
            old = src.poses[k]
            new = Pose(R @ old.rotation, new_c[k])
            poses.append(new)
            deltas.append(Pose(R, new_c[k] - R @ old.translation))
        return SampledConfiguration(ObjectConfiguration(tuple(poses), dict(source.ownership)), tuple(deltas), mirror)
    raise UnsatisfiableSpec(f"no admissible configuration after {spec.max_retries} draws")


# --- segment operations ----------------------------------------------------------------

def augment_skill_segment(rotations: np.ndarray, positions: np.ndarray, delta: Pose):
    """Move a skill segment rigidly with its reference frame: ``T_new = delta @ T``."""
    return delta.rotation @ rotations, positions @ delta.rotation.T + delta.translation


def linear_planner(start: Pose, goal: Pose, count: int):
    """Straight-line translation with geodesic rotation; ``count`` poses including both ends."""
    return interpolate_poses(start, goal, np.linspace(0.0, 1.0, count))


def motion_steps(start: Pose, goal: Pose, velocity: float, dt: float) -> int:
    d = float(np.linalg.norm(goal.translation - start.translation))
    return max(1, math.ceil(d / (velocity * dt) - 1e-12))


def plan_motion_segment(
    start: Pose,
    goal: Pose,
    gripper: int,
    velocity: float,
    dt: float,
    planner: Planner | None = None,
    steps: int | None = None,
):
    """Intermediate poses strictly between ``start`` and ``goal``.

    The step count follows a constant velocity unless ``steps`` is given.
    Returns ``(rotations (n,3,3), positions (n,3), gripper (n,))``.
    """
    if not velocity > 0 or not dt > 0:
        raise ValidationError("velocity and dt must be positive")
    n = motion_steps(start, goal, velocity, dt) if steps is None else int(steps)
    if n < 0:
        raise ValidationError("negative step count")
    if n == 0:
        return np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int8)
    planner = planner or linear_planner
    try:
        rots, pos = planner(start, goal, n + 2)
    except PlannerFailure:
        raise
    except Exception as exc:  # third-party planners
        raise PlannerFailure(str(exc)) from exc
    rots, pos = np.asarray(rots, dtype=float), np.asarray(pos, dtype=float)
    if rots.shape != (n + 2, 3, 3) or pos.shape != (n + 2, 3):
        raise PlannerFailure(f"planner returned {len(pos)} poses, expected {n + 2}")
    if not (Pose(rots[0], pos[0]).allclose(start) and Pose(rots[-1], pos[-1]).allclose(goal)):
        raise PlannerFailure("planner output does not hit the requested endpoints")
    return rots[1:-1], pos[1:-1], np.full(n, gripper, dtype=np.int8)


class AugSegment(NamedTuple):
    kind: str
    stage: int
    frame: int       # reference frame for skills, 0 otherwise
    start: int       # augmented frames, inclusive
    end: int
    demo_start: int  # -1 when the frames are synthesised
    demo_end: int


class _Stream:
    """Growing action stream of one arm."""

    def __init__(self):
        self.rots: list[np.ndarray] = []
        self.pos: list[np.ndarray] = []
        self.grip: list[np.ndarray] = []
        self.src: list[np.ndarray] = []     # demo frame index or -1
        self.ref: list[np.ndarray] = []     # reference frame of skill frames or -1
        self.segments: list[AugSegment] = []
        self.n = 0

    def emit(self, rots, pos, grip, src, ref, kind, stage, frame=0, demo=(-1, -1)):
        m = len(pos)
        if m == 0:
            return
        self.rots.append(rots)
        self.pos.append(pos)
        self.grip.append(np.asarray(grip, dtype=np.int8))
        self.src.append(np.asarray(src, dtype=np.int64))
        self.ref.append(np.full(m, ref, dtype=np.int64))
        self.segments.append(AugSegment(kind, stage, frame, self.n, self.n + m - 1, demo[0], demo[1]))
        self.n += m

    def last(self) -> tuple[Pose, int, int, int]:
        return (Pose(self.rots[-1][-1], self.pos[-1][-1]), int(self.grip[-1][-1]),
                int(self.src[-1][-1]), int(self.ref[-1][-1]))

    def hold(self, count: int, kind: str, stage: int):
        if count <= 0:
            return
        p, g, _, _ = self.last()
        self.emit(np.broadcast_to(p.rotation, (count, 3, 3)).copy(), np.tile(p.translation, (count, 1)),
                  np.full(count, g), np.full(count, -1), -1, kind, stage)

    def arrays(self):
        return (np.concatenate(self.rots), np.concatenate(self.pos), np.concatenate(self.grip),
                np.concatenate(self.src), np.concatenate(self.ref))


def resynchronize(streams: Sequence[_Stream], stage: int) -> tuple[int, int]:
    """Pad the arm that arrives first by repeating its last pose; returns the padding per arm."""
    n0, n1 = streams[0].n, streams[1].n
    pads = (max(0, n1 - n0), max(0, n0 - n1))
    for s, p in zip(streams, pads):
        s.hold(p, PAD, stage)
    return pads


# --- keypoint propagation ----------------------------------------------------------------

def _transform_points(R, t, local):
    # R (m,3,3), t (m,3), local (n,3) -> (m,n,3)
    return np.einsum("mij,nj->mni", R, local) + t[:, None, :]


def propagate_keypoints(
    rotations: np.ndarray,
    positions: np.ndarray,
    gripper: np.ndarray,
    events: Sequence[Sequence[GraspEvent]],
    initial: np.ndarray,
    owners: Sequence[int],
) -> np.ndarray:
    """Keypoint states under the rigidity assumption.

    ``events`` is the demo grasp log; the i-th gripper change of each arm in
    ``gripper`` inherits the object of the i-th demo event.  Between a grasp
    and the matching release the object's keypoints keep their pose relative
    to the grasping EE (release frame included); otherwise they stay put.
    Returns ``(L, N, 3)``.
    """
    L = len(positions)
    owners = np.asarray(owners, dtype=int)
    timeline = []
    for arm in range(2):
        aug = gripper_events(gripper[:, arm])
        demo = list(events[arm])
        if len(aug) != len(demo):
            raise AugError(f"arm {arm}: {len(aug)} gripper changes but {len(demo)} logged events")
        for (t, sign), ev in zip(aug, demo):
            if (sign > 0) != ev.grasp:
                raise AugError(f"arm {arm}: gripper change at {t} does not match logged event {ev}")
            if ev.obj is not None:
                timeline.append((t, 0 if sign < 0 else 1, arm, ev.obj))
    timeline.sort()

    idx = {k: np.nonzero(owners == k)[0] for k in np.unique(owners)}
    current = np.array(initial, dtype=float, copy=True)
    out = np.empty((L, len(owners), 3))
    holders: dict[int, list[list]] = {}  # obj -> [[arm, local points], ...], last one drives

    def pose_at(arm, t):
        return rotations[t, arm], positions[t, arm]

    def now(obj, t):
        arm, local = holders[obj][-1]
        R, p = pose_at(arm, t)
        return local @ R.T + p

    bounds = sorted({0, L, *(e[0] for e in timeline)})
    ei = 0
    for a, b in zip(bounds[:-1], bounds[1:]):
        while ei < len(timeline) and timeline[ei][0] == a:
            _, is_grasp, arm, obj = timeline[ei]
            ei += 1
            if obj not in idx or len(idx[obj]) == 0:
                if is_grasp:
                    raise UnownedKeypoints(obj)
                continue
            ids = idx[obj]
            if is_grasp:
                pts = now(obj, a) if holders.get(obj) else current[ids]
                R, p = pose_at(arm, a)
                holders.setdefault(obj, []).append([arm, (pts - p) @ R])
            else:
                hs = holders.get(obj, [])
                if not hs or all(h[0] != arm for h in hs):
                    continue
                if hs[-1][0] == arm:
                    pts = now(obj, a)
                    hs.pop()
                    if hs:
                        R, p = pose_at(hs[-1][0], a)
                        hs[-1][1] = (pts - p) @ R
                    else:
                        current[ids] = pts
                else:
                    holders[obj] = [h for h in hs if h[0] != arm]
                if not holders.get(obj):
                    holders.pop(obj, None)
        out[a:b] = current
        for obj, hs in holders.items():
            arm, local = hs[-1]
            out[a:b, idx[obj]] = _transform_points(rotations[a:b, arm], positions[a:b, arm], local)
    return out


def initial_keypoints(keypoints0: np.ndarray, owners: Sequence[int], deltas: Sequence[Pose]) -> np.ndarray:
    out = np.array(keypoints0, dtype=float, copy=True)
    owners = np.asarray(owners, dtype=int)
    for k, d in enumerate(deltas, start=1):
        m = owners == k
        out[m] = keypoints0[m] @ d.rotation.T + d.translation
    return out


# --- full augmentation ----------------------------------------------------------------------

@dataclass(eq=False)
class AugmentedDemo:
    trajectory: Trajectory
    index: int = 0
    seed: int = 0
    deltas: tuple[Pose, ...] = ()
    object_poses: tuple[Pose, ...] = ()
    mirrored: bool = False
    padding: list = field(default_factory=list)           # [(stage, pad arm0, pad arm1)], terminal stage = -1
    segments: tuple = ((), ())                            # per-arm AugSegment tuples
    source_index: np.ndarray | None = None                # (L, 2) demo frame or -1
    source_ref: np.ndarray | None = None                  # (L, 2) skill reference frame or -1

    def provenance(self) -> dict:
        return {
            "index": self.index,
            "seed": self.seed,
            "mirrored": self.mirrored,
            "deltas": [d.matrix().reshape(16).tolist() for d in self.deltas],
            "object_positions": [p.translation.tolist() for p in self.object_poses],
            "padding": [list(p) for p in self.padding],
        }


def _delta_for(ref: int, deltas: Sequence[Pose]) -> Pose:
    return Pose.identity() if ref == 0 else deltas[ref - 1]


def augment_demo(
    demo: Trajectory,
    template: TaskTemplate,
    timeline: SegmentTimeline,
    objects: ObjectConfiguration,
    sampled: SampledConfiguration,
    spec: AugmentationSpec,
    planner: Planner | None = None,
    match_demo_steps: bool = False,
    index: int = 0,
) -> AugmentedDemo:
    """Assemble one augmented demo.

    ``demo``, ``timeline`` and ``objects`` must already be in the frame the
    deltas refer to (i.e. mirrored when ``sampled.use_mirror``).  With
    ``match_demo_steps`` motion segments keep the demo's step counts.
    """
    if timeline.length != demo.length:
        raise ValidationError("timeline and demo lengths differ")
    if objects.num_objects != template.num_objects or len(sampled.deltas) != template.num_objects:
        raise ValidationError("object count mismatch between template, configuration and deltas")
    deltas = sampled.deltas
    v, dt = spec.velocity, spec.dt
    streams = [_Stream(), _Stream()]
    segs = [list(timeline.arms[0]), list(timeline.arms[1])]
    padding = []

    def skill_pose(j, seg) -> Pose:
        d = _delta_for(seg.frame, deltas)
        R, p = augment_skill_segment(demo.rotations[seg.start:seg.start + 1, j],
                                     demo.positions[seg.start:seg.start + 1, j], d)
        return Pose(R[0], p[0])

    def bridge(j, seg):
        # keep continuity when a skill does not follow a planned motion
        s = streams[j]
        if s.n == 0:
            return
        last, g, src, ref = s.last()
        if src >= 0 and src + 1 == seg.start and ref == seg.frame:
            return
        target = skill_pose(j, seg)
        if np.linalg.norm(target.translation - last.translation) <= v * dt + 1e-12:
            return
        r, p, gg = plan_motion_segment(last, target, g, v, dt, planner)
        s.emit(r, p, gg, np.full(len(p), -1), -1, MOTION, seg.stage)

    def run_segment(j, i):
        s = streams[j]
        seg = segs[j][i]
        a, b = seg.start, seg.end
        if seg.kind in SKILL_KINDS:
            d = _delta_for(seg.frame, deltas)
            R, p = augment_skill_segment(demo.rotations[a:b + 1, j], demo.positions[a:b + 1, j], d)
            s.emit(R, p, demo.gripper[a:b + 1, j], np.arange(a, b + 1), seg.frame, seg.kind, seg.stage,
                   seg.frame, (a, b))
        elif seg.kind == MOTION:
            if i + 1 >= len(segs[j]) or segs[j][i + 1].kind not in SKILL_KINDS:
                raise ValidationError(f"arm {j}: motion segment {seg} is not followed by a skill")
            goal = skill_pose(j, segs[j][i + 1])
            g = int(demo.gripper[a, j])
            n_demo = b - a + 1
            if s.n == 0:
                s.emit(demo.rotations[0:1, j], demo.positions[0:1, j], [g], [0], -1, MOTION, seg.stage, 0, (0, 0))
                n_demo -= 1
            start = s.last()[0]
            r, p, gg = plan_motion_segment(start, goal, g, v, dt, planner, n_demo if match_demo_steps else None)
            s.emit(r, p, gg, np.full(len(p), -1), -1, MOTION, seg.stage, 0, (a, b))
        elif seg.kind == IDLE:
            m = b - a + 1
            if s.n == 0:
                pose, g = demo.pose(0, j), int(demo.gripper[0, j])
            else:
                pose, g = s.last()[:2]
            s.emit(np.broadcast_to(pose.rotation, (m, 3, 3)).copy(), np.tile(pose.translation, (m, 1)),
                   np.full(m, g), np.full(m, -1), -1, IDLE, seg.stage, 0, (a, b))
        else:
            raise ValidationError(f"unknown segment kind {seg.kind!r}")

    ptr = [0, 0]
    sync_stages = sorted({s.stage for s in segs[0] if s.kind == SKILL_SYNC})
    for stage in sync_stages + [None]:
        for j in range(2):
            while ptr[j] < len(segs[j]):
                seg = segs[j][ptr[j]]
                if stage is not None and seg.kind == SKILL_SYNC and seg.stage == stage:
                    break
                if seg.kind == SKILL_ASYNC:
                    bridge(j, seg)
                run_segment(j, ptr[j])
                ptr[j] += 1
        if stage is None:
            break
        for j in range(2):
            bridge(j, segs[j][ptr[j]])
        pads = resynchronize(streams, stage)
        padding.append((stage, pads[0], pads[1]))
        for j in range(2):
            run_segment(j, ptr[j])
            ptr[j] += 1

    pads = resynchronize(streams, -1)
    padding.append((-1, pads[0], pads[1]))

    arrays = [s.arrays() for s in streams]
    rots = np.stack([arrays[0][0], arrays[1][0]], axis=1)
    pos = np.stack([arrays[0][1], arrays[1][1]], axis=1)
    grip = np.stack([arrays[0][2], arrays[1][2]], axis=1)
    src = np.stack([arrays[0][3], arrays[1][3]], axis=1)
    ref = np.stack([arrays[0][4], arrays[1][4]], axis=1)

    owners = demo.owners
    kp0 = initial_keypoints(demo.keypoints[0], owners, deltas)
    kps = propagate_keypoints(rots, pos, grip, timeline.events, kp0, owners)
    traj = Trajectory(demo.dt, kps, rots, pos, grip, demo.meta)
    return AugmentedDemo(
        trajectory=traj,
        index=index,
        seed=spec.seed,
        deltas=tuple(deltas),
        object_poses=tuple(sampled.config.poses),
        mirrored=sampled.use_mirror,
        padding=padding,
        segments=(tuple(streams[0].segments), tuple(streams[1].segments)),
        source_index=src,
        source_ref=ref,
    )


# --- dataset generation ------------------------------------------------------------------

@dataclass(eq=False)
class GroundedDemo:
    """A demo with its grounding, plus the mirrored counterpart used for swapped assignments."""

    demo: Trajectory
    template: TaskTemplate
    objects: ObjectConfiguration
    timeline: SegmentTimeline
    mirror: "GroundedDemo | None" = None

    @classmethod
    def build(cls, demo, template, objects, plane: Plane, eps_skill=0.10, eps_sync=0.30,
              timeline: SegmentTimeline | None = None) -> "GroundedDemo":
        tl = timeline or ground_segments(demo, template, objects, eps_skill, eps_sync)
        m_demo, m_obj, m_tmpl = mirror_template_inputs(demo, objects, template, plane)
        m_tl = ground_segments(m_demo, m_tmpl, m_obj, eps_skill, eps_sync)
        return cls(demo, template, objects, tl, cls(m_demo, m_tmpl, m_obj, m_tl))

    def source(self, mirrored: bool) -> "GroundedDemo":
        return self.mirror if mirrored else self


@dataclass(eq=False)
class DatasetResult:
    demos: list[AugmentedDemo]
    failures: list[tuple[int, str]]
    reports: list = field(default_factory=list)

    @property
    def failure_rate(self) -> float:
        total = len(self.demos) + len(self.failures)
        return len(self.failures) / total if total else 0.0


def generate_one(grounded: GroundedDemo, spec: AugmentationSpec, index: int, planner: Planner | None = None,
                 verify: bool = True):
    from .verify import check_invariants

    rng = rng_for(spec.seed, index)
    sampled = sample_configuration(spec, grounded.objects, grounded.template, rng)
    src = grounded.source(sampled.use_mirror)
    aug = augment_demo(src.demo, src.template, src.timeline, src.objects, sampled, spec, planner, index=index)
    report = check_invariants(aug, src.demo, src.timeline, sampled.deltas, spec, src.objects) if verify else None
    return aug, report


def generate_dataset(
    grounded: GroundedDemo,
    spec: AugmentationSpec,
    planner: Planner | None = None,
    threads: int = 1,
    verify: bool = True,
    max_failure_rate: float = 0.10,
) -> DatasetResult:
    """``spec.count`` augmentations; index ``i`` always uses the rng stream ``(seed, i)``."""

    def work(i):
        try:
            return i, generate_one(grounded, spec, i, planner, verify), None
        except AugError as exc:
            return i, None, f"{type(exc).__name__}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(spec.count)))
    else:
        results = [work(i) for i in range(spec.count)]

    demos, failures, reports = [], [], []
    for i, res, err in results:
        if err is not None:
            failures.append((i, err))
            continue
        aug, report = res
        if report is not None and not report.passed:
            failures.append((i, "verification failed: " + ", ".join(report.failed_checks())))
            continue
        demos.append(aug)
        reports.append(report)
    out = DatasetResult(demos, failures, reports)
    for i, err in failures[:20]:
        log.warning("augmentation %d failed: %s", i, err)
    if out.failure_rate > max_failure_rate:
        raise BatchFailure(f"{len(failures)} of {spec.count} augmentations failed")
    return out


def identity_sample(objects: ObjectConfiguration) -> SampledConfiguration:
    return SampledConfiguration(objects, tuple(Pose.identity() for _ in objects.poses), False)


def mirror_sample(sampled: SampledConfiguration, plane: Plane) -> SampledConfiguration:
    """The same augmentation expressed for the mirrored demo."""
    M = np.eye(4)
    M[:3, :3] = plane.householder
    M[:3, 3] = 2.0 * plane.offset * plane.normal
    conj = tuple(Pose.from_matrix(M @ d.matrix() @ M) for d in sampled.deltas)
    return SampledConfiguration(sampled.config.mirrored(plane), conj, not sampled.use_mirror)
