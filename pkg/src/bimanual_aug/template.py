"""Bimanual task templates and grounding of template stages into demo timestamps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence, Union

import numpy as np

from .errors import EmptyMask, GripperEventOutsideSkill, NonMonotoneStages, NoSkillSegment, ValidationError
from .geometry import Plane, Pose, reflect_pose
from .parse import CameraModel
from .trajectory import Trajectory, gripper_events

Token = Union[str, int]
EE_TOKENS = ("ee0", "ee1")

MOTION, SKILL_ASYNC, SKILL_SYNC, IDLE = "motion", "skill_async", "skill_sync", "idle"
SKILL_KINDS = (SKILL_ASYNC, SKILL_SYNC)


# --- templates -------------------------------------------------------------------

@dataclass(frozen=True)
class Action:
    contact: tuple[Token, Token]
    ref: int = 0
    arm: int | None = None  # None inside a sync stage

    def objects(self) -> list[int]:
        return [c for c in self.contact if isinstance(c, int)]

    def arms(self) -> list[int]:
        return [EE_TOKENS.index(c) for c in self.contact if c in EE_TOKENS]


@dataclass(frozen=True)
class Stage:
    sync: bool
    actions: tuple[Action, ...]

    def action_for(self, arm: int) -> Action | None:
        if self.sync:
            return self.actions[0] if self.actions else None
        for a in self.actions:
            if a.arm == arm:
                return a
        return None


@dataclass(frozen=True)
class TaskTemplate:
    num_objects: int
    stages: tuple[Stage, ...]

    def assigned_arm(self, obj: int) -> int | None:
        """Arm that first touches ``obj`` (where it sits in the initial configuration)."""
        for st in self.stages:
            for a in st.actions:
                if obj in a.objects():
                    ees = a.arms()
                    if ees:
                        return ees[0]
                    if a.arm is not None:
                        return a.arm
        return None

    def swapped(self) -> "TaskTemplate":
        def sw(tok):
            return {"ee0": "ee1", "ee1": "ee0"}.get(tok, tok) if isinstance(tok, str) else tok

        stages = []
        for st in self.stages:
            acts = tuple(
                Action((sw(a.contact[0]), sw(a.contact[1])), a.ref, None if a.arm is None else 1 - a.arm)
                for a in st.actions
            )
            stages.append(Stage(st.sync, acts))
        return TaskTemplate(self.num_objects, tuple(stages))

    def to_dict(self) -> dict:
        return {
            "num_objects": self.num_objects,
            "stages": [
                {"sync": st.sync, "actions": [{"arm": a.arm, "contact": list(a.contact), "ref": a.ref}
                                              for a in st.actions]}
                for st in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskTemplate":
        try:
            stages = tuple(
                Stage(bool(st["sync"]), tuple(
                    Action(tuple(_token(c) for c in a["contact"]), int(a.get("ref", 0)),
                           None if a.get("arm") is None else int(a["arm"]))
                    for a in st["actions"]
                ))
                for st in d["stages"]
            )
            return cls(int(d["num_objects"]), stages)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed template: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "TaskTemplate":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"template file not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc


def _token(c) -> Token:
    if isinstance(c, str) and c.strip().lstrip("-").isdigit():
        return int(c)
    return c


class Violation(NamedTuple):
    stage: int | None
    message: str


def validate_template(t: TaskTemplate) -> list[Violation]:
    out: list[Violation] = []
    K = t.num_objects
    if K < 1:
        out.append(Violation(None, "num_objects must be >= 1"))
    if not t.stages:
        out.append(Violation(None, "template has no stages"))
    for i, st in enumerate(t.stages):
        if st.sync:
            if len(st.actions) != 1:
                out.append(Violation(i, f"sync stage needs exactly one action, has {len(st.actions)}"))
            if any(a.arm is not None for a in st.actions):
                out.append(Violation(i, "sync action must not name an arm"))
        else:
            if not st.actions:
                out.append(Violation(i, "async stage has no actions"))
            arms = [a.arm for a in st.actions]
            if any(a not in (0, 1) for a in arms):
                out.append(Violation(i, "async action needs arm 0 or 1"))
            if len(arms) != len(set(arms)):
                out.append(Violation(i, "more than one action for the same arm"))
        for a in st.actions:
            if not 0 <= a.ref <= K:
                out.append(Violation(i, f"reference out of range: {a.ref} (K={K})"))
            if len(a.contact) != 2:
                out.append(Violation(i, "contact must be a pair"))
            for c in a.contact:
                if isinstance(c, int):
                    if not 1 <= c <= K:
                        out.append(Violation(i, f"contact object out of range: {c} (K={K})"))
                elif c not in EE_TOKENS:
                    out.append(Violation(i, f"unknown contact token {c!r}"))
    return out


# --- object configuration --------------------------------------------------------

@dataclass(eq=False)
class ObjectConfiguration:
    poses: tuple[Pose, ...]
    ownership: dict[int, np.ndarray] = field(default_factory=dict)  # object -> keypoint indices

    @property
    def num_objects(self) -> int:
        return len(self.poses)

    def pose(self, k: int) -> Pose:
        """Reference frame ``k`` (1-based); 0 is the task frame."""
        return Pose.identity() if k == 0 else self.poses[k - 1]

    def centers(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def mirrored(self, plane: Plane) -> "ObjectConfiguration":
        return ObjectConfiguration(tuple(reflect_pose(p, plane) for p in self.poses), dict(self.ownership))

    def to_dict(self) -> dict:
        return {"objects": [{"rotation": p.rotation.reshape(9).tolist(), "translation": p.translation.tolist()}
                            for p in self.poses]}

    @classmethod
    def from_dict(cls, d: dict, owners: Sequence[int] = ()) -> "ObjectConfiguration":
        try:
            poses = tuple(Pose(np.reshape(o["rotation"], (3, 3)), o["translation"]) for o in d["objects"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed object configuration: {exc}") from exc
        for i, p in enumerate(poses):
            if not p.is_valid():
                raise ValidationError(f"object {i + 1}: rotation is not a proper rotation")
        return cls(poses, ownership_from_owners(owners, len(poses)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path, owners: Sequence[int] = ()) -> "ObjectConfiguration":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"object configuration not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()), owners)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc


def ownership_from_owners(owners: Sequence[int], num_objects: int) -> dict[int, np.ndarray]:
    owners = np.asarray(owners, dtype=int)
    if owners.size and owners.max() > num_objects:
        raise ValidationError(f"keypoint owned by object {owners.max()} but only {num_objects} objects")
    return {k: np.nonzero(owners == k)[0] for k in range(1, num_objects + 1)}


def object_frames_from_masks(
    masks: Sequence[np.ndarray], depth: np.ndarray, camera: CameraModel, owners: Sequence[int] = ()
) -> ObjectConfiguration:
    """Object frames at the centroid of each masked, back-projected depth region (axis-aligned)."""
    poses = []
    for k, mask in enumerate(masks, start=1):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != depth.shape:
            raise ValidationError(f"object {k}: mask shape {mask.shape} != depth shape {depth.shape}")
        vs, us = np.nonzero(mask & (depth > 0))
        if len(vs) == 0:
            raise EmptyMask(k, "no pixel with valid depth")
        z = depth[vs, us].astype(float)
        med = np.median(z)
        mad = np.median(np.abs(z - med))
        keep = np.abs(z - med) <= 3.0 * mad
        pts = camera.to_task(camera.backproject(us[keep], vs[keep], z[keep]))
        poses.append(Pose(np.eye(3), pts.mean(axis=0)))
    return ObjectConfiguration(tuple(poses), ownership_from_owners(owners, len(poses)))


def load_masks(mask_dir, num_objects: int) -> list[np.ndarray]:
    from PIL import Image

    out = []
    for k in range(1, num_objects + 1):
        p = Path(mask_dir) / f"object_{k}.png"
        if not p.is_file():
            raise ValidationError(f"mask not found: {p}")
        out.append(np.asarray(Image.open(p).convert("L")) > 127)
    return out


# --- timeline -------------------------------------------------------------------

class Segment(NamedTuple):
    kind: str
    stage: int
    start: int
    end: int  # inclusive
    frame: int = 0  # assigned reference frame for skill segments

    @property
    def length(self) -> int:
        return self.end - self.start + 1


class GraspEvent(NamedTuple):
    t: int
    grasp: bool  # False = release
    obj: int | None


@dataclass(eq=False)
class SegmentTimeline:
    length: int
    arms: tuple[tuple[Segment, ...], tuple[Segment, ...]]
    events: tuple[tuple[GraspEvent, ...], tuple[GraspEvent, ...]] = ((), ())

    def skills(self, arm: int) -> list[Segment]:
        return [s for s in self.arms[arm] if s.kind in SKILL_KINDS]

    def check(self) -> list[str]:
        problems = []
        for j in range(2):
            nxt = 0
            for s in self.arms[j]:
                if s.start != nxt or s.end < s.start:
                    problems.append(f"arm {j}: segment {s} breaks the partition at {nxt}")
                nxt = s.end + 1
            if nxt != self.length:
                problems.append(f"arm {j}: timeline ends at {nxt}, expected {self.length}")
        s0 = [(s.stage, s.start, s.end) for s in self.arms[0] if s.kind == SKILL_SYNC]
        s1 = [(s.stage, s.start, s.end) for s in self.arms[1] if s.kind == SKILL_SYNC]
        if s0 != s1:
            problems.append("sync segments differ between arms")
        for j in range(2):
            kinds = [e.grasp for e in self.events[j]]
            if any(a == b for a, b in zip(kinds, kinds[1:])):
                problems.append(f"arm {j}: grasp/release events do not alternate")
        return problems

    def swapped(self) -> "SegmentTimeline":
        return SegmentTimeline(self.length, (self.arms[1], self.arms[0]), (self.events[1], self.events[0]))

    def to_dict(self) -> dict:
        return {
            "length": self.length,
            "arms": [[s._asdict() for s in arm] for arm in self.arms],
            "events": [[{"t": e.t, "type": "grasp" if e.grasp else "release", "object": e.obj} for e in ev]
                       for ev in self.events],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegmentTimeline":
        try:
            arms = tuple(tuple(Segment(s["kind"], int(s["stage"]), int(s["start"]), int(s["end"]),
                                       int(s.get("frame", 0))) for s in arm) for arm in d["arms"])
            events = tuple(tuple(GraspEvent(int(e["t"]), e["type"] == "grasp", e["object"]) for e in ev)
                           for ev in d.get("events", [[], []]))
            return cls(int(d["length"]), arms, events)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed timeline: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SegmentTimeline":
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"timeline not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))


def _first_run(mask: np.ndarray, start: int) -> tuple[int, int] | None:
    hits = np.nonzero(mask[start:])[0]
    if hits.size == 0:
        return None
    a = start + int(hits[0])
    misses = np.nonzero(~mask[a:])[0]
    b = len(mask) - 1 if misses.size == 0 else a + int(misses[0]) - 1
    return a, b


def ground_segments(
    traj: Trajectory,
    template: TaskTemplate,
    config: ObjectConfiguration,
    eps_skill: float = 0.10,
    eps_sync: float = 0.30,
) -> SegmentTimeline:
    """Label every demo frame of each arm as motion, async skill, sync skill or idle.

    Stages are scanned in template order.  An async skill on an object frame is
    the earliest maximal run (after the arm's previous segment) where the EE is
    within ``eps_skill`` of the frame centre; a sync skill is the earliest
    maximal run where the two EEs are within ``eps_sync`` of each other.  Skills
    referenced to the task frame are bracketed by the arm's gripper events.
    Frames between skills are motion; an arm without an action in an async
    stage idles until its peer finishes that stage.
    """
    if eps_skill <= 0 or eps_sync <= 0:
        raise ValidationError("grounding thresholds must be positive")
    problems = validate_template(template)
    if problems:
        raise ValidationError("; ".join(f"stage {v.stage}: {v.message}" for v in problems))
    if config.num_objects != template.num_objects:
        raise ValidationError(f"template has {template.num_objects} objects, configuration has {config.num_objects}")

    L = traj.length
    pos = traj.positions
    sync_mask = np.linalg.norm(pos[:, 0] - pos[:, 1], axis=1) < eps_sync
    ev_times = [[t for t, _ in gripper_events(traj.gripper[:, j])] for j in range(2)]

    def proximity_run(arm, ref, start):
        center = config.pose(ref).translation
        mask = np.linalg.norm(pos[:, arm] - center, axis=1) < eps_skill
        return _first_run(mask, start)

    def next_start(arm, i, start):
        # start of the next proximity-detected skill for this arm, used to bound task-frame windows
        for st in template.stages[i + 1:]:
            act = st.action_for(arm)
            if act is None:
                continue
            if st.sync:
                run = _first_run(sync_mask, start)
            elif act.ref > 0:
                run = proximity_run(arm, act.ref, start)
            else:
                return L
            return L if run is None else run[0]
        return L

    segs: list[list[Segment]] = [[], []]
    cursor = [0, 0]
    for i, st in enumerate(template.stages):
        if st.sync:
            act = st.actions[0]
            s0 = max(cursor)
            run = _first_run(sync_mask, s0)
            if run is None:
                raise NoSkillSegment(i, -1)
            a, b = run
            if a == s0 and s0 > 0 and sync_mask[s0 - 1]:
                raise NonMonotoneStages(f"stage {i}: arms already within eps_sync before the previous stage ended")
            for j in range(2):
                if cursor[j] < a:
                    segs[j].append(Segment(MOTION, i, cursor[j], a - 1))
                segs[j].append(Segment(SKILL_SYNC, i, a, b, act.ref))
                cursor[j] = b + 1
            continue

        ends = {}
        for j in range(2):
            act = st.action_for(j)
            if act is None:
                continue
            if act.ref > 0:
                run = proximity_run(j, act.ref, cursor[j])
                if run is None:
                    raise NoSkillSegment(i, j)
            else:
                hi = next_start(j, i, cursor[j])
                inside = [t for t in ev_times[j] if cursor[j] <= t < hi]
                if inside:
                    run = (inside[0], inside[-1])
                elif cursor[j] < hi:
                    run = (cursor[j], hi - 1)
                else:
                    raise NoSkillSegment(i, j)
            a, b = run
            if cursor[j] < a:
                segs[j].append(Segment(MOTION, i, cursor[j], a - 1))
            segs[j].append(Segment(SKILL_ASYNC, i, a, b, act.ref))
            ends[j] = b + 1
        for j in range(2):
            if j in ends:
                continue
            peer_end = ends[1 - j]
            if cursor[j] < peer_end:
                segs[j].append(Segment(IDLE, i, cursor[j], peer_end - 1))
                ends[j] = peer_end
            else:
                ends[j] = cursor[j]
        cursor = [ends[0], ends[1]]

    n = len(template.stages)
    for j in range(2):
        if cursor[j] < L:
            segs[j].append(Segment(IDLE, n, cursor[j], L - 1))

    events = _event_log(traj, template, segs)
    tl = SegmentTimeline(L, (tuple(segs[0]), tuple(segs[1])), events)
    problems = tl.check()
    if problems:
        raise NonMonotoneStages("; ".join(problems))
    return tl


def _event_log(traj: Trajectory, template: TaskTemplate, segs) -> tuple:
    out = []
    for j in range(2):
        evs = []
        held = None
        for t, sign in gripper_events(traj.gripper[:, j]):
            seg = next(s for s in segs[j] if s.start <= t <= s.end)
            if seg.kind not in SKILL_KINDS:
                raise GripperEventOutsideSkill(f"arm {j}: gripper changes at frame {t} inside a {seg.kind} segment")
            if sign > 0:
                act = template.stages[seg.stage].action_for(j)
                objs = act.objects() if act is not None else []
                held = objs[0] if objs else (act.ref if act is not None and act.ref > 0 else None)
                evs.append(GraspEvent(t, True, held))
            else:
                evs.append(GraspEvent(t, False, held))
                held = None
        out.append(tuple(evs))
    return tuple(out)


def mirror_template_inputs(
    traj: Trajectory, config: ObjectConfiguration, template: TaskTemplate, plane: Plane
) -> tuple[Trajectory, ObjectConfiguration, TaskTemplate]:
    """Reflect the demo across the workspace symmetry plane and swap the arm roles."""
    return traj.mirrored(plane), config.mirrored(plane), template.swapped()
