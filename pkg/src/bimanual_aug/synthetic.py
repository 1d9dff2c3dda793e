"""Built-in synthetic tabletop tasks and a renderer that turns them into demo bundles.

Each task scripts a ground-truth bimanual demo at the control rate.  Motion
between skills is always a single straight-line/geodesic move, so the
grounded motion segments of the demo are exactly what the default planner
would produce.  ``render_bundle`` upsamples the demo to the camera rate and
synthesises depth frames, 2D keypoint tracks and hand landmarks from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .augment import AugmentationSpec, ObjectSampler
from .errors import UnknownTask
from .geometry import YZ_PLANE, Plane, Pose, interpolate_poses, reflect_point
from .parse import NUM_LANDMARKS, CameraModel, DemoBundle
from .template import Action, ObjectConfiguration, Stage, TaskTemplate, ownership_from_owners
from .trajectory import KeypointMeta, Trajectory
from .workspace import Workspace

CONTROL_RATE = 10.0
OPEN_APERTURE, CLOSED_APERTURE = 0.08, 0.01
WRIST_OFFSET = 0.10
EPS_SKILL = 0.10

# approach +y (away from the demonstrator), fingers close along x
SIDE_GRASP = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass
class SceneObject:
    name: str
    base: np.ndarray              # world position of the object's local origin
    local: np.ndarray             # (n, 3) keypoints in the object's local frame
    labels: tuple[str, ...]
    groups: tuple[int, ...]

    def points(self) -> np.ndarray:
        return self.local + self.base

    def center(self) -> np.ndarray:
        return self.points().mean(axis=0)


class ArmScript:
    """Builds one arm's pose/gripper stream frame by frame."""

    def __init__(self, pose: Pose, grip: int = 0):
        self.rots = [pose.rotation]
        self.pos = [pose.translation]
        self.grip = [grip]

    @property
    def pose(self) -> Pose:
        return Pose(self.rots[-1], self.pos[-1])

    @property
    def n(self) -> int:
        return len(self.pos)

    def move(self, target: Pose, steps: int, grip_at_end: int | None = None):
        r, p = interpolate_poses(self.pose, target, np.arange(1, steps + 1) / steps)
        g = self.grip[-1]
        self.rots.extend(r)
        self.pos.extend(p)
        self.grip.extend([g] * steps)
        if grip_at_end is not None:
            self.grip[-1] = grip_at_end
        return self

    def hold(self, steps: int, grip: int | None = None):
        g = self.grip[-1] if grip is None else grip
        for _ in range(steps):
            self.rots.append(self.rots[-1])
            self.pos.append(self.pos[-1])
            self.grip.append(g)
        return self

    def set_grip(self, g: int):
        return self.hold(1, g)

    def first_exit(self, center, radius: float) -> int:
        """First frame from the end of the last proximity run around ``center``."""
        inside = np.linalg.norm(np.array(self.pos) - center, axis=1) < radius
        hits = np.nonzero(inside)[0]
        return int(hits[-1]) + 1 if hits.size else 0

    def hold_until(self, n: int):
        return self.hold(max(0, n - self.n))


@dataclass
class SyntheticTask:
    task_id: str
    template: TaskTemplate
    objects: list[SceneObject]
    scripts: Callable[["SyntheticTask"], tuple[ArmScript, ArmScript]]
    success: Callable[[np.ndarray, Trajectory, bool], bool]
    spec: AugmentationSpec
    meta: dict = field(default_factory=dict)

    # --- ground truth ------------------------------------------------------------

    def keypoint_meta(self) -> tuple[KeypointMeta, ...]:
        out = []
        for k, obj in enumerate(self.objects, start=1):
            for lab, grp in zip(obj.labels, obj.groups):
                out.append(KeypointMeta(len(out), f"{obj.name}_{lab}", grp, k))
        return tuple(out)

    def object_configuration(self) -> ObjectConfiguration:
        meta = self.keypoint_meta()
        poses = tuple(Pose(np.eye(3), o.center()) for o in self.objects)
        return ObjectConfiguration(poses, ownership_from_owners([m.owner for m in meta], len(poses)))

    def actions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a0, a1 = self.scripts(self)
        L = max(a0.n, a1.n)
        a0.hold_until(L)
        a1.hold_until(L)
        rots = np.stack([np.array(a0.rots), np.array(a1.rots)], axis=1)
        pos = np.stack([np.array(a0.pos), np.array(a1.pos)], axis=1)
        grip = np.stack([np.array(a0.grip), np.array(a1.grip)], axis=1).astype(np.int8)
        return rots, pos, grip

    def demo(self) -> Trajectory:
        rots, pos, grip = self.actions()
        kps = attach_kinematics(rots, pos, grip, self.initial_keypoints(), self.owners(), self.meta["attach"])
        return Trajectory(1.0 / CONTROL_RATE, kps, rots, pos, grip, self.keypoint_meta())

    def initial_keypoints(self) -> np.ndarray:
        return np.concatenate([o.points() for o in self.objects])

    def owners(self) -> np.ndarray:
        return np.array([m.owner for m in self.keypoint_meta()])

    def is_success(self, final_keypoints: np.ndarray, demo: Trajectory, mirrored: bool = False) -> bool:
        return bool(self.success(final_keypoints, demo, mirrored))


def attach_kinematics(rots, pos, grip, initial, owners, attach) -> np.ndarray:
    """Ground-truth keypoints: ``attach[arm]`` lists the object each successive grasp picks up.

    A grasped object keeps its pose relative to the most recent grasping arm
    until that arm opens.
    """
    L = len(pos)
    kp = np.empty((L, len(owners), 3))
    cur = np.array(initial, dtype=float)
    held: dict[int, list] = {}
    count = [0, 0]
    for t in range(L):
        for arm in range(2):
            if t > 0 and grip[t, arm] < grip[t - 1, arm]:
                for obj in list(held):
                    hs = held[obj]
                    if hs[-1][0] == arm:
                        R, p = rots[t, arm], pos[t, arm]
                        pts = hs[-1][1] @ R.T + p
                        hs.pop()
                        if hs:
                            R2, p2 = rots[t, hs[-1][0]], pos[t, hs[-1][0]]
                            hs[-1][1] = (pts - p2) @ R2
                        else:
                            cur[owners == obj] = pts
                            del held[obj]
                    else:
                        held[obj] = [h for h in hs if h[0] != arm]
        for arm in range(2):
            if t > 0 and grip[t, arm] > grip[t - 1, arm]:
                obj = attach[arm][count[arm]]
                count[arm] += 1
                if obj in held:
                    a, loc = held[obj][-1]
                    pts = loc @ rots[t, a].T + pos[t, a]
                else:
                    pts = cur[owners == obj]
                held.setdefault(obj, []).append([arm, (pts - pos[t, arm]) @ rots[t, arm]])
        kp[t] = cur
        for obj, hs in held.items():
            arm, loc = hs[-1]
            kp[t, owners == obj] = loc @ rots[t, arm].T + pos[t, arm]
    return kp


# --- pour ------------------------------------------------------------------------

POUR_TILT = math.radians(110.0)


def _pour_scripts(task: SyntheticTask):
    bottle, cup = task.objects
    body = bottle.base + np.array([0.0, 0.0, 0.09])
    cup_grasp = cup.base + np.array([0.0, -0.045, 0.05])

    a0 = ArmScript(Pose(SIDE_GRASP, [-0.35, 0.12, 0.28]))
    a1 = ArmScript(Pose(SIDE_GRASP, [0.35, 0.12, 0.28]))

    # arm 1: fetch the cup and bring it up towards the middle
    a1.move(Pose(SIDE_GRASP, cup_grasp - [0, 0.04, 0]), 14)
    a1.move(Pose(SIDE_GRASP, cup_grasp), 3)
    a1.set_grip(1)
    cup_lift = cup_grasp + [-0.03, 0.0, 0.06]
    a1.move(Pose(SIDE_GRASP, cup_lift), 2)

    # arm 0: fetch the bottle and lift it
    a0.move(Pose(SIDE_GRASP, body - [0, 0.06, 0]), 14)
    a0.move(Pose(SIDE_GRASP, body), 3)
    a0.set_grip(1)
    a0.move(Pose(SIDE_GRASP, body + [0.0, 0.0, 0.08]), 3)
    a0.hold(2)

    cup_final_ee = np.array([0.14, cup_grasp[1], 0.17])
    cup_final_base = cup.base + (cup_final_ee - cup_grasp)
    cap_target = cup_final_base + np.array([-0.02, 0.0, 0.115])
    R_pour = rot_y(POUR_TILT) @ SIDE_GRASP
    body_pour = cap_target - rot_y(POUR_TILT) @ np.array([0.0, 0.0, 0.09])
    pre_pour = body_pour + np.array([-0.06, 0.0, 0.08])

    # arm 1 leaves first, arm 0 follows; both arrive together
    arrive = a0.n + 14
    a1.hold_until(a0.n - 16)
    a1.move(Pose(SIDE_GRASP, cup_final_ee), arrive - a1.n)
    a0.move(Pose(SIDE_GRASP, pre_pour), arrive - a0.n)

    # synchronised pour
    a0.move(Pose(R_pour, body_pour), 8)
    a0.hold(6)
    a1.hold_until(a0.n)
    return a0, a1


def _pour_success(final: np.ndarray, demo: Trajectory, mirrored: bool) -> bool:
    labels = [m.label for m in demo.meta]
    cap = final[labels.index("bottle_cap")]
    mouth = final[labels.index("cup_mouth")]
    axis = cap - final[labels.index("bottle_body")]
    tilt = math.acos(np.clip(axis[2] / np.linalg.norm(axis), -1.0, 1.0))
    return np.linalg.norm(cap - mouth) < 0.03 and abs(tilt - POUR_TILT) < math.radians(15.0)


def pour_task() -> SyntheticTask:
    bottle = SceneObject(
        "bottle", np.array([-0.30, 0.35, 0.0]),
        np.array([[0.0, 0.03, 0.035], [0.0, 0.0, 0.09], [0.0, 0.0, 0.18], [0.035, 0.0, 0.055]]),
        ("base", "body", "cap", "side"), (0, 0, 1, 0),
    )
    cup = SceneObject(
        "cup", np.array([0.32, 0.35, 0.0]),
        np.array([[0.0, 0.0, 0.10], [-0.045, 0.0, 0.10], [0.045, 0.0, 0.10], [0.0, -0.045, 0.05]]),
        ("mouth", "rim_left", "rim_right", "body"), (2, 2, 2, 3),
    )
    template = TaskTemplate(2, (
        Stage(False, (Action(("ee0", 1), 1, 0), Action(("ee1", 2), 2, 1))),
        Stage(True, (Action((1, 2), 2),)),
    ))
    spec = AugmentationSpec(
        workspace=Workspace(),
        symmetry_plane=YZ_PLANE,
        object_samplers=(
            ObjectSampler(((-0.10, 0.75), (-0.10, 0.12), (0.0, 0.0)), (-math.pi / 6, math.pi / 6)),
            ObjectSampler(((-0.75, 0.10), (-0.10, 0.12), (0.0, 0.0)), (-math.pi / 6, math.pi / 6)),
        ),
        min_separation=0.12,
    )
    return SyntheticTask("pour", template, [bottle, cup], _pour_scripts, _pour_success, spec,
                         {"attach": ([1], [2])})


# --- handover -----------------------------------------------------------------------

HANDOVER_GOAL = np.array([0.26, 0.35, 0.04])
HANDOVER_GOAL_HALF = np.array([0.04, 0.04, 0.03])


def _handover_scripts(task: SyntheticTask):
    (bar,) = task.objects
    left = bar.base + np.array([-0.05, 0.0, 0.03])
    a0 = ArmScript(Pose(SIDE_GRASP, [-0.35, 0.15, 0.25]))
    a1 = ArmScript(Pose(SIDE_GRASP, [0.35, 0.15, 0.25]))

    a0.move(Pose(SIDE_GRASP, left - [0, 0.06, 0]), 14)
    a0.move(Pose(SIDE_GRASP, left), 3)
    a0.set_grip(1)
    a0.move(Pose(SIDE_GRASP, left + [0.0, 0.0, 0.07]), 3)

    # lift steeply so arm 0 leaves the object's neighbourhood before arm 1 starts
    hand_base = np.array([0.0, 0.35, 0.30])
    ee0_hand = hand_base + np.array([-0.05, 0.0, 0.03])
    ee1_hand = hand_base + np.array([0.05, 0.0, 0.03])
    a0.move(Pose(SIDE_GRASP, ee0_hand), 14)
    a1.hold_until(a0.first_exit(bar.center(), EPS_SKILL))
    a1.move(Pose(SIDE_GRASP, ee1_hand - [0, 0.06, 0]), 14)
    a1.move(Pose(SIDE_GRASP, ee1_hand), 3)
    a0.hold_until(a1.n)
    a1.set_grip(1)
    a0.hold_until(a1.n + 1)
    a0.set_grip(0)
    a0.move(Pose(SIDE_GRASP, ee0_hand - [0, 0.07, 0]), 3)
    a1.hold_until(a0.n)

    place_ee = HANDOVER_GOAL - np.array([0.0, 0.0, 0.04]) + np.array([0.05, 0.0, 0.03])
    a1.move(Pose(SIDE_GRASP, place_ee), 16, grip_at_end=0)
    a1.hold(3)
    a0.hold_until(a1.n)
    return a0, a1


def _handover_success(final: np.ndarray, demo: Trajectory, mirrored: bool) -> bool:
    goal = reflect_point(HANDOVER_GOAL, YZ_PLANE) if mirrored else HANDOVER_GOAL
    c = final.mean(axis=0)
    return bool(np.all(np.abs(c - goal) <= HANDOVER_GOAL_HALF))


def handover_task() -> SyntheticTask:
    bar = SceneObject(
        "bar", np.array([-0.22, 0.35, 0.0]),
        np.array([[-0.05, 0.0, 0.03], [0.05, 0.0, 0.03], [0.0, 0.0, 0.07], [0.0, 0.0, 0.03]]),
        ("left", "right", "top", "center"), (0, 0, 1, 0),
    )
    template = TaskTemplate(1, (
        Stage(False, (Action(("ee0", 1), 1, 0),)),
        Stage(True, (Action(("ee1", 1), 0),)),
        Stage(False, (Action(("ee1", 1), 0, 1),)),
    ))
    spec = AugmentationSpec(
        workspace=Workspace(),
        symmetry_plane=YZ_PLANE,
        object_samplers=(ObjectSampler(((-0.15, 0.65), (-0.10, 0.12), (0.0, 0.0)), (-math.pi / 6, math.pi / 6)),),
        min_separation=0.0,
    )
    return SyntheticTask("handover", template, [bar], _handover_scripts, _handover_success, spec,
                         {"attach": ([1], [1])})


TASKS = {"pour": pour_task, "handover": handover_task}


def get_task(task_id: str) -> SyntheticTask:
    try:
        return TASKS[task_id]()
    except KeyError:
        raise UnknownTask(f"unknown synthetic task {task_id!r}; known: {sorted(TASKS)}") from None


# --- rendering --------------------------------------------------------------------------

def default_camera() -> CameraModel:
    eye = np.array([0.0, -0.35, 0.75])
    target = np.array([0.0, 0.35, 0.05])
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, [0.0, 0.0, 1.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return CameraModel(300.0, 300.0, 240.0, 125.0, 480, 250, Pose(np.column_stack([x, y, z]), eye))


def hand_landmarks(ee: Pose, aperture: float) -> np.ndarray:
    """21 plausible hand landmarks whose thumb/index tips and wrist reproduce ``ee``."""
    R, p = ee.rotation, ee.translation
    x, y, z = R[:, 0], R[:, 1], R[:, 2]
    wrist = p - WRIST_OFFSET * z
    thumb_tip = p - 0.5 * aperture * x
    index_tip = p + 0.5 * aperture * x
    lm = np.empty((NUM_LANDMARKS, 3))
    lm[0] = wrist
    for i, tip in ((1, thumb_tip), (5, index_tip)):
        for s in range(4):
            lm[i + s] = wrist + (s + 1) / 4.0 * (tip - wrist) - 0.01 * (1.5 - abs(s - 1.5)) * x * (1 if i == 5 else -1)
    for f, off in enumerate((0.02, 0.035, 0.05)):
        base = 9 + 4 * f
        tip = index_tip + off * y - 0.02 * z
        for s in range(4):
            lm[base + s] = wrist + (s + 1) / 4.0 * (tip - wrist)
    return lm


def upsample(demo: Trajectory, factor: int):
    """Geodesic upsampling of the actions by an integer factor; gripper held."""
    L = demo.length
    Lu = factor * (L - 1) + 1
    rots = np.empty((Lu, 2, 3, 3))
    pos = np.empty((Lu, 2, 3))
    grip = np.empty((Lu, 2), dtype=np.int8)
    ts = np.arange(factor) / factor
    for j in range(2):
        for t in range(L - 1):
            r, p = interpolate_poses(demo.pose(t, j), demo.pose(t + 1, j), ts)
            rots[factor * t:factor * (t + 1), j] = r
            pos[factor * t:factor * (t + 1), j] = p
            grip[factor * t:factor * (t + 1), j] = demo.gripper[t, j]
        rots[-1, j], pos[-1, j], grip[-1, j] = demo.rotations[-1, j], demo.positions[-1, j], demo.gripper[-1, j]
    return rots, pos, grip


class RenderConflict(RuntimeError):
    pass


def render_bundle(
    task: SyntheticTask,
    noise: float = 0.0,
    fps: float = 30.0,
    window: int = 5,
    camera: CameraModel | None = None,
    rng: np.random.Generator | None = None,
    hand_bias=(0.01, -0.005, 0.02),
) -> tuple[DemoBundle, Trajectory]:
    """Render a demo bundle of ``task``; returns the bundle and the ground-truth trajectory.

    Every keypoint and wrist is painted as a flat ``window`` x ``window`` depth
    patch on top of the table plane.  ``noise`` is the std-dev of Gaussian
    depth noise (metres).  The 3D hand landmarks carry a constant camera-frame
    bias that the parser's wrist depth correction must remove.
    """
    camera = camera or default_camera()
    rng = rng or np.random.default_rng(0)
    factor = int(round(fps / CONTROL_RATE))
    gt = task.demo()
    rots, pos, grip = upsample(gt, factor)
    kps = attach_kinematics(rots, pos, grip, task.initial_keypoints(), task.owners(), task.meta["attach"])
    Lu = len(pos)
    H, W = camera.height, camera.width

    # table plane z = 0 in task frame
    us, vs = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    rays_cam = np.stack([(us - camera.cx) / camera.fx, (vs - camera.cy) / camera.fy, np.ones_like(us)], axis=-1)
    R, o = camera.extrinsics.rotation, camera.extrinsics.translation
    rays_task_z = rays_cam @ R[2]
    with np.errstate(divide="ignore"):
        lam = np.where(rays_task_z < 0, -o[2] / rays_task_z, 0.0)
    table = np.where((lam > 0) & (lam < 5.0), lam, 0.0).astype(np.float32)

    r = window // 2
    depth = np.empty((Lu, H, W), dtype=np.float32)
    tracks = np.empty((kps.shape[1], Lu, 2))
    hands = [np.empty((Lu, NUM_LANDMARKS, 5)), np.empty((Lu, NUM_LANDMARKS, 5))]
    bias = np.asarray(hand_bias, dtype=float)
    for t in range(Lu):
        frame = table.copy()
        painted = []
        pts_cam = camera.to_camera(kps[t])
        uv = camera.project(pts_cam)
        tracks[:, t] = uv
        painted.extend(zip(uv, pts_cam[:, 2]))
        for j in range(2):
            ap = CLOSED_APERTURE if grip[t, j] else OPEN_APERTURE
            lm = camera.to_camera(hand_landmarks(Pose(rots[t, j], pos[t, j]), ap))
            luv = camera.project(lm)
            hands[j][t, :, 0:2] = luv
            hands[j][t, :, 2:5] = lm + bias
            painted.append((luv[0], lm[0, 2]))
        centers = np.array([[math.floor(u + 0.5), math.floor(v + 0.5)] for (u, v), _ in painted], dtype=int)
        for i in range(len(centers)):
            cu, cv = centers[i]
            if not (r <= cu < W - r and r <= cv < H - r):
                raise RenderConflict(f"frame {t}: point {i} too close to the image border")
            for k in range(i):
                if np.max(np.abs(centers[i] - centers[k])) <= 2 * r:
                    raise RenderConflict(f"frame {t}: depth patches {k} and {i} overlap")
        for (cu, cv), (_, z) in zip(centers, painted):
            frame[cv - r:cv + r + 1, cu - r:cu + r + 1] = z
        if noise > 0:
            frame = np.where(frame > 0, frame + rng.normal(0.0, noise, frame.shape), 0.0)
            frame = np.maximum(frame, 0.0).astype(np.float32)
        depth[t] = frame

    bundle = DemoBundle(camera, fps, depth, tracks, task.keypoint_meta(), hands)
    return bundle, gt
