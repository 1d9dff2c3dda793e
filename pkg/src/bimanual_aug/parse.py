"""Turn a demo bundle (2D tracks, hand landmarks, depth, camera) into a trajectory.

Bundle directory layout::

    meta.json              fps, camera intrinsics, extrinsics (16 row-major reals)
    depth/frame_%06d.f32   little-endian float32, row-major HxW, metres (0 = invalid)
    tracks.json            {"tracks": [{id, label, group, object, uv: [[u, v], ...]}]}
    hands.json             {"arms": [[frame | null, ...], [...]]}, frame = 21 x [u, v, X, Y, Z]
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import (
    AllDepthInvalid,
    DegenerateHand,
    MissingHand,
    UnrepairableTrajectory,
    ValidationError,
)
from .geometry import EPS_VEC, Pose, interpolate_poses
from .trajectory import KeypointMeta, Trajectory
from .workspace import Workspace

log = logging.getLogger(__name__)

# MANO / OpenPose landmark order
WRIST, THUMB_TIP, INDEX_TIP = 0, 4, 8
NUM_LANDMARKS = 21


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: Pose = field(default_factory=Pose.identity)  # camera -> task frame

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValidationError("principal point outside image")

    def backproject(self, u, v, z) -> np.ndarray:
        u, v, z = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (u, v, z)))
        return np.stack([(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z], axis=-1)

    def project(self, pts_cam) -> np.ndarray:
        p = np.asarray(pts_cam, dtype=float)
        return np.stack([self.fx * p[..., 0] / p[..., 2] + self.cx, self.fy * p[..., 1] / p[..., 2] + self.cy], axis=-1)

    def to_task(self, pts_cam) -> np.ndarray:
        e = self.extrinsics
        return np.asarray(pts_cam) @ e.rotation.T + e.translation

    def to_camera(self, pts_task) -> np.ndarray:
        e = self.extrinsics
        return (np.asarray(pts_task) - e.translation) @ e.rotation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "extrinsics": self.extrinsics.matrix().reshape(16).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        ext = np.asarray(d["extrinsics"], dtype=float)
        if ext.size != 16:
            raise ValidationError("extrinsics must have 16 entries")
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), Pose.from_matrix(ext.reshape(4, 4)))


@dataclass(eq=False)
class DemoBundle:
    camera: CameraModel
    fps: float
    depth: np.ndarray            # (L, H, W) float32
    tracks: np.ndarray           # (N, L, 2) pixels
    track_meta: tuple[KeypointMeta, ...]
    hands: list                  # per arm: (L, 21, 5) array with NaN rows for missing frames, or None

    @property
    def num_frames(self) -> int:
        return self.depth.shape[0]

    def validate(self) -> list[str]:
        problems = []
        L = self.num_frames
        if L < 2:
            problems.append("bundle needs at least 2 frames")
        if self.depth.shape[1:] != (self.camera.height, self.camera.width):
            problems.append(f"depth frames are {self.depth.shape[1:]}, camera says "
                            f"{(self.camera.height, self.camera.width)}")
        if self.tracks.ndim != 3 or self.tracks.shape[1:] != (L, 2):
            problems.append(f"tracks must have shape (N, {L}, 2), got {self.tracks.shape}")
        if len(self.track_meta) != self.tracks.shape[0]:
            problems.append("track metadata count mismatch")
        if any(m.owner < 1 for m in self.track_meta):
            problems.append("track object indices are 1-based")
        if len(self.hands) != 2:
            problems.append("hands must list exactly two arms")
        for j, h in enumerate(self.hands):
            if h is not None and h.shape != (L, NUM_LANDMARKS, 5):
                problems.append(f"arm {j}: hand array shape {h.shape}, expected {(L, NUM_LANDMARKS, 5)}")
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            problems.append("depth values must be finite and >= 0")
        return problems


# --- bundle files -----------------------------------------------------------

def save_bundle(bundle: DemoBundle, out_dir) -> None:
    out = Path(out_dir)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    meta = {"fps": bundle.fps, "num_frames": bundle.num_frames, "camera": bundle.camera.to_dict()}
    (out / "meta.json").write_text(json.dumps(meta, indent=1))
    for t in range(bundle.num_frames):
        bundle.depth[t].astype("<f4").tofile(out / "depth" / f"frame_{t:06d}.f32")
    tracks = [
        {"id": m.id, "label": m.label, "group": m.group, "object": m.owner, "uv": bundle.tracks[i].tolist()}
        for i, m in enumerate(bundle.track_meta)
    ]
    (out / "tracks.json").write_text(json.dumps({"tracks": tracks}))
    arms = []
    for h in bundle.hands:
        if h is None:
            arms.append(None)
        else:
            arms.append([None if np.isnan(f).any() else f.tolist() for f in h])
    (out / "hands.json").write_text(json.dumps({"arms": arms}))


def _read_json(path: Path):
    if not path.is_file():
        raise ValidationError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def load_bundle(bundle_dir) -> DemoBundle:
    root = Path(bundle_dir)
    if not root.is_dir():
        raise ValidationError(f"bundle directory not found: {root}")
    meta = _read_json(root / "meta.json")
    try:
        camera = CameraModel.from_dict(meta["camera"])
        fps = float(meta["fps"])
    except KeyError as exc:
        raise ValidationError(f"{root / 'meta.json'}: missing key {exc}") from exc
    files = sorted((root / "depth").glob("frame_*.f32"))
    if not files:
        raise ValidationError(f"no depth frames under {root / 'depth'}")
    H, W = camera.height, camera.width
    depth = np.empty((len(files), H, W), dtype=np.float32)
    for t, f in enumerate(files):
        if f.name != f"frame_{t:06d}.f32":
            raise ValidationError(f"depth frames not contiguous at {f}")
        raw = np.fromfile(f, dtype="<f4")
        if raw.size != H * W:
            raise ValidationError(f"{f}: expected {H * W} floats, found {raw.size}")
        depth[t] = raw.reshape(H, W)
    L = len(files)

    tr = _read_json(root / "tracks.json")
    try:
        track_meta = tuple(
            KeypointMeta(int(t["id"]), str(t["label"]), int(t["group"]), int(t["object"])) for t in tr["tracks"]
        )
        tracks = np.array([t["uv"] for t in tr["tracks"]], dtype=float).reshape(len(track_meta), -1, 2)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{root / 'tracks.json'}: {exc}") from exc

    hj = _read_json(root / "hands.json")
    hands = []
    try:
        for arm in hj["arms"]:
            if not arm:
                hands.append(None)
                continue
            h = np.full((len(arm), NUM_LANDMARKS, 5), np.nan)
            for t, f in enumerate(arm):
                if f is not None:
                    h[t] = np.asarray(f, dtype=float).reshape(NUM_LANDMARKS, 5)
            hands.append(h)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{root / 'hands.json'}: {exc}") from exc

    bundle = DemoBundle(camera, fps, depth, tracks, track_meta, hands)
    problems = bundle.validate()
    if problems:
        raise ValidationError(f"{root}: " + "; ".join(problems))
    if tracks.shape[1] != L:
        raise ValidationError(f"{root}: tracks have {tracks.shape[1]} frames, depth has {L}")
    return bundle


# --- keypoints -----------------------------------------------------------------

def robust_depth(frame: np.ndarray, u: float, v: float, window: int) -> float:
    """Median of valid depths in a ``window`` x ``window`` patch after 3-MAD rejection.

    Returns NaN when no pixel in the patch has a valid (positive) depth.
    """
    H, W = frame.shape
    r = window // 2
    ui, vi = int(math.floor(u + 0.5)), int(math.floor(v + 0.5))
    patch = frame[max(vi - r, 0):min(vi + r + 1, H), max(ui - r, 0):min(ui + r + 1, W)]
    vals = patch[patch > 0].astype(float)
    if vals.size == 0:
        return float("nan")
    med = np.median(vals)
    mad = np.median(np.abs(vals - med))
    kept = vals[np.abs(vals - med) <= 3.0 * mad]
    return float(np.median(kept))


class BackprojectedTrack(NamedTuple):
    points: np.ndarray        # (L, 3) task frame
    interpolated: np.ndarray  # (L,) bool, depth was missing and the point was filled


def _fill_missing(points: np.ndarray, missing: np.ndarray) -> np.ndarray:
    good = np.nonzero(~missing)[0]
    t = np.arange(len(points))
    out = points.copy()
    for c in range(points.shape[1]):
        out[missing, c] = np.interp(t[missing], good, points[good, c])
    return out


def _backproject_cam(track: np.ndarray, depth: np.ndarray, camera: CameraModel, window: int, idx: int):
    if window < 1 or window % 2 == 0:
        raise ValidationError("depth window must be a positive odd integer")
    track = np.asarray(track, dtype=float)
    L = track.shape[0]
    if np.any(track[:, 0] < 0) or np.any(track[:, 0] > camera.width - 1) or \
            np.any(track[:, 1] < 0) or np.any(track[:, 1] > camera.height - 1):
        raise ValidationError(f"track {idx}: pixel coordinates outside the image")
    z = np.array([robust_depth(depth[t], track[t, 0], track[t, 1], window) for t in range(L)])
    missing = np.isnan(z)
    if missing.all():
        raise AllDepthInvalid(idx)
    pts = camera.backproject(track[:, 0], track[:, 1], np.where(missing, 1.0, z))
    if missing.any():
        pts = _fill_missing(pts, missing)
    return pts, missing


def backproject_track(track, depth, camera: CameraModel, window: int = 5, index: int = 0) -> BackprojectedTrack:
    pts, missing = _backproject_cam(track, depth, camera, window, index)
    return BackprojectedTrack(camera.to_task(pts), missing)


# --- hands ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HandFrame:
    landmarks: np.ndarray  # (21, 3) task frame

    def __post_init__(self):
        lm = np.asarray(self.landmarks, dtype=float)
        if lm.shape != (NUM_LANDMARKS, 3):
            raise ValidationError(f"hand frame needs {NUM_LANDMARKS} landmarks")
        object.__setattr__(self, "landmarks", lm)

    @property
    def index_tip(self) -> np.ndarray:
        return self.landmarks[INDEX_TIP]

    @property
    def thumb_tip(self) -> np.ndarray:
        return self.landmarks[THUMB_TIP]

    @property
    def wrist(self) -> np.ndarray:
        return self.landmarks[WRIST]

    @property
    def aperture(self) -> float:
        return float(np.linalg.norm(self.index_tip - self.thumb_tip))


def hand_to_ee(h: HandFrame) -> Pose:
    """End-effector pose from thumb tip, index tip and wrist.

    Position is the thumb/index midpoint.  The approach axis (local z) points
    from the wrist to that midpoint, the closing axis (local x) is the
    thumb->index direction made orthogonal to the approach, and local y
    completes a right-handed frame.  This is the rotation that aligns the
    gripper's canonical approach direction with the wrist->midpoint line,
    with the residual roll fixed by the finger direction.
    """
    mid = 0.5 * (h.thumb_tip + h.index_tip)
    a = h.index_tip - h.thumb_tip
    b = mid - h.wrist
    if np.linalg.norm(a) <= EPS_VEC or np.linalg.norm(b) <= EPS_VEC:
        raise DegenerateHand("thumb and index coincide, or midpoint sits on the wrist")
    z = b / np.linalg.norm(b)
    x = a - (a @ z) * z
    nx = np.linalg.norm(x)
    if nx <= EPS_VEC:
        raise DegenerateHand("finger direction parallel to the approach axis")
    x /= nx
    y = np.cross(z, x)
    return Pose(np.column_stack([x, y, z]), mid)


def hysteresis(distances: Sequence[float], close_thresh: float, open_thresh: float) -> np.ndarray:
    if not open_thresh > close_thresh > 0:
        raise ValidationError("need open_thresh > close_thresh > 0")
    out = np.zeros(len(distances), dtype=np.int8)
    state = 0
    for t, d in enumerate(distances):
        if not np.isnan(d):
            if d < close_thresh:
                state = 1
            elif d > open_thresh:
                state = 0
        out[t] = state
    return out


def gripper_signal(hands: Sequence[HandFrame], close_thresh: float = 0.02, open_thresh: float = 0.05) -> np.ndarray:
    """1 = closed.  Thumb-index distance with hysteresis, starting open."""
    return hysteresis([h.aperture for h in hands], close_thresh, open_thresh)


# --- repair -----------------------------------------------------------------------

class RepairResult(NamedTuple):
    rotations: np.ndarray
    positions: np.ndarray
    replaced: np.ndarray  # (L,) bool


def _invalid_frames(positions, reach_ok, invalid, bound):
    L = len(positions)
    bad = np.zeros(L, dtype=bool)
    last = 0
    for t in range(1, L):
        ok = reach_ok[t] and not invalid[t] and \
            np.linalg.norm(positions[t] - positions[last]) <= bound * (t - last) + 1e-12
        if ok:
            last = t
        else:
            bad[t] = True
    return bad


def repair_trajectory(
    rotations: np.ndarray,
    positions: np.ndarray,
    reach: Callable[[np.ndarray], np.ndarray],
    v_jump: float,
    dt: float,
    invalid: np.ndarray | None = None,
) -> RepairResult:
    """Replace unreachable frames and velocity spikes by interpolation.

    A frame is kept when it is reachable and its distance to the last kept
    frame is within ``v_jump * dt`` per elapsed step.  Rejected positions are
    filled with a shape-preserving piecewise cubic (PCHIP) through the kept
    frames, rotations by geodesic interpolation between the bracketing kept
    frames.  A gap whose cubic fill would itself violate the limits falls
    back to straight-line fill.
    """
    rotations = np.asarray(rotations, dtype=float)
    positions = np.asarray(positions, dtype=float)
    L = len(positions)
    if L < 2:
        raise UnrepairableTrajectory("need at least two frames")
    invalid = np.zeros(L, dtype=bool) if invalid is None else np.asarray(invalid, dtype=bool)
    safe_pos = np.where(invalid[:, None], 0.0, positions)
    reach_ok = np.asarray(reach(safe_pos), dtype=bool) & ~invalid
    if not (reach_ok[0] and reach_ok[-1]):
        raise UnrepairableTrajectory("first or last frame is invalid")
    bound = v_jump * dt
    bad = _invalid_frames(safe_pos, reach_ok, invalid, bound)
    if bad.sum() > 0.5 * L:
        raise UnrepairableTrajectory(f"{int(bad.sum())} of {L} frames invalid")
    if not bad.any():
        return RepairResult(rotations.copy(), positions.copy(), bad)
    if bad[-1]:
        raise UnrepairableTrajectory("last frame is a velocity jump")

    good = np.nonzero(~bad)[0]
    spline = PchipInterpolator(good, positions[good], axis=0)
    out_pos = positions.copy()
    out_rot = rotations.copy()
    t_all = np.arange(L)
    out_pos[bad] = spline(t_all[bad])

    # contiguous gaps
    starts = np.nonzero(bad & ~np.r_[False, bad[:-1]])[0]
    for s in starts:
        e = s
        while e + 1 < L and bad[e + 1]:
            e += 1
        a, b = s - 1, e + 1
        gap = np.arange(s, e + 1)
        seg = out_pos[a:b + 1]
        steps = np.linalg.norm(np.diff(seg, axis=0), axis=1)
        if np.any(steps > bound + 1e-12) or not np.all(reach(out_pos[gap])):
            w = (gap - a) / (b - a)
            out_pos[gap] = positions[a] + w[:, None] * (positions[b] - positions[a])
        pa, pb = Pose(rotations[a], positions[a]), Pose(rotations[b], positions[b])
        rots, _ = interpolate_poses(pa, pb, (gap - a) / (b - a))
        out_rot[gap] = rots
    return RepairResult(out_rot, out_pos, bad)


# --- full parse ---------------------------------------------------------------------

@dataclass(frozen=True)
class ParseConfig:
    window: int = 5
    close_thresh: float = 0.02
    open_thresh: float = 0.05
    v_jump: float = 1.5
    control_rate: float = 10.0
    workspace: Workspace = field(default_factory=Workspace)


def resample_indices(num_frames: int, fps: float, rate: float) -> np.ndarray:
    step = fps / rate
    n = int(math.ceil(num_frames / step - 1e-9))
    idx = np.floor(np.arange(n) * step + 0.5).astype(int)
    return np.minimum(idx, num_frames - 1)


def _hand_poses(bundle: DemoBundle, arm: int, window: int):
    h = bundle.hands[arm]
    if h is None or np.isnan(h).any(axis=(1, 2)).all():
        raise MissingHand(arm)
    L = bundle.num_frames
    present = ~np.isnan(h).any(axis=(1, 2))
    cam = bundle.camera
    xyz = h[:, :, 2:5]
    # shift each hand so its wrist sits at the back-projected wrist pixel
    wrist_uv = np.where(present[:, None], h[:, WRIST, 0:2], np.nan)
    first = np.nonzero(present)[0]
    wrist_uv = np.stack([np.interp(np.arange(L), first, wrist_uv[first, c]) for c in range(2)], axis=1)
    try:
        wrist_bp, _ = _backproject_cam(wrist_uv, bundle.depth, cam, window, -1)
        shift = np.where(present[:, None], wrist_bp - xyz[:, WRIST], 0.0)
    except AllDepthInvalid:
        log.warning("arm %d: wrist depth never valid, skipping depth correction", arm)
        shift = np.zeros((L, 3))
    corrected = xyz + shift[:, None, :]
    task = cam.to_task(corrected)

    rots = np.tile(np.eye(3), (L, 1, 1))
    pos = np.zeros((L, 3))
    invalid = ~present
    apertures = np.full(L, np.nan)
    for t in range(L):
        if not present[t]:
            continue
        hf = HandFrame(task[t])
        apertures[t] = hf.aperture
        try:
            p = hand_to_ee(hf)
        except DegenerateHand:
            invalid[t] = True
            continue
        rots[t], pos[t] = p.rotation, p.translation
    return rots, pos, invalid, apertures


def parse_demo(bundle: DemoBundle, config: ParseConfig | None = None) -> Trajectory:
    config = config or ParseConfig()
    problems = bundle.validate()
    if problems:
        raise ValidationError("; ".join(problems))
    L = bundle.num_frames
    dt_native = 1.0 / bundle.fps

    kps = np.empty((L, len(bundle.track_meta), 3))
    for i in range(len(bundle.track_meta)):
        kps[:, i] = backproject_track(bundle.tracks[i], bundle.depth, bundle.camera, config.window, i).points

    rotations = np.empty((L, 2, 3, 3))
    positions = np.empty((L, 2, 3))
    gripper = np.empty((L, 2), dtype=np.int8)
    for arm in range(2):
        rots, pos, invalid, apertures = _hand_poses(bundle, arm, config.window)
        try:
            rep = repair_trajectory(rots, pos, config.workspace.predicate(arm), config.v_jump, dt_native, invalid)
        except UnrepairableTrajectory as exc:
            raise UnrepairableTrajectory(f"arm {arm}: {exc}") from exc
        if rep.replaced.any():
            log.info("arm %d: repaired frames %s", arm, np.nonzero(rep.replaced)[0].tolist())
        rotations[:, arm], positions[:, arm] = rep.rotations, rep.positions
        gripper[:, arm] = hysteresis(apertures, config.close_thresh, config.open_thresh)

    idx = resample_indices(L, bundle.fps, config.control_rate)
    return Trajectory(
        1.0 / config.control_rate,
        kps[idx],
        rotations[idx],
        positions[idx],
        gripper[idx],
        bundle.track_meta,
    )
