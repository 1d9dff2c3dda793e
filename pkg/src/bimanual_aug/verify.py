"""Invariant checks over augmented demos and a kinematic replay oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, NamedTuple, Sequence

import numpy as np

from .augment import PAD, AugmentationSpec, AugmentedDemo, propagate_keypoints
from .geometry import Pose
from .template import SKILL_SYNC, GraspEvent, ObjectConfiguration, SegmentTimeline
from .trajectory import Trajectory, gripper_events

if TYPE_CHECKING:
    from .synthetic import SyntheticTask

TOL = 1e-9


class CheckResult(NamedTuple):
    name: str
    passed: bool
    residual: float
    offenders: tuple = ()


@dataclass
class VerificationReport:
    checks: list[CheckResult] = field(default_factory=list)

    def add(self, name: str, residual: float, offenders=(), tol: float = TOL) -> None:
        residual = max(0.0, float(residual))
        ok = bool(np.isfinite(residual) and residual <= tol)
        self.checks.append(CheckResult(name, ok, residual, tuple(offenders)[:20]))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed_checks(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def get(self, name: str) -> CheckResult:
        return next(c for c in self.checks if c.name == name)

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "checks": [{"name": c.name, "passed": c.passed, "residual": c.residual,
                            "offenders": [list(o) if isinstance(o, tuple) else o for o in c.offenders]}
                           for c in self.checks]}


def aggregate(reports: Sequence[VerificationReport]) -> dict:
    n = len(reports)
    ok = sum(r.passed for r in reports)
    per_check: dict[str, dict] = {}
    for r in reports:
        for c in r.checks:
            d = per_check.setdefault(c.name, {"failures": 0, "max_residual": 0.0})
            d["failures"] += int(not c.passed)
            d["max_residual"] = max(d["max_residual"], c.residual)
    return {"demos": n, "passed": ok, "pass_rate": ok / n if n else 1.0, "checks": per_check}


def _homog(R, p):
    T = np.zeros(R.shape[:-2] + (4, 4))
    T[..., :3, :3] = R
    T[..., :3, 3] = p
    T[..., 3, 3] = 1.0
    return T


def _rel_inv(A, B):
    # A^-1 @ B for stacked homogeneous rigid transforms
    Ri = np.swapaxes(A[..., :3, :3], -1, -2)
    out = np.zeros(np.broadcast_shapes(A.shape, B.shape))
    out[..., :3, :3] = Ri @ B[..., :3, :3]
    out[..., :3, 3] = np.einsum("...ij,...j->...i", Ri, B[..., :3, 3] - A[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def _check_equivariance(rep, aug, source, deltas, objects):
    tr = aug.trajectory
    src, ref = aug.source_index, aug.source_ref
    worst, bad = 0.0, []
    for j in range(2):
        for k in np.unique(ref[:, j]):
            if k < 0:
                continue
            rows = np.nonzero((ref[:, j] == k) & (src[:, j] >= 0))[0]
            d = Pose.identity() if k == 0 else deltas[k - 1]
            frame = Pose.identity() if (k == 0 or objects is None) else objects.pose(int(k))
            F_demo = frame.matrix()
            F_aug = d.matrix() @ F_demo
            T_aug = _homog(tr.rotations[rows, j], tr.positions[rows, j])
            T_demo = _homog(source.rotations[src[rows, j], j], source.positions[src[rows, j], j])
            res = np.abs(_rel_inv(F_aug, T_aug) - _rel_inv(F_demo, T_demo)).reshape(len(rows), -1).max(axis=1)
            gdiff = tr.gripper[rows, j] != source.gripper[src[rows, j], j]
            res = np.where(gdiff, np.inf, res)
            if res.size:
                worst = max(worst, float(res.max()))
                bad.extend((j, int(t)) for t in rows[res > TOL])
    rep.add("equivariance", worst, bad)


def _sync_starts(aug: AugmentedDemo):
    out = []
    for seg0 in aug.segments[0]:
        if seg0.kind != SKILL_SYNC:
            continue
        seg1 = next(s for s in aug.segments[1] if s.kind == SKILL_SYNC and s.stage == seg0.stage)
        out.append((seg0, seg1))
    return out


def _check_sync(rep, aug, source):
    tr = aug.trajectory
    worst, bad = 0.0, []
    pad_worst, pad_bad = 0, []
    pads = {p[0]: p for p in aug.padding}
    for seg0, seg1 in _sync_starts(aug):
        if seg0.start != seg1.start or seg0.demo_start != seg1.demo_start:
            worst, bad = np.inf, bad + [seg0.stage]
            continue
        t, td = seg0.start, seg0.demo_start
        A = _rel_inv(_homog(tr.rotations[t, 0], tr.positions[t, 0]), _homog(tr.rotations[t, 1], tr.positions[t, 1]))
        D = _rel_inv(_homog(source.rotations[td, 0], source.positions[td, 0]),
                     _homog(source.rotations[td, 1], source.positions[td, 1]))
        r = float(np.abs(A - D).max())
        worst = max(worst, r)
        if r > TOL:
            bad.append(seg0.stage)
        # padding equals the difference of the arms' arrival indices
        got = [sum(s.end - s.start + 1 for s in aug.segments[j] if s.kind == PAD and s.stage == seg0.stage)
               for j in range(2)]
        arrive = [t - got[0], t - got[1]]
        expect = (max(0, arrive[1] - arrive[0]), max(0, arrive[0] - arrive[1]))
        logged = pads.get(seg0.stage)
        if tuple(got) != expect or logged is None or tuple(logged[1:]) != tuple(got) or min(got) != 0:
            pad_worst = 1
            pad_bad.append(seg0.stage)
    rep.add("sync_fidelity", worst, bad)
    rep.add("padding", pad_worst, pad_bad, tol=0)


def _check_continuity(rep, aug, source, spec):
    tr = aug.trajectory
    bound = spec.velocity * spec.dt
    demo_step = np.linalg.norm(np.diff(source.positions, axis=0), axis=-1)
    worst, bad = 0.0, []
    for j in range(2):
        step = np.linalg.norm(np.diff(tr.positions[:, j], axis=0), axis=-1)
        src, ref = aug.source_index[:, j], aug.source_ref[:, j]
        inherited = (src[:-1] >= 0) & (src[1:] == src[:-1] + 1) & (ref[1:] == ref[:-1]) & (ref[:-1] >= 0)
        limit = np.where(inherited, demo_step[:, j].max(initial=0.0), bound)
        excess = step - limit
        worst = max(worst, float(excess.max(initial=0.0)))
        bad.extend((j, int(t)) for t in np.nonzero(excess > TOL)[0])
    rep.add("continuity", worst, bad)


def _check_rigidity(rep, traj: Trajectory):
    worst, bad = 0.0, []
    owners = traj.owners
    for k in np.unique(owners):
        if k <= 0:
            continue
        pts = traj.keypoints[:, owners == k]
        if pts.shape[1] < 2:
            continue
        D = np.linalg.norm(pts[:, :, None] - pts[:, None], axis=-1)
        dev = np.abs(D - D[0]).reshape(len(D), -1).max(axis=1)
        worst = max(worst, float(dev.max()))
        bad.extend((int(k), int(t)) for t in np.nonzero(dev > TOL)[0])
    rep.add("rigidity", worst, bad)


def attachment_residual(traj: Trajectory, events: Sequence[Sequence[GraspEvent]]):
    """Max drift of held keypoints relative to the EE driving them; returns ``(residual, offenders)``.

    Grasp intervals come from the gripper signal; the i-th gripper change of an
    arm carries the object of the i-th logged event.  An interval is cut short
    when the other arm grasps the same object (it then drives the object).
    """
    owners = traj.owners
    L = traj.length
    intervals = []
    for j in range(2):
        evs = gripper_events(traj.gripper[:, j])
        log = list(events[j])
        if len(evs) != len(log):
            return np.inf, [(j, -1)]
        open_at = None
        for (t, sign), ev in zip(evs, log):
            if sign > 0:
                open_at = (t, ev.obj)
            elif open_at is not None:
                intervals.append((j, open_at[0], t, open_at[1]))
                open_at = None
        if open_at is not None:
            intervals.append((j, open_at[0], L - 1, open_at[1]))
    worst, bad = 0.0, []
    for j, tg, tr_, obj in intervals:
        if obj is None:
            continue
        end = tr_
        for j2, tg2, _, obj2 in intervals:
            if j2 != j and obj2 == obj and tg < tg2 <= end:
                end = tg2 - 1
        if end < tg:
            continue
        sl = slice(tg, end + 1)
        pts = traj.keypoints[sl][:, owners == obj]
        R, p = traj.rotations[sl, j], traj.positions[sl, j]
        local = np.einsum("tji,tnj->tni", R, pts - p[:, None])
        dev = np.abs(local - local[0]).reshape(len(local), -1).max(axis=1, initial=0.0)
        worst = max(worst, float(dev.max(initial=0.0)))
        bad.extend((j, int(tg + t)) for t in np.nonzero(dev > TOL)[0])
    return worst, bad


def _check_gripper(rep, aug, source):
    bad = []
    for j in range(2):
        a = gripper_events(aug.trajectory.gripper[:, j])
        d = gripper_events(source.gripper[:, j])
        if [s for _, s in a] != [s for _, s in d]:
            bad.append(j)
    rep.add("gripper_conservation", float(bool(bad)), bad, tol=0)


def _check_bounds(rep, aug, spec):
    tr = aug.trajectory
    bad = []
    if not tr.is_finite():
        bad.append("non-finite values")
    R = tr.rotations
    orth = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max(initial=0.0)
    det = np.abs(np.linalg.det(R) - 1.0).max(initial=0.0)
    if not np.all(np.isin(tr.gripper, (0, 1))):
        bad.append("gripper values outside {0, 1}")
    if aug.object_poses:
        centers = np.array([p.translation for p in aug.object_poses])
        if not np.all(spec.workspace.in_box(centers)):
            bad.append("object outside workspace box")
    res = max(float(orth), float(det)) if np.isfinite(orth) and np.isfinite(det) else np.inf
    rep.add("bounds", np.inf if bad else res, bad)


def check_invariants(
    aug: AugmentedDemo,
    source: Trajectory,
    timeline: SegmentTimeline,
    deltas: Sequence[Pose],
    spec: AugmentationSpec,
    objects: ObjectConfiguration | None = None,
) -> VerificationReport:
    """Run every invariant check on one augmented demo.

    ``source``, ``timeline`` and ``objects`` are the inputs the augmentation
    was built from (the mirrored demo for mirrored samples).
    """
    rep = VerificationReport()
    if aug.source_index is None or aug.source_ref is None:
        rep.add("provenance", np.inf, ["missing source indices"])
        return rep
    _check_bounds(rep, aug, spec)
    _check_equivariance(rep, aug, source, deltas, objects)
    _check_sync(rep, aug, source)
    _check_continuity(rep, aug, source, spec)
    _check_rigidity(rep, aug.trajectory)
    worst, bad = attachment_residual(aug.trajectory, timeline.events)
    rep.add("attachment", worst, bad)
    _check_gripper(rep, aug, source)
    return rep


def check_demo(demo: Trajectory, timeline: SegmentTimeline) -> VerificationReport:
    """Structural checks for an un-augmented demo (rigidity and attachment)."""
    rep = VerificationReport()
    _check_rigidity(rep, demo)
    worst, bad = attachment_residual(demo, timeline.events)
    rep.add("attachment", worst, bad)
    return rep


def keypoint_forward_model(rotations, positions, gripper, events, initial, owners) -> np.ndarray:
    """Predict keypoint states from actions alone under the rigidity assumption.

    Same definition as the augmentation's propagation step, so a policy can
    fall back on it when tracking drops out.
    """
    return propagate_keypoints(rotations, positions, gripper, events, initial, owners)


# --- replay -----------------------------------------------------------------------------

class ReplayResult(NamedTuple):
    final_keypoints: np.ndarray
    success: bool
    attachments: list   # (t, arm, obj or None)


def replay(demo: Trajectory, task: "SyntheticTask", grasp_eps: float = 0.03, mirrored: bool = False) -> ReplayResult:
    """Kinematic replay of the demo's actions on its initial keypoints.

    Objects are rigid keypoint sets.  A closing gripper within ``grasp_eps``
    of an object's nearest keypoint picks that object up; held objects follow
    the most recent grasping EE; when the last holder opens, the object drops
    vertically back to its initial support height.
    """
    owners = demo.owners
    pts = np.array(demo.keypoints[0], dtype=float, copy=True)
    objs = [int(k) for k in np.unique(owners) if k > 0]
    rest = {k: float(pts[owners == k, 2].min()) for k in objs}
    holders: dict[int, list] = {}
    attachments = []
    G = demo.gripper
    for t in range(demo.length):
        for arm in range(2):
            if t > 0 and G[t, arm] < G[t - 1, arm]:
                for k in list(holders):
                    hs = holders[k]
                    if all(h[0] != arm for h in hs):
                        continue
                    driving = hs[-1][0] == arm
                    holders[k] = [h for h in hs if h[0] != arm]
                    if not holders[k]:
                        del holders[k]
                        m = owners == k
                        pts[m, 2] += rest[k] - pts[m, 2].min()
                    elif driving:
                        a = holders[k][-1][0]
                        R, p = demo.rotations[t, a], demo.positions[t, a]
                        holders[k][-1][1] = (pts[owners == k] - p) @ R
        for arm in range(2):
            if t > 0 and G[t, arm] > G[t - 1, arm]:
                p, R = demo.positions[t, arm], demo.rotations[t, arm]
                d = np.linalg.norm(pts - p, axis=1)
                i = int(np.argmin(d)) if len(d) else -1
                k = int(owners[i]) if i >= 0 and d[i] <= grasp_eps else None
                attachments.append((t, arm, k))
                if k is not None and k > 0:
                    holders.setdefault(k, []).append([arm, (pts[owners == k] - p) @ R])
        for k, hs in holders.items():
            arm, local = hs[-1]
            pts[owners == k] = local @ demo.rotations[t, arm].T + demo.positions[t, arm]
    return ReplayResult(pts, task.is_success(pts, demo, mirrored), attachments)
