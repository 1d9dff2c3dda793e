from dataclasses import replace

import numpy as np
import pytest

from bimanual_aug.augment import augment_demo, generate_dataset, identity_sample, propagate_keypoints
from bimanual_aug.template import GraspEvent
from bimanual_aug.trajectory import Trajectory
from bimanual_aug.verify import (
    VerificationReport,
    aggregate,
    attachment_residual,
    check_demo,
    check_invariants,
    keypoint_forward_model,
    replay,
)


def _identity(s):
    sample = identity_sample(s.objects)
    aug = augment_demo(s.demo, s.task.template, s.timeline, s.objects, sample, s.spec, match_demo_steps=True)
    return aug, sample


def _copy_aug(aug, **arrays):
    tr = aug.trajectory
    new = Trajectory(tr.dt, arrays.get("keypoints", tr.keypoints.copy()), arrays.get("rotations", tr.rotations.copy()),
                     arrays.get("positions", tr.positions.copy()), arrays.get("gripper", tr.gripper.copy()), tr.meta)
    return replace(aug, trajectory=new)


def test_identity_passes_everything(scenario):
    aug, sample = _identity(scenario)
    rep = check_invariants(aug, scenario.demo, scenario.timeline, sample.deltas, scenario.spec, scenario.objects)
    names = {c.name for c in rep.checks}
    assert {"equivariance", "sync_fidelity", "continuity", "rigidity", "gripper_conservation", "bounds"} <= names
    assert rep.passed
    assert all(c.residual < 1e-9 for c in rep.checks)


def test_source_demo_is_a_fixed_point(scenario):
    assert check_demo(scenario.demo, scenario.timeline).passed


def test_displaced_keypoint_breaks_rigidity(pour):
    aug, sample = _identity(pour)
    ev = pour.timeline.events[0]
    t = (ev[0].t + ev[1].t) // 2 if len(ev) > 1 else ev[0].t + 3
    kps = aug.trajectory.keypoints.copy()
    i = np.nonzero(pour.demo.owners == ev[0].obj)[0][0]
    kps[t, i, 0] += 0.001
    bad = _copy_aug(aug, keypoints=kps)
    rep = check_invariants(bad, pour.demo, pour.timeline, sample.deltas, pour.spec, pour.objects)
    rig = rep.get("rigidity")
    assert not rig.passed
    assert rig.residual == pytest.approx(0.001, rel=0.5)
    assert {f for _, f in rig.offenders} == {t}


def test_moved_skill_frame_breaks_equivariance(pour):
    aug, sample = _identity(pour)
    seg = next(s for s in aug.segments[0] if s.kind == "skill_async")
    pos = aug.trajectory.positions.copy()
    pos[seg.start + 2, 0, 2] += 1e-6
    rep = check_invariants(_copy_aug(aug, positions=pos), pour.demo, pour.timeline, sample.deltas, pour.spec,
                           pour.objects)
    assert "equivariance" in rep.failed_checks()
    assert (0, seg.start + 2) in rep.get("equivariance").offenders


def test_teleport_breaks_continuity_and_sync(pour):
    aug, sample = _identity(pour)
    seg = next(s for s in aug.segments[1] if s.kind == "skill_sync")
    pos = aug.trajectory.positions.copy()
    pos[seg.start:, 1] += (0.0, 0.0, 0.3)
    rep = check_invariants(_copy_aug(aug, positions=pos), pour.demo, pour.timeline, sample.deltas, pour.spec,
                           pour.objects)
    assert {"continuity", "sync_fidelity"} <= set(rep.failed_checks())


def test_extra_gripper_toggle_is_caught(pour):
    aug, sample = _identity(pour)
    g = aug.trajectory.gripper.copy()
    g[-3:, 1] = 1 - g[-3:, 1]
    rep = check_invariants(_copy_aug(aug, gripper=g), pour.demo, pour.timeline, sample.deltas, pour.spec,
                           pour.objects)
    assert "gripper_conservation" in rep.failed_checks()


def test_report_aggregation():
    a, b = VerificationReport(), VerificationReport()
    a.add("x", 0.0)
    b.add("x", 0.5)
    b.add("y", -1.0)  # clipped to zero
    s = aggregate([a, b])
    assert s["demos"] == 2 and s["passed"] == 1 and s["pass_rate"] == 0.5
    assert s["checks"]["x"] == {"failures": 1, "max_residual": 0.5}
    assert b.get("y").residual == 0.0


# --- forward model -------------------------------------------------------------------

def test_forward_model_matches_propagation(pour):
    res = generate_dataset(pour.grounded, replace(pour.spec, count=30), verify=False)
    for aug in res.demos:
        tr = aug.trajectory
        src = pour.grounded.source(aug.mirrored)
        args = (tr.rotations, tr.positions, tr.gripper, src.timeline.events, tr.keypoints[0], tr.owners)
        assert keypoint_forward_model(*args).tobytes() == propagate_keypoints(*args).tobytes()
        assert keypoint_forward_model(*args).tobytes() == tr.keypoints.tobytes()


def test_forward_model_without_grasps_is_constant(pour):
    d = pour.demo
    g = np.zeros_like(d.gripper)
    out = keypoint_forward_model(d.rotations, d.positions, g, ((), ()), d.keypoints[0], d.owners)
    assert np.array_equal(out, np.broadcast_to(d.keypoints[0], out.shape))


def test_missing_grasp_in_event_log_is_detected(pour):
    d, events = pour.demo, pour.timeline.events
    # arm 0's grasp logged without its object: the forward model leaves the bottle on the table
    wrong = (tuple(GraspEvent(e.t, e.grasp, None) for e in events[0]), events[1])
    pred = keypoint_forward_model(d.rotations, d.positions, d.gripper, wrong, d.keypoints[0], d.owners)
    guess = Trajectory(d.dt, pred, d.rotations, d.positions, d.gripper, d.meta)
    drift, offenders = attachment_residual(guess, events)
    assert drift > 1e-3 and offenders
    assert attachment_residual(d, events)[0] < 1e-9


# --- replay ----------------------------------------------------------------------------------

def test_ground_truth_replays(scenario):
    r = replay(scenario.demo, scenario.task)
    assert r.success
    assert r.attachments


def test_identity_augmentation_replays(scenario):
    aug, _ = _identity(scenario)
    assert replay(aug.trajectory, scenario.task).success


def test_replay_is_side_effect_free(pour):
    before = pour.demo.keypoints.copy()
    a = replay(pour.demo, pour.task)
    b = replay(pour.demo, pour.task)
    assert np.array_equal(a.final_keypoints, b.final_keypoints)
    assert np.array_equal(pour.demo.keypoints, before)


def test_offset_grasp_fails(pour):
    eps = 0.03
    d = pour.demo
    pos = d.positions.copy()
    # every bottle keypoint ends up more than eps away from arm 0's grasp point
    pos[:, 0] += (-2 * eps, -2 * eps, 0.0)
    t = pour.timeline.events[0][0].t
    held = d.keypoints[t, d.owners == 1]
    assert np.linalg.norm(held - pos[t, 0], axis=1).min() > eps
    bad = Trajectory(d.dt, d.keypoints, d.rotations, pos, d.gripper, d.meta)
    r = replay(bad, pour.task, grasp_eps=eps)
    assert not r.success
    assert all(obj != 1 for _, arm, obj in r.attachments if arm == 0)
