import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bimanual_aug.augment import (
    PAD,
    AugmentationSpec,
    ObjectSampler,
    SampledConfiguration,
    _Stream,
    augment_demo,
    augment_skill_segment,
    generate_dataset,
    generate_one,
    identity_sample,
    mirror_sample,
    motion_steps,
    plan_motion_segment,
    propagate_keypoints,
    resynchronize,
    rng_for,
    sample_configuration,
)
from bimanual_aug.errors import PlannerFailure, UnsatisfiableSpec
from bimanual_aug.geometry import Pose, random_rotation, yaw_rotation
from bimanual_aug.template import MOTION, SKILL_SYNC, ObjectConfiguration
from bimanual_aug.verify import check_invariants


def _frozen_spec(spec, K):
    zero = ObjectSampler(((0, 0), (0, 0), (0, 0)), (0, 0))
    return replace(spec, object_samplers=(zero,) * K)


# --- sampling ---------------------------------------------------------------------

def test_zero_width_sampler_gives_identity(pour):
    spec = _frozen_spec(pour.spec, 2)
    s = sample_configuration(spec, pour.objects, pour.task.template, rng_for(0, 3))
    assert not s.use_mirror
    assert all(d.allclose(Pose.identity(), 0) for d in s.deltas)


def forced_mirror_spec(spec):
    # bottle (arm 0's object) pushed next to arm 1, cup pulled towards arm 0
    return replace(spec, object_samplers=(
        ObjectSampler(((0.85, 0.9), (-0.02, 0.02), (0, 0)), (-0.2, 0.2)),
        ObjectSampler(((-0.5, -0.45), (-0.02, 0.02), (0, 0)), (-0.2, 0.2)),
    ))


def test_reach_forces_mirror(pour):
    spec = forced_mirror_spec(pour.spec)
    ws = spec.workspace
    for i in range(50):
        s = sample_configuration(spec, pour.objects, pour.task.template, rng_for(0, i))
        assert s.use_mirror
        c = s.config.centers()
        assert not ws.in_reach(c[0], 0) and ws.in_reach(c[0], 1)


def test_forced_mirror_without_permission(pour):
    spec = replace(forced_mirror_spec(pour.spec), allow_mirror=False, max_retries=50)
    with pytest.raises(UnsatisfiableSpec):
        sample_configuration(spec, pour.objects, pour.task.template, rng_for(0, 0))


def test_impossible_separation(pour):
    spec = replace(pour.spec, min_separation=10.0, max_retries=50)
    with pytest.raises(UnsatisfiableSpec):
        sample_configuration(spec, pour.objects, pour.task.template, rng_for(0, 0))


@given(st.integers(0, 10**6))
def test_sampled_deltas_move_demo_frames(i):
    from bimanual_aug.synthetic import get_task
    task = get_task("pour")
    objs = task.object_configuration()
    s = sample_configuration(task.spec, objs, task.template, rng_for(5, i))
    src = objs.mirrored(task.spec.symmetry_plane) if s.use_mirror else objs
    for d, old, new in zip(s.deltas, src.poses, s.config.poses):
        assert (d @ old).allclose(new, 1e-12)
        assert abs(d.rotation[2, 2] - 1) < 1e-12  # yaw only
    assert np.all(task.spec.workspace.in_box(s.config.centers()))


# --- skill segments ------------------------------------------------------------------

def _segment(rng, n=12):
    R = np.stack([random_rotation(rng) for _ in range(n)])
    p = rng.normal(size=(n, 3)) * 0.2
    return R, p


def test_identity_delta_replays_segment(rng):
    R, p = _segment(rng)
    R2, p2 = augment_skill_segment(R, p, Pose.identity())
    assert np.array_equal(R2, R) and np.array_equal(p2, p)


def test_pure_translation_shifts_positions(rng):
    R, p = _segment(rng)
    R2, p2 = augment_skill_segment(R, p, Pose.from_translation((0.1, 0, 0)))
    assert np.allclose(p2 - p, (0.1, 0, 0), atol=1e-15)
    assert np.array_equal(R2, R)


def test_yaw_about_centroid_keeps_relative_pose(rng):
    R, p = _segment(rng)
    c = np.array([0.2, 0.4, 0.05])
    Ry = yaw_rotation(math.pi / 2)
    obj = Pose(np.eye(3), c)
    delta = Pose(Ry, c - Ry @ c)  # quarter turn about the object centre
    R2, p2 = augment_skill_segment(R, p, delta)
    new_obj = delta @ obj
    for t in range(len(p)):
        before = obj.inverse() @ Pose(R[t], p[t])
        after = new_obj.inverse() @ Pose(R2[t], p2[t])
        assert np.abs(before.matrix() - after.matrix()).max() < 1e-9


# --- motion planning ----------------------------------------------------------------

def test_zero_distance_is_one_step():
    p = Pose(yaw_rotation(0.2), (0.1, 0.2, 0.3))
    R, x, g = plan_motion_segment(p, p, 0, 0.25, 0.1)
    assert len(x) == 1
    assert Pose(R[0], x[0]).allclose(p, 1e-12)


def test_step_count_from_velocity():
    a, b = Pose.identity(), Pose.from_translation((0.2, 0, 0))
    assert motion_steps(a, b, 0.5, 0.1) == 4
    R, x, g = plan_motion_segment(a, b, 1, 0.5, 0.1)
    assert len(x) == 4
    assert g.tolist() == [1, 1, 1, 1]
    full = np.vstack([[0, 0, 0], x, [0.2, 0, 0]])
    assert np.allclose(np.diff(full[:, 0]), 0.04)


def test_planner_failure_propagates():
    def broken(start, goal, n):
        raise RuntimeError("no path")

    with pytest.raises(PlannerFailure):
        plan_motion_segment(Pose.identity(), Pose.from_translation((1, 0, 0)), 0, 0.25, 0.1, broken)


# --- resynchronisation --------------------------------------------------------------

def _stream(n, x):
    s = _Stream()
    pos = np.tile([x, 0.0, 0.0], (n, 1))
    pos[:, 1] = np.arange(n) * 0.01
    s.emit(np.tile(np.eye(3), (n, 1, 1)), pos, np.zeros(n), np.arange(n), 1, MOTION, 0)
    return s


def test_early_arm_is_padded():
    a, b = _stream(40, 0.0), _stream(52, 1.0)
    assert resynchronize([a, b], 1) == (12, 0)
    assert a.n == b.n == 52
    R, p, g, _, _ = a.arrays()
    assert np.all(p[40:] == p[39]) and np.all(R[40:] == R[39])
    assert a.segments[-1].kind == PAD


def test_equal_arrival_needs_no_padding():
    a, b = _stream(30, 0.0), _stream(30, 1.0)
    assert resynchronize([a, b], 1) == (0, 0)
    assert len(a.segments) == 1


# --- keypoint propagation -------------------------------------------------------------

def test_ungrasped_object_stays_put(pour):
    d = pour.demo
    owners = d.owners
    kps = propagate_keypoints(d.rotations, d.positions, np.zeros_like(d.gripper), ((), ()), d.keypoints[0], owners)
    assert np.array_equal(kps, np.broadcast_to(d.keypoints[0], kps.shape))


def test_held_keypoints_ride_with_the_gripper(pour):
    d, tl = pour.demo, pour.timeline
    kps = propagate_keypoints(d.rotations, d.positions, d.gripper, tl.events, d.keypoints[0], d.owners)
    # the ground-truth generator moves objects with an independent implementation
    assert np.abs(kps - d.keypoints).max() < 1e-12
    grasp, release = tl.events[0][0].t, tl.events[0][1].t if len(tl.events[0]) > 1 else d.length - 1
    m = d.owners == tl.events[0][0].obj
    local = np.einsum("tji,tnj->tni", d.rotations[grasp:release + 1, 0],
                      kps[grasp:release + 1][:, m] - d.positions[grasp:release + 1, 0, None])
    assert np.abs(local - local[0]).max() < 1e-9


# --- full augmentation -------------------------------------------------------------------

def test_identity_augmentation_reproduces_demo(scenario):
    s = identity_sample(scenario.objects)
    aug = augment_demo(scenario.demo, scenario.task.template, scenario.timeline, scenario.objects, s,
                       scenario.spec, match_demo_steps=True)
    tr = aug.trajectory
    assert tr.length == scenario.demo.length
    assert np.abs(tr.positions - scenario.demo.positions).max() < 1e-9
    assert np.abs(tr.rotations - scenario.demo.rotations).max() < 1e-9
    assert np.array_equal(tr.gripper, scenario.demo.gripper)
    rep = check_invariants(aug, scenario.demo, scenario.timeline, s.deltas, scenario.spec, scenario.objects)
    assert rep.passed, rep.to_dict()


def test_mirrored_branch_passes_invariants(pour):
    spec = forced_mirror_spec(pour.spec)
    for i in range(10):
        aug, rep = generate_one(pour.grounded, spec, i)
        assert aug.mirrored
        assert rep.passed, rep.failed_checks()
    # arm roles swap: arm 1 now picks up the bottle that arm 0 grasps in the demo
    mirrored_events = pour.grounded.mirror.timeline.events
    assert mirrored_events[1][0].obj == pour.timeline.events[0][0].obj == 1
    assert mirrored_events[0][0].obj == pour.timeline.events[1][0].obj == 2
    t = mirrored_events[1][0].t
    held = aug.trajectory.keypoints[t, pour.demo.owners == 1]
    tip = aug.trajectory.positions[t]
    assert np.linalg.norm(held - tip[1], axis=1).min() < np.linalg.norm(held - tip[0], axis=1).min()


def test_mirror_commutes_with_augmentation(scenario):
    g, plane = scenario.grounded, scenario.plane
    for i in range(20):
        s = sample_configuration(scenario.spec, scenario.objects, scenario.task.template, rng_for(11, i))
        a, b = g.source(s.use_mirror), g.source(not s.use_mirror)
        ms = mirror_sample(s, plane)
        left = augment_demo(a.demo, a.template, a.timeline, a.objects, s, scenario.spec).trajectory.mirrored(plane)
        right = augment_demo(b.demo, b.template, b.timeline, b.objects, ms, scenario.spec).trajectory
        assert left.length == right.length
        for x, y in [(left.positions, right.positions), (left.rotations, right.rotations),
                     (left.keypoints, right.keypoints)]:
            assert np.abs(x - y).max() <= 1e-9
        assert np.array_equal(left.gripper, right.gripper)


def test_moving_the_bottle_pads_the_peer(pour):
    # a 0.4 m shift of object 1, which arm 0 grasps; the sync stage is referenced to the cup
    delta = Pose.from_translation((-0.24, 0.32, 0.0))
    poses = (delta @ pour.objects.poses[0], pour.objects.poses[1])
    moved = SampledConfiguration(ObjectConfiguration(poses, pour.objects.ownership), (delta, Pose.identity()), False)
    base = identity_sample(pour.objects)
    tmpl = pour.task.template
    runs = [augment_demo(pour.demo, tmpl, pour.timeline, pour.objects, s, pour.spec) for s in (base, moved)]

    def approach(aug, j):
        # frames before the arm's first skill: the t=0 seed plus the planned motion
        return next(s.start for s in aug.segments[j] if s.kind not in (MOTION, PAD))

    assert approach(runs[1], 0) > approach(runs[0], 0)
    assert approach(runs[1], 1) == approach(runs[0], 1)
    skill = next(s for s in pour.timeline.arms[0] if s.kind != MOTION)
    goal = delta @ pour.demo.pose(skill.start, 0)
    assert approach(runs[1], 0) == 1 + motion_steps(pour.demo.pose(0, 0), goal, pour.spec.velocity, pour.spec.dt)

    sync_stage = next(s.stage for s in runs[1].segments[0] if s.kind == SKILL_SYNC)
    pads = []
    for aug in runs:
        arrive = [sum(s.end - s.start + 1 for s in aug.segments[j]
                      if s.stage <= sync_stage and s.kind not in (PAD, SKILL_SYNC)) for j in range(2)]
        p = next(p for p in aug.padding if p[0] == sync_stage)
        assert p[1:] == (max(0, arrive[1] - arrive[0]), max(0, arrive[0] - arrive[1]))
        pads.append(p)
    # arm 1 waits longer for the arm whose object moved away
    assert pads[1][2] > pads[0][2] and pads[1][1] == 0


def test_generation_is_deterministic_across_threads(pour):
    spec = replace(pour.spec, count=40, seed=9)
    a = generate_dataset(pour.grounded, spec, threads=1, verify=False)
    b = generate_dataset(pour.grounded, spec, threads=4, verify=False)
    assert len(a.demos) == len(b.demos) == 40
    for x, y in zip(a.demos, b.demos):
        assert x.index == y.index
        assert x.trajectory.positions.tobytes() == y.trajectory.positions.tobytes()
        assert x.trajectory.keypoints.tobytes() == y.trajectory.keypoints.tobytes()


def test_generated_objects_stay_in_box(handover):
    res = generate_dataset(handover.grounded, replace(handover.spec, count=100))
    assert not res.failures
    for d in res.demos:
        assert np.all(handover.spec.workspace.in_box(np.array([p.translation for p in d.object_poses])))


def test_spec_json_round_trip(pour, tmp_path):
    pour.spec.save(tmp_path / "spec.json")
    assert AugmentationSpec.load(tmp_path / "spec.json").to_dict() == pour.spec.to_dict()
