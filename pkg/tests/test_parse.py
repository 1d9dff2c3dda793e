import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bimanual_aug.errors import AllDepthInvalid, DegenerateHand, MissingHand, UnrepairableTrajectory
from bimanual_aug.geometry import rotation_angle
from bimanual_aug.parse import (
    NUM_LANDMARKS,
    CameraModel,
    HandFrame,
    backproject_track,
    hand_to_ee,
    hysteresis,
    load_bundle,
    parse_demo,
    repair_trajectory,
    resample_indices,
    robust_depth,
    save_bundle,
)
from bimanual_aug.synthetic import get_task, render_bundle
from bimanual_aug.workspace import Workspace

CAM = CameraModel(100.0, 100.0, 10.0, 10.0, 21, 21)


@pytest.fixture(scope="module")
def pour_bundle():
    return render_bundle(get_task("pour"))


def test_principal_point_ray():
    depth = np.ones((2, 21, 21), dtype=np.float32)
    track = np.array([[10.0, 10.0], [10.0, 10.0]])
    out = backproject_track(track, depth, CAM)
    assert np.allclose(out.points, [[0, 0, 1.0], [0, 0, 1.0]])
    assert not out.interpolated.any()


def test_median_window_rejects_outlier():
    frame = np.full((21, 21), 0.5, dtype=np.float32)
    frame[9, 11] = 10.0  # one of the 25 window pixels
    assert robust_depth(frame, 10, 10, 5) == pytest.approx(0.5)


def test_invalid_depth_frame_is_interpolated():
    depth = np.zeros((3, 21, 21), dtype=np.float32)
    depth[0] = 0.4
    depth[2] = 0.6
    track = np.full((3, 2), 10.0)
    out = backproject_track(track, depth, CAM)
    assert np.allclose(out.points[1], [0, 0, 0.5])
    assert out.interpolated.tolist() == [False, True, False]


def test_track_without_any_depth():
    with pytest.raises(AllDepthInvalid):
        backproject_track(np.full((2, 2), 10.0), np.zeros((2, 21, 21), np.float32), CAM, index=4)


def _hand(thumb, index, wrist):
    lm = np.zeros((NUM_LANDMARKS, 3))
    lm[0], lm[4], lm[8] = wrist, thumb, index
    return HandFrame(lm)


def test_hand_midpoint():
    p = hand_to_ee(_hand((0, 0, 0), (0, 0, 0.04), (-0.1, 0, 0.02)))
    assert np.allclose(p.translation, (0, 0, 0.02))


def test_coincident_fingers_are_degenerate():
    with pytest.raises(DegenerateHand):
        hand_to_ee(_hand((0, 0, 0), (0, 0, 0), (-0.1, 0, 0.02)))


pts = st.lists(st.floats(-0.5, 0.5, allow_nan=False), min_size=9, max_size=9)


@given(pts)
def test_approach_axis_points_from_wrist_to_midpoint(xs):
    th, ind, wr = np.array(xs[:3]), np.array(xs[3:6]), np.array(xs[6:])
    mid = 0.5 * (th + ind)
    a, b = ind - th, mid - wr
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    if np.linalg.norm(np.cross(a / np.linalg.norm(a), b / np.linalg.norm(b))) < 1e-3:
        return
    p = hand_to_ee(_hand(th, ind, wr))
    assert p.is_valid()
    assert np.allclose(p.rotation[:, 2], b / np.linalg.norm(b), atol=1e-9)
    assert np.allclose(p.translation, mid, atol=1e-12)


def test_hysteresis_traces():
    assert hysteresis([0.08] * 5, 0.02, 0.05).tolist() == [0] * 5
    assert hysteresis([0.08, 0.01, 0.03, 0.08], 0.02, 0.05).tolist() == [0, 1, 1, 0]
    assert hysteresis([0.02] * 4, 0.02, 0.05).tolist() == [0] * 4


def _column(zs):
    L = len(zs)
    pos = np.zeros((L, 3))
    pos[:, 1] = 0.3
    pos[:, 2] = zs
    return np.tile(np.eye(3), (L, 1, 1)), pos


REACH = Workspace().predicate(0)


def test_repair_noop():
    rots, pos = _column(np.linspace(0.1, 0.2, 10))
    out = repair_trajectory(rots, pos, REACH, 1.5, 1 / 30)
    assert np.array_equal(out.positions, pos) and np.array_equal(out.rotations, rots)
    assert not out.replaced.any()


def test_repair_spike():
    zs = np.linspace(0.1, 0.11, 7)
    rots, pos = _column(zs)
    pos[3] = (10, 10, 10)
    out = repair_trajectory(rots, pos, REACH, 1.5, 1 / 30)
    assert out.replaced.tolist() == [False, False, False, True, False, False, False]
    assert pos[2, 2] <= out.positions[3, 2] <= pos[4, 2]
    assert np.allclose(out.positions[3, :2], (0, 0.3))
    step = np.linalg.norm(np.diff(out.positions, axis=0), axis=1)
    assert step.max() <= 1.5 / 30


def test_repair_gives_up_when_most_frames_are_bad():
    rots, pos = _column(np.full(10, 0.2))
    pos[1:7, 0] = 5.0  # 60% outside the box
    with pytest.raises(UnrepairableTrajectory):
        repair_trajectory(rots, pos, REACH, 1.5, 1 / 30)


def test_resample_count():
    for L in (30, 31, 32, 100):
        assert len(resample_indices(L, 30, 10)) == math.ceil(L / 3)


def test_noiseless_round_trip(pour_bundle):
    bundle, gt = pour_bundle
    assert bundle.validate() == []
    traj = parse_demo(bundle)
    assert traj.length == math.ceil(bundle.num_frames / 3) == gt.length
    assert np.abs(traj.positions - gt.positions).max() < 1e-6
    assert np.abs(traj.keypoints - gt.keypoints).max() < 1e-6
    ang = rotation_angle(traj.rotations, gt.rotations)
    assert ang.max() < 1e-6
    assert np.array_equal(traj.gripper, gt.gripper)
    R = traj.rotations
    assert np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max() < 1e-9
    assert np.abs(np.linalg.det(R) - 1).max() < 1e-9


def test_noisy_round_trip():
    bundle, gt = render_bundle(get_task("pour"), noise=0.005, rng=np.random.default_rng(7))
    traj = parse_demo(bundle)
    assert np.linalg.norm(traj.keypoints - gt.keypoints, axis=-1).max() < 0.01
    assert np.linalg.norm(traj.positions - gt.positions, axis=-1).max() < 0.01


def test_bundle_files_round_trip(pour_bundle, tmp_path):
    bundle, _ = pour_bundle
    save_bundle(bundle, tmp_path / "b")
    again = load_bundle(tmp_path / "b")
    assert again.validate() == []
    assert np.array_equal(again.depth, bundle.depth)
    assert np.allclose(again.tracks, bundle.tracks)


def test_missing_hand_names_the_arm(pour_bundle):
    bundle, _ = pour_bundle
    hands = list(bundle.hands)
    hands[1] = np.full_like(hands[1], np.nan)
    broken = type(bundle)(bundle.camera, bundle.fps, bundle.depth, bundle.tracks, bundle.track_meta, hands)
    with pytest.raises(MissingHand) as exc:
        parse_demo(broken)
    assert exc.value.arm == 1
