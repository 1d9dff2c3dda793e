from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bimanual_aug.augment import generate_dataset
from bimanual_aug.dataset_io import (
    ExportOptions,
    decode_action,
    encode_action,
    export_dataset,
    import_dataset,
    record_width,
    stats,
)
from bimanual_aug.errors import CorruptShard, InconsistentDemos, ValidationError
from bimanual_aug.geometry import random_rotation
from bimanual_aug.trajectory import KeypointMeta


@pytest.fixture(scope="module")
def pour_demos(pour):
    return generate_dataset(pour.grounded, replace(pour.spec, count=100), verify=False).demos


@pytest.fixture(scope="module")
def exported(pour_demos, tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    export_dataset(pour_demos, out, ExportOptions(seed=3, demos_per_shard=40), {"seed": 3})
    return out


def test_identity_encodes_to_first_two_columns():
    a = encode_action(np.tile(np.eye(3), (2, 1, 1)), np.zeros((2, 3)), np.array([0, 1]))
    assert a.shape == (20,)
    assert a[3:9].tolist() == [1, 0, 0, 0, 1, 0]
    assert a[13:19].tolist() == [1, 0, 0, 0, 1, 0]
    assert a[9] == 0 and a[19] == 1


@given(st.integers(0, 2**32 - 1))
def test_action_round_trip(seed):
    rng = np.random.default_rng(seed)
    R = np.stack([random_rotation(rng) for _ in range(2)])
    p = rng.normal(size=(2, 3))
    g = rng.integers(0, 2, 2)
    R2, p2, g2 = decode_action(encode_action(R, p, g))
    assert np.abs(R2 - R).max() < 1e-9
    assert np.abs(p2 - p).max() < 1e-12
    assert np.array_equal(g2, g)


def test_decode_rejects_wrong_width():
    with pytest.raises(ValidationError):
        decode_action(np.zeros(19))


@pytest.mark.parametrize("kw", [dict(dropout=1.0), dict(sigma=-0.1), dict(obs_window=0), dict(action_horizon=0)])
def test_export_options_bounds(kw):
    with pytest.raises(ValidationError):
        ExportOptions(**kw)


def test_no_perturbation_means_equal_channels(pour_demos, tmp_path):
    export_dataset(pour_demos[:5], tmp_path, ExportOptions(sigma=0, dropout=0))
    ds = import_dataset(tmp_path)
    for d in ds.demos:
        assert np.array_equal(d.clean, d.noisy)
        assert d.mask.all()


def test_round_trip_is_bit_exact(pour_demos, exported):
    ds = import_dataset(exported)
    assert len(ds.demos) == 100
    assert ds.manifest["record_width"] == record_width(pour_demos[0].trajectory.num_keypoints)
    for aug, d in zip(pour_demos, ds.demos):
        tr = aug.trajectory
        assert d.clean.tobytes() == tr.keypoints.astype("<f4").tobytes()
        assert d.actions.tobytes() == encode_action(tr.rotations, tr.positions, tr.gripper).astype("<f4").tobytes()
        assert np.array_equal(d.prev_actions[1:], d.actions[:-1]) and not d.prev_actions[0].any()
        assert set(np.unique(d.actions[:, [9, 19]])) <= {0.0, 1.0}
        assert d.provenance["index"] == aug.index


def test_export_is_deterministic(pour_demos, exported, tmp_path):
    export_dataset(pour_demos, tmp_path, ExportOptions(seed=3, demos_per_shard=40), {"seed": 3})
    for f in sorted(exported.glob("*")):
        assert (tmp_path / f.name).read_bytes() == f.read_bytes()


def test_noise_statistics(exported):
    ds = import_dataset(exported)
    res = np.concatenate([(d.noisy - d.clean)[d.mask.astype(bool)].ravel() for d in ds.demos])
    assert res.size >= 10**5
    assert abs(res.std() - 0.005) < 0.1 * 0.005
    assert abs(res.mean()) < 1e-4
    dropped = 1 - np.mean(np.concatenate([d.mask.ravel() for d in ds.demos]))
    assert abs(dropped - 0.1) < 0.01
    assert all(not d.noisy[~d.mask.astype(bool)].any() for d in ds.demos)


def test_tampering_is_detected(exported, tmp_path):
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(exported, bad)
    shard = bad / "shard_0001.bin"
    data = bytearray(shard.read_bytes())
    data[1000] ^= 0xFF
    shard.write_bytes(bytes(data))
    with pytest.raises(CorruptShard) as exc:
        import_dataset(bad)
    assert "shard_0001.bin" in str(exc.value)
    shard.write_bytes(bytes(data[:-8]))
    with pytest.raises(CorruptShard):
        import_dataset(bad, check_hashes=False)


def test_metadata_mismatch(pour_demos, tmp_path):
    tr = pour_demos[1].trajectory
    other = replace(tr, meta=tuple(KeypointMeta(m.id, m.label + "_x", m.group, m.owner) for m in tr.meta))
    with pytest.raises(InconsistentDemos):
        export_dataset([pour_demos[0].trajectory, other], tmp_path)


def test_stats(pour, pour_demos, exported):
    s = stats(import_dataset(exported))
    assert s["num_demos"] == 100
    ws = pour.spec.workspace
    for box in s["object_boxes"]:
        assert np.all(np.array(box["min"]) >= ws.box_min) and np.all(np.array(box["max"]) <= ws.box_max)
    skill_steps = sum(seg.length for seg in pour.timeline.arms[0] if seg.kind.startswith("skill"))
    assert s["length"]["min"] >= skill_steps
    assert sum(s["length"]["histogram"].values()) == 100
    assert s["mirrored"] == sum(d.mirrored for d in pour_demos)
    demo_counts = [{"grasps": 0, "releases": 0} for _ in range(2)]
    for j in range(2):
        g = pour.demo.gripper[:, j]
        demo_counts[j]["grasps"] = int(np.sum(np.diff(g) > 0)) * 100
        demo_counts[j]["releases"] = int(np.sum(np.diff(g) < 0)) * 100
    assert sorted(map(str, s["gripper_transitions"])) == sorted(map(str, demo_counts))
