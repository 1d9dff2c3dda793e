import hashlib
import json

import numpy as np
import pytest

from bimanual_aug.cli import EXIT_INVALID, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, main
from bimanual_aug.trajectory import Trajectory


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    b = root / "bundle"
    assert main(["gen-synthetic", "pour", "--out", str(b)]) == EXIT_OK
    assert main(["parse", str(b), "--out", str(root / "traj.json")]) == EXIT_OK
    assert main(["ground", str(root / "traj.json"), "--template", str(b / "template.json"),
                 "--config", str(b / "config.json"), "--out", str(root / "timeline.json")]) == EXIT_OK
    return root


def _augment(root, out, *extra):
    b = root / "bundle"
    return main(["augment", str(root / "traj.json"), "--template", str(b / "template.json"),
                 "--config", str(b / "config.json"), "--spec", str(b / "spec.json"),
                 "--count", "60", "--seed", "4", "--out", str(out), *extra])


def test_parse_recovers_ground_truth(pipeline):
    parsed = Trajectory.load(pipeline / "traj.json")
    gt = Trajectory.load(pipeline / "bundle" / "ground_truth" / "traj.json")
    assert np.abs(parsed.positions - gt.positions).max() < 1e-6
    assert np.abs(parsed.keypoints - gt.keypoints).max() < 1e-6


def test_augment_verify_stats(pipeline, capsys):
    out = pipeline / "ds"
    assert _augment(pipeline, out) == EXIT_OK
    assert main(["verify", str(out), "--task", "pour"]) == EXIT_OK
    report = json.loads((out / "verify_report.json").read_text())
    assert report["pass_rate"] == 1.0 and report["demos"] == 60
    assert "replay_success" in report["checks"] and "reproducible" in report["checks"]
    assert main(["stats", str(out), "--out", str(pipeline / "stats.json")]) == EXIT_OK
    assert json.loads((pipeline / "stats.json").read_text())["num_demos"] == 60
    assert "demos:" in capsys.readouterr().out


def _digest(d):
    h = hashlib.sha256()
    for f in sorted(p for p in d.rglob("*") if p.is_file()):
        h.update(f.relative_to(d).as_posix().encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def test_output_bytes_do_not_depend_on_threads(pipeline):
    a, b = pipeline / "t1", pipeline / "t3"
    assert _augment(pipeline, a, "--threads", "1") == EXIT_OK
    assert _augment(pipeline, b, "--threads", "3") == EXIT_OK
    assert _digest(a) == _digest(b)


def test_tampered_clean_channel_fails_verification(pipeline):
    out = pipeline / "tampered"
    assert _augment(pipeline, out) == EXIT_OK
    shard = out / "shard_0000.bin"
    recs = np.frombuffer(shard.read_bytes(), dtype="<f4").copy()
    recs[0] += 1e-3  # first clean coordinate of demo 0
    shard.write_bytes(recs.tobytes())
    m = json.loads((out / "manifest.json").read_text())
    m["shards"][0]["sha256"] = hashlib.sha256(recs.tobytes()).hexdigest()
    (out / "manifest.json").write_text(json.dumps(m))
    assert main(["verify", str(out)]) == EXIT_VERIFY
    report = json.loads((out / "verify_report.json").read_text())
    assert report["failed_demos"] == [0]


def test_missing_template(pipeline, capsys, tmp_path):
    missing = tmp_path / "nope.json"
    code = main(["ground", str(pipeline / "traj.json"), "--template", str(missing),
                 "--config", str(pipeline / "bundle" / "config.json")])
    assert code == EXIT_INVALID
    assert str(missing) in capsys.readouterr().err


def test_nonempty_output_is_refused(pipeline):
    assert main(["gen-synthetic", "pour", "--out", str(pipeline / "bundle")]) == EXIT_INVALID


@pytest.mark.parametrize("argv", [["frobnicate"], ["gen-synthetic", "teleport", "--out", "x"], ["augment", "t.json"],
                                  ["bench", "--threads", "0"]])
def test_usage_errors(argv):
    assert main(argv) == EXIT_USAGE


def test_bench_reports_throughput(tmp_path, capsys):
    assert main(["bench", "--count", "20", "--threads", "2", "--out", str(tmp_path / "b.json")]) == EXIT_OK
    res = json.loads((tmp_path / "b.json").read_text())
    assert res["threads_1"]["generated"] == res["threads_2"]["generated"] == 20
    assert "threads 1" in capsys.readouterr().out


def test_flag_overrides(pipeline):
    assert _augment(pipeline, pipeline / "badplane", "--mirror-plane", "1,0") == EXIT_USAGE
    out = pipeline / "slow"
    assert _augment(pipeline, out, "--velocity", "0.1", "--no-verify") == EXIT_OK
    spec = json.loads((out / "source" / "spec.json").read_text())
    assert spec["velocity"] == 0.1 and spec["seed"] == 4 and spec["count"] == 60
