"""Run gen-synthetic -> parse -> ground -> augment -> verify -> stats for one synthetic task.

    python scripts/run_pipeline.py pour /tmp/run --count 1000
"""
import argparse
import sys
from pathlib import Path

from bimanual_aug.cli import main


def run(task, work: Path, count: int, seed: int, threads: int) -> int:
    b = work / "bundle"
    steps = [
        ["gen-synthetic", task, "--seed", str(seed), "--out", str(b)],
        ["parse", str(b), "--out", str(work / "traj.json")],
        ["ground", str(work / "traj.json"), "--template", str(b / "template.json"),
         "--config", str(b / "config.json"), "--out", str(work / "timeline.json")],
        ["augment", str(work / "traj.json"), "--template", str(b / "template.json"), "--config", str(b / "config.json"),
         "--spec", str(b / "spec.json"), "--timeline", str(work / "timeline.json"), "--count", str(count),
         "--seed", str(seed), "--threads", str(threads), "--out", str(work / "dataset")],
        ["verify", str(work / "dataset"), "--task", task, "--threads", str(threads)],
        ["stats", str(work / "dataset"), "--out", str(work / "stats.json")],
    ]
    for argv in steps:
        print("$ bimanual-aug " + " ".join(argv))
        code = main(argv)
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("task", choices=["pour", "handover"])
    ap.add_argument("workdir", type=Path)
    ap.add_argument("--count", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    a = ap.parse_args()
    sys.exit(run(a.task, a.workdir, a.count, a.seed, a.threads))
