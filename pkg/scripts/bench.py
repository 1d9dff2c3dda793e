"""Generation throughput for both synthetic tasks, with and without invariant checks."""
import argparse

from bimanual_aug.cli import bench

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=1000)
    ap.add_argument("--threads", type=int, default=4)
    a = ap.parse_args()
    for task in ("pour", "handover"):
        for checks in (False, True):
            res = bench(task, a.count, a.threads, checks=checks)
            for key in sorted(k for k in res if k.startswith("threads_")):
                r = res[key]
                print(f"{task:9s} checks={'on ' if checks else 'off'} {key:10s} "
                      f"{r['seconds']:6.2f} s  {r['demos_per_s']:7.0f} demos/s")
