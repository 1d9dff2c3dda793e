"""Command-line front end: ``bimanual-aug <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataset_io
from .augment import AugmentationSpec, GroundedDemo, generate_dataset, generate_one
from .errors import AugError, BatchFailure, ValidationError
from .geometry import Plane
from .parse import ParseConfig, load_bundle, parse_demo, save_bundle
from .synthetic import TASKS, get_task, render_bundle
from .template import ObjectConfiguration, SegmentTimeline, TaskTemplate, ground_segments
from .trajectory import Trajectory
from .verify import aggregate, check_invariants, replay

log = logging.getLogger("bimanual_aug")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_VERIFY = 0, 1, 2, 3
DEFAULT_SEED = 0


class UsageError(Exception):
    pass


class VerificationFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers -----------------------------------------------------------------------

def _need_file(path, what: str) -> Path:
    if path is None:
        raise ValidationError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _need_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _parse_plane(text: str | None) -> Plane | None:
    if text is None:
        return None
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--mirror-plane expects 'nx,ny,nz[,offset]', got {text!r}") from None
    if len(vals) not in (3, 4):
        raise UsageError(f"--mirror-plane expects 3 or 4 numbers, got {len(vals)}")
    try:
        return Plane(np.array(vals[:3]), vals[3] if len(vals) == 4 else 0.0)
    except ValueError as exc:
        raise ValidationError(f"--mirror-plane: {exc}") from exc


def _load_traj(path) -> Trajectory:
    return Trajectory.load(_need_file(path, "trajectory file"))


def _load_spec(args) -> AugmentationSpec:
    spec = AugmentationSpec.load(_need_file(args.spec, "spec file"))
    overrides = {}
    for flag, key in (("seed", "seed"), ("count", "count"), ("velocity", "velocity"), ("dt", "dt")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    plane = _parse_plane(getattr(args, "mirror_plane", None))
    if plane is not None:
        overrides["symmetry_plane"] = plane
    return replace(spec, **overrides) if overrides else spec


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _fresh_output_dir(out) -> tuple[Path, Path]:
    """Temporary sibling of ``out`` that is moved into place when the command succeeds."""
    out = Path(out)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise ValidationError(f"output directory exists and is not empty: {out}")
    out.parent.mkdir(parents=True, exist_ok=True)
    return out, Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))


def _commit_dir(tmp: Path, out: Path) -> None:
    if out.exists():
        out.rmdir()
    tmp.rename(out)


def _write_json(path, obj) -> None:
    dataset_io.write_json_atomic(path, obj)


def _grounded(args, traj, template, config, spec) -> GroundedDemo:
    tl = SegmentTimeline.load(args.timeline) if getattr(args, "timeline", None) else None
    return GroundedDemo.build(traj, template, config, spec.symmetry_plane, args.eps_skill, args.eps_sync, tl)


# --- subcommands ---------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    task = get_task(args.task)
    if args.noise < 0:
        raise ValidationError("--noise must be >= 0")
    seed = DEFAULT_SEED if args.seed is None else args.seed
    bundle, gt = render_bundle(task, noise=args.noise, rng=np.random.default_rng(seed))
    problems = bundle.validate()
    if problems:
        raise ValidationError("; ".join(problems))
    out, tmp = _fresh_output_dir(args.out)
    try:
        save_bundle(bundle, tmp)
        (tmp / "ground_truth").mkdir()
        gt.save(tmp / "ground_truth" / "traj.json")
        task.object_configuration().save(tmp / "config.json")
        task.template.save(tmp / "template.json")
        task.spec.save(tmp / "spec.json")
        (tmp / "task.txt").write_text(task.task_id + "\n")
        _commit_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {args.task} bundle ({bundle.num_frames} frames, noise {args.noise}) to {out}")
    return EXIT_OK


def cmd_parse(args) -> int:
    bundle = load_bundle(_need_dir(args.bundle, "bundle directory"))
    traj = parse_demo(bundle, ParseConfig())
    out = Path(args.out or Path(args.bundle) / "traj.json")
    _write_json(out, traj.to_json_dict())
    print(f"parsed {bundle.num_frames} frames -> {traj.length} control steps: {out}")
    return EXIT_OK


def cmd_ground(args) -> int:
    traj = _load_traj(args.traj)
    template = TaskTemplate.load(_need_file(args.template, "template file"))
    config = ObjectConfiguration.load(_need_file(args.config, "object configuration"), traj.owners)
    tl = ground_segments(traj, template, config, args.eps_skill, args.eps_sync)
    out = Path(args.out or Path(args.traj).with_name("timeline.json"))
    _write_json(out, tl.to_dict())
    for j in range(2):
        print(f"arm {j}: " + " ".join(f"{s.kind}[{s.start}-{s.end}]" for s in tl.arms[j]))
    return EXIT_OK


def cmd_augment(args) -> int:
    traj = _load_traj(args.traj)
    template = TaskTemplate.load(_need_file(args.template, "template file"))
    config = ObjectConfiguration.load(_need_file(args.config, "object configuration"), traj.owners)
    spec = _load_spec(args)
    opts = dataset_io.ExportOptions(sigma=args.noise if args.noise is not None else 0.005,
                                    dropout=args.dropout if args.dropout is not None else 0.1, seed=spec.seed)
    grounded = _grounded(args, traj, template, config, spec)
    out, tmp = _fresh_output_dir(args.out)
    try:
        t0 = time.perf_counter()
        result = generate_dataset(grounded, spec, threads=args.threads, verify=not args.no_verify)
        t_gen = time.perf_counter() - t0
        src = tmp / "source"
        src.mkdir()
        traj.save(src / "traj.json")
        template.save(src / "template.json")
        config.save(src / "config.json")
        spec.save(src / "spec.json")
        grounded.timeline.save(src / "timeline.json")
        _write_json(src / "grounding.json", {"eps_skill": args.eps_skill, "eps_sync": args.eps_sync})
        prov = {"source_hash": _digest(traj.to_json_dict()), "spec_hash": _digest(spec.to_dict()),
                "seed": spec.seed, "failures": [list(f) for f in result.failures]}
        dataset_io.export_dataset(result.demos, tmp, opts, prov)
        _commit_dir(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"generated {len(result.demos)} of {spec.count} demos in {t_gen:.2f}s "
          f"({len(result.failures)} failed) -> {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    root = _need_dir(args.dataset, "dataset directory")
    src = _need_dir(root / "source", "dataset source directory")
    traj = _load_traj(src / "traj.json")
    template = TaskTemplate.load(src / "template.json")
    config = ObjectConfiguration.load(src / "config.json", traj.owners)
    spec = AugmentationSpec.load(src / "spec.json")
    eps = json.loads((src / "grounding.json").read_text()) if (src / "grounding.json").is_file() else {}
    ds = dataset_io.import_dataset(root)
    grounded = GroundedDemo.build(traj, template, config, spec.symmetry_plane,
                                  eps.get("eps_skill", 0.10), eps.get("eps_sync", 0.30),
                                  SegmentTimeline.load(src / "timeline.json"))
    task = get_task(args.task) if args.task else None

    def one(d):
        aug, rep = generate_one(grounded, spec, d.index, verify=True)
        # the stored clean data must be exactly what the recorded seed regenerates
        rec = dataset_io.demo_records(aug.trajectory, dataset_io.ExportOptions(sigma=0, dropout=0), d.index)
        N = traj.num_keypoints
        same = (rec.shape[0] == d.length
                and np.array_equal(rec[:, :3 * N], d.clean.reshape(d.length, -1))
                and np.array_equal(rec[:, 7 * N:7 * N + 20], d.actions))
        rep.add("reproducible", 0.0 if same else np.inf, [] if same else [d.index])
        if task is not None:
            ok = replay(aug.trajectory, task, mirrored=aug.mirrored).success
            rep.add("replay_success", 0.0 if ok else 1.0, [] if ok else [d.index], tol=0)
        return rep

    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(args.threads) as pool:
            reports = list(pool.map(one, ds.demos))
    else:
        reports = [one(d) for d in ds.demos]
    summary = aggregate(reports)
    summary["failed_demos"] = [d.index for d, r in zip(ds.demos, reports) if not r.passed]
    out = Path(args.out or root / "verify_report.json")
    _write_json(out, summary)
    print(f"verified {summary['demos']} demos: {summary['passed']} passed "
          f"({100 * summary['pass_rate']:.1f}%), report: {out}")
    if summary["passed"] != summary["demos"]:
        raise VerificationFailed(f"{summary['demos'] - summary['passed']} demos failed verification")
    return EXIT_OK


def cmd_stats(args) -> int:
    ds = dataset_io.import_dataset(_need_dir(args.dataset, "dataset directory"))
    s = dataset_io.stats(ds)
    print(dataset_io.format_stats(s))
    if args.out:
        _write_json(args.out, s)
    return EXIT_OK


def bench(task_id: str, count: int, threads: int = 1, seed: int = DEFAULT_SEED, checks: bool = False) -> dict:
    """Time in-memory generation of ``count`` augmentations; no file I/O is timed."""
    task = get_task(task_id)
    spec = replace(task.spec, count=count, seed=seed)
    t0 = time.perf_counter()
    grounded = GroundedDemo.build(task.demo(), task.template, task.object_configuration(), spec.symmetry_plane)
    t_ground = time.perf_counter() - t0
    out = {"task": task_id, "count": count, "checks": checks, "grounding_s": t_ground}
    for n in sorted({1, threads}):
        t0 = time.perf_counter()
        res = generate_dataset(grounded, spec, threads=n, verify=checks)
        dt = time.perf_counter() - t0
        out[f"threads_{n}"] = {"seconds": dt, "demos_per_s": len(res.demos) / dt, "generated": len(res.demos)}
    return out


def cmd_bench(args) -> int:
    count = 1000 if args.count is None else args.count
    seed = DEFAULT_SEED if args.seed is None else args.seed
    res = bench(args.task, count, args.threads, seed, args.checks)
    for key, v in res.items():
        if key.startswith("threads_"):
            print(f"{key.replace('_', ' ')}: {v['generated']} demos in {v['seconds']:.2f}s "
                  f"({v['demos_per_s']:.0f}/s)")
    if args.out:
        _write_json(args.out, res)
    return EXIT_OK


# --- argument parsing -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bimanual-aug", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *flags):
        if "seed" in flags:
            sp.add_argument("--seed", type=int, default=None, help="random seed (default: spec file, else 0)")
        if "threads" in flags:
            sp.add_argument("--threads", type=int, default=1)
        if "eps" in flags:
            sp.add_argument("--eps-skill", type=float, default=0.10, help="object proximity threshold (m)")
            sp.add_argument("--eps-sync", type=float, default=0.30, help="inter-EE sync threshold (m)")
        sp.add_argument("--out", default=None)

    g = sub.add_parser("gen-synthetic", help="render a synthetic demo bundle with ground truth")
    g.add_argument("task", choices=sorted(TASKS))
    g.add_argument("--noise", type=float, default=0.0, help="depth noise std-dev (m)")
    common(g, "seed")
    g.set_defaults(func=cmd_gen_synthetic, need_out=True)

    pa = sub.add_parser("parse", help="demo bundle -> trajectory json")
    pa.add_argument("bundle")
    common(pa)
    pa.set_defaults(func=cmd_parse)

    gr = sub.add_parser("ground", help="segment a trajectory with a task template")
    gr.add_argument("traj")
    gr.add_argument("--template", required=False)
    gr.add_argument("--config", required=False, help="object configuration json")
    common(gr, "eps")
    gr.set_defaults(func=cmd_ground)

    au = sub.add_parser("augment", help="generate and export an augmented dataset")
    au.add_argument("traj")
    au.add_argument("--template")
    au.add_argument("--config", help="object configuration json")
    au.add_argument("--spec")
    au.add_argument("--timeline", help="precomputed timeline json (default: ground on the fly)")
    au.add_argument("--count", type=int, default=None)
    au.add_argument("--velocity", type=float, default=None)
    au.add_argument("--dt", type=float, default=None)
    au.add_argument("--mirror-plane", default=None, help="nx,ny,nz[,offset]")
    au.add_argument("--noise", type=float, default=None, help="export keypoint noise std-dev (m)")
    au.add_argument("--dropout", type=float, default=None, help="export keypoint dropout probability")
    au.add_argument("--no-verify", action="store_true", help="skip per-demo invariant checks")
    common(au, "seed", "threads", "eps")
    au.set_defaults(func=cmd_augment, need_out=True)

    ve = sub.add_parser("verify", help="regenerate and check an exported dataset")
    ve.add_argument("dataset")
    ve.add_argument("--task", choices=sorted(TASKS), default=None, help="also replay against a synthetic task")
    common(ve, "threads")
    ve.set_defaults(func=cmd_verify)

    st = sub.add_parser("stats", help="summarise an exported dataset")
    st.add_argument("dataset")
    common(st)
    st.set_defaults(func=cmd_stats)

    be = sub.add_parser("bench", help="generation throughput on a synthetic task")
    be.add_argument("--task", choices=sorted(TASKS), default="pour")
    be.add_argument("--count", type=int, default=None)
    be.add_argument("--checks", action="store_true", help="include invariant checks in the timing")
    common(be, "seed", "threads")
    be.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "need_out", False) and not args.out:
            parser.error(f"{args.command}: --out is required")
        if getattr(args, "threads", 1) < 1:
            parser.error("--threads must be >= 1")
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VerificationFailed, BatchFailure) as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except AugError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
