"""Binary export/import of augmented datasets and the 20-D action encoding.

Shard layout: little-endian float32 records, one per control step, demos
stored as contiguous record runs.  A record for N keypoints is::

    [ N*3 clean xyz | N*3 noisy xyz | N mask | 20 action | 20 previous action ]

``mask`` is 1 for an observed keypoint and 0 for a dropped one; dropped
keypoints carry zeros in the noisy block.  The previous action is the
proprioceptive input (zeros at t = 0).  Windows and action chunks are cut by
readers; nothing is duplicated on disk.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorruptShard, InconsistentDemos, ValidationError
from .trajectory import KeypointMeta, Trajectory, gripper_events

FORMAT_VERSION = 1
ACTION_DIM = 20
DTYPE = np.dtype("<f4")


# --- action encoding -------------------------------------------------------------

def encode_action(rotations, positions, gripper) -> np.ndarray:
    """``(..., 2, 3, 3), (..., 2, 3), (..., 2)`` -> ``(..., 20)``.

    Per arm: position, first rotation column, second rotation column, gripper.
    """
    R = np.asarray(rotations, dtype=float)
    p = np.asarray(positions, dtype=float)
    g = np.asarray(gripper, dtype=float)[..., None]
    per_arm = np.concatenate([p, R[..., :, 0], R[..., :, 1], g], axis=-1)  # (..., 2, 10)
    return per_arm.reshape(per_arm.shape[:-2] + (ACTION_DIM,))


def decode_action(vec):
    """Inverse of :func:`encode_action`; the third column is rebuilt by Gram-Schmidt and a cross product."""
    a = np.asarray(vec, dtype=float)
    if a.shape[-1] != ACTION_DIM:
        raise ValidationError(f"action vectors must have {ACTION_DIM} entries, got {a.shape[-1]}")
    per_arm = a.reshape(a.shape[:-1] + (2, 10))
    pos = per_arm[..., 0:3]
    c1 = per_arm[..., 3:6]
    c2 = per_arm[..., 6:9]
    x = c1 / np.linalg.norm(c1, axis=-1, keepdims=True)
    y = c2 - np.sum(x * c2, axis=-1, keepdims=True) * x
    y /= np.linalg.norm(y, axis=-1, keepdims=True)
    z = np.cross(x, y)
    rots = np.stack([x, y, z], axis=-1)
    grip = (per_arm[..., 9] > 0.5).astype(np.int8)
    return rots, pos, grip


# --- export ----------------------------------------------------------------------

@dataclass(frozen=True)
class ExportOptions:
    sigma: float = 0.005
    dropout: float = 0.1
    obs_window: int = 8
    action_horizon: int = 16
    seed: int = 0
    demos_per_shard: int = 100

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValidationError("sigma must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.obs_window < 1 or self.action_horizon < 1:
            raise ValidationError("observation window and action horizon must be >= 1")
        if self.demos_per_shard < 1:
            raise ValidationError("demos_per_shard must be >= 1")


def record_width(num_keypoints: int) -> int:
    return 7 * num_keypoints + 2 * ACTION_DIM


def _perturb(clean: np.ndarray, opts: ExportOptions, index: int):
    rng = np.random.default_rng(np.random.SeedSequence([opts.seed, index, 0x6e6f6973]))
    noise = rng.normal(0.0, 1.0, clean.shape) * opts.sigma if opts.sigma > 0 else np.zeros(clean.shape)
    keep = rng.random(clean.shape[:2]) >= opts.dropout
    noisy = np.where(keep[..., None], clean + noise, 0.0)
    return noisy, keep


def demo_records(traj: Trajectory, opts: ExportOptions, index: int) -> np.ndarray:
    """Records of one demo as a float32 array ``(L, record_width)``."""
    L, N = traj.length, traj.num_keypoints
    clean = traj.keypoints.astype(DTYPE).astype(float)
    noisy, keep = _perturb(clean, opts, index)
    act = encode_action(traj.rotations, traj.positions, traj.gripper)
    prev = np.vstack([np.zeros((1, ACTION_DIM)), act[:-1]])
    rec = np.concatenate([clean.reshape(L, 3 * N), noisy.reshape(L, 3 * N), keep.astype(float), act, prev], axis=1)
    return rec.astype(DTYPE)


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json_atomic(path, obj) -> None:
    path = Path(path)
    _atomic_write(path, (json.dumps(obj, indent=1) + "\n").encode())


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def export_dataset(
    demos: Sequence,
    out_dir,
    options: ExportOptions | None = None,
    provenance: dict | None = None,
) -> dict:
    """Write ``manifest.json`` and ``shard_%04d.bin`` files; returns the manifest.

    ``demos`` are trajectories or objects with ``.trajectory`` (and optionally
    ``.provenance()``).
    """
    opts = options or ExportOptions()
    out = Path(out_dir)
    trajs = [getattr(d, "trajectory", d) for d in demos]
    if not trajs:
        raise InconsistentDemos("nothing to export")
    meta = trajs[0].meta
    dt = trajs[0].dt
    for i, t in enumerate(trajs):
        if t.meta != meta:
            raise InconsistentDemos(f"demo {i}: keypoint metadata differs from demo 0")
        if abs(t.dt - dt) > 1e-12:
            raise InconsistentDemos(f"demo {i}: control period {t.dt} differs from {dt}")
    out.mkdir(parents=True, exist_ok=True)

    shards, demo_entries = [], []
    for s0 in range(0, len(trajs), opts.demos_per_shard):
        chunk = range(s0, min(s0 + opts.demos_per_shard, len(trajs)))
        blocks, offset, entries = [], 0, []
        for i in chunk:
            rec = demo_records(trajs[i], opts, i)
            blocks.append(rec)
            entry = {"index": i, "length": int(rec.shape[0]), "record_offset": offset}
            prov = getattr(demos[i], "provenance", None)
            if callable(prov):
                entry["provenance"] = prov()
            entries.append(entry)
            offset += rec.shape[0]
        data = np.concatenate(blocks).tobytes()
        name = f"shard_{len(shards):04d}.bin"
        _atomic_write(out / name, data)
        shards.append({"file": name, "records": offset, "bytes": len(data), "sha256": sha256_bytes(data),
                       "demos": [e["index"] for e in entries]})
        demo_entries.extend(dict(e, shard=len(shards) - 1) for e in entries)

    manifest = {
        "format_version": FORMAT_VERSION,
        "num_demos": len(trajs),
        "control_rate": 1.0 / dt,
        "keypoints": [{"id": m.id, "label": m.label, "group": m.group, "object": m.owner} for m in meta],
        "action_dim": ACTION_DIM,
        "record_width": record_width(len(meta)),
        "record_layout": ["clean_xyz", "noisy_xyz", "mask", "action", "prev_action"],
        "export_options": asdict(opts),
        "shards": shards,
        "demos": demo_entries,
        "provenance": provenance or {},
    }
    write_json_atomic(out / "manifest.json", manifest)
    return manifest


# --- import ----------------------------------------------------------------------

@dataclass(eq=False)
class ImportedDemo:
    index: int
    clean: np.ndarray     # (L, N, 3) float32
    noisy: np.ndarray
    mask: np.ndarray      # (L, N) bool
    actions: np.ndarray   # (L, 20) float32
    prev_actions: np.ndarray
    provenance: dict

    @property
    def length(self) -> int:
        return len(self.actions)

    def trajectory(self, meta: Sequence[KeypointMeta], dt: float) -> Trajectory:
        rots, pos, grip = decode_action(self.actions.astype(float))
        return Trajectory(dt, self.clean.astype(float), rots, pos, grip, tuple(meta))


@dataclass(eq=False)
class ImportedDataset:
    manifest: dict
    demos: list[ImportedDemo]

    @property
    def meta(self) -> tuple[KeypointMeta, ...]:
        return tuple(KeypointMeta(k["id"], k["label"], k["group"], k["object"]) for k in self.manifest["keypoints"])

    @property
    def dt(self) -> float:
        return 1.0 / self.manifest["control_rate"]


def _split(rec: np.ndarray, N: int, index: int, prov: dict) -> ImportedDemo:
    L = len(rec)
    c = 0
    clean = rec[:, c:c + 3 * N].reshape(L, N, 3)
    c += 3 * N
    noisy = rec[:, c:c + 3 * N].reshape(L, N, 3)
    c += 3 * N
    mask = rec[:, c:c + N] > 0.5
    c += N
    act = rec[:, c:c + ACTION_DIM]
    prev = rec[:, c + ACTION_DIM:c + 2 * ACTION_DIM]
    return ImportedDemo(index, clean.copy(), noisy.copy(), mask.copy(), act.copy(), prev.copy(), prov)


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    for key in ("format_version", "keypoints", "shards", "demos", "record_width", "action_dim"):
        if key not in m:
            raise ValidationError(f"{path}: manifest lacks {key!r}")
    if m["format_version"] != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported format version {m['format_version']}")
    if m["action_dim"] != ACTION_DIM or m["record_width"] != record_width(len(m["keypoints"])):
        raise ValidationError(f"{path}: record layout does not match the keypoint count")
    return m


def import_dataset(path, check_hashes: bool = True) -> ImportedDataset:
    """Read a dataset written by :func:`export_dataset`."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    m = load_manifest(path)
    N = len(m["keypoints"])
    W = m["record_width"]
    by_shard: dict[int, list] = {}
    for d in m["demos"]:
        by_shard.setdefault(d["shard"], []).append(d)
    demos: list[ImportedDemo] = []
    for si, sh in enumerate(m["shards"]):
        f = root / sh["file"]
        if not f.is_file():
            raise CorruptShard(str(f), 0, "shard file missing")
        data = f.read_bytes()
        expect = sh["records"] * W * DTYPE.itemsize
        if len(data) != expect:
            raise CorruptShard(str(f), min(len(data), expect), f"size {len(data)} bytes, expected {expect}")
        if check_hashes and sha256_bytes(data) != sh["sha256"]:
            raise CorruptShard(str(f), 0, "sha256 mismatch")
        recs = np.frombuffer(data, dtype=DTYPE).reshape(sh["records"], W)
        bad = np.nonzero(~np.isfinite(recs).all(axis=1))[0]
        if bad.size:
            raise CorruptShard(str(f), int(bad[0]) * W * DTYPE.itemsize, "non-finite values")
        for d in by_shard.get(si, []):
            a, L = d["record_offset"], d["length"]
            if a + L > sh["records"]:
                raise CorruptShard(str(f), a * W * DTYPE.itemsize, f"demo {d['index']} runs past the shard end")
            demos.append(_split(recs[a:a + L], N, d["index"], d.get("provenance", {})))
    demos.sort(key=lambda d: d.index)
    if len(demos) != m["num_demos"]:
        raise ValidationError(f"manifest lists {m['num_demos']} demos, found {len(demos)}")
    return ImportedDataset(m, demos)


# --- stats -----------------------------------------------------------------------

def stats(dataset: ImportedDataset) -> dict:
    lengths = np.array([d.length for d in dataset.demos], dtype=int)
    hist: dict[int, int] = {}
    for L in lengths.tolist():
        hist[L] = hist.get(L, 0) + 1
    transitions = [[0, 0], [0, 0]]  # per arm: [grasps, releases]
    per_demo = []
    for d in dataset.demos:
        _, _, grip = decode_action(d.actions.astype(float))
        counts = []
        for j in range(2):
            ev = gripper_events(grip[:, j])
            g = sum(1 for _, s in ev if s > 0)
            transitions[j][0] += g
            transitions[j][1] += len(ev) - g
            counts.append(len(ev))
        per_demo.append(counts)
    boxes = []
    positions = [d.provenance.get("object_positions") for d in dataset.demos]
    if positions and all(p for p in positions):
        P = np.array(positions, dtype=float)  # (D, K, 3)
        boxes = [{"min": P[:, k].min(axis=0).tolist(), "max": P[:, k].max(axis=0).tolist()} for k in range(P.shape[1])]
    mirrored = sum(1 for d in dataset.demos if d.provenance.get("mirrored"))
    return {
        "num_demos": len(dataset.demos),
        "length": {"min": int(lengths.min()) if lengths.size else 0, "max": int(lengths.max(initial=0)),
                   "mean": float(lengths.mean()) if lengths.size else 0.0,
                   "histogram": {str(k): v for k, v in sorted(hist.items())}},
        "object_boxes": boxes,
        "gripper_transitions": [{"grasps": t[0], "releases": t[1]} for t in transitions],
        "transitions_per_demo": sorted({tuple(c) for c in per_demo}),
        "mirrored": mirrored,
    }


def format_stats(s: dict) -> str:
    lines = [
        f"demos:            {s['num_demos']} ({s['mirrored']} mirrored)",
        f"length:           min {s['length']['min']}  max {s['length']['max']}  mean {s['length']['mean']:.1f}",
    ]
    for k, b in enumerate(s["object_boxes"], start=1):
        lo = ", ".join(f"{v:+.3f}" for v in b["min"])
        hi = ", ".join(f"{v:+.3f}" for v in b["max"])
        lines.append(f"object {k} box:     [{lo}] .. [{hi}]")
    for j, t in enumerate(s["gripper_transitions"]):
        lines.append(f"arm {j} gripper:    {t['grasps']} grasps, {t['releases']} releases")
    return "\n".join(lines)
