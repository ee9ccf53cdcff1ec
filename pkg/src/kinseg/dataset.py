"""On-disk artifacts: dataset directories, masks, joint logs, transforms, traces."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._validation import check_image, check_mask
from .camera import CameraIntrinsics
from .geometry import ContinuumParams, JointState, Pose
from .simulator import (
    SceneConfig,
    _to_jsonable,
    config_hash,
    config_to_dict,
    frame_seed,
    perturb_model,
    render_frame,
    trajectory,
)

__all__ = [
    "DataError",
    "save_image",
    "load_image",
    "save_mask",
    "load_mask",
    "save_trimap",
    "load_trimap",
    "write_joints",
    "read_joints",
    "write_transform",
    "read_transform",
    "write_trace_csv",
    "read_trace_csv",
    "write_loss_csv",
    "params_to_dict",
    "params_from_dict",
    "FrameEntry",
    "Dataset",
    "generate_dataset",
    "load_dataset",
]

MANIFEST = "manifest.json"
JOINTS_FILE = "joints.txt"
DATASET_FORMAT = "kinseg-dataset"
DATASET_VERSION = 1


class DataError(ValueError):
    """Malformed or missing input data."""


# ------------------------------------------------------------------- rasters


def save_image(path, image):
    Image.fromarray(np.ascontiguousarray(check_image(image), dtype=np.uint8), mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except FileNotFoundError as e:
        raise DataError(f"missing image {path}") from e


def save_mask(path, mask):
    """Single-channel PNG, 0 = background, 255 = foreground."""
    m = check_mask(mask)
    Image.fromarray(np.where(m, 255, 0).astype(np.uint8), mode="L").save(path)


def load_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) >= 128
    except FileNotFoundError as e:
        raise DataError(f"missing mask {path}") from e


def save_trimap(path, trimap):
    """Single-channel PNG holding ``class * 85`` (0, 85, 170, 255)."""
    t = np.asarray(trimap)
    if t.ndim != 2 or t.min(initial=0) < 0 or t.max(initial=0) > 3:
        raise ValueError("trimap must be 2-D with classes 0..3")
    Image.fromarray((t.astype(np.uint8) * 85), mode="L").save(path)


def load_trimap(path) -> np.ndarray:
    with Image.open(path) as im:
        v = np.asarray(im.convert("L")).astype(int)
    return np.rint(v / 85.0).astype(np.uint8)


# ----------------------------------------------------------------- text files


def write_joints(path, frame_ids, joints):
    """One line per frame: ``frame_id rotation_rad insertion_mm bending``."""
    lines = ["# frame_id rotation_rad insertion_mm bending"]
    for i, q in zip(frame_ids, joints):
        lines.append(f"{int(i)} {q.rotation!r} {q.insertion!r} {q.bending!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_joints(path) -> dict:
    """Map frame id -> JointState."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing joints file {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}:{n}: expected 4 fields, got {len(parts)}")
        try:
            out[int(parts[0])] = JointState(float(parts[1]), float(parts[2]), float(parts[3]))
        except ValueError as e:
            raise DataError(f"{path}:{n}: {e}") from e
    return out


def write_transform(path, T: Pose):
    """Row-major 3x4 ``[R|t]`` as three lines of four numbers."""
    m = T.as_matrix()
    Path(path).write_text("".join(" ".join(repr(float(x)) for x in row) + "\n" for row in m))


def read_transform(path) -> Pose:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing transform file {path}")
    vals = path.read_text().split()
    if len(vals) != 12:
        raise DataError(f"{path}: expected 12 numbers, got {len(vals)}")
    try:
        return Pose.from_matrix(np.array([float(v) for v in vals]).reshape(3, 4))
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e


def write_trace_csv(path, trace):
    has_gt = any(r.gt_iou is not None for r in trace)
    cols = ["iteration", "f1_prime", "best_f1"] + (["gt_iou"] if has_gt else []) + ["ms"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in trace:
            row = [r.iteration, repr(float(r.f1_prime)), repr(float(r.best_f1))]
            if has_gt:
                row.append(repr(float(r.gt_iou)))
            row.append(f"{r.ms:.3f}")
            w.writerow(row)


def read_trace_csv(path) -> list:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(history, 1):
            w.writerow([i, repr(float(v))])


# ---------------------------------------------------------------- model params


def params_to_dict(p: ContinuumParams) -> dict:
    return _to_jsonable(p)


def params_from_dict(d: dict) -> ContinuumParams:
    d = dict(d)
    d["channel_pose"] = Pose.from_matrix(d["channel_pose"]["matrix"])
    return ContinuumParams(**d)


# -------------------------------------------------------------------- datasets


@dataclass(frozen=True)
class FrameEntry:
    frame_id: int
    split: str
    image: Path
    joints: JointState
    gt: Path | None = None


@dataclass
class Dataset:
    """A loaded dataset directory.

    ``has_gt`` is False for the self-supervised view: GT paths and the
    simulator's truth block are dropped before anything can read them.
    """

    root: Path
    intrinsics: CameraIntrinsics
    model: ContinuumParams
    prior_vector: np.ndarray
    frames: list
    seed: int
    config_hash: str
    has_gt: bool = False
    truth: dict | None = field(default=None, repr=False)

    def split(self, name: str) -> list:
        return [f for f in self.frames if f.split == name]

    def images(self, split: str) -> list:
        return [load_image(f.image) for f in self.split(split)]

    def joints(self, split: str) -> list:
        return [f.joints for f in self.split(split)]

    def gt_masks(self, split: str) -> list:
        if not self.has_gt:
            raise DataError("this dataset view carries no ground truth")
        return [load_mask(f.gt) for f in self.split(split)]

    def without_gt(self) -> "Dataset":
        frames = [FrameEntry(f.frame_id, f.split, f.image, f.joints, None) for f in self.frames]
        return Dataset(self.root, self.intrinsics, self.model, self.prior_vector, frames,
                       self.seed, self.config_hash, False, None)


def generate_dataset(cfg: SceneConfig, out_dir, n_frames: int = 19, n_test: int = 30, seed: int = 0,
                     motion=None) -> Path:
    """Render calibration and held-out frames; returns the manifest path.

    Calibration frames sample the trajectory at t = 0 .. n_frames-1 with
    free-space deflection; held-out frames start ``motion.test_offset`` later
    and use the contact deflection bound.
    """
    if n_frames < 1 or n_test < 0:
        raise ValueError("n_frames must be >= 1 and n_test >= 0")
    motion = motion or cfg.motion
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "gt").mkdir(exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directory {root}: {e}") from e
    times = list(range(n_frames)) + [motion.test_offset + j for j in range(n_test)]
    qs = trajectory(motion, cfg.true_params, times)
    entries, logged, truth = [], [], []
    for fid, q in enumerate(qs):
        split = "calibration" if fid < n_frames else "test"
        bound = cfg.noise.tip_deflection if split == "calibration" else cfg.noise.contact_deflection
        rec = render_frame(cfg, q, frame_seed(seed, fid), fid, deflection_bound=bound)
        name = f"{fid:04d}.png"
        save_image(root / "images" / name, rec.image)
        save_mask(root / "gt" / name, rec.gt_mask)
        logged.append(rec.joints)
        entries.append({"id": fid, "split": split, "image": f"images/{name}", "gt": f"gt/{name}",
                        "out_of_view": bool(rec.out_of_view)})
        truth.append({"id": fid, "true_joints": rec.true_joints.as_array().tolist(),
                      "deflection": np.asarray(rec.deflection).tolist()})
    write_joints(root / JOINTS_FILE, range(len(qs)), logged)
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "seed": int(seed),
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
        "intrinsics": _to_jsonable(cfg.intrinsics),
        "model": params_to_dict(perturb_model(cfg.true_params, cfg.noise)),
        "prior_vector": np.asarray(cfg.prior_vector).tolist(),
        "joints": JOINTS_FILE,
        "frames": entries,
        "truth": {"frames": truth},
    }
    path = root / MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(path, with_gt: bool = False) -> Dataset:
    """Open a dataset from its directory or manifest path.

    With ``with_gt=False`` (the default) GT masks and the truth block are
    never exposed.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise DataError(f"missing manifest {path}")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e
    if m.get("format") != DATASET_FORMAT:
        raise DataError(f"{path}: not a {DATASET_FORMAT} manifest")
    root = path.parent
    try:
        joints = read_joints(root / m["joints"])
        frames = []
        for e in m["frames"]:
            if e["id"] not in joints:
                raise DataError(f"joints file has no line for frame {e['id']}")
            gt = root / e["gt"] if with_gt and e.get("gt") else None
            frames.append(FrameEntry(int(e["id"]), e["split"], root / e["image"], joints[e["id"]], gt))
        intr = CameraIntrinsics(**m["intrinsics"])
        model = params_from_dict(m["model"])
        prior = np.asarray(m["prior_vector"], dtype=float)
    except KeyError as e:
        raise DataError(f"{path}: manifest lacks field {e}") from e
    return Dataset(root, intr, model, prior, frames, int(m.get("seed", 0)), m.get("config_hash", ""),
                   has_gt=with_gt, truth=m.get("truth") if with_gt else None)
