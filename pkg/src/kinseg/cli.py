"""``kinseg`` command line: simulate, calibrate, train, infer, eval, version.

Every command reads an optional TOML config (``--config``); command-line
flags override config keys.  Exit codes: 0 ok, 2 configuration error,
3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .calibration import HandEyeCalibrator, project_labels
from .camera import build_trimap, erode
from .crf import CrfParams, refine
from .dataset import (
    DataError,
    save_trimap,
    generate_dataset,
    load_dataset,
    load_image,
    load_mask,
    read_transform,
    save_image,
    save_mask,
    write_loss_csv,
    write_trace_csv,
    write_transform,
)
from .grabcut import GrabcutParams, grabcut
from .metrics import confusion, summarize
from .segmenter import TrainConfig, infer, load_model, save_model, threshold, train
from .simulator import PRESETS, preset

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# grabcut settings used inside the calibration loop; the per-frame baseline in
# ``eval`` uses the library defaults
CALIBRATION_GRABCUT = {"iterations": 1, "fit_stride": 4}

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "simulate": {"preset": "default", "frames": 19, "test_frames": 30},
    "calibrate": {"iters": 300, "tau": 0.1, "rot_halfwidth_deg": 15.0, "trans_halfwidth": 30.0},
    "grabcut": dict(CALIBRATION_GRABCUT),
    "train": {},
    "crf": {},
    "eval": {"threshold": 0.5},
}
_SECTION_TYPES = {
    "grabcut": GrabcutParams,
    "train": TrainConfig,
    "crf": CrfParams,
}


# ---------------------------------------------------------------- config


def load_config(path) -> dict:
    """Defaults merged with a TOML file; unknown keys are an error."""
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS.items()}
    if path is None:
        return cfg
    try:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    for key, val in user.items():
        if key not in cfg:
            raise ConfigError(f"{path}: unknown key {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{path}: [{key}] must be a table")
            allowed = _allowed_keys(key)
            for k in val:
                if allowed is not None and k not in allowed:
                    raise ConfigError(f"{path}: unknown key {k!r} in [{key}]")
            cfg[key].update(val)
        else:
            cfg[key] = val
    # fail before any work starts, not when the section is first used
    for section, cls in _SECTION_TYPES.items():
        _build(cls, cfg[section], section)
    return cfg


def _allowed_keys(section):
    if section in _SECTION_TYPES:
        return {f.name for f in dataclasses.fields(_SECTION_TYPES[section])}
    return set(DEFAULTS[section])


def _build(cls, values: dict, section: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from None


def _seed(cfg) -> int:
    s = cfg.get("seed")
    if not isinstance(s, int) or isinstance(s, bool) or s < 0:
        raise ConfigError("seed must be a non-negative integer")
    return s


def _threads(cfg) -> int:
    env = os.environ.get("KINSEG_THREADS")
    raw = env if env is not None else cfg.get("threads", 1)
    try:
        n = int(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid thread count {raw!r}") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def _require_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{what} directory not found: {p}")
    return p


# -------------------------------------------------------------- commands


def cmd_simulate(cfg, out) -> Path:
    sim = cfg["simulate"]
    name = sim["preset"]
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    frames, test = sim["frames"], sim["test_frames"]
    if not isinstance(frames, int) or frames < 1 or not isinstance(test, int) or test < 0:
        raise ConfigError("frames must be >= 1 and test_frames >= 0")
    seed = _seed(cfg)
    return generate_dataset(preset(name, seed=seed), out, frames, test, seed)


def cmd_calibrate(cfg, dataset, run, eval_gt=False):
    ds = load_dataset(dataset, with_gt=eval_gt)
    frames = ds.split("calibration")
    if not frames:
        raise DataError("dataset has no calibration frames")
    c = cfg["calibrate"]
    if not isinstance(c["iters"], int) or c["iters"] < 1:
        raise ConfigError("[calibrate] iters must be a positive integer")
    gc = _build(GrabcutParams, cfg["grabcut"], "grabcut")
    est = HandEyeCalibrator(ds.model, ds.intrinsics, ds.prior_vector, c["rot_halfwidth_deg"],
                            c["trans_halfwidth"], c["iters"], c["tau"], gc, _seed(cfg), _threads(cfg))
    images = [load_image(f.image) for f in frames]
    _check_sizes(images, ds.intrinsics)
    gt = ds.gt_masks("calibration") if eval_gt else None
    est.fit(images, [f.joints for f in frames], gt_masks=gt)
    run = Path(run)
    (run / "labels").mkdir(parents=True, exist_ok=True)
    write_transform(run / "T_star.txt", est.T_)
    write_trace_csv(run / "trace.csv", est.trace_)
    for f, y in zip(frames, est.transform([f.joints for f in frames])):
        save_mask(run / "labels" / f"{f.frame_id:04d}.png", y)
    return est


def _check_sizes(images, k):
    for im in images:
        if im.shape[:2] != (k.height, k.width):
            raise DataError(f"dimension mismatch: image {im.shape[:2]} vs camera "
                            f"{(k.height, k.width)}")


def _resolve_labels(labels, run, ds_root) -> Path:
    if labels is None:
        p = Path(run) / "labels"
        if not p.is_dir():
            raise DataError(f"no label masks at {p}; run `kinseg calibrate` first")
        return p
    p = Path(labels)
    if p.is_absolute() or p.is_dir():
        if not p.is_dir():
            raise DataError(f"label directory not found: {p}")
        return p
    for base in (Path(run), Path(ds_root)):
        if (base / p).is_dir():
            return base / p
    raise DataError(f"label directory {labels!r} not found under {run} or {ds_root}")


def cmd_train(cfg, dataset, run, labels=None, model_path=None, resize=None):
    ds = load_dataset(dataset)
    label_dir = _resolve_labels(labels, run, ds.root)
    frames = ds.split("calibration")
    if not frames:
        raise DataError("dataset has no calibration frames")
    images, masks = [], []
    for f in frames:
        lp = label_dir / f"{f.frame_id:04d}.png"
        if not lp.exists():
            raise DataError(f"missing label mask {lp}; run `kinseg calibrate` first")
        im, m = load_image(f.image), load_mask(lp)
        if m.shape != im.shape[:2]:
            raise DataError(f"dimension mismatch: label {lp.name} {m.shape} vs image {im.shape[:2]}")
        images.append(_resize(im, resize))
        masks.append(_resize(m, resize))
    tc = dict(cfg["train"])
    tc.setdefault("seed", _seed(cfg))
    tcfg = _build(TrainConfig, tc, "train")
    model, history = train(images, masks, tcfg)
    run = Path(run)
    run.mkdir(parents=True, exist_ok=True)
    model_path = Path(model_path) if model_path else run / "model.bin"
    save_model(model, model_path, tcfg, extra={"labels": label_dir.name, "n_frames": len(frames)})
    write_loss_csv(model_path.with_name(model_path.stem + "_loss.csv"), history)
    return model_path


def _resize(a, size, nearest=False):
    """Square resize for parity runs at a fixed network input size."""
    from PIL import Image

    if size is None:
        return a
    if a.dtype == bool:
        im = Image.fromarray(a.astype(np.uint8) * 255)
        return np.asarray(im.resize((size, size), Image.NEAREST)) >= 128
    return np.asarray(Image.fromarray(a).resize((size, size), Image.NEAREST if nearest else Image.BILINEAR))


def _predict(model, image, cfg, use_crf, resize=None):
    work = _resize(image, resize)
    prob = infer(model, work)
    if use_crf:
        mask = refine(prob, work, _build(CrfParams, cfg["crf"], "crf"))
    else:
        mask = threshold(prob, cfg["eval"]["threshold"])
    if resize is not None:
        from PIL import Image

        h, w = image.shape[:2]
        mask = np.asarray(Image.fromarray(mask.astype(np.uint8) * 255).resize((w, h), Image.NEAREST)) >= 128
    return mask


def overlay(image, mask, color=(0, 255, 0)):
    """Frame with the mask boundary painted in ``color``."""
    out = np.array(image, dtype=np.uint8, copy=True)
    edge = mask & ~erode(mask, 3)
    out[edge] = color
    return out


def cmd_infer(cfg, dataset, run, model_path=None, use_crf=False, split="test", out=None, resize=None):
    ds = load_dataset(dataset)
    model_path = Path(model_path) if model_path else Path(run) / "model.bin"
    if not model_path.exists():
        raise DataError(f"model file not found: {model_path}; run `kinseg train` first")
    model, _ = load_model(model_path)
    suffix = "_crf" if use_crf else ""
    out = Path(out) if out else Path(run) / f"pred{suffix}"
    ov = out.parent / f"overlay{suffix}" if out.name.startswith("pred") else out / "overlay"
    out.mkdir(parents=True, exist_ok=True)
    ov.mkdir(parents=True, exist_ok=True)
    for f in ds.split(split):
        im = load_image(f.image)
        pred = _predict(model, im, cfg, use_crf, resize)
        save_mask(out / f"{f.frame_id:04d}.png", pred)
        save_image(ov / f"{f.frame_id:04d}.png", overlay(im, pred))
    return out


def _mean_metrics(preds, gts) -> dict:
    rows = [summarize(confusion(p, g)) for p, g in zip(preds, gts)]
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def grabcut_baseline(image, y, seed=0, debug_prefix=None):
    """Per-frame Grabcut seeded by the projected labels (empty labels -> empty output).

    With ``debug_prefix`` the trimap is written to ``<prefix>_trimap.png`` and
    the per-iteration energy to ``<prefix>_energy.csv``.
    """
    if not y.any():
        return np.zeros_like(y)
    if y.all():
        return y.copy()
    tri = build_trimap(y)
    if debug_prefix is None:
        return grabcut(image, tri, GrabcutParams(), seed)
    h, log = grabcut(image, tri, GrabcutParams(), seed, return_log=True)
    save_trimap(f"{debug_prefix}_trimap.png", tri)
    with open(f"{debug_prefix}_energy.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "energy", "fg_pixels"])
        for it, e, n in log:
            w.writerow([it, repr(float(e)), int(n)])
    return h


def cmd_eval(cfg, dataset, run, fsl_model=None, pred_dir=None, use_crf=False, out=None, resize=None,
             grabcut_debug=None):
    ds = load_dataset(dataset, with_gt=True)
    frames = ds.split("test")
    if not frames:
        raise DataError("dataset has no test frames")
    try:
        gts = [load_mask(f.gt) for f in frames]
    except DataError as e:
        raise DataError(f"evaluation needs ground truth: {e}") from None
    images = [load_image(f.image) for f in frames]
    for f, im, g in zip(frames, images, gts):
        if g.shape != im.shape[:2]:
            raise DataError(f"dimension mismatch: gt {f.frame_id} {g.shape} vs image {im.shape[:2]}")
    run = Path(run)
    methods = []
    if pred_dir is not None:
        preds = []
        for f, g in zip(frames, gts):
            p = load_mask(Path(pred_dir) / f"{f.frame_id:04d}.png")
            if p.shape != g.shape:
                raise DataError(f"dimension mismatch: prediction {f.frame_id} {p.shape} vs gt {g.shape}")
            preds.append(p)
        methods.append(("predictions", preds))
    for name, path in (("SSTS", run / "model.bin"), ("FSL", Path(fsl_model) if fsl_model else None)):
        if path is not None and path.exists():
            model, _ = load_model(path)
            methods.append((name, [_predict(model, im, cfg, use_crf, resize) for im in images]))
        elif name == "FSL" and path is not None:
            raise DataError(f"FSL model not found: {path}")
    if (run / "T_star.txt").exists():
        T = read_transform(run / "T_star.txt")
        seed = _seed(cfg)
        if grabcut_debug is not None:
            Path(grabcut_debug).mkdir(parents=True, exist_ok=True)
        gc_preds = [
            grabcut_baseline(im, project_labels(T, f.joints, ds.model, ds.intrinsics), seed,
                             None if grabcut_debug is None else Path(grabcut_debug) / f"{f.frame_id:04d}")
            for f, im in zip(frames, images)
        ]
        methods.append(("Grabcut", gc_preds))
    if not methods:
        raise DataError(f"nothing to evaluate in {run}: no model.bin, T_star.txt or --pred")
    results = [(name, _mean_metrics(p, gts)) for name, p in methods]
    out = Path(out) if out else run / "eval.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = ["accuracy", "iou", "recall", "precision"]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", *cols, "frames"])
        for name, r in results:
            w.writerow([name, *(f"{r[c]:.6f}" for c in cols), len(frames)])
    print(format_table(results))
    return results


def format_table(results) -> str:
    head = f"{'method':<12}{'Acc':>8}{'IoU':>8}{'Rec':>8}{'Prec':>8}"
    lines = [head, "-" * len(head)]
    for name, r in results:
        lines.append(f"{name:<12}{r['accuracy']:>8.3f}{r['iou']:>8.3f}{r['recall']:>8.3f}{r['precision']:>8.3f}")
    return "\n".join(lines)


# ------------------------------------------------------------------ entry


def _parser():
    p = argparse.ArgumentParser(prog="kinseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="global seed (overrides config)")

    s = sub.add_parser("simulate", help="render a synthetic dataset")
    common(s)
    s.add_argument("--out", required=True, help="dataset directory to create")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--frames", type=int, help="calibration frames")
    s.add_argument("--test-frames", type=int, help="held-out frames")

    c = sub.add_parser("calibrate", help="estimate T* and write projected labels")
    common(c)
    c.add_argument("--dataset", required=True)
    c.add_argument("--run", required=True, help="output run directory")
    c.add_argument("--iters", type=int)
    c.add_argument("--threads", type=int)
    c.add_argument("--eval-gt", action="store_true", help="record GT IoU per iteration (diagnostic)")

    t = sub.add_parser("train", help="train the pixel classifier")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--run", required=True)
    t.add_argument("--labels", help="label directory (default RUN/labels; 'gt' for the supervised baseline)")
    t.add_argument("--model", help="output model path (default RUN/model.bin)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resize", type=int, metavar="N", help="train on N x N resized frames")

    i = sub.add_parser("infer", help="predict masks and overlays")
    common(i)
    i.add_argument("--dataset", required=True)
    i.add_argument("--run", required=True)
    i.add_argument("--model")
    i.add_argument("--crf", action="store_true", help="refine with the CRF")
    i.add_argument("--split", default="test", choices=["calibration", "test"])
    i.add_argument("--out")
    i.add_argument("--resize", type=int, metavar="N", help="run the model on N x N resized frames")

    e = sub.add_parser("eval", help="metrics table over held-out frames")
    common(e)
    e.add_argument("--dataset", required=True)
    e.add_argument("--run", required=True)
    e.add_argument("--fsl-model", help="model trained on ground truth")
    e.add_argument("--pred", help="directory of predicted masks to score")
    e.add_argument("--crf", action="store_true")
    e.add_argument("--out", help="CSV path (default RUN/eval.csv)")
    e.add_argument("--resize", type=int, metavar="N")
    e.add_argument("--grabcut-debug", metavar="DIR", help="dump baseline trimaps and energy logs")

    sub.add_parser("version", help="print the version")
    return p


def _check_resize(n):
    if n is not None and n < 8:
        raise ConfigError("--resize must be >= 8")
    return n


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "version":
        print(f"kinseg {__version__}")
        return EXIT_OK
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    _seed(cfg)
    if args.command == "simulate":
        for flag, key in (("preset", "preset"), ("frames", "frames"), ("test_frames", "test_frames")):
            if getattr(args, flag) is not None:
                cfg["simulate"][key] = getattr(args, flag)
        print(cmd_simulate(cfg, args.out))
    elif args.command == "calibrate":
        _require_dir(args.dataset, "dataset")
        if args.iters is not None:
            cfg["calibrate"]["iters"] = args.iters
        if args.threads is not None:
            cfg["threads"] = args.threads
        est = cmd_calibrate(cfg, args.dataset, args.run, args.eval_gt)
        print(f"best F'1 {est.best_score_:.4f}; T* written to {Path(args.run) / 'T_star.txt'}")
    elif args.command == "train":
        _require_dir(args.dataset, "dataset")
        if args.epochs is not None:
            cfg["train"]["epochs"] = args.epochs
        print(cmd_train(cfg, args.dataset, args.run, args.labels, args.model, _check_resize(args.resize)))
    elif args.command == "infer":
        _require_dir(args.dataset, "dataset")
        print(cmd_infer(cfg, args.dataset, args.run, args.model, args.crf, args.split, args.out,
                        _check_resize(args.resize)))
    elif args.command == "eval":
        _require_dir(args.dataset, "dataset")
        cmd_eval(cfg, args.dataset, args.run, args.fsl_model, args.pred, args.crf, args.out,
                 _check_resize(args.resize), args.grabcut_debug)
    return EXIT_OK


def main(argv=None):
    try:
        code = run(argv)
    except ConfigError as e:
        print(f"kinseg: config error: {e}", file=sys.stderr)
        code = EXIT_CONFIG
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"kinseg: numerical failure: {e}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (DataError, ValueError, OSError) as e:
        print(f"kinseg: data error: {e}", file=sys.stderr)
        code = EXIT_DATA
    sys.exit(code)


if __name__ == "__main__":
    main()
