"""Hand-eye search: Grabcut-agreement score of projected labels, maximised by stochastic tree search."""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_mask, rng_for, seed_sequence
from .camera import LIKELY_BG, SURE_BG, CameraIntrinsics, build_trimap, rasterize_tube
from .geometry import ContinuumParams, JointState, Pose, forward_kinematics, pose_from_vector
from .grabcut import GrabcutParams, PreparedImage, grabcut

__all__ = [
    "iou",
    "specificity",
    "f1_prime",
    "SearchBox",
    "BnbNode",
    "TraceRecord",
    "OptimizationTrace",
    "CalibrationFrame",
    "project_labels",
    "evaluate_transform",
    "stochastic_bnb",
    "HandEyeCalibrator",
    "resolve_threads",
]


def iou(a, b) -> float:
    a = check_mask(a, name="a")
    b = check_mask(b, shape=a.shape, name="b")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def specificity(y, h, eval_region) -> float:
    """TN / (TN + FP) over the pixels of ``eval_region`` outside ``y``."""
    y = check_mask(y, name="y")
    h = check_mask(h, shape=y.shape, name="h")
    eval_region = check_mask(eval_region, shape=y.shape, name="eval_region")
    negatives = eval_region & ~y
    n = np.count_nonzero(negatives)
    if n == 0:
        return 1.0
    fp = np.count_nonzero(negatives & h)
    return (n - fp) / n


def _harmonic(i, s):
    return 0.0 if i + s == 0 else 2.0 * i * s / (i + s)


def f1_prime(y, h, eval_region) -> float:
    """Harmonic mean of IoU(y, h) and the specificity of h on ``eval_region``."""
    return _harmonic(iou(y, h), specificity(y, h, eval_region))


# ------------------------------------------------------------------ the cost


@dataclass
class CalibrationFrame:
    """Image and logged joints of one calibration frame; never carries ground truth."""

    frame_id: int
    image: np.ndarray
    joints: JointState
    _prepared: PreparedImage | None = field(default=None, repr=False)

    @property
    def prepared(self) -> PreparedImage:
        if self._prepared is None:
            self._prepared = PreparedImage(self.image)
        return self._prepared


def project_labels(T: Pose, joints: JointState, model: ContinuumParams, k: CameraIntrinsics,
                   n_samples: int = 64) -> np.ndarray:
    """Self-generated label mask y(q, T) of the model tube."""
    c = forward_kinematics(joints, model, n_samples)
    return rasterize_tube(c, model.tube_radius, T, k)


def resolve_threads(threads=None) -> int:
    if threads is None:
        threads = os.environ.get("KINSEG_THREADS", 1)
    return max(1, int(threads))


def _frame_score(T, frame, model, k, gc, seed):
    y = project_labels(T, frame.joints, model, k)
    if not y.any():
        return 0.0, y
    trimap = build_trimap(y)
    # a tube filling the whole view leaves Grabcut no background to contrast
    if not np.any(trimap <= LIKELY_BG):
        return 0.0, y
    h = grabcut(frame.prepared, trimap, gc, seed)
    return f1_prime(y, h, trimap != SURE_BG), y


def _frame_seed(seed, frame_id, iteration):
    return int(seed_sequence(seed, frame_id, iteration).generate_state(2, np.uint64)[0] >> 1)


def evaluate_transform(T: Pose, frames, model: ContinuumParams, k: CameraIntrinsics,
                       gc: GrabcutParams = GrabcutParams(), seed: int = 0, iteration: int = 0,
                       threads=None, return_labels: bool = False):
    """Mean per-frame F'1 of ``T``; frames whose projection misses the image
    or leaves no background seed score 0.

    Returns ``(mean_score, per_frame_scores)`` and, with ``return_labels``, the
    projected masks.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("evaluate_transform needs at least one frame")

    def one(f):
        return _frame_score(T, f, model, k, gc, _frame_seed(seed, f.frame_id, iteration))

    n_threads = resolve_threads(threads)
    if n_threads > 1 and len(frames) > 1:
        with ThreadPoolExecutor(n_threads) as ex:
            results = list(ex.map(one, frames))
    else:
        results = [one(f) for f in frames]
    scores = np.array([r[0] for r in results])
    mean = float(scores.sum() / len(scores))
    if return_labels:
        return mean, scores, [r[1] for r in results]
    return mean, scores


# -------------------------------------------------------------- tree search


@dataclass(frozen=True)
class SearchBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(6)
        hi = np.asarray(self.upper, dtype=float).reshape(6)
        if np.any(lo > hi):
            raise ValueError("SearchBox lower bound exceeds upper bound")
        if np.any(lo[:3] < -np.pi) or np.any(hi[:3] > np.pi):
            raise ValueError("rotation bounds must lie within [-pi, pi]")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def around(cls, center, rot_halfwidth=np.deg2rad(15.0), trans_halfwidth=30.0) -> "SearchBox":
        c = np.asarray(center, dtype=float).reshape(6)
        hw = np.r_[np.full(3, rot_halfwidth), np.full(3, trans_halfwidth)]
        lo, hi = c - hw, c + hw
        lo[:3] = np.clip(lo[:3], -np.pi, np.pi)
        hi[:3] = np.clip(hi[:3], -np.pi, np.pi)
        return cls(lo, hi)

    @property
    def extent(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, v) -> bool:
        v = np.asarray(v)
        return bool(np.all(v >= self.lower) and np.all(v <= self.upper))

    def sample(self, rng) -> np.ndarray:
        return self.lower + rng.random(6) * self.extent

    def split(self, scale):
        """Bisect the longest dimension, lengths measured relative to ``scale``."""
        d = int(np.argmax(self.extent / scale))
        mid = 0.5 * (self.lower[d] + self.upper[d])
        up = self.upper.copy()
        up[d] = mid
        lo = self.lower.copy()
        lo[d] = mid
        return SearchBox(self.lower, up), SearchBox(lo, self.upper)


@dataclass(eq=False)
class BnbNode:
    box: SearchBox
    depth: int = 0
    best_value: float = 0.0
    best_sample: np.ndarray | None = None
    children: list = field(default_factory=list)

    @property
    def explored(self) -> bool:
        return self.best_sample is not None

    def offer(self, v, value):
        if self.best_sample is None or value > self.best_value:
            self.best_value = float(value)
            self.best_sample = np.array(v, dtype=float)

    def leaves(self):
        if not self.children:
            yield self
        for c in self.children:
            yield from c.leaves()


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    sample: tuple
    f1_prime: float
    best_f1: float
    ms: float
    gt_iou: float | None = None


class OptimizationTrace(list):
    """Per-iteration records; running best is non-decreasing."""

    def best_values(self):
        return np.array([r.best_f1 for r in self])

    def values(self):
        return np.array([r.f1_prime for r in self])

    def gt_ious(self):
        return np.array([np.nan if r.gt_iou is None else r.gt_iou for r in self])


def _descend(root: BnbNode, rng, tau):
    path = [root]
    node = root
    while node.children:
        # unexplored children inherit the parent's value as an optimistic prior
        vals = np.array([c.best_value if c.explored else node.best_value for c in node.children])
        p = np.exp((vals - vals.max()) / tau)
        p /= p.sum()
        node = node.children[int(rng.choice(len(p), p=p))]
        path.append(node)
    return path


def stochastic_bnb(cost, initial_box: SearchBox, iters: int = 300, seed: int = 0, tau: float = 0.1,
                   callback=None):
    """Maximise ``cost(v, iteration)`` over a 6-D box by stochastic tree search.

    Each iteration descends from the root picking children with probability
    proportional to ``exp(best_value / tau)``, samples the reached leaf
    uniformly, propagates the score up the path and bisects the leaf.
    Returns ``(best_vector, trace, root)``; ``cost`` may return
    ``(score, extra)`` where ``extra`` is stored as the record's ``gt_iou``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if np.any(initial_box.extent <= 0):
        raise ValueError("search box must be non-degenerate")
    rng = rng_for(seed, 0x5EA4C4)
    scale = initial_box.extent
    root = BnbNode(initial_box)
    trace = OptimizationTrace()
    best, best_v = -np.inf, None
    for it in range(iters):
        t0 = time.perf_counter()
        path = _descend(root, rng, tau)
        leaf = path[-1]
        v = leaf.box.sample(rng)
        out = cost(v, it)
        value, extra = (out if isinstance(out, tuple) else (out, None))
        value = float(value)
        for node in path:
            node.offer(v, value)
        lo_box, hi_box = leaf.box.split(scale)
        children = [BnbNode(lo_box, leaf.depth + 1), BnbNode(hi_box, leaf.depth + 1)]
        for c in children:
            if c.box.contains(leaf.best_sample):
                c.offer(leaf.best_sample, leaf.best_value)
                break
        leaf.children = children
        if value > best:
            best, best_v = value, v
        trace.append(TraceRecord(it, tuple(v), value, best, 1000 * (time.perf_counter() - t0),
                                 None if extra is None else float(extra)))
        if callback is not None:
            callback(trace[-1])
    return best_v, trace, root


# -------------------------------------------------------------- estimator


class HandEyeCalibrator(BaseEstimator):
    """Find the camera-from-robot pose T* whose projected tool best agrees with Grabcut.

    ``fit`` takes calibration images and their logged joints; ``transform``
    projects the model under ``T_`` into label masks.
    """

    def __init__(self, model: ContinuumParams | None = None, intrinsics: CameraIntrinsics | None = None,
                 center=None, rot_halfwidth_deg: float = 15.0, trans_halfwidth: float = 30.0,
                 iters: int = 300, tau: float = 0.1, grabcut_params: GrabcutParams | None = None,
                 seed: int = 0, threads=None):
        self.model = model
        self.intrinsics = intrinsics
        self.center = center
        self.rot_halfwidth_deg = rot_halfwidth_deg
        self.trans_halfwidth = trans_halfwidth
        self.iters = iters
        self.tau = tau
        self.grabcut_params = grabcut_params
        self.seed = seed
        self.threads = threads

    def _frames(self, images, joints):
        if len(images) != len(joints):
            raise ValueError("images and joints must have the same length")
        if len(images) == 0:
            raise ValueError("need at least one calibration frame")
        return [CalibrationFrame(i, np.asarray(img), q) for i, (img, q) in enumerate(zip(images, joints))]

    def fit(self, images, joints, gt_masks=None, callback=None):
        if self.model is None or self.intrinsics is None or self.center is None:
            raise ValueError("model, intrinsics and center must be set before fit")
        frames = self._frames(images, joints)
        gc = self.grabcut_params or GrabcutParams()
        box = SearchBox.around(self.center, np.deg2rad(self.rot_halfwidth_deg), self.trans_halfwidth)

        def cost(v, it):
            T = pose_from_vector(v)
            score, _, labels = evaluate_transform(T, frames, self.model, self.intrinsics, gc, self.seed,
                                                  it, self.threads, return_labels=True)
            if gt_masks is None:
                return score
            return score, float(np.mean([iou(y, g) for y, g in zip(labels, gt_masks)]))

        v, trace, root = stochastic_bnb(cost, box, self.iters, self.seed, self.tau, callback)
        self.best_vector_ = np.asarray(v)
        self.T_ = pose_from_vector(v)
        self.trace_ = trace
        self.tree_ = root
        self.best_score_ = float(trace[-1].best_f1)
        return self

    def transform(self, joints):
        """Label masks y(q, T*) for each joint state."""
        check_is_fitted(self, "T_")
        return [project_labels(self.T_, q, self.model, self.intrinsics) for q in joints]

    def score(self, images, joints):
        check_is_fitted(self, "T_")
        frames = self._frames(images, joints)
        return evaluate_transform(self.T_, frames, self.model, self.intrinsics,
                                  self.grabcut_params or GrabcutParams(), self.seed)[0]
