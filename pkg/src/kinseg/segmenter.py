"""Per-pixel tool segmenter trained on projected labels.

A 12-channel hand-crafted feature stack feeds a one-hidden-layer perceptron
(12 -> 32 -> 1).  Training minimises a foreground-weighted cross-entropy with
an L2 penalty using Adam, on pixel batches drawn from colour- and
geometry-augmented frames.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image, check_mask, check_same_shape, rng_for

__all__ = [
    "N_FEATURES",
    "HIDDEN",
    "N_PARAMS",
    "FEATURE_NAMES",
    "TrainConfig",
    "SegmenterModel",
    "rgb_to_hsv",
    "hsv_to_rgb",
    "extract_features",
    "forward",
    "loss",
    "loss_and_grad",
    "augment",
    "train",
    "infer",
    "threshold",
    "save_model",
    "load_model",
    "PixelSegmenter",
]

N_FEATURES = 12
HIDDEN = 32
N_PARAMS = N_FEATURES * HIDDEN + HIDDEN + HIDDEN + 1
FEATURE_NAMES = (
    "r", "g", "b", "hue", "saturation", "value",
    "std3", "std7", "std15", "mean7", "mean15", "gradient",
)
LOG_CLAMP = 1e-12
_MAGIC = b"KSEGMLP\0"
_FORMAT_VERSION = 1


# ---------------------------------------------------------------- colour space


def rgb_to_hsv(rgb):
    """Vectorised RGB -> HSV for floats in [0, 1]; hue in [0, 1)."""
    rgb = np.asarray(rgb, dtype=float)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(
        mx == r, (g - b) / safe,
        np.where(mx == g, 2.0 + (b - r) / safe, 4.0 + (r - g) / safe),
    )
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def hsv_to_rgb(hsv):
    hsv = np.asarray(hsv, dtype=float)
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    choices = [
        (v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q),
    ]
    out = np.empty(hsv.shape)
    for c in range(3):
        out[..., c] = np.choose(i, [ch[c] for ch in choices])
    return out


# -------------------------------------------------------------------- features


def _as_unit_rgb(image) -> np.ndarray:
    image = check_image(image)
    if image.dtype.kind in "ui":
        return image.astype(float) / 255.0
    return np.clip(image.astype(float), 0.0, 1.0)


def extract_features(image) -> np.ndarray:
    """``(H, W, 12)`` per-pixel features of an RGB image.

    uint8 input is scaled to [0, 1]; float input is taken as already in [0, 1].
    Window statistics replicate edge pixels at the border.
    """
    rgb = _as_unit_rgb(image)
    H, W = rgb.shape[:2]
    hsv = rgb_to_hsv(rgb)
    inten = rgb.mean(axis=2)
    sq = inten * inten
    out = np.empty((H, W, N_FEATURES))
    out[..., 0:3] = rgb
    out[..., 3:6] = hsv
    means = {}
    for j, k in enumerate((3, 7, 15)):
        m = uniform_filter(inten, k, mode="nearest")
        m2 = uniform_filter(sq, k, mode="nearest")
        out[..., 6 + j] = np.sqrt(np.maximum(m2 - m * m, 0.0))
        means[k] = m
    out[..., 9] = means[7]
    out[..., 10] = means[15]
    p = np.pad(inten, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    out[..., 11] = np.hypot(gx, gy)
    return out


# ----------------------------------------------------------------------- model


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-4
    fg_weight: float = 3.0
    epochs: int = 1000
    batch_size: int = 4096
    crop_fraction: float = 0.9
    hue_shift: float = 0.01
    saturation_range: float = 0.2
    contrast_range: float = 0.2
    flips: bool = True
    crops: bool = True
    color_jitter: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.epsilon > 0):
            raise ValueError("learning_rate and epsilon must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("moment decays must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.fg_weight < 1:
            raise ValueError("fg_weight (delta) must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0 < self.crop_fraction <= 1:
            raise ValueError("crop_fraction must lie in (0, 1]")


@dataclass
class SegmenterModel:
    """Weights of the 12 -> 32 -> 1 perceptron."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=float).reshape(N_FEATURES, HIDDEN)
        self.b1 = np.asarray(self.b1, dtype=float).reshape(HIDDEN)
        self.w2 = np.asarray(self.w2, dtype=float).reshape(HIDDEN)
        self.b2 = float(self.b2)
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("model weights must be finite")

    @classmethod
    def zeros(cls) -> "SegmenterModel":
        return cls.from_vector(np.zeros(N_PARAMS))

    @classmethod
    def initialize(cls, seed: int = 0) -> "SegmenterModel":
        """He-uniform hidden weights, small output weights, zero biases."""
        rng = rng_for(seed, 0x5E6)
        lim1 = np.sqrt(6.0 / N_FEATURES)
        lim2 = np.sqrt(6.0 / (HIDDEN + 1))
        return cls(rng.uniform(-lim1, lim1, (N_FEATURES, HIDDEN)), np.zeros(HIDDEN),
                   rng.uniform(-lim2, lim2, HIDDEN), 0.0)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    @classmethod
    def from_vector(cls, v) -> "SegmenterModel":
        v = np.asarray(v, dtype=float)
        if v.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameters, got {v.shape}")
        a = N_FEATURES * HIDDEN
        return cls(v[:a], v[a:a + HIDDEN], v[a + HIDDEN:a + 2 * HIDDEN], v[-1])


def _flat(features) -> np.ndarray:
    f = np.asarray(features, dtype=float)
    if f.shape[-1] != N_FEATURES:
        raise ValueError(f"features must have {N_FEATURES} channels, got {f.shape[-1]}")
    return f.reshape(-1, N_FEATURES)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward(m: SegmenterModel, features):
    """Per-pixel logits and probabilities, shaped like the feature grid minus its channel axis."""
    shape = np.shape(features)[:-1]
    hidden = np.maximum(_flat(features) @ m.w1 + m.b1, 0.0)
    z = hidden @ m.w2 + m.b2
    return z.reshape(shape), _sigmoid(z).reshape(shape)


def loss_and_grad(m: SegmenterModel, features, labels, fg_weight: float = 3.0,
                  weight_decay: float = 1e-4):
    """Weighted cross-entropy + ``weight_decay / 2 * ||w||^2`` and its gradient (flat vector).

    The L2 term covers every parameter, biases included.
    """
    x = _flat(features)
    y = np.asarray(labels).reshape(-1).astype(float)
    n = len(y)
    if n == 0:
        raise ValueError("empty batch")
    if len(x) != n:
        raise ValueError("features and labels disagree in pixel count")
    a = x @ m.w1 + m.b1
    hidden = np.maximum(a, 0.0)
    z = hidden @ m.w2 + m.b2
    p = _sigmoid(z)
    q = _sigmoid(-z)
    p_ok = p > LOG_CLAMP
    q_ok = q > LOG_CLAMP
    logp = np.log(np.maximum(p, LOG_CLAMP))
    logq = np.log(np.maximum(q, LOG_CLAMP))
    theta = m.to_vector()
    data = -(fg_weight * y * logp + (1.0 - y) * logq).sum() / n
    value = data + 0.5 * weight_decay * float(theta @ theta)
    # d/dz of -log p is -(1 - p) = -q, of -log q is p; zero where the clamp is active
    dz = (-fg_weight * y * q * p_ok + (1.0 - y) * p * q_ok) / n
    g_w2 = hidden.T @ dz
    g_b2 = dz.sum()
    da = np.outer(dz, m.w2) * (a > 0)
    g_w1 = x.T @ da
    g_b1 = da.sum(axis=0)
    grad = np.concatenate([g_w1.ravel(), g_b1, g_w2, [g_b2]]) + weight_decay * theta
    return float(value), grad


def loss(m: SegmenterModel, features, labels, cfg: TrainConfig = TrainConfig()) -> float:
    return loss_and_grad(m, features, labels, cfg.fg_weight, cfg.weight_decay)[0]


# ---------------------------------------------------------------- augmentation


def augment(image, label, rng, cfg: TrainConfig = TrainConfig()):
    """One random photometric + geometric variant of an (image, label) pair.

    Returns a float image in [0, 1] and the matching boolean label.
    """
    rgb = _as_unit_rgb(image)
    label = check_mask(label, shape=rgb.shape[:2], name="label")
    if cfg.color_jitter:
        hsv = rgb_to_hsv(rgb)
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-cfg.hue_shift, cfg.hue_shift)) % 1.0
        hsv[..., 1] = np.clip(
            hsv[..., 1] * rng.uniform(1 - cfg.saturation_range, 1 + cfg.saturation_range), 0, 1)
        rgb = hsv_to_rgb(hsv)
        c = rng.uniform(1 - cfg.contrast_range, 1 + cfg.contrast_range)
        mean = rgb.mean()
        rgb = np.clip(mean + c * (rgb - mean), 0.0, 1.0)
    if cfg.flips:
        if rng.random() < 0.5:
            rgb, label = rgb[:, ::-1], label[:, ::-1]
        if rng.random() < 0.5:
            rgb, label = rgb[::-1], label[::-1]
    if cfg.crops and cfg.crop_fraction < 1:
        H, W = label.shape
        h = max(1, int(round(H * cfg.crop_fraction)))
        w = max(1, int(round(W * cfg.crop_fraction)))
        y0 = int(rng.integers(0, H - h + 1))
        x0 = int(rng.integers(0, W - w + 1))
        rgb, label = rgb[y0:y0 + h, x0:x0 + w], label[y0:y0 + h, x0:x0 + w]
    return np.ascontiguousarray(rgb), np.ascontiguousarray(label)


# -------------------------------------------------------------------- training


def train(images, labels, cfg: TrainConfig = TrainConfig(), init: SegmenterModel | None = None,
          callback=None):
    """Fit the perceptron; returns ``(model, per-epoch loss list)``.

    Each epoch draws one frame, augments it, samples ``batch_size`` pixels
    uniformly and takes a single Adam step.  The logged loss is the batch loss
    before the step.
    """
    images = [check_image(im) for im in images]
    labels = [check_mask(lb, name="label") for lb in labels]
    if len(images) == 0 or len(images) != len(labels):
        raise ValueError("need one label mask per image and at least one frame")
    for im, lb in zip(images, labels):
        check_same_shape(im, lb, ("image", "label"))
    n_fg = sum(int(lb.sum()) for lb in labels)
    n_all = sum(lb.size for lb in labels)
    if n_fg == 0 or n_fg == n_all:
        raise ValueError("labels are all background or all foreground: nothing to learn")
    rng = rng_for(cfg.seed, 0x7A1)
    model = init if init is not None else SegmenterModel.initialize(cfg.seed)
    theta = model.to_vector()
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        i = int(rng.integers(len(images)))
        img, lb = augment(images[i], labels[i], rng, cfg)
        feats = extract_features(img).reshape(-1, N_FEATURES)
        idx = rng.integers(0, len(feats), size=cfg.batch_size)
        value, grad = loss_and_grad(SegmenterModel.from_vector(theta), feats[idx], lb.ravel()[idx],
                                    cfg.fg_weight, cfg.weight_decay)
        m1 = cfg.beta1 * m1 + (1 - cfg.beta1) * grad
        m2 = cfg.beta2 * m2 + (1 - cfg.beta2) * grad * grad
        m1_hat = m1 / (1 - cfg.beta1 ** epoch)
        m2_hat = m2 / (1 - cfg.beta2 ** epoch)
        theta = theta - cfg.learning_rate * m1_hat / (np.sqrt(m2_hat) + cfg.epsilon)
        history.append(value)
        if callback is not None:
            callback(epoch, value)
    if not np.all(np.isfinite(theta)):
        raise FloatingPointError("training diverged to non-finite weights")
    return SegmenterModel.from_vector(theta), history


def infer(m: SegmenterModel, image) -> np.ndarray:
    """Foreground probability map of an image."""
    return forward(m, extract_features(image))[1]


def threshold(prob, t: float = 0.5) -> np.ndarray:
    return np.asarray(prob) > t


# ------------------------------------------------------------------ persistence


def save_model(m: SegmenterModel, path, cfg: TrainConfig | None = None, extra: dict | None = None):
    """Binary weights at ``path`` plus ``<path>.json`` holding the training configuration.

    Layout: 8-byte magic, uint32 version, uint32 layer count, uint32 layer
    widths, then the float64 parameters (w1 row-major, b1, w2, b2), all
    little-endian.
    """
    path = Path(path)
    dims = (N_FEATURES, HIDDEN, 1)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(dims) - 1))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(m.to_vector().astype("<f8").tobytes())
    sidecar = {"format_version": _FORMAT_VERSION, "n_params": N_PARAMS,
               "features": list(FEATURE_NAMES)}
    if cfg is not None:
        sidecar["train_config"] = asdict(cfg)
    if extra:
        sidecar.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_model(path):
    """Returns ``(model, sidecar dict or None)``."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not a segmenter model file")
    version, n_layers = struct.unpack_from("<II", raw, 8)
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    dims = struct.unpack_from(f"<{n_layers + 1}I", raw, 16)
    if tuple(dims) != (N_FEATURES, HIDDEN, 1):
        raise ValueError(f"unexpected layer widths {dims}")
    offset = 16 + 4 * (n_layers + 1)
    v = np.frombuffer(raw, dtype="<f8", offset=offset)
    if len(v) != N_PARAMS:
        raise ValueError(f"truncated model file: {len(v)} of {N_PARAMS} parameters")
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else None
    return SegmenterModel.from_vector(v.astype(float)), meta


# -------------------------------------------------------------------- estimator


class PixelSegmenter(BaseEstimator):
    """Estimator wrapper: ``fit(images, masks)``, ``predict_proba(image)``, ``predict(image)``."""

    def __init__(self, learning_rate=0.01, weight_decay=1e-4, fg_weight=3.0, epochs=1000,
                 batch_size=4096, crop_fraction=0.9, augment=True, threshold=0.5, seed=0):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.fg_weight = fg_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.crop_fraction = crop_fraction
        self.augment = augment
        self.threshold = threshold
        self.seed = seed

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                          fg_weight=self.fg_weight, epochs=self.epochs, batch_size=self.batch_size,
                          crop_fraction=self.crop_fraction, seed=self.seed)
        if not self.augment:
            cfg = replace(cfg, flips=False, crops=False, color_jitter=False)
        return cfg

    def fit(self, images, masks):
        self.model_, self.loss_history_ = train(images, masks, self.train_config())
        return self

    def predict_proba(self, image) -> np.ndarray:
        check_is_fitted(self, "model_")
        return infer(self.model_, image)

    def predict(self, image) -> np.ndarray:
        return threshold(self.predict_proba(image), self.threshold)

    def score(self, images, masks) -> float:
        """Mean IoU over frames."""
        from .metrics import confusion, iou_score

        return float(np.mean([iou_score(confusion(self.predict(im), gt)) for im, gt in zip(images, masks)]))
