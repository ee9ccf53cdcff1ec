"""Input checks shared by the estimators and functional APIs."""
import numpy as np


def check_mask(m, shape=None, name="mask") -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if m.dtype != bool:
        m = m != 0
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"{name} has shape {m.shape}, expected {tuple(shape)}")
    return m


def check_image(img, name="image") -> np.ndarray:
    """Validate an RGB raster of shape (H, W, 3); returns it unchanged in dtype."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"{name} is empty")
    if img.dtype.kind == "f" and not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    return img


def check_same_shape(a, b, names=("a", "b")):
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"dimension mismatch: {names[0]} {a.shape[:2]} vs {names[1]} {b.shape[:2]}")


def seed_sequence(*entropy) -> np.random.SeedSequence:
    """Deterministic child stream keyed by integers (seed, frame id, iteration, ...)."""
    return np.random.SeedSequence([int(e) & 0xFFFFFFFFFFFFFFFF for e in entropy])


def rng_for(*entropy) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(*entropy))
