"""Synthetic endoscopy-like scenes with a known tool mask, hand-eye pose and model error."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from scipy.ndimage import gaussian_filter

from ._kernels import rasterize_capsules
from ._validation import rng_for
from .camera import CameraIntrinsics, project_points, rasterize_tube
from .geometry import (
    Centerline,
    ContinuumParams,
    JointState,
    Pose,
    arc_points,
    pose_from_vector,
    pose_to_vector,
    transform_point,
)

__all__ = [
    "NoiseModel",
    "BackgroundParams",
    "ToolAppearance",
    "MotionSpec",
    "SceneConfig",
    "FrameRecord",
    "PRESETS",
    "preset",
    "perturb_joints",
    "perturb_model",
    "true_centerline",
    "render_frame",
    "trajectory",
    "frame_seed",
    "config_to_dict",
    "config_from_dict",
    "config_hash",
]

_TISSUE = np.array([178.0, 92.0, 84.0])
_TISSUE_DARK = np.array([120.0, 48.0, 50.0])
_TOOL = np.array([40.0, 70.0, 118.0])


@dataclass(frozen=True)
class NoiseModel:
    """Mismatch between the true instrument and the model handed to the pipeline.

    ``tip_deflection`` bounds the lateral tip displacement (mm) of frames in
    free-space motion; ``contact_deflection`` bounds it for held-out frames,
    emulating tissue contact later in the procedure.
    """

    joint_bias: tuple = (0.0, 0.0, 0.0)
    joint_scale: tuple = (1.0, 1.0, 1.0)
    curvature_gain_error: float = 1.0
    tip_deflection: float = 0.0
    contact_deflection: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if any(s <= 0 for s in self.joint_scale) or self.curvature_gain_error <= 0:
            raise ValueError("scale factors must be > 0")
        if self.tip_deflection < 0 or self.contact_deflection < 0:
            raise ValueError("deflection bounds must be >= 0")


@dataclass(frozen=True)
class BackgroundParams:
    colors: tuple = (tuple(_TISSUE), tuple(_TISSUE_DARK))
    gradient_amplitude: float = 0.35
    noise_octaves: int = 4
    noise_amplitude: float = 1.0
    specular_count: int = 6
    specular_size: float = 5.0
    vessel_count: int = 18
    vessel_color: tuple = (92.0, 24.0, 36.0)
    vessel_width: float = 1.6
    mottle_amplitude: float = 0.35
    hue_color: tuple = (204.0, 138.0, 96.0)
    hue_amplitude: float = 0.8
    hue_cell: int = 40
    sensor_noise: float = 3.0
    scene_seed: int = 7


@dataclass(frozen=True)
class ToolAppearance:
    color: tuple = tuple(_TOOL)
    jitter_std: float = 6.0
    shading_amplitude: float = 0.35


@dataclass(frozen=True)
class MotionSpec:
    """Joint trajectory ``center + amplitude * sin(2 pi t / period + phase)`` per joint."""

    center: tuple = (0.0, 30.0, 0.0)
    amplitude: tuple = (1.2, 8.0, 0.9)
    period: tuple = (13.0, 9.7, 7.3)
    phase: tuple = (0.3, 1.1, 0.0)
    # held-out frames start this many frame periods after the calibration frames
    test_offset: int = 100


@dataclass(frozen=True)
class SceneConfig:
    intrinsics: CameraIntrinsics = CameraIntrinsics(180.0, 180.0, 160.0, 120.0, 320, 240)
    true_T: Pose = field(default_factory=lambda: pose_from_vector([0.04, -0.06, 0.03, 1.5, -1.0, 2.0]))
    true_params: ContinuumParams = field(
        default_factory=lambda: ContinuumParams(
            tube_radius=1.75,
            curvature_gain=0.035,
            max_insertion=60.0,
            bending_range=1.0,
            channel_pose=pose_from_vector([-0.2, 0.28, 0.0, -9.0, 7.0, 3.0]),
        )
    )
    background: BackgroundParams = BackgroundParams()
    tool_appearance: ToolAppearance = ToolAppearance()
    noise: NoiseModel = NoiseModel()
    separability: float = 1.0
    motion: MotionSpec = MotionSpec()
    # coarse hand-eye guess handed to calibration: true pose vector + offset
    prior_offset: tuple = (0.0,) * 6

    def __post_init__(self):
        if not 0.0 <= self.separability <= 1.0:
            raise ValueError("separability must lie in [0, 1]")
        if self.intrinsics.width <= 0 or self.intrinsics.height <= 0:
            raise ValueError("image dimensions must be positive")

    @property
    def prior_vector(self) -> np.ndarray:
        return pose_to_vector(self.true_T) + np.asarray(self.prior_offset, dtype=float)


@dataclass(eq=False)
class FrameRecord:
    frame_id: int
    image: np.ndarray  # (H, W, 3) uint8
    joints: JointState  # as logged by the robot (passed through the joint noise)
    gt_mask: np.ndarray  # (H, W) bool
    true_joints: JointState
    deflection: np.ndarray  # channel-frame tip offset, mm
    out_of_view: bool = False


# --------------------------------------------------------------------- presets

_PRIOR = (0.10, -0.09, 0.07, 9.0, -7.0, 6.0)

PRESETS = {
    "easy": dict(
        separability=1.0,
        noise=NoiseModel((0.0, 0.0, 0.0), (1.0, 1.03, 1.0), 0.97, 1.0, 4.0, seed=11),
        prior_offset=_PRIOR,
    ),
    "default": dict(
        separability=0.6,
        noise=NoiseModel((0.03, 0.5, 0.0), (1.0, 1.06, 0.95), 0.92, 2.0, 6.0, seed=12),
        prior_offset=_PRIOR,
    ),
    "high_deflection": dict(
        separability=0.6,
        noise=NoiseModel((0.03, 0.5, 0.0), (1.0, 1.08, 0.92), 0.9, 3.0, 14.0, seed=13),
        prior_offset=_PRIOR,
    ),
}


def preset(name: str = "default", seed: int | None = None) -> SceneConfig:
    """Shipped difficulty presets; ``seed`` reseeds the scene texture and noise draws."""
    try:
        kw = dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    cfg = SceneConfig(**kw)
    if seed is not None:
        cfg = replace(
            cfg,
            noise=replace(cfg.noise, seed=int(seed)),
            background=replace(cfg.background, scene_seed=int(seed)),
        )
    return cfg


# ----------------------------------------------------------------- model error


def perturb_joints(q: JointState, n: NoiseModel) -> JointState:
    a = q.as_array() * np.asarray(n.joint_scale) + np.asarray(n.joint_bias)
    a[1] = max(a[1], 0.0)
    return JointState.from_array(a)


def perturb_model(p: ContinuumParams, n: NoiseModel) -> ContinuumParams:
    return replace(p, curvature_gain=p.curvature_gain * n.curvature_gain_error)


def true_centerline(q: JointState, params: ContinuumParams, deflection, n_samples: int = 64) -> Centerline:
    """Constant-curvature arc bent laterally by ``deflection * (s / l)^2`` in the channel frame."""
    pts, s = arc_points(q, params, n_samples)
    ell = s[-1] if s[-1] > 0 else 1.0
    pts = pts + np.outer((s / ell) ** 2, np.asarray(deflection, dtype=float))
    return Centerline(transform_point(params.channel_pose, pts), s)


def _draw_deflection(rng, bound):
    phi = rng.uniform(0, 2 * np.pi)
    mag = bound * rng.uniform(0.0, 1.0)
    return np.array([mag * np.cos(phi), mag * np.sin(phi), 0.0])


# ------------------------------------------------------------------ rendering


def _value_noise(rng, H, W, cell):
    gh, gw = H // cell + 2, W // cell + 2
    grid = rng.random((gh, gw))
    y = np.arange(H) / cell
    x = np.arange(W) / cell
    y0, x0 = y.astype(int), x.astype(int)
    fy, fx = y - y0, x - x0
    fy = fy * fy * (3 - 2 * fy)
    fx = fx * fx * (3 - 2 * fx)
    a = grid[y0][:, x0]
    b = grid[y0][:, x0 + 1]
    c = grid[y0 + 1][:, x0]
    d = grid[y0 + 1][:, x0 + 1]
    top = a + (b - a) * fx[None, :]
    bot = c + (d - c) * fx[None, :]
    return top + (bot - top) * fy[:, None]


def _vessels(scene, Hs, Ws, bg):
    """Opacity map of wandering, tapering vessels; depends only on the scene generator."""
    strength = np.zeros((Hs, Ws))
    for _ in range(bg.vessel_count):
        n = int(scene.integers(40, 140))
        heading = scene.uniform(0, 2 * np.pi) + np.cumsum(scene.normal(0, 0.18, n))
        step = 2.0
        x = scene.uniform(0, Ws) + np.cumsum(step * np.cos(heading))
        y = scene.uniform(0, Hs) + np.cumsum(step * np.sin(heading))
        width = bg.vessel_width * scene.uniform(0.5, 1.5) * np.linspace(1.0, 0.4, n)
        m = rasterize_capsules(x, y, width, np.ones(n, bool), Hs, Ws)
        strength = np.maximum(strength, scene.uniform(0.5, 1.0) * m)
    return np.clip(gaussian_filter(strength, 0.8) * 1.4, 0, 1)


def _background(cfg: SceneConfig, rng):
    bg = cfg.background
    H, W = cfg.intrinsics.shape
    scene = np.random.default_rng(bg.scene_seed)
    # scene texture is shared by every frame; frames see it through a small shift
    pad = 24
    Hs, Ws = H + 2 * pad, W + 2 * pad
    tex = np.zeros((Hs, Ws))
    amp, total = 1.0, 0.0
    for o in range(bg.noise_octaves):
        tex += amp * _value_noise(scene, Hs, Ws, max(int(64 / 2**o), 2))
        total += amp
        amp *= 0.5
    tex = (tex / total - 0.5) * bg.noise_amplitude + 0.5
    mottle = _value_noise(scene, Hs, Ws, 9) - 0.5
    tex = tex + bg.mottle_amplitude * mottle
    hue = 0.65 * _value_noise(scene, Hs, Ws, bg.hue_cell) + 0.35 * _value_noise(scene, Hs, Ws, bg.hue_cell // 2)
    hue = bg.hue_amplitude * np.clip(1.5 * (hue - 0.5) + 0.5, 0, 1)
    vessels = _vessels(scene, Hs, Ws, bg)
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    t = np.clip(tex[dy:dy + H, dx:dx + W], 0, 1)
    c0, c1 = np.asarray(bg.colors[0]), np.asarray(bg.colors[1])
    img = c1 + (c0 - c1) * t[..., None]
    w = hue[dy:dy + H, dx:dx + W, None]
    img = img * (1 - w) + np.asarray(bg.hue_color) * w * (0.6 + 0.4 * t[..., None])
    a = vessels[dy:dy + H, dx:dx + W, None]
    img = img * (1 - a) + np.asarray(bg.vessel_color) * a
    yy, xx = np.mgrid[0:H, 0:W]
    r2 = ((yy - H / 2) / (H / 2)) ** 2 + ((xx - W / 2) / (W / 2)) ** 2
    img *= (1.0 - bg.gradient_amplitude * np.clip(r2 / 2.0, 0, 1))[..., None]
    for _ in range(bg.specular_count):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        sy, sx = bg.specular_size * rng.uniform(0.5, 1.5, size=2)
        blob = np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
        img += (255.0 - img) * (0.9 * blob)[..., None]
    return img


def _tool_color(cfg: SceneConfig) -> np.ndarray:
    bg_mean = (np.asarray(cfg.background.colors[0]) + np.asarray(cfg.background.colors[1])) / 2
    tool = np.asarray(cfg.tool_appearance.color, dtype=float)
    return bg_mean + cfg.separability * (tool - bg_mean)


def _radial_coordinate(mask, c: Centerline, radius, T, k):
    """Distance of silhouette pixels to the projected axis, in units of local pixel radius."""
    u, v, z, ok = project_points(T, k, c.points)
    ys, xs = np.nonzero(mask)
    if not ok.any() or len(ys) == 0:
        return ys, xs, np.zeros(len(ys))
    u, v = u[ok], v[ok]
    r = k.fx * radius / z[ok]
    d2 = (xs[:, None] - u[None, :]) ** 2 + (ys[:, None] - v[None, :]) ** 2
    j = np.argmin(d2 / r[None, :] ** 2, axis=1)
    rho = np.sqrt(d2[np.arange(len(j)), j]) / r[j]
    return ys, xs, np.clip(rho, 0, 1)


def render_frame(cfg: SceneConfig, q: JointState, frame_seed: int, frame_id: int = 0,
                 deflection_bound: float | None = None, n_samples: int = 64) -> FrameRecord:
    """Render one frame; deterministic in ``(cfg, q, frame_seed)``.

    ``q`` is the true joint state; the returned record logs the joints as the
    pipeline sees them (through the joint noise).
    """
    rng = rng_for(frame_seed)
    k = cfg.intrinsics
    H, W = k.shape
    bound = cfg.noise.tip_deflection if deflection_bound is None else deflection_bound
    deflection = _draw_deflection(rng, bound)
    c = true_centerline(q, cfg.true_params, deflection, n_samples)
    radius = cfg.true_params.tube_radius
    gt = rasterize_tube(c, radius, cfg.true_T, k)
    img = _background(cfg, rng)
    ta = cfg.tool_appearance
    ys, xs, rho = _radial_coordinate(gt, c, radius, cfg.true_T, k)
    shade = 1.0 + ta.shading_amplitude * (0.5 - rho**2)
    tool = _tool_color(cfg)[None, :] * shade[:, None] + rng.normal(0, ta.jitter_std, (len(ys), 3))
    img[ys, xs] = tool
    img += rng.normal(0, cfg.background.sensor_noise, img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return FrameRecord(
        frame_id=int(frame_id),
        image=image,
        joints=perturb_joints(q, cfg.noise),
        gt_mask=gt,
        true_joints=q,
        deflection=deflection,
        out_of_view=not gt.any(),
    )


def trajectory(motion: MotionSpec, params: ContinuumParams, times) -> list:
    """True joint states along the sinusoidal trajectory, clipped to the actuator ranges."""
    c, a = np.asarray(motion.center), np.asarray(motion.amplitude)
    per, ph = np.asarray(motion.period), np.asarray(motion.phase)
    out = []
    for t in np.atleast_1d(times):
        qv = c + a * np.sin(2 * np.pi * t / per + ph)
        qv[1] = np.clip(qv[1], 0.0, params.max_insertion)
        qv[2] = np.clip(qv[2], -params.bending_range, params.bending_range)
        out.append(JointState.from_array(qv))
    return out


def frame_seed(seed: int, frame_id: int) -> int:
    return int(rng_for(seed, frame_id).integers(0, 2**63 - 1))


# -------------------------------------------------------------- serialization


def _to_jsonable(obj):
    if isinstance(obj, Pose):
        # full matrix so a reloaded config reproduces renders bit for bit
        return {"matrix": obj.as_matrix().tolist()}
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_jsonable(x) for x in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def config_to_dict(cfg: SceneConfig) -> dict:
    return _to_jsonable(cfg)


def _tuplify(x):
    return tuple(_tuplify(v) for v in x) if isinstance(x, list) else x


def config_from_dict(d: dict) -> SceneConfig:
    def pose(p):
        if "matrix" in p:
            return Pose.from_matrix(p["matrix"])
        return pose_from_vector(p["rotvec_translation"])

    params = dict(d["true_params"])
    params["channel_pose"] = pose(params["channel_pose"])
    return SceneConfig(
        intrinsics=CameraIntrinsics(**d["intrinsics"]),
        true_T=pose(d["true_T"]),
        true_params=ContinuumParams(**params),
        background=BackgroundParams(**{k: _tuplify(v) for k, v in d["background"].items()}),
        tool_appearance=ToolAppearance(**{k: _tuplify(v) for k, v in d["tool_appearance"].items()}),
        noise=NoiseModel(**{k: _tuplify(v) for k, v in d["noise"].items()}),
        separability=d["separability"],
        motion=MotionSpec(**{k: _tuplify(v) for k, v in d["motion"].items()}),
        prior_offset=_tuplify(d["prior_offset"]),
    )


def config_hash(cfg: SceneConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
