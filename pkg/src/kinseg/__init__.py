"""Self-supervised tool segmentation for a flexible endoscopic instrument.

Labels come from projecting the instrument's kinematic model into the image
through a hand-eye transform that is itself found by maximising agreement
with Grabcut; a per-pixel classifier is then trained on those labels.
"""

__version__ = "0.1.0"

from .calibration import HandEyeCalibrator, evaluate_transform, f1_prime, stochastic_bnb
from .crf import CrfParams, CrfRefiner, refine
from .dataset import Dataset, generate_dataset, load_dataset
from .geometry import ContinuumParams, JointState, Pose, forward_kinematics, pose_from_vector, pose_to_vector
from .grabcut import GrabcutParams, grabcut
from .maxflow import FlowNetwork, max_flow
from .metrics import confusion, roc_curve, summarize
from .segmenter import PixelSegmenter, SegmenterModel, TrainConfig
from .simulator import SceneConfig, preset, render_frame

__all__ = [
    "__version__",
    "HandEyeCalibrator",
    "evaluate_transform",
    "f1_prime",
    "stochastic_bnb",
    "CrfParams",
    "CrfRefiner",
    "refine",
    "Dataset",
    "generate_dataset",
    "load_dataset",
    "ContinuumParams",
    "JointState",
    "Pose",
    "forward_kinematics",
    "pose_from_vector",
    "pose_to_vector",
    "GrabcutParams",
    "grabcut",
    "FlowNetwork",
    "max_flow",
    "confusion",
    "roc_curve",
    "summarize",
    "PixelSegmenter",
    "SegmenterModel",
    "TrainConfig",
    "SceneConfig",
    "preset",
    "render_frame",
]
