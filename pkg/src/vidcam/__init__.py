"""Source-camera identification of videos with a constrained-convolution CNN, in numpy."""

from .constrained import constrained_conv_forward, project_constraints
from .dataset import SplitManifest, build_split, select_devices, validate_manifest
from .evaluator import EvaluationReport, emit_report, evaluate, majority_vote
from .frames import extract_frames, sample_indices
from .network import ArchitectureSpec, Model, build_model, forward, reduced_spec
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "Checkpoint",
    "EvaluationReport",
    "Model",
    "SplitManifest",
    "TrainConfig",
    "build_model",
    "build_split",
    "constrained_conv_forward",
    "emit_report",
    "evaluate",
    "extract_frames",
    "forward",
    "load_checkpoint",
    "majority_vote",
    "project_constraints",
    "reduced_spec",
    "sample_indices",
    "save_checkpoint",
    "select_devices",
    "train",
    "validate_manifest",
]
