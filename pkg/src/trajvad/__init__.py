"""Trajectory-only video anomaly detection with conditional normalizing flows.

Objects are represented by their tracked bounding boxes; each 16-frame
window of 27 kinematic features is scored by its negative log-likelihood
under a flow trained on normal data.  An optional pose branch, gated by
class and pose quality, adds a keypoint likelihood for people.
"""
from .evaluation import ap, auroc, evaluate
from .features import FEATURE_GROUPS, FEATURE_NAMES, compute_features
from .flow import FlowStack
from .model import FlowModel, ModelConfig, load_model, save_model
from .training import SegmentSet, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "FEATURE_GROUPS", "FEATURE_NAMES", "FlowModel", "FlowStack", "ModelConfig",
    "SegmentSet", "TrainConfig", "ap", "auroc", "compute_features", "evaluate",
    "load_model", "save_model", "train",
]
