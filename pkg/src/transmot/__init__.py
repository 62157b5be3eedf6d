"""Online multi-object tracking with spatial-temporal graph transformers."""

from .cascade import Tracker, TrackerConfig, ground_truth_affinity, track_sequence
from .data import MotRecord, SequenceBundle, parse_mot, read_sequence, write_results, write_sequence
from .decoder import AssignmentResult, ExtendedAssignmentMatrix, hard_assign
from .estimator import TransMOTTracker
from .geometry import BoundingBox, Detection, SparseWeightedGraph, iou
from .metrics import MetricsReport, evaluate
from .model import AssociationProblem, ModelConfig, TransMOTModel, build_problem
from .synth import ScenarioConfig, synth_generate
from .tensor import Tensor
from .training import TrainingSample, assignment_loss, build_samples, train

__version__ = "0.1.0"

__all__ = [
    "AssignmentResult", "AssociationProblem", "BoundingBox", "Detection", "ExtendedAssignmentMatrix",
    "MetricsReport", "ModelConfig", "MotRecord", "ScenarioConfig", "SequenceBundle", "SparseWeightedGraph",
    "Tensor", "Tracker", "TrackerConfig", "TrainingSample", "TransMOTModel", "TransMOTTracker",
    "assignment_loss", "build_problem", "build_samples", "evaluate", "ground_truth_affinity", "hard_assign",
    "iou", "parse_mot", "read_sequence", "synth_generate", "track_sequence", "train", "write_results",
    "write_sequence",
]
