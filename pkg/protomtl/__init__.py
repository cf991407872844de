"""Prototype-based knowledge retrieval for multi-task partially supervised learning."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .evaluation import compare_runs, evaluate
from .model import PrototypeMTLNet
from .models import DatasetManifest, GenConfig, LabelProtocol, TaskSpec, TrainConfig
from .synthdata import assign_labels, generate_dataset, load_batch, load_manifest
from .training import train

__all__ = [
    "Checkpoint",
    "DatasetManifest",
    "GenConfig",
    "LabelProtocol",
    "PrototypeMTLNet",
    "TaskSpec",
    "TrainConfig",
    "assign_labels",
    "compare_runs",
    "evaluate",
    "generate_dataset",
    "load_batch",
    "load_checkpoint",
    "load_manifest",
    "save_checkpoint",
    "train",
]
