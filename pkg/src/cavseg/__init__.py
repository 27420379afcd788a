"""Volumetric segmentation experiment harness: 3D U-Net, phantoms, evaluation."""

from .estimator import CavitySegmenter
from .evalstat import SequenceConfig
from .model import LossConfig, UNetConfig
from .phantom import PhantomConfig
from .pipeline import Checkpoint, InferenceConfig, SamplerConfig, TrainConfig
from .volgrid import Case, LabelMask, SequenceId, Volume3

__all__ = [
    "Case",
    "CavitySegmenter",
    "Checkpoint",
    "InferenceConfig",
    "LabelMask",
    "LossConfig",
    "PhantomConfig",
    "SamplerConfig",
    "SequenceConfig",
    "SequenceId",
    "TrainConfig",
    "UNetConfig",
    "Volume3",
]
__version__ = "0.1.0"
