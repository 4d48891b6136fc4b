"""Desk-scale self-supervised video pre-training with selective state-space
encoders, teacher-prior adaptive masking, cross-view feature completion, and
EMA-target temporal prediction."""

from .config import RunConfig, load_config, save_config
from .errors import (ConfigError, DataError, DegenerateInputError, DomainError,
                     FprlError, NumericError, ShapeError, StructuralError)
from .losses import LossReport, LossWeights
from .model import EncoderState, init_encoder_state
from .ssm import EncoderConfig, SSMLayerParams
from .synth import ClipSpec, VideoClip, generate_clip, generate_dataset
from .tensor import ComputationRecord, Tensor, backward
from .train import TrainRunState, pretrain_step, run_pretraining

__all__ = [
    "ComputationRecord", "ConfigError", "ClipSpec", "DataError",
    "DegenerateInputError", "DomainError", "EncoderConfig", "EncoderState",
    "FprlError", "LossReport", "LossWeights", "NumericError", "RunConfig",
    "SSMLayerParams", "ShapeError", "StructuralError", "Tensor",
    "TrainRunState", "VideoClip", "backward", "generate_clip",
    "generate_dataset", "init_encoder_state", "load_config", "pretrain_step",
    "run_pretraining", "save_config",
]

__version__ = "0.1.0"
