"""Desk-scale flow-matching video world model stack."""

__version__ = "0.1.0"

from .flowmatch import (SamplerConfig, TimestepSamplerConfig, euler_sample, fm_loss,
                        interpolate, sample_timestep, sample_timesteps, shift_timestep,
                        velocity_target)
from .tokenizer import TextEmbedder, VideoTokenizer
from .worldmodel import ModelConfig, WorldModel

__all__ = [
    "ModelConfig", "SamplerConfig", "TextEmbedder", "TimestepSamplerConfig",
    "VideoTokenizer", "WorldModel", "euler_sample", "fm_loss", "interpolate",
    "sample_timestep", "sample_timesteps", "shift_timestep", "velocity_target",
]
