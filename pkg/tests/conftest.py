import numpy as np
import pytest
import torch

from worldflow.tokenizer import TextEmbedder, VideoTokenizer
from worldflow.worldmodel import ModelConfig, WorldModel


def tiny_config(**overrides) -> ModelConfig:
    base = dict(num_layers=2, model_dim=32, ffn_dim=64, adaln_lora_dim=8,
                num_heads=2, head_dim=16, latent_channels=768, text_width=64)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tokenizer() -> VideoTokenizer:
    return VideoTokenizer()


@pytest.fixture
def embedder() -> TextEmbedder:
    return TextEmbedder(width=64)


@pytest.fixture
def tiny_model() -> WorldModel:
    torch.manual_seed(0)
    return WorldModel(tiny_config())


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
