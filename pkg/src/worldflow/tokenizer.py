"""Exact invertible stand-ins for the external video tokenizer and text encoder.

The video tokenizer is causal space-to-depth with 4x8x8 (time x height x width)
compression: pixel frame 0 forms its own latent frame, then every 4 frames form
one. encode/decode are pure reshapes, so decode(encode(v)) == v bit-exactly.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class TokenizerConfig:
    temporal: int = 4
    spatial: int = 8


class VideoTokenizer:
    """Causal 4x8x8 space-to-depth tokenizer; 93 pixel frames map to 24 latent."""

    def __init__(self, config: TokenizerConfig = TokenizerConfig()):
        self.config = config

    def latent_frames(self, pixel_frames: int) -> int:
        ct = self.config.temporal
        if pixel_frames < 1 or (pixel_frames - 1) % ct != 0:
            raise ValueError(f"pixel frame count must be 1 mod {ct}, got {pixel_frames}")
        return 1 + (pixel_frames - 1) // ct

    def pixel_frames(self, latent_frames: int) -> int:
        return 1 + (latent_frames - 1) * self.config.temporal

    def latent_channels(self, pixel_channels: int) -> int:
        return pixel_channels * self.config.temporal * self.config.spatial ** 2

    def encode(self, video: torch.Tensor) -> torch.Tensor:
        """(T, C, H, W) -> (T_l, C*4*64, H/8, W/8)."""
        t, c, hh, ww = video.shape
        ct, cs = self.config.temporal, self.config.spatial
        tl = self.latent_frames(t)
        if hh % cs or ww % cs:
            raise ValueError(f"H and W must be divisible by {cs}, got {hh}x{ww}")
        # frame 0 is replicated to fill its temporal group; decode keeps replica 0
        groups = torch.cat([video[0:1].expand(ct, c, hh, ww), video[1:]], dim=0)
        groups = groups.reshape(tl, ct, c, hh // cs, cs, ww // cs, cs)
        latent = groups.permute(0, 2, 1, 4, 6, 3, 5)  # (tl, c, ct, cs, cs, h, w)
        return latent.reshape(tl, c * ct * cs * cs, hh // cs, ww // cs)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """Exact inverse of encode."""
        tl, cl, h, w = latent.shape
        ct, cs = self.config.temporal, self.config.spatial
        if cl % (ct * cs * cs):
            raise ValueError(f"latent channels {cl} not divisible by {ct * cs * cs}")
        c = cl // (ct * cs * cs)
        groups = latent.reshape(tl, c, ct, cs, cs, h, w)
        groups = groups.permute(0, 2, 1, 5, 3, 6, 4).reshape(tl * ct, c, h * cs, w * cs)
        return torch.cat([groups[0:1], groups[ct:]], dim=0)


class TextEmbedder:
    """Deterministic hashed-token embedder emitting width-1024 sequences."""

    def __init__(self, width: int = 1024):
        self.width = width

    def _token_vector(self, token: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
        rng = np.random.default_rng(seed)
        return rng.standard_normal(self.width) / np.sqrt(self.width)

    def embed(self, prompt: str) -> torch.Tensor:
        tokens = prompt.lower().split() or ["<empty>"]
        vecs = np.stack([self._token_vector(tok) for tok in tokens])
        return torch.from_numpy(vecs.astype(np.float32))
