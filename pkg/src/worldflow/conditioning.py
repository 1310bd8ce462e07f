"""Conditioning construction: generation modes, condition-frame masks, frame
replacement, action sequences, Pluecker camera raymaps, and the autoregressive
chunked rollout."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch

TEMPORAL_GROUP = 4  # causal tokenizer grouping: frame 0 alone, then every 4


class GenerationMode(str, Enum):
    TEXT2WORLD = "text2world"
    IMAGE2WORLD = "image2world"
    VIDEO2WORLD = "video2world"


class ActionVariant(str, Enum):
    TIME_EMBEDDING = "time_embedding"
    CROSS_ATTENTION = "cross_attention"
    CHANNEL_CONCAT = "channel_concat"


def latent_frames_for_pixel_frames(num_pixel_frames: int, temporal: int = TEMPORAL_GROUP) -> int:
    """Latent frames covering the first n pixel frames under causal grouping."""
    if num_pixel_frames < 0:
        raise ValueError("pixel frame count must be >= 0")
    if num_pixel_frames == 0:
        return 0
    return 1 + math.ceil((num_pixel_frames - 1) / temporal)


def build_condition_mask(num_cond_frames: int, num_latent_frames: int) -> np.ndarray:
    k = latent_frames_for_pixel_frames(num_cond_frames)
    if k > num_latent_frames:
        raise ValueError(f"{num_cond_frames} conditioning pixel frames need {k} latent frames, "
                         f"only {num_latent_frames} available")
    mask = np.zeros(num_latent_frames, dtype=np.int8)
    mask[:k] = 1
    return mask


@dataclass
class ConditioningSpec:
    """Generation conditioning: mode, clean latent prefix, per-latent-frame mask,
    optional action / camera / control payloads."""

    mode: GenerationMode
    num_cond_frames: int
    mask: np.ndarray
    cond_latents: torch.Tensor | None = None
    action_seq: np.ndarray | None = None
    camera: np.ndarray | None = None
    control: torch.Tensor | None = None
    latent_shape: tuple[int, int, int, int] | None = field(default=None)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.int8)
        if not np.all(np.isin(self.mask, (0, 1))):
            raise ValueError("mask entries must be 0 or 1")
        if self.mode == GenerationMode.TEXT2WORLD and self.num_cond_frames != 0:
            raise ValueError("Text2World requires num_cond_frames == 0")
        expected = build_condition_mask(self.num_cond_frames, len(self.mask))
        if not np.array_equal(self.mask, expected):
            raise ValueError(f"mask {self.mask.tolist()} does not cover the first "
                             f"{self.num_cond_frames} pixel frames")
        k = int(self.mask.sum())
        if self.cond_latents is not None and self.cond_latents.shape[0] != k:
            raise ValueError(f"cond_latents holds {self.cond_latents.shape[0]} frames, mask marks {k}")

    def num_cond_latent_frames(self) -> int:
        return int(self.mask.sum())

    def full_latent_shape(self) -> tuple[int, int, int, int]:
        if self.latent_shape is not None:
            return tuple(self.latent_shape)
        if self.cond_latents is not None:
            return (len(self.mask), *self.cond_latents.shape[1:])
        raise ValueError("latent_shape required when no conditioning latents are present")

    def model_extras(self) -> dict:
        extras = {"actions": self.action_seq, "camera": self.camera, "control": self.control}
        return {k: v for k, v in extras.items() if v is not None}


def sample_condition_mask(stage: str, num_latent_frames: int,
                          rng: np.random.Generator) -> ConditioningSpec:
    """Draw the conditioning-frame count for a training stage.

    joint stage: 1 or 5 pixel frames, uniform. final stage: 0, 1 or 2 pixel
    frames with probabilities 0.5 / 0.25 / 0.25.
    """
    if stage == "joint":
        n = int(rng.choice([1, 5]))
    elif stage == "final":
        n = int(rng.choice([0, 1, 2], p=[0.5, 0.25, 0.25]))
    else:
        raise ValueError(f"unknown training stage {stage!r}")
    if n == 0:
        mode = GenerationMode.TEXT2WORLD
    elif n == 1:
        mode = GenerationMode.IMAGE2WORLD
    else:
        mode = GenerationMode.VIDEO2WORLD
    return ConditioningSpec(mode=mode, num_cond_frames=n,
                            mask=build_condition_mask(n, num_latent_frames))


def apply_frame_replacement(generated: torch.Tensor, spec: ConditioningSpec) -> torch.Tensor:
    """Overwrite the masked latent frames with the clean conditioning latents,
    bit-exactly; remaining frames untouched. Idempotent."""
    frames_axis = generated.shape[-4]
    if len(spec.mask) > frames_axis:
        raise ValueError(f"mask covers {len(spec.mask)} frames, latent has {frames_axis}")
    if len(spec.mask) != frames_axis:
        raise ValueError(f"mask length {len(spec.mask)} != latent frames {frames_axis}")
    k = spec.num_cond_latent_frames()
    out = generated.clone()
    if k == 0:
        return out
    if spec.cond_latents is None:
        raise ValueError("conditioning latents missing")
    out[..., :k, :, :, :] = spec.cond_latents.to(generated.dtype)
    return out


def group_actions_causal(actions, temporal: int = TEMPORAL_GROUP) -> torch.Tensor:
    """Aggregate per-pixel-frame actions to per-latent-frame (mean per group)."""
    act = torch.as_tensor(np.asarray(actions, dtype=np.float32)) if not torch.is_tensor(actions) else actions
    n = act.shape[-2]
    if (n - 1) % temporal:
        raise ValueError(f"action count {n} is not 1 mod {temporal}")
    first = act[..., 0:1, :]
    rest = act[..., 1:, :]
    if rest.shape[-2] == 0:
        return first
    grouped = rest.reshape(*rest.shape[:-2], -1, temporal, rest.shape[-1]).mean(dim=-2)
    return torch.cat([first, grouped], dim=-2)


def parse_action_sequence(payload) -> np.ndarray:
    """JSON array of 7-element arrays -> (T, 7) float array with finite entries."""
    if isinstance(payload, (str, bytes)):
        payload = json.loads(payload)
    arr = np.asarray(payload, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 7:
        raise ValueError(f"action sequence must be (T, 7), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("action entries must be finite")
    return arr.astype(np.float32)


# ---------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class CameraPose:
    """Pinhole intrinsics plus world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3,3), orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("rotation must be (3,3) and translation (3,)")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with det +1")

    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


def plucker_raymap(pose: CameraPose, resolution: tuple[int, int]) -> np.ndarray:
    """Per-pixel unit ray direction d and moment m = o x d as a (6, H, W) map."""
    if abs(pose.fx) < 1e-12 or abs(pose.fy) < 1e-12:
        raise ValueError("singular intrinsics: fx and fy must be nonzero")
    hh, ww = resolution
    u = np.arange(ww, dtype=np.float64)
    v = np.arange(hh, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)  # index [y, x]
    cam_dirs = np.stack([(uu - pose.cx) / pose.fx, (vv - pose.cy) / pose.fy,
                         np.ones_like(uu)], axis=0)
    world = np.einsum("ji,jhw->ihw", pose.rotation, cam_dirs)  # R^T @ d_cam
    world = world / np.linalg.norm(world, axis=0, keepdims=True)
    o = pose.center()
    moment = np.cross(np.broadcast_to(o[:, None, None], world.shape), world, axis=0)
    return np.concatenate([world, moment], axis=0).astype(np.float32)


def raymap_sequence(poses: list[CameraPose], resolution: tuple[int, int],
                    temporal: int = TEMPORAL_GROUP) -> np.ndarray:
    """Sample one pose every `temporal` pixel frames (latent-frame alignment)
    and stack the raymaps to (T_latent, 6, H, W)."""
    n = len(poses)
    if n < 1 or (n - 1) % temporal:
        raise ValueError(f"pose count {n} is not 1 mod {temporal}")
    picks = poses[::temporal]
    return np.stack([plucker_raymap(p, resolution) for p in picks], axis=0)


def parse_camera_trajectory(payload) -> list[CameraPose]:
    """JSON array of {intrinsics, rotation, translation} records."""
    if isinstance(payload, (str, bytes)):
        payload = json.loads(payload)
    poses = []
    for rec in payload:
        fx, fy, cx, cy = rec["intrinsics"]
        poses.append(CameraPose(fx=fx, fy=fy, cx=cx, cy=cy,
                                rotation=np.asarray(rec["rotation"], dtype=np.float64),
                                translation=np.asarray(rec["translation"], dtype=np.float64)))
    return poses


# ---------------------------------------------------------------------------
# autoregressive rollout


def autoregressive_rollout(model, tokenizer, text_emb, init_frame: torch.Tensor,
                           actions, num_chunks: int, chunk_frames: int,
                           sampler_cfg) -> torch.Tensor:
    """Generate num_chunks chunks of chunk_frames pixel frames; chunk k > 1
    conditions on the final generated frame of chunk k-1 via frame replacement.
    Duplicated boundary frames are dropped from the concatenation."""
    from .flowmatch import SamplerConfig, euler_sample

    if num_chunks < 1:
        raise ValueError("num_chunks must be >= 1")
    total = chunk_frames + (num_chunks - 1) * (chunk_frames - 1)
    if actions is not None:
        actions = np.asarray(actions, dtype=np.float32)
        if actions.shape[0] < total:
            raise ValueError(f"insufficient actions: need {total}, got {actions.shape[0]}")
    tl = tokenizer.latent_frames(chunk_frames)
    pieces = []
    cond_frame = init_frame
    for k in range(num_chunks):
        cond_latent = tokenizer.encode(cond_frame[None])
        spec = ConditioningSpec(
            mode=GenerationMode.IMAGE2WORLD,
            num_cond_frames=1,
            mask=build_condition_mask(1, tl),
            cond_latents=cond_latent,
            action_seq=None if actions is None
            else actions[k * (chunk_frames - 1) : k * (chunk_frames - 1) + chunk_frames],
        )
        cfg = SamplerConfig(num_steps=sampler_cfg.num_steps,
                            guidance_scale=sampler_cfg.guidance_scale,
                            seed=sampler_cfg.seed + k)
        latent = euler_sample(model, spec, text_emb, cfg)
        video = tokenizer.decode(latent)
        pieces.append(video if k == 0 else video[1:])
        cond_frame = video[-1]
    return torch.cat(pieces, dim=0)
