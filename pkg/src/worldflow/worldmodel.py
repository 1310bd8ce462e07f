"""Miniature diffusion-transformer velocity predictor.

Patchified latent tokens run through blocks of self-attention (3D relative
rotary embeddings), cross-attention over text embeddings, and a GELU MLP, all
modulated by adaptive layer-norm scale/shift/gate produced from the timestep
through a low-rank projection. Conditioning extensions: mask channel, action
injection (three variants), camera raymap tokens, interleaved control branch,
multiview packing with per-view embeddings.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import ActionVariant, group_actions_causal

ROPE_BASE = 10000.0


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class ControlBranchConfig:
    num_blocks: int
    control_channels: int
    interleave_every: int | None = None  # derived as num_layers // num_blocks


@dataclass(frozen=True)
class MultiviewConfig:
    num_views: int
    view_emb_dim: int = 7


@dataclass(frozen=True)
class ActionCondConfig:
    variant: ActionVariant
    action_dim: int = 7
    hidden_dim: int = 32
    concat_channels: int = 8  # only used by the channel-concat variant


@dataclass(frozen=True)
class CameraCondConfig:
    raymap_patch: tuple[int, int] = (16, 16)  # pixels per token (8x spatial * 2x patch)


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    model_dim: int = 128
    ffn_dim: int = 512
    adaln_lora_dim: int = 16
    num_heads: int = 4
    head_dim: int = 32
    patch: tuple[int, int, int] = (1, 2, 2)
    latent_channels: int = 768
    text_width: int = 1024
    control_branch: ControlBranchConfig | None = None
    multiview: MultiviewConfig | None = None
    action: ActionCondConfig | None = None
    camera: CameraCondConfig | None = None

    def __post_init__(self):
        if self.model_dim != self.num_heads * self.head_dim:
            raise ValueError(
                f"model_dim {self.model_dim} != num_heads*head_dim {self.num_heads * self.head_dim}"
            )
        if tuple(self.patch) != (1, 2, 2):
            raise ValueError(f"patch must be (1,2,2), got {self.patch}")
        rope_axis_split(self.head_dim)  # raises when the 2:1:1 split is impossible
        if self.control_branch is not None:
            self.resolve_interleave()

    def resolve_interleave(self) -> int:
        cb = self.control_branch
        if cb.num_blocks > self.num_layers:
            raise ValueError(f"{cb.num_blocks} control blocks exceed {self.num_layers} layers")
        every = cb.interleave_every or self.num_layers // cb.num_blocks
        if every < 1 or cb.num_blocks * every > self.num_layers:
            raise ValueError(f"interleave_every {every} does not fit {self.num_layers} layers")
        return every


# ---------------------------------------------------------------------------
# rotary embeddings


def rope_axis_split(head_dim: int) -> tuple[int, int, int]:
    """Split head channels across (t, h, w) at 2:1:1 with even per-axis counts."""
    if head_dim % 8 != 0:
        raise ValueError(f"head_dim must be divisible by 8 for the 2:1:1 split, got {head_dim}")
    return head_dim // 2, head_dim // 4, head_dim // 4


def rope_pair_freqs(head_dim: int, base: float = ROPE_BASE) -> list[np.ndarray]:
    """Rotation frequency per channel pair, one array per axis; all strictly > 0."""
    out = []
    for d in rope_axis_split(head_dim):
        k = np.arange(d // 2, dtype=np.float64)
        out.append(base ** (-2.0 * k / d))
    return out


def rope_tables(coords: np.ndarray, head_dim: int, base: float = ROPE_BASE) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables of shape (N, head_dim//2) for integer (t, y, x) coords."""
    coords = np.asarray(coords, dtype=np.float64)
    freqs = rope_pair_freqs(head_dim, base)
    phases = np.concatenate([coords[:, a : a + 1] * freqs[a][None, :] for a in range(3)], axis=1)
    return (
        torch.from_numpy(np.cos(phases)).to(torch.float32),
        torch.from_numpy(np.sin(phases)).to(torch.float32),
    )


def rope_phases(axis_sizes: tuple[int, int, int], head_dim: int, base: float = ROPE_BASE) -> dict:
    """Phase tables for a full (T, h', w') token grid in t-major order."""
    t, h, w = axis_sizes
    coords = np.stack(np.meshgrid(np.arange(t), np.arange(h), np.arange(w), indexing="ij"), axis=-1)
    coords = coords.reshape(-1, 3)
    cos, sin = rope_tables(coords, head_dim, base)
    return {"coords": coords, "cos": cos, "sin": sin, "freqs": rope_pair_freqs(head_dim, base)}


def rope_rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate channel pairs of (..., N, head_dim) by the per-token phases."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    cos = cos.to(x.dtype)
    sin = sin.to(x.dtype)
    return torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1).flatten(-2)


# ---------------------------------------------------------------------------
# patchify


def patchify(x: torch.Tensor, patch: tuple[int, int, int]) -> torch.Tensor:
    """(B, T, C, h, w) -> (B, N, C*pt*ph*pw) tokens in t-major order."""
    b, t, c, h, w = x.shape
    pt, ph, pw = patch
    if t % pt or h % ph or w % pw:
        raise ValueError(f"grid {t}x{h}x{w} not divisible by patch {patch}")
    x = x.reshape(b, t // pt, pt, c, h // ph, ph, w // pw, pw)
    x = x.permute(0, 1, 4, 6, 3, 2, 5, 7)
    return x.reshape(b, (t // pt) * (h // ph) * (w // pw), c * pt * ph * pw)


def unpatchify(tokens: torch.Tensor, patch: tuple[int, int, int],
               grid: tuple[int, int, int], channels: int) -> torch.Tensor:
    """Exact inverse of patchify for known grid (T, h, w) and channel count."""
    b = tokens.shape[0]
    t, h, w = grid
    pt, ph, pw = patch
    x = tokens.reshape(b, t // pt, h // ph, w // pw, channels, pt, ph, pw)
    x = x.permute(0, 1, 5, 4, 2, 6, 3, 7)
    return x.reshape(b, t, channels, h, w)


# ---------------------------------------------------------------------------
# building blocks


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * 1000.0 * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimestepEmbed(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.net(sinusoidal_embedding(t, self.dim))


class Attention(nn.Module):
    """Multi-head attention; pass rope tables to use it as rotary self-attention."""

    def __init__(self, dim: int, num_heads: int, head_dim: int, ctx_dim: int | None = None,
                 kv_bias: bool = True, out_bias: bool = True, zero_init_out: bool = False):
        super().__init__()
        inner = num_heads * head_dim
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.wq = nn.Linear(dim, inner)
        self.wk = nn.Linear(ctx_dim or dim, inner, bias=kv_bias)
        self.wv = nn.Linear(ctx_dim or dim, inner, bias=kv_bias)
        self.wo = nn.Linear(inner, dim, bias=out_bias)
        if zero_init_out:
            nn.init.zeros_(self.wo.weight)
            if self.wo.bias is not None:
                nn.init.zeros_(self.wo.bias)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor | None = None,
                rope: tuple[torch.Tensor, torch.Tensor] | None = None) -> torch.Tensor:
        ctx = x if ctx is None else ctx
        q, k, v = self._heads(self.wq(x)), self._heads(self.wk(ctx)), self._heads(self.wv(ctx))
        if rope is not None:
            cos, sin = rope
            q = rope_rotate(q, cos, sin)
            k = rope_rotate(k, cos, sin)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        out = torch.softmax(logits, dim=-1) @ v
        b, _, n, _ = out.shape
        return self.wo(out.transpose(1, 2).reshape(b, n, -1))


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class AdaLNLora(nn.Module):
    """9-way scale/shift/gate from the conditioning embedding through a low-rank
    bottleneck; the up-projection is zero-init so every block starts as identity."""

    def __init__(self, dim: int, lora_dim: int):
        super().__init__()
        self.down = nn.Linear(dim, lora_dim)
        self.up = nn.Linear(lora_dim, 9 * dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, emb: torch.Tensor):
        return self.up(F.silu(self.down(emb))).chunk(9, dim=-1)


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale) + shift


class DiTBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.model_dim
        self.norm_self = nn.LayerNorm(d, elementwise_affine=False)
        self.norm_cross = nn.LayerNorm(d, elementwise_affine=False)
        self.norm_mlp = nn.LayerNorm(d, elementwise_affine=False)
        self.self_attn = Attention(d, cfg.num_heads, cfg.head_dim)
        self.cross_attn = Attention(d, cfg.num_heads, cfg.head_dim, ctx_dim=cfg.text_width)
        self.mlp = FeedForward(d, cfg.ffn_dim)
        self.adaln = AdaLNLora(d, cfg.adaln_lora_dim)
        self.action_attn = None
        if cfg.action is not None and cfg.action.variant == ActionVariant.CROSS_ATTENTION:
            # bias-free K/V/out so zero action tokens inject exactly nothing
            self.action_attn = Attention(d, cfg.num_heads, cfg.head_dim, ctx_dim=d,
                                         kv_bias=False, out_bias=False, zero_init_out=True)

    def forward(self, x, cond_emb, text_ctx, rope, action_ctx=None):
        m = self.adaln(cond_emb)
        x = x + m[2] * self.self_attn(_modulate(self.norm_self(x), m[0], m[1]), rope=rope)
        x = x + m[5] * self.cross_attn(_modulate(self.norm_cross(x), m[3], m[4]), ctx=text_ctx)
        if self.action_attn is not None and action_ctx is not None:
            x = x + self.action_attn(x, ctx=action_ctx)
        x = x + m[8] * self.mlp(_modulate(self.norm_mlp(x), m[6], m[7]))
        return x


class ActionEmbedder(nn.Module):
    """Per-frame action MLP; the final layer is zero-init in every variant so a
    freshly attached embedder leaves the forward pass unchanged."""

    def __init__(self, cfg: ActionCondConfig, model_dim: int):
        super().__init__()
        out_dim = cfg.concat_channels if cfg.variant == ActionVariant.CHANNEL_CONCAT else model_dim
        self.variant = cfg.variant
        self.fc1 = nn.Linear(cfg.action_dim, cfg.hidden_dim)
        self.fc2 = nn.Linear(cfg.hidden_dim, out_dim)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, actions: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.silu(self.fc1(actions)))


# ---------------------------------------------------------------------------
# multiview packing


def pack_multiview(views: Sequence[torch.Tensor], view_emb: torch.Tensor) -> torch.Tensor:
    """Concatenate views along the latent temporal axis, appending each view's
    learned embedding along channels."""
    if len(views) == 0:
        raise ValueError("no views to pack")
    shape = views[0].shape
    for v in views:
        if v.shape != shape:
            raise ValueError(f"heterogeneous view shapes: {tuple(v.shape)} vs {tuple(shape)}")
    if view_emb.shape[0] < len(views):
        raise ValueError(f"view embedding table has {view_emb.shape[0]} rows, need {len(views)}")
    t, _, h, w = shape
    packed = []
    for i, v in enumerate(views):
        emb = view_emb[i].reshape(1, -1, 1, 1).expand(t, view_emb.shape[1], h, w)
        packed.append(torch.cat([v, emb.to(v.dtype)], dim=1))
    return torch.cat(packed, dim=0)


def unpack_multiview(packed: torch.Tensor, num_views: int, view_emb_dim: int = 7) -> list[torch.Tensor]:
    """Recover the per-view latents exactly (embedding channels stripped)."""
    total = packed.shape[0]
    if total % num_views:
        raise ValueError(f"{total} packed frames not divisible by {num_views} views")
    per = total // num_views
    return [packed[i * per : (i + 1) * per, : packed.shape[1] - view_emb_dim] for i in range(num_views)]


# ---------------------------------------------------------------------------
# the model


class WorldModel(nn.Module):
    """Velocity predictor u(x_t, t, c); output shape equals the input latent shape."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.model_dim
        pt, ph, pw = config.patch
        in_ch = config.latent_channels + 1  # + binary conditioning-mask channel
        if config.action is not None and config.action.variant == ActionVariant.CHANNEL_CONCAT:
            in_ch += config.action.concat_channels
        self.in_proj = nn.Linear(in_ch * pt * ph * pw, d)
        self.time_embed = TimestepEmbed(d)
        self.blocks = nn.ModuleList([DiTBlock(config) for _ in range(config.num_layers)])
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.out_proj = nn.Linear(d, config.latent_channels * pt * ph * pw)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)
        self.null_text_emb = nn.Parameter(torch.randn(1, config.text_width) * 0.02)

        self.action_embedder = ActionEmbedder(config.action, d) if config.action else None
        if config.camera is not None:
            rp = config.camera.raymap_patch
            self.camera_proj = nn.Linear(6 * rp[0] * rp[1], d)
            nn.init.zeros_(self.camera_proj.weight)
            nn.init.zeros_(self.camera_proj.bias)
        else:
            self.camera_proj = None
        if config.multiview is not None:
            mv = config.multiview
            self.view_emb = nn.Parameter(torch.randn(mv.num_views, mv.view_emb_dim) * 0.02)
        else:
            self.view_emb = None
        self.control_blocks = None
        self.control_embed = None
        self.control_projs = None
        self.control_interleave = None
        if config.control_branch is not None:
            self._build_control_branch(config.control_branch)

    # -- control branch ----------------------------------------------------

    def _build_control_branch(self, cb: ControlBranchConfig) -> None:
        every = self.config.resolve_interleave() if self.config.control_branch is cb else None
        if every is None:
            if cb.num_blocks > self.config.num_layers:
                raise ValueError(
                    f"{cb.num_blocks} control blocks exceed {self.config.num_layers} layers")
            every = cb.interleave_every or self.config.num_layers // cb.num_blocks
            if every < 1 or cb.num_blocks * every > self.config.num_layers:
                raise ValueError(f"interleave_every {every} does not fit")
        d = self.config.model_dim
        pt, ph, pw = self.config.patch
        self.control_blocks = nn.ModuleList(
            [copy.deepcopy(self.blocks[i]) for i in range(cb.num_blocks)])
        self.control_embed = nn.Linear(cb.control_channels * pt * ph * pw, d)
        projs = []
        for _ in range(cb.num_blocks):
            p = nn.Linear(d, d)
            nn.init.zeros_(p.weight)
            nn.init.zeros_(p.bias)
            projs.append(p)
        self.control_projs = nn.ModuleList(projs)
        self.control_interleave = every

    def control_tap_indices(self) -> list[int]:
        """1-based main-block indices after which control outputs are injected."""
        if self.control_blocks is None:
            return []
        e = self.control_interleave
        return [e * (j + 1) for j in range(len(self.control_blocks))]

    # -- conveniences --------------------------------------------------------

    def null_text_context(self) -> torch.Tensor:
        return self.null_text_emb

    def pack_views(self, views: Sequence[torch.Tensor]) -> torch.Tensor:
        if self.view_emb is None:
            raise ValueError("model has no multiview config")
        return pack_multiview(views, self.view_emb.detach())

    def unpack_views(self, packed: torch.Tensor) -> list[torch.Tensor]:
        mv = self.config.multiview
        return unpack_multiview(packed, mv.num_views, mv.view_emb_dim)

    def _coords(self, t: int, h: int, w: int) -> np.ndarray:
        tt = np.arange(t)
        if self.config.multiview is not None:
            nv = self.config.multiview.num_views
            if t % nv:
                raise ValueError(f"{t} packed frames not divisible by {nv} views")
            tt = tt % (t // nv)  # temporal coordinate restarts at 0 per view
        grid = np.stack(np.meshgrid(tt, np.arange(h), np.arange(w), indexing="ij"), axis=-1)
        return grid.reshape(-1, 3)

    # -- forward -------------------------------------------------------------

    def forward(self, latent, frame_mask, t, text_emb, *, actions=None, camera=None, control=None):
        latent = torch.as_tensor(latent)
        squeeze = latent.ndim == 4
        if squeeze:
            latent = latent[None]
        b, tl, c, h, w = latent.shape
        cfg = self.config
        if c != cfg.latent_channels:
            raise ValueError(f"latent has {c} channels, model expects {cfg.latent_channels}")

        mask = torch.as_tensor(np.asarray(frame_mask), dtype=latent.dtype)
        if mask.ndim == 1:
            mask = mask[None].expand(b, -1)
        if mask.shape != (b, tl):
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match {tl} latent frames")

        if not torch.is_tensor(t):
            t = torch.full((b,), float(t), dtype=latent.dtype)
        elif t.ndim == 0:
            t = t[None].expand(b).to(latent.dtype)
        if torch.any(t <= 0) or torch.any(t > 1):
            raise ValueError("t must lie in (0, 1]")

        text = torch.as_tensor(text_emb, dtype=latent.dtype)
        if text.ndim == 2:
            text = text[None].expand(b, -1, -1)
        if text.shape[-1] != cfg.text_width:
            raise ValueError(f"text_emb width {text.shape[-1]} != {cfg.text_width}")

        pt, ph, pw = cfg.patch
        gh, gw = h // ph, w // pw
        channels = [latent, mask[:, :, None, None, None].expand(b, tl, 1, h, w)]

        action_frame_emb = None
        action_ctx = None
        if actions is not None:
            if self.action_embedder is None:
                raise ValueError("model has no action conditioning configured")
            act = torch.as_tensor(np.asarray(actions, dtype=np.float32))
            if act.ndim == 2:
                act = act[None].expand(b, -1, -1)
            expected = 1 + (tl - 1) * 4  # one action per pixel frame of the chunk
            if act.shape[1] != expected or act.shape[2] != cfg.action.action_dim:
                raise ValueError(
                    f"action count mismatch: got {tuple(act.shape[1:])}, "
                    f"expected ({expected}, {cfg.action.action_dim})")
            variant = cfg.action.variant
            if variant == ActionVariant.CROSS_ATTENTION:
                action_ctx = self.action_embedder(act)
            else:
                grouped = group_actions_causal(act, temporal=4)  # (b, tl, action_dim)
                per_frame = self.action_embedder(grouped)
                if variant == ActionVariant.TIME_EMBEDDING:
                    action_frame_emb = per_frame
                else:  # CHANNEL_CONCAT: broadcast spatially, append to channels
                    cc = per_frame.shape[-1]
                    channels.append(per_frame.reshape(b, tl, cc, 1, 1).expand(b, tl, cc, h, w))
        elif self.action_embedder is not None and cfg.action.variant == ActionVariant.CHANNEL_CONCAT:
            cc = cfg.action.concat_channels
            channels.append(torch.zeros(b, tl, cc, h, w, dtype=latent.dtype))

        tokens = self.in_proj(patchify(torch.cat(channels, dim=2), cfg.patch))

        if camera is not None:
            if self.camera_proj is None:
                raise ValueError("model has no camera conditioning configured")
            ray = torch.as_tensor(np.asarray(camera, dtype=np.float32))
            if ray.ndim == 4:
                ray = ray[None].expand(b, -1, -1, -1, -1)
            rp = cfg.camera.raymap_patch
            if ray.shape[1] != tl or ray.shape[3] != gh * rp[0] or ray.shape[4] != gw * rp[1]:
                raise ValueError(
                    f"raymap shape {tuple(ray.shape[1:])} does not align with token grid "
                    f"({tl}, 6, {gh * rp[0]}, {gw * rp[1]})")
            ray = ray.to(tokens.dtype)
            ray_tokens = patchify(ray, (1, rp[0], rp[1]))
            tokens = tokens + self.camera_proj(ray_tokens)

        t_emb = self.time_embed(t)
        if action_frame_emb is not None:
            per_frame = t_emb[:, None, :] + action_frame_emb  # (b, tl, d)
            cond = per_frame.repeat_interleave(gh * gw, dim=1)  # token order is t-major
        else:
            cond = t_emb[:, None, :]

        rope = rope_tables(self._coords(tl, gh, gw), cfg.head_dim)

        control_state = None
        if control is not None:
            if self.control_blocks is None:
                raise ValueError("model has no control branch attached")
            ctrl = torch.as_tensor(control, dtype=tokens.dtype)
            if ctrl.ndim == 4:
                ctrl = ctrl[None].expand(b, -1, -1, -1, -1)
            control_state = tokens + self.control_embed(patchify(ctrl, cfg.patch))

        x = tokens
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x, cond, text, rope, action_ctx=action_ctx)
            if control_state is not None and i % self.control_interleave == 0:
                j = i // self.control_interleave - 1
                if j < len(self.control_blocks):
                    control_state = self.control_blocks[j](control_state, cond, text, rope)
                    x = x + self.control_projs[j](control_state)

        out = self.out_proj(self.final_norm(x))
        out = unpatchify(out, cfg.patch, (tl, h, w), cfg.latent_channels)
        return out[0] if squeeze else out


def attach_control_branch(model: WorldModel, num_blocks: int, control_channels: int,
                          interleave_every: int | None = None) -> WorldModel:
    """Attach trainable copies of main blocks with zero-init injections; output
    preserving until the branch trains."""
    model._build_control_branch(
        ControlBranchConfig(num_blocks=num_blocks, control_channels=control_channels,
                            interleave_every=interleave_every))
    return model


def freeze_base_for_control(model: WorldModel) -> None:
    """Control training: only the control branch stays trainable."""
    for name, p in model.named_parameters():
        p.requires_grad = name.startswith("control_")


def freeze_for_camera_finetune(model: WorldModel) -> None:
    """Camera fine-tuning: only self-attention projections and the camera
    projection layer stay trainable (AdaLN and everything else frozen)."""
    for name, p in model.named_parameters():
        p.requires_grad = ".self_attn." in name or name.startswith("camera_proj")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def config_from_dict(d: dict) -> ModelConfig:
    """Rebuild a ModelConfig from its JSON form (dataclasses.asdict round trip)."""
    d = dict(d)
    if d.get("control_branch"):
        d["control_branch"] = ControlBranchConfig(**d["control_branch"])
    if d.get("multiview"):
        d["multiview"] = MultiviewConfig(**d["multiview"])
    if d.get("action"):
        a = dict(d["action"])
        a["variant"] = ActionVariant(a["variant"])
        d["action"] = ActionCondConfig(**a)
    if d.get("camera"):
        c = dict(d["camera"])
        c["raymap_patch"] = tuple(c["raymap_patch"])
        d["camera"] = CameraCondConfig(**c)
    if d.get("patch"):
        d["patch"] = tuple(d["patch"])
    return ModelConfig(**d)
