"""Flow-matching core: timestep sampling, the linear noising path, masked MSE
loss, and the Euler ODE sampler with classifier-free guidance and frame
replacement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

_T_CLIP = 1e-12


@dataclass(frozen=True)
class TimestepSamplerConfig:
    """Shifted logit-normal timestep distribution with high-noise oversampling."""

    mu: float = 0.0
    sigma: float = 1.0
    beta: float = 1.0
    high_noise_fraction: float = 0.05
    high_noise_quantile: float = 0.02

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.beta < 1:
            raise ValueError(f"beta must be >= 1, got {self.beta}")
        if not 0.0 <= self.high_noise_fraction <= 1.0:
            raise ValueError(f"high_noise_fraction must be in [0,1], got {self.high_noise_fraction}")
        if not 0.0 < self.high_noise_quantile < 1.0:
            raise ValueError(f"high_noise_quantile must be in (0,1), got {self.high_noise_quantile}")


def shift_timestep(t, beta: float):
    """Monotone shift t -> beta*t / (1 + (beta-1)*t); identity at beta=1."""
    return beta * t / (1.0 + (beta - 1.0) * t)


def sample_timesteps(cfg: TimestepSamplerConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw n timesteps in (0,1).

    Each draw is, with probability high_noise_fraction, uniform on
    [1 - high_noise_quantile, 1); otherwise logistic(mu + sigma*z) pushed
    through the beta shift. The three underlying streams (normal, bernoulli,
    uniform) are drawn in a fixed order regardless of beta so configs that
    differ only in beta consume identical randomness.
    """
    z = rng.standard_normal(n)
    hot = rng.random(n) < cfg.high_noise_fraction
    hot_t = rng.uniform(1.0 - cfg.high_noise_quantile, 1.0, size=n)
    t = 1.0 / (1.0 + np.exp(-(cfg.mu + cfg.sigma * z)))
    t_s = shift_timestep(t, cfg.beta)
    t_s = np.where(hot, hot_t, t_s)
    return np.clip(t_s, _T_CLIP, 1.0 - _T_CLIP)


def sample_timestep(cfg: TimestepSamplerConfig, rng: np.random.Generator) -> float:
    return float(sample_timesteps(cfg, rng, 1)[0])


def interpolate(x: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """Linear noising path (1-t)*x + t*eps.

    t may be a scalar or a per-batch 1-D tensor when x is batched.
    """
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(eps.shape)}")
    t = _as_path_time(t, x)
    return (1.0 - t) * x + t * eps


def velocity_target(x: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(eps.shape)}")
    return eps - x


def _as_path_time(t, like: torch.Tensor):
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        return t.to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))
    t = float(t.item()) if isinstance(t, torch.Tensor) else float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0,1], got {t}")
    return t


def expand_frame_mask(mask, like: torch.Tensor) -> torch.Tensor:
    """Broadcast a per-latent-frame mask over (..., T, C, h, w)."""
    m = torch.as_tensor(np.asarray(mask), dtype=like.dtype)
    if m.ndim == like.ndim:
        pass
    elif m.ndim == 1:
        view = [1] * like.ndim
        view[-4] = m.shape[0]
        m = m.reshape(view)
    elif m.ndim == 2 and like.ndim == 5:  # (B, T)
        m = m.reshape(m.shape[0], m.shape[1], 1, 1, 1)
    else:
        raise ValueError(f"mask of ndim {m.ndim} does not fit tensor of ndim {like.ndim}")
    if m.shape[-4] != like.shape[-4]:
        raise ValueError(f"mask covers {m.shape[-4]} frames, tensor has {like.shape[-4]}")
    return m.expand_as(like)


def fm_loss(pred: torch.Tensor, target: torch.Tensor, loss_mask) -> torch.Tensor:
    """Mean squared error over elements whose frame mask is 1.

    Raises on an all-zero mask (the mean would be undefined).
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    m = expand_frame_mask(loss_mask, pred)
    denom = m.sum()
    if denom.item() == 0:
        raise ValueError("loss mask excludes every element")
    return ((pred - target) ** 2 * m).sum() / denom


@dataclass
class FlowSample:
    """One training example on the noising path.

    loss_mask is 1 on frames the denoising loss covers (the generated frames)
    and 0 on conditioning frames, whose latents are kept clean in x_t.
    """

    t_shifted: float
    x_t: torch.Tensor
    velocity_target: torch.Tensor
    loss_mask: np.ndarray

    def __post_init__(self):
        if self.x_t.shape != self.velocity_target.shape:
            raise ValueError("x_t and velocity_target shapes differ")
        vals = np.unique(np.asarray(self.loss_mask))
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("loss_mask entries must be 0 or 1")


def make_flow_sample(latent: torch.Tensor, cond_mask, t_shifted: float,
                     eps: torch.Tensor | None = None,
                     generator: torch.Generator | None = None) -> FlowSample:
    """Interpolate to noise level t, then keep conditioning frames clean."""
    if eps is None:
        eps = torch.randn(latent.shape, generator=generator, dtype=latent.dtype)
    x_t = interpolate(latent, eps, t_shifted)
    cond = expand_frame_mask(cond_mask, latent)
    x_t = torch.where(cond.bool(), latent, x_t)
    return FlowSample(
        t_shifted=float(t_shifted),
        x_t=x_t,
        velocity_target=velocity_target(latent, eps),
        loss_mask=1 - np.asarray(cond_mask, dtype=np.int8),
    )


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 20
    guidance_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.guidance_scale < 0:
            raise ValueError(f"guidance_scale must be >= 0, got {self.guidance_scale}")


def guided_velocity(model, x: torch.Tensor, frame_mask, t: float,
                    text_emb: torch.Tensor, scale: float, **extras) -> torch.Tensor:
    """u_uncond + scale * (u_cond - u_uncond) via a second null-text pass.

    scale 0 returns the unconditional branch alone; scale 1 skips it.
    """
    if scale == 1.0:
        return model(x, frame_mask, t, text_emb, **extras)
    u_uncond = model(x, frame_mask, t, model.null_text_context(), **extras)
    if scale == 0.0:
        return u_uncond
    u_cond = model(x, frame_mask, t, text_emb, **extras)
    return u_uncond + scale * (u_cond - u_uncond)


def euler_sample(model, cond, text_emb: torch.Tensor, cfg: SamplerConfig) -> torch.Tensor:
    """Integrate the velocity field from unit noise at t=1 down to t=0.

    Uniform Euler steps; conditioning frames are re-imposed by frame
    replacement after every step. Deterministic given cfg.seed.
    """
    from .conditioning import apply_frame_replacement  # leaf module stays import-free

    shape = cond.full_latent_shape()
    gen = torch.Generator().manual_seed(cfg.seed)
    x = torch.randn(shape, generator=gen)
    x = apply_frame_replacement(x, cond)
    n = cfg.num_steps
    extras = cond.model_extras()
    with torch.no_grad():
        for k in range(n):
            t_k = 1.0 - k / n
            u = guided_velocity(model, x, cond.mask, t_k, text_emb, cfg.guidance_scale, **extras)
            x = x - u / n
            x = apply_frame_replacement(x, cond)
    return x
