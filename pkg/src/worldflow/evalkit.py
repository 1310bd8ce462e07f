"""Metrics: chunked quality-ratio curves (RNDS), PSNR, single-scale SSIM,
latent-frame L2, pairwise win rates, and a documented FVD proxy.

The DOVER-role quality scorer is pluggable; the built-in stand-in is a mean
local-contrast statistic so the curve machinery runs without external models.
The FVD proxy is a Frechet distance between per-latent-frame feature means and
covariances, with features = channel means under a fixed seeded projection to
16 dims (keeps the matrix square root cheap).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import linalg as slinalg
from scipy import ndimage

PSNR_CAP_DB = 99.0


@dataclass
class RNDSCurve:
    values: list[float]   # index 0 is chunk 1; values[0] == 1 exactly
    scorer_id: str = ""

    def __post_init__(self):
        if not self.values:
            raise ValueError("curve needs at least one chunk")
        if self.values[0] != 1.0:
            raise ValueError("curve must start at 1")

    def to_csv(self) -> str:
        lines = ["chunk,rnds"]
        lines += [f"{i + 1},{v!r}" for i, v in enumerate(self.values)]
        return "\n".join(lines) + "\n"


def rnds(gen_scores: Sequence[float], gt_scores: Sequence[float],
         scorer_id: str = "") -> RNDSCurve:
    """Per-chunk quality ratio versus ground truth, normalized to 1 at chunk 1:
    RNDS[i] = (gen[i]/gt[i]) / (gen[1]/gt[1])."""
    gen = np.asarray(gen_scores, dtype=np.float64)
    gt = np.asarray(gt_scores, dtype=np.float64)
    if gen.shape != gt.shape or gen.ndim != 1 or gen.size < 1:
        raise ValueError("gen and gt score lists must be equal-length, length >= 1")
    if np.any(gt == 0) or gen[0] == 0:
        raise ValueError("zero denominator in RNDS ratio")
    ratio = gen / gt
    values = (ratio / ratio[0]).tolist()
    values[0] = 1.0  # exact by definition
    return RNDSCurve(values=values, scorer_id=scorer_id)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE), capped at 99 dB when MSE is zero."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be > 0")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak ** 2 / mse), PSNR_CAP_DB)


def _frame_ssim(a: np.ndarray, b: np.ndarray, peak: float, window: int) -> float:
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    size = (window, window)
    mu_a = ndimage.uniform_filter(a, size=size, mode="reflect")
    mu_b = ndimage.uniform_filter(b, size=size, mode="reflect")
    var_a = ndimage.uniform_filter(a * a, size=size, mode="reflect") - mu_a ** 2
    var_b = ndimage.uniform_filter(b * b, size=size, mode="reflect") - mu_b ** 2
    cov = ndimage.uniform_filter(a * b, size=size, mode="reflect") - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0, window: int = 8) -> float:
    """Standard single-scale SSIM with uniform 8x8 windows, averaged over
    frames and channels for (T, C, H, W) input (2-D input scored directly)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"window {window} larger than frame {a.shape[-2:]}")
    if a.ndim == 2:
        return _frame_ssim(a, b, peak, window)
    flat_a = a.reshape(-1, a.shape[-2], a.shape[-1])
    flat_b = b.reshape(-1, b.shape[-2], b.shape[-1])
    return float(np.mean([_frame_ssim(x, y, peak, window) for x, y in zip(flat_a, flat_b)]))


def latent_l2(a: np.ndarray, b: np.ndarray) -> float:
    """Mean Euclidean distance between latent frames ((T, ...) tensors)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = (a - b).reshape(a.shape[0], -1)
    return float(np.linalg.norm(diff, axis=1).mean())


def win_rate(votes: Sequence[str]) -> float:
    """wins_A / (wins_A + wins_B); ties excluded from the denominator."""
    if not votes:
        raise ValueError("need at least one vote")
    wins_a = sum(1 for v in votes if v == "A")
    wins_b = sum(1 for v in votes if v == "B")
    for v in votes:
        if v not in ("A", "B", "tie"):
            raise ValueError(f"unknown vote {v!r}")
    if wins_a + wins_b == 0:
        raise ValueError("all votes are ties; win rate undefined")
    return wins_a / (wins_a + wins_b)


# ---------------------------------------------------------------------------
# quality scorers and curve helpers


class MeanLocalContrastScorer:
    """Stand-in quality scorer: mean |pixel - 3x3 local mean| over the chunk."""

    scorer_id = "local_contrast"

    def score(self, chunk: np.ndarray) -> float:
        chunk = np.asarray(chunk, dtype=np.float64)
        frames = chunk.reshape(-1, chunk.shape[-2], chunk.shape[-1])
        vals = [np.abs(f - ndimage.uniform_filter(f, size=3, mode="reflect")).mean()
                for f in frames]
        return float(np.mean(vals))


def rnds_from_chunks(gen_chunks: Sequence[np.ndarray], gt_chunks: Sequence[np.ndarray],
                     scorer=None) -> RNDSCurve:
    scorer = scorer or MeanLocalContrastScorer()
    gen_scores = [scorer.score(c) for c in gen_chunks]
    gt_scores = [scorer.score(c) for c in gt_chunks]
    return rnds(gen_scores, gt_scores, scorer_id=scorer.scorer_id)


def average_rnds(curves: Sequence[RNDSCurve]) -> RNDSCurve:
    """Mean of per-video curves (equal lengths)."""
    if not curves:
        raise ValueError("no curves to average")
    arr = np.array([c.values for c in curves])
    values = arr.mean(axis=0).tolist()
    values[0] = 1.0
    return RNDSCurve(values=values, scorer_id=curves[0].scorer_id)


def fvd_proxy(a_latents: np.ndarray, b_latents: np.ndarray, proj_dim: int = 16,
              seed: int = 7) -> float:
    """Frechet distance between latent-frame feature statistics (see module
    docstring for the feature definition)."""
    fa = _frame_features(a_latents, proj_dim, seed)
    fb = _frame_features(b_latents, proj_dim, seed)
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False) + 1e-8 * np.eye(proj_dim)
    cov_b = np.cov(fb, rowvar=False) + 1e-8 * np.eye(proj_dim)
    covmean = slinalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    d2 = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a + cov_b - 2.0 * covmean))
    return max(d2, 0.0)


def _frame_features(latents: np.ndarray, proj_dim: int, seed: int) -> np.ndarray:
    lat = np.asarray(latents, dtype=np.float64)
    chans = lat.reshape(lat.shape[0], lat.shape[1], -1).mean(axis=2)  # (T, C)
    proj = np.random.default_rng(seed).standard_normal((chans.shape[1], proj_dim))
    proj /= np.sqrt(chans.shape[1])
    return chans @ proj
