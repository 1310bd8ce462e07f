"""Checkpoint merging: model soup, TIES, DARE-Linear, DARE-TIES, and the grid
search that scores every candidate with a caller-supplied probe."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint


def _check_aligned(checkpoints: Sequence[Checkpoint]) -> None:
    keys = set(checkpoints[0].tensors)
    for ck in checkpoints[1:]:
        if set(ck.tensors) != keys:
            missing = keys.symmetric_difference(ck.tensors)
            raise ValueError(f"checkpoint key sets differ: {sorted(missing)[:5]} ...")
        for k in keys:
            if ck.tensors[k].shape != checkpoints[0].tensors[k].shape:
                raise ValueError(f"tensor {k} shape mismatch")


def task_vector(base: Checkpoint, finetuned: Checkpoint) -> dict[str, np.ndarray]:
    """tau = theta_ft - theta_base, per tensor."""
    _check_aligned([base, finetuned])
    return {k: finetuned.tensors[k].astype(np.float64) - base.tensors[k].astype(np.float64)
            for k in base.tensors}


def soup(checkpoints: Sequence[Checkpoint], weights: Sequence[float]) -> Checkpoint:
    """Per-tensor weighted average; weights are normalized internally."""
    if len(checkpoints) != len(weights) or not checkpoints:
        raise ValueError("need one weight per checkpoint")
    _check_aligned(checkpoints)
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total == 0:
        raise ValueError("weights sum to zero")
    w = w / total
    tensors = {}
    for k in checkpoints[0].tensors:
        acc = np.zeros(checkpoints[0].tensors[k].shape, dtype=np.float64)
        for wi, ck in zip(w, checkpoints):
            acc += wi * ck.tensors[k].astype(np.float64)
        tensors[k] = acc.astype(np.float32)
    return Checkpoint(tensors, model_config=checkpoints[0].model_config,
                      step=checkpoints[0].step)


def _trim_to_density(tau: np.ndarray, density: float) -> np.ndarray:
    """Keep the top-density fraction of coordinates by magnitude (per tensor)."""
    if tau.size == 0 or density >= 1.0:
        return tau.copy()
    k = int(np.ceil(density * tau.size))
    flat = np.abs(tau).ravel()
    # stable cutoff: keep exactly k entries, ties broken by index order
    order = np.argsort(-flat, kind="stable")[:k]
    out = np.zeros_like(tau).ravel()
    out[order] = tau.ravel()[order]
    return out.reshape(tau.shape)


def ties_from_task_vectors(base: Checkpoint, taus: Sequence[dict[str, np.ndarray]],
                           density: float, lam: float = 1.0) -> Checkpoint:
    """TIES merge of explicit task vectors: trim each to its top-density
    coordinates by magnitude (per tensor), elect the sign of the summed trimmed
    mass per coordinate, average only agreeing values, and add lambda times the
    merge to the base. Coordinates with zero elected mass stay at the base."""
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must be in (0, 1], got {density}")
    if not taus:
        raise ValueError("need at least one task vector")
    tensors = {}
    for k, base_arr in base.tensors.items():
        trimmed = np.stack([_trim_to_density(t[k], density) for t in taus])  # (M, ...)
        elected = np.sign(trimmed.sum(axis=0))
        agree = (np.sign(trimmed) == elected) & (trimmed != 0.0)
        count = agree.sum(axis=0)
        merged = np.where(count > 0,
                          (trimmed * agree).sum(axis=0) / np.maximum(count, 1), 0.0)
        tensors[k] = (base_arr.astype(np.float64) + lam * merged).astype(np.float32)
    return Checkpoint(tensors, model_config=base.model_config, step=base.step)


def ties(base: Checkpoint, finetuned: Sequence[Checkpoint], density: float,
         lam: float = 1.0) -> Checkpoint:
    if not finetuned:
        raise ValueError("need at least one finetuned checkpoint")
    _check_aligned([base, *finetuned])
    return ties_from_task_vectors(base, [task_vector(base, ft) for ft in finetuned],
                                  density=density, lam=lam)


def dare_drop(tau: dict[str, np.ndarray], drop_p: float,
              rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Drop coordinates i.i.d. with probability drop_p, rescale survivors by
    1/(1-drop_p). Tensors are visited in sorted name order for determinism."""
    if not 0.0 <= drop_p < 1.0:
        raise ValueError(f"drop_p must be in [0, 1), got {drop_p}")
    out = {}
    for k in sorted(tau):
        keep = rng.random(tau[k].shape) >= drop_p
        out[k] = np.where(keep, tau[k] / (1.0 - drop_p), 0.0)
    return out


def dare_linear(base: Checkpoint, finetuned: Sequence[Checkpoint], drop_p: float,
                weights: Sequence[float] | None = None, seed: int = 0) -> Checkpoint:
    """Weighted sum of drop-and-rescaled task vectors added to the base."""
    if not finetuned:
        raise ValueError("need at least one finetuned checkpoint")
    _check_aligned([base, *finetuned])
    if weights is None:
        weights = [1.0 / len(finetuned)] * len(finetuned)
    if len(weights) != len(finetuned):
        raise ValueError("need one weight per finetuned checkpoint")
    rng = np.random.default_rng(seed)
    acc = {k: v.astype(np.float64).copy() for k, v in base.tensors.items()}
    for w, ft in zip(weights, finetuned):
        dropped = dare_drop(task_vector(base, ft), drop_p, rng)
        for k in acc:
            acc[k] += w * dropped[k]
    return Checkpoint({k: v.astype(np.float32) for k, v in acc.items()},
                      model_config=base.model_config, step=base.step)


def dare_ties(base: Checkpoint, finetuned: Sequence[Checkpoint], drop_p: float,
              density: float, lam: float = 1.0, seed: int = 0) -> Checkpoint:
    """DARE drop-and-rescale applied to each task vector, then the TIES merge
    of the dropped vectors. With drop_p=0 this is exactly ties()."""
    if not finetuned:
        raise ValueError("need at least one finetuned checkpoint")
    _check_aligned([base, *finetuned])
    rng = np.random.default_rng(seed)
    dropped = [dare_drop(task_vector(base, ft), drop_p, rng) for ft in finetuned]
    return ties_from_task_vectors(base, dropped, density=density, lam=lam)


@dataclass(frozen=True)
class GridPoint:
    method: str
    params: tuple[tuple[str, float], ...]

    def params_dict(self) -> dict[str, float]:
        return dict(self.params)


def default_grid() -> list[GridPoint]:
    """24 candidates, 6 settings per method. soup blends the finetuned mean
    into the base by alpha; dare-linear's scale multiplies uniform weights."""
    grid: list[GridPoint] = []
    for alpha in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0):
        grid.append(GridPoint("soup", (("alpha", alpha),)))
    for density in (0.1, 0.3, 0.5):
        for lam in (0.5, 1.0):
            grid.append(GridPoint("ties", (("density", density), ("lambda", lam))))
    for drop_p in (0.0, 0.5, 0.9):
        for scale in (0.5, 1.0):
            grid.append(GridPoint("dare-linear", (("drop_p", drop_p), ("scale", scale))))
    for drop_p in (0.5, 0.9):
        for density in (0.1, 0.3, 0.5):
            grid.append(GridPoint("dare-ties", (("drop_p", drop_p), ("density", density),
                                                ("lambda", 1.0))))
    return grid


def materialize(point: GridPoint, base: Checkpoint, finetuned: Sequence[Checkpoint],
                seed: int = 0) -> Checkpoint:
    p = point.params_dict()
    if point.method == "soup":
        alpha = p["alpha"]
        weights = [1.0 - alpha] + [alpha / len(finetuned)] * len(finetuned)
        return soup([base, *finetuned], weights)
    if point.method == "ties":
        return ties(base, finetuned, density=p["density"], lam=p["lambda"])
    if point.method == "dare-linear":
        weights = [p["scale"] / len(finetuned)] * len(finetuned)
        return dare_linear(base, finetuned, drop_p=p["drop_p"], weights=weights, seed=seed)
    if point.method == "dare-ties":
        return dare_ties(base, finetuned, drop_p=p["drop_p"], density=p["density"],
                         lam=p["lambda"], seed=seed)
    raise ValueError(f"unknown merge method {point.method!r}")


@dataclass
class GridResult:
    point: GridPoint
    score: float
    checkpoint: Checkpoint = field(repr=False, default=None)

    def to_json(self) -> str:
        return json.dumps({"method": self.point.method,
                           "params": self.point.params_dict(), "score": self.score})


def grid_search(base: Checkpoint, finetuned: Sequence[Checkpoint],
                grid: Sequence[GridPoint] | None = None,
                eval_fn: Callable[[Checkpoint], float] | None = None,
                seed: int = 0, keep_checkpoints: bool = False) -> list[GridResult]:
    """Score every grid point, best first; ties broken by lexicographic
    (method, params) order."""
    if grid is None:
        grid = default_grid()
    if not grid:
        raise ValueError("empty grid")
    if eval_fn is None:
        raise ValueError("eval_fn required")
    results = []
    for point in grid:
        ck = materialize(point, base, finetuned, seed=seed)
        results.append(GridResult(point=point, score=float(eval_fn(ck)),
                                  checkpoint=ck if keep_checkpoints else None))
    results.sort(key=lambda r: (-r.score, r.point.method, r.point.params))
    return results
