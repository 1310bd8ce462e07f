"""Training loop: AdamW with warmup + linear decay, progressive-stage task
mixing, timestep-shift schedule, EMA shadow weights, checkpointing, and
line-delimited JSON logging."""
from __future__ import annotations

import json
import math
import queue
import threading
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from . import conditioning as cond_mod
from . import flowmatch as fm
from .checkpoint import Checkpoint, checkpoint_from_model, save_checkpoint
from .conditioning import ConditioningSpec, GenerationMode, build_condition_mask
from .tokenizer import TextEmbedder, VideoTokenizer

LR_PRESETS = {"2b": 3e-5, "14b": 1.3e-5}


class Task(str, Enum):
    TEXT2IMAGE = "text2image"
    VIDEO2WORLD = "video2world"
    TEXT2WORLD = "text2world"


@dataclass(frozen=True)
class StageSpec:
    """One progressive-pretraining stage; end_frac is the exclusive upper bound
    of the stage's step range as a fraction of max_steps."""

    tasks: tuple[Task, ...]
    resolution: tuple[int, int]
    num_frames: int
    beta_shift: float
    end_frac: float


def default_stage_schedule() -> tuple[StageSpec, ...]:
    """Desk analog of the five-stage progression: resolutions 16->24->32 stand
    in for 256p->480p->720p, 17 frames for the 93-frame clips, beta 1 -> 5.
    Per-stage lengths (20% each) are repo-chosen."""
    t2i = (Task.TEXT2IMAGE,)
    joint = (Task.TEXT2IMAGE, Task.VIDEO2WORLD)
    all_tasks = (Task.TEXT2IMAGE, Task.VIDEO2WORLD, Task.TEXT2WORLD)
    return (
        StageSpec(t2i, (16, 16), 1, 1.0, 0.2),
        StageSpec(joint, (16, 16), 17, 2.0, 0.4),
        StageSpec(joint, (24, 24), 17, 3.0, 0.6),
        StageSpec(joint, (32, 32), 17, 5.0, 0.8),
        StageSpec(all_tasks, (32, 32), 17, 5.0, 1.0),
    )


@dataclass
class TrainConfig:
    lr_peak: float = LR_PRESETS["2b"]
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.001
    warmup_steps: int = 2000
    max_steps: int = 10000
    batch_size: int = 4
    stage_schedule: tuple[StageSpec, ...] = field(default_factory=default_stage_schedule)
    ema_decay: float = 0.9999
    text_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be > 0")
        if self.warmup_steps >= self.max_steps:
            raise ValueError("warmup_steps must be < max_steps")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear 0 -> lr_peak over the warmup, then linear lr_peak -> 0 at max_steps."""
    if step < 0 or step > cfg.max_steps:
        raise ValueError(f"step {step} outside [0, {cfg.max_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    return cfg.lr_peak * (cfg.max_steps - step) / (cfg.max_steps - cfg.warmup_steps)


def progressive_stage(step: int, cfg: TrainConfig) -> StageSpec:
    """Map a step to its stage; stage ranges are half-open and partition
    [0, max_steps]."""
    if not cfg.stage_schedule:
        raise ValueError("stage schedule is empty")
    frac = step / cfg.max_steps
    for stage in cfg.stage_schedule:
        if frac < stage.end_frac:
            return stage
    return cfg.stage_schedule[-1]


class EMA:
    """Exponential moving average of parameters: ema <- d*ema + (1-d)*theta."""

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    def update(self, model: torch.nn.Module) -> None:
        for k, v in model.state_dict().items():
            self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1.0 - self.decay)

    def checkpoint(self, step: int, config_dict: dict | None = None) -> Checkpoint:
        tensors = {k: v.cpu().numpy().astype(np.float32) for k, v in self.shadow.items()}
        return Checkpoint(tensors, model_config=config_dict, step=step)


@dataclass
class Batch:
    latents: torch.Tensor          # (B, T, C, h, w)
    cond_mask: np.ndarray          # (B, T) 1 = conditioned frame
    text_embs: list[torch.Tensor]  # per-item (L, width)
    t_shifted: np.ndarray          # (B,)


def train_step(model, optimizer, ema: EMA, batch: Batch, cfg: TrainConfig, step: int,
               generator: torch.Generator | None = None) -> float:
    """One AdamW update with decoupled weight decay on the masked FM loss."""
    lr = lr_at(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr

    b = batch.latents.shape[0]
    eps = torch.randn(batch.latents.shape, generator=generator, dtype=batch.latents.dtype)
    t = torch.as_tensor(batch.t_shifted, dtype=batch.latents.dtype)
    x_t = fm.interpolate(batch.latents, eps, t)
    cond = fm.expand_frame_mask(batch.cond_mask, batch.latents)
    x_t = torch.where(cond.bool(), batch.latents, x_t)
    target = fm.velocity_target(batch.latents, eps)
    loss_mask = 1 - batch.cond_mask

    # items share a latent shape within a batch; text lengths may differ
    preds = []
    for i in range(b):
        preds.append(model(x_t[i], batch.cond_mask[i], float(t[i]), batch.text_embs[i]))
    loss = fm.fm_loss(torch.stack(preds), target, loss_mask)
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite loss at step {step}: {loss.item()} "
                           f"(lr={lr:.3e}, batch={b}, t={batch.t_shifted.tolist()})")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    ema.update(model)
    return float(loss.detach())


class BatchPrefetcher:
    """Builds batches on a worker thread, handing them over a bounded queue."""

    def __init__(self, build_fn, num_batches: int, capacity: int = 2):
        self._queue: queue.Queue = queue.Queue(maxsize=capacity)
        self._num = num_batches
        self._build = build_fn
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        for i in range(self._num):
            self._queue.put(self._build(i))

    def __iter__(self):
        for _ in range(self._num):
            yield self._queue.get()


def _task_to_mode(task: Task, rng: np.random.Generator, num_latent_frames: int) -> ConditioningSpec:
    if task in (Task.TEXT2IMAGE, Task.TEXT2WORLD):
        return ConditioningSpec(GenerationMode.TEXT2WORLD, 0,
                                build_condition_mask(0, num_latent_frames))
    n = int(rng.choice([1, 5]))
    if cond_mod.latent_frames_for_pixel_frames(n) > num_latent_frames:
        n = 1  # short clips cannot carry a 5-frame condition
    mode = GenerationMode.IMAGE2WORLD if n == 1 else GenerationMode.VIDEO2WORLD
    return ConditioningSpec(mode, n, build_condition_mask(n, num_latent_frames))


def build_batch(dataset, stage: StageSpec, cfg: TrainConfig, rng: np.random.Generator,
                tokenizer: VideoTokenizer, embedder: TextEmbedder,
                model_null_text=None, beta: float | None = None,
                fixed_task: Task | None = None) -> Batch:
    """Sample one homogeneous-task batch from the moving-shapes dataset."""
    task = fixed_task or Task(rng.choice([t.value for t in stage.tasks]))
    frames = 1 if task == Task.TEXT2IMAGE else stage.num_frames
    ts_cfg = fm.TimestepSamplerConfig(beta=beta if beta is not None else stage.beta_shift)
    latents, masks, texts = [], [], []
    num_latent = tokenizer.latent_frames(frames)
    for _ in range(cfg.batch_size):
        video, caption = dataset.sample(rng, resolution=stage.resolution, frames=frames)
        latent = tokenizer.encode(torch.from_numpy(video))
        spec = _task_to_mode(task, rng, num_latent)
        latents.append(latent)
        masks.append(spec.mask)
        if model_null_text is not None and rng.random() < cfg.text_dropout:
            texts.append(model_null_text)
        else:
            texts.append(embedder.embed(caption))
    t_shifted = fm.sample_timesteps(ts_cfg, rng, cfg.batch_size)
    return Batch(latents=torch.stack(latents), cond_mask=np.stack(masks),
                 text_embs=texts, t_shifted=t_shifted)


def train(model, dataset, cfg: TrainConfig, out_dir: str | Path,
          log_fn=None, prefetch: bool = True) -> dict:
    """Run the full loop; writes ndjson logs plus raw and EMA checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    tokenizer = VideoTokenizer()
    embedder = TextEmbedder(width=model.config.text_width)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr_peak,
                                  betas=cfg.betas, weight_decay=cfg.weight_decay)
    ema = EMA(model, cfg.ema_decay)
    null_text = model.null_text_emb.detach()

    def make_batch(step):
        stage = progressive_stage(step, cfg)
        return stage, build_batch(dataset, stage, cfg, rng, tokenizer, embedder,
                                  model_null_text=null_text)

    losses = []
    log_path = out / "train_log.ndjson"
    with log_path.open("w") as log:
        iterator = (BatchPrefetcher(make_batch, cfg.max_steps) if prefetch
                    else (make_batch(i) for i in range(cfg.max_steps)))
        for step, (stage, batch) in enumerate(iterator):
            loss = train_step(model, optimizer, ema, batch, cfg, step, generator=gen)
            losses.append(loss)
            rec = {"step": step, "loss": loss, "lr": lr_at(step, cfg),
                   "stage": stage.tasks[-1].value}
            log.write(json.dumps(rec) + "\n")
            if log_fn is not None:
                log_fn(rec)

    config_dict = {"train": _config_dict(cfg), "model": asdict(model.config)}
    save_checkpoint(checkpoint_from_model(model, step=cfg.max_steps, config_dict=config_dict),
                    out / "ckpt_final")
    save_checkpoint(ema.checkpoint(cfg.max_steps, config_dict=config_dict),
                    out / "ckpt_final_ema")
    return {"losses": losses, "log_path": str(log_path)}


def _config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["stage_schedule"] = [
        {**asdict(s), "tasks": [t.value for t in s.tasks]} for s in cfg.stage_schedule
    ]
    return d


def train_config_from_dict(d: dict) -> TrainConfig:
    """Rebuild a TrainConfig from its JSON form."""
    d = dict(d)
    if "betas" in d:
        d["betas"] = tuple(d["betas"])
    if d.get("stage_schedule"):
        stages = []
        for s in d["stage_schedule"]:
            s = dict(s)
            s["tasks"] = tuple(Task(t) for t in s["tasks"])
            s["resolution"] = tuple(s["resolution"])
            stages.append(StageSpec(**s))
        d["stage_schedule"] = tuple(stages)
    return TrainConfig(**d)
