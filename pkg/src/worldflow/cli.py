"""Unified command-line entry point.

Subcommands: train, sample, merge, rl, eval, curate, serve-rewards. Every
command is deterministic given --seed, echoes its effective config as the
first JSON log line, and writes artifacts under --out. The WORLDFLOW_THREADS
environment variable caps worker pools (torch threads included).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import datakit, evalkit, merge as merge_mod
from .checkpoint import checkpoint_from_model, load_checkpoint, load_into_model, save_checkpoint
from .conditioning import (ConditioningSpec, GenerationMode, build_condition_mask,
                           latent_frames_for_pixel_frames)
from .flowmatch import SamplerConfig, euler_sample, interpolate, fm_loss, velocity_target
from .grpo import RLConfig, run_rl
from .rewardsvc import HttpRewardClient, LocalRewardClient, RewardService
from .tensorio import load_tensor, save_tensor
from .tokenizer import TextEmbedder, VideoTokenizer
from .trainer import TrainConfig, train, train_config_from_dict
from .worldmodel import ModelConfig, WorldModel, config_from_dict

MODES = {"t2w": GenerationMode.TEXT2WORLD, "i2w": GenerationMode.IMAGE2WORLD,
         "v2w": GenerationMode.VIDEO2WORLD}


def log_event(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}))


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def _load_model(checkpoint_dir: str | None, default_cfg: ModelConfig) -> WorldModel:
    if checkpoint_dir is None:
        return WorldModel(default_cfg)
    ckpt = load_checkpoint(checkpoint_dir)
    cfg_dict = (ckpt.model_config or {}).get("model") if ckpt.model_config else None
    cfg = config_from_dict(cfg_dict) if cfg_dict else default_cfg
    model = WorldModel(cfg)
    load_into_model(model, ckpt)
    return model


def _desk_model_config(resolution: int) -> ModelConfig:
    del resolution  # latent channels depend only on pixel channels at 4x8x8
    return ModelConfig(latent_channels=3 * 4 * 64)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg_file = json.loads(Path(args.config).read_text())
    train_cfg = train_config_from_dict(cfg_file.get("train", {}))
    if args.steps is not None:
        d = train_config_from_dict(cfg_file.get("train", {}))
        payload = {**cfg_file.get("train", {}), "max_steps": args.steps}
        payload.setdefault("warmup_steps", min(d.warmup_steps, max(1, args.steps // 10)))
        train_cfg = train_config_from_dict(payload)
    if args.seed is not None:
        train_cfg = train_config_from_dict({**_train_dict(train_cfg), "seed": args.seed})
    model_cfg = config_from_dict(cfg_file.get("model", {})) if cfg_file.get("model") \
        else _desk_model_config(16)
    log_event("config", command="train", train=_train_dict(train_cfg), model=asdict(model_cfg))
    _seed_everything(train_cfg.seed)
    model = WorldModel(model_cfg)
    dataset = datakit.MovingShapesDataset(seed=train_cfg.seed)
    result = train(model, dataset, train_cfg, args.out,
                   log_fn=lambda rec: log_event("train_step", **rec) if args.verbose else None)
    log_event("done", final_loss=result["losses"][-1], log_path=result["log_path"])
    return 0


def _train_dict(cfg: TrainConfig) -> dict:
    from .trainer import _config_dict

    return _config_dict(cfg)


def cmd_sample(args) -> int:
    _seed_everything(args.seed)
    mode = MODES[args.mode]
    tokenizer = VideoTokenizer()
    model = _load_model(args.checkpoint, _desk_model_config(args.resolution))
    embedder = TextEmbedder(width=model.config.text_width)
    text = embedder.embed(args.prompt)

    num_cond = {"t2w": 0, "i2w": 1, "v2w": 5}[args.mode] if args.num_cond_frames is None \
        else args.num_cond_frames
    tl = tokenizer.latent_frames(args.frames)
    mask = build_condition_mask(num_cond, tl)
    cond_latents = None
    if num_cond > 0:
        k = latent_frames_for_pixel_frames(num_cond)
        need = tokenizer.pixel_frames(k)
        if args.cond_video:
            cond_pixels = torch.from_numpy(load_tensor(args.cond_video)[:need])
        else:  # deterministic toy conditioning clip derived from the seed
            video, _ = datakit.gen_toy_clip(
                datakit.ClipSpec(frames=need, resolution=(args.resolution, args.resolution)),
                seed=args.seed)
            cond_pixels = torch.from_numpy(video)
        if cond_pixels.shape[0] < need:
            raise ValueError(f"conditioning video must provide >= {need} frames")
        cond_latents = tokenizer.encode(cond_pixels)
    clat = model.config.latent_channels
    spatial = args.resolution // tokenizer.config.spatial
    spec = ConditioningSpec(mode=mode, num_cond_frames=num_cond, mask=mask,
                            cond_latents=cond_latents,
                            latent_shape=(tl, clat, spatial, spatial))
    sampler = SamplerConfig(num_steps=args.num_steps, guidance_scale=args.guidance,
                            seed=args.seed)
    log_event("config", command="sample", mode=args.mode, prompt=args.prompt,
              seed=args.seed, frames=args.frames, resolution=args.resolution,
              sampler=asdict(sampler), checkpoint=args.checkpoint)
    latent = euler_sample(model, spec, text, sampler)
    video = tokenizer.decode(latent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "video.f32", video.numpy())
    save_tensor(out / "latent.f32", latent.numpy())
    if args.dump_png:
        _dump_png_frames(video.numpy(), out / "frames")
    log_event("done", video=str(out / "video.f32"), frames=int(video.shape[0]))
    return 0


def _dump_png_frames(video: np.ndarray, out_dir: Path) -> None:
    from PIL import Image

    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video):
        arr = np.clip(frame.transpose(1, 2, 0) * 255.0, 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(out_dir / f"frame_{i:04d}.png")


def _probe_score(model_cfg: ModelConfig):
    """Grid-search probe: negative FM loss on a fixed moving-shapes batch."""
    tokenizer = VideoTokenizer()
    dataset = datakit.MovingShapesDataset(seed=123)
    rng = np.random.default_rng(123)
    gen = torch.Generator().manual_seed(123)
    videos = [dataset.sample(rng, resolution=(16, 16), frames=5)[0] for _ in range(2)]
    latents = torch.stack([tokenizer.encode(torch.from_numpy(v)) for v in videos])
    eps = torch.randn(latents.shape, generator=gen)
    x_t = interpolate(latents, eps, 0.5)
    target = velocity_target(latents, eps)
    text = TextEmbedder(width=model_cfg.text_width).embed("probe")
    mask = np.zeros(latents.shape[1], dtype=np.int8)

    def score(ckpt) -> float:
        model = WorldModel(model_cfg)
        load_into_model(model, ckpt)
        with torch.no_grad():
            preds = torch.stack([model(x_t[i], mask, 0.5, text) for i in range(x_t.shape[0])])
            return -float(fm_loss(preds, target, 1 - mask))

    return score


def cmd_merge(args) -> int:
    inputs = [load_checkpoint(p) for p in args.inputs.split(",")]
    out = Path(args.out)
    log_event("config", command="merge", method=args.method, inputs=args.inputs,
              base=args.base, seed=args.seed)
    if args.method == "grid":
        if args.base is None:
            raise ValueError("grid search needs --base")
        base = load_checkpoint(args.base)
        cfg_dict = (base.model_config or {}).get("model")
        if not cfg_dict:
            raise ValueError("base checkpoint carries no model config for the probe")
        results = merge_mod.grid_search(base, inputs, eval_fn=_probe_score(config_from_dict(cfg_dict)),
                                        seed=args.seed)
        out.mkdir(parents=True, exist_ok=True)
        lines = [r.to_json() for r in results]
        (out / "grid_results.ndjson").write_text("\n".join(lines) + "\n")
        for line in lines:
            print(line)
        best = results[0]
        merged = merge_mod.materialize(best.point, base, inputs, seed=args.seed)
        save_checkpoint(merged, out / "best")
        log_event("done", best_method=best.point.method, best_score=best.score)
        return 0

    if args.method == "soup":
        weights = [float(w) for w in args.weights.split(",")] if args.weights \
            else [1.0 / len(inputs)] * len(inputs)
        merged = merge_mod.soup(inputs, weights)
    else:
        if args.base is None:
            raise ValueError(f"{args.method} needs --base")
        base = load_checkpoint(args.base)
        if args.method == "ties":
            merged = merge_mod.ties(base, inputs, density=args.density, lam=args.lam)
        elif args.method == "dare-linear":
            weights = [float(w) for w in args.weights.split(",")] if args.weights else None
            merged = merge_mod.dare_linear(base, inputs, drop_p=args.drop_p,
                                           weights=weights, seed=args.seed)
        else:
            merged = merge_mod.dare_ties(base, inputs, drop_p=args.drop_p,
                                         density=args.density, lam=args.lam, seed=args.seed)
    save_checkpoint(merged, out)
    log_event("done", out=str(out))
    return 0


def cmd_rl(args) -> int:
    cfg_payload = json.loads(Path(args.config).read_text()) if args.config else {}
    rl_dict = cfg_payload.get("rl", {})
    if args.updates is not None:
        rl_dict["updates"] = args.updates
    if args.seed is not None:
        rl_dict["seed"] = args.seed
    rl_cfg = RLConfig(**rl_dict)
    model_cfg = config_from_dict(cfg_payload["model"]) if cfg_payload.get("model") \
        else _desk_model_config(16)
    log_event("config", command="rl", rl=asdict(rl_cfg), model=asdict(model_cfg),
              reward=args.reward)
    _seed_everything(rl_cfg.seed)
    model = _load_model(args.checkpoint, model_cfg)
    ref_model = _load_model(args.checkpoint, model_cfg)
    ref_model.load_state_dict(model.state_dict())
    for p in ref_model.parameters():
        p.requires_grad = False

    tokenizer = VideoTokenizer()
    embedder = TextEmbedder(width=model_cfg.text_width)

    def decode_fn(latent):
        return tokenizer.decode(latent).numpy()

    if args.reward.startswith("http"):
        client = HttpRewardClient(args.reward, reward_types=["brightness"])
        service = None
    else:
        service = RewardService()
        client = LocalRewardClient(service, reward_types=[args.reward])

    tl = tokenizer.latent_frames(args.frames)
    clat = model_cfg.latent_channels
    spatial = args.resolution // tokenizer.config.spatial
    prompts = ["a bright scene", "a moving shape"]
    conditions = [
        (ConditioningSpec(GenerationMode.TEXT2WORLD, 0, build_condition_mask(0, tl),
                          latent_shape=(tl, clat, spatial, spatial)),
         embedder.embed(p))
        for p in prompts
    ]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "rl_log.ndjson").open("w") as log:
        def log_fn(stats):
            log.write(json.dumps(stats) + "\n")
            if args.verbose:
                log_event("rl_update", **stats)

        result = run_rl(model, ref_model, conditions, rl_cfg, client, decode_fn, log_fn=log_fn)
    config_dict = {"model": asdict(model_cfg), "rl": asdict(rl_cfg)}
    save_checkpoint(checkpoint_from_model(model, step=rl_cfg.updates, config_dict=config_dict),
                    out / "ckpt_rl")
    save_checkpoint(result["ema"].checkpoint(rl_cfg.updates, config_dict=config_dict),
                    out / "ckpt_rl_ema")
    if service is not None:
        service.shutdown()
    log_event("done", mean_reward_last=result["history"][-1]["mean_reward"])
    return 0


def cmd_eval(args) -> int:
    log_event("config", command="eval", metric=args.metric, gen=args.gen, ref=args.ref)
    if args.metric == "winrate":
        votes = json.loads(Path(args.votes).read_text())
        result = {"metric": "winrate", "value": evalkit.win_rate(votes)}
    else:
        gen = load_tensor(args.gen)
        ref = load_tensor(args.ref)
        if args.metric == "psnr":
            result = {"metric": "psnr", "value": evalkit.psnr(gen, ref, peak=args.peak)}
        elif args.metric == "ssim":
            result = {"metric": "ssim", "value": evalkit.ssim(gen, ref, peak=args.peak)}
        elif args.metric == "latentl2":
            tok = VideoTokenizer()
            la = tok.encode(torch.from_numpy(gen)).numpy()
            lb = tok.encode(torch.from_numpy(ref)).numpy()
            result = {"metric": "latentl2", "value": evalkit.latent_l2(la, lb)}
        else:  # rnds over fixed-size chunks
            size = args.chunk_frames
            chunks = gen.shape[0] // size
            if chunks < 1:
                raise ValueError("video shorter than one chunk")
            gen_chunks = [gen[i * size:(i + 1) * size] for i in range(chunks)]
            ref_chunks = [ref[i * size:(i + 1) * size] for i in range(chunks)]
            curve = evalkit.rnds_from_chunks(gen_chunks, ref_chunks)
            result = {"metric": "rnds", "values": curve.values, "scorer": curve.scorer_id}
            if args.csv:
                Path(args.csv).write_text(curve.to_csv())
    print(json.dumps(result))
    return 0


def cmd_curate(args) -> int:
    records = datakit.read_manifest(args.manifest)
    log_event("config", command="curate", manifest=args.manifest,
              dedup_threshold=args.dedup_threshold, hash_bits=args.hash_bits)
    summary = datakit.curate(records, args.out, dedup_threshold=args.dedup_threshold,
                             hash_bits=args.hash_bits)
    log_event("done", **summary)
    return 0


def cmd_serve_rewards(args) -> int:
    from .rewardsvc import serve

    tokenizer = VideoTokenizer()

    def decode_fn(item):
        arr = np.asarray(item, dtype=np.float32)
        if args.payload == "latent":
            return tokenizer.decode(torch.from_numpy(arr)).numpy()
        return arr

    log_event("config", command="serve-rewards", port=args.port, workers=args.workers,
              payload=args.payload)
    serve(args.port, args.workers, decode_fn=decode_fn, result_dir=args.result_dir)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="worldflow")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="desk-scale pretraining on moving shapes")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate a video")
    s.add_argument("--mode", choices=list(MODES), required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--cond-video", default=None)
    s.add_argument("--num-cond-frames", type=int, default=None)
    s.add_argument("--frames", type=int, default=17)
    s.add_argument("--resolution", type=int, default=16)
    s.add_argument("--num-steps", type=int, default=20)
    s.add_argument("--guidance", type=float, default=3.0)
    s.add_argument("--dump-png", action="store_true")
    s.set_defaults(fn=cmd_sample)

    m = sub.add_parser("merge", help="merge checkpoints")
    m.add_argument("--method", choices=["soup", "ties", "dare-linear", "dare-ties", "grid"],
                   required=True)
    m.add_argument("--inputs", required=True, help="comma-separated checkpoint dirs")
    m.add_argument("--out", required=True)
    m.add_argument("--base", default=None)
    m.add_argument("--weights", default=None)
    m.add_argument("--density", type=float, default=0.5)
    m.add_argument("--drop-p", type=float, default=0.5)
    m.add_argument("--lam", type=float, default=1.0)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(fn=cmd_merge)

    r = sub.add_parser("rl", help="GRPO post-training against a reward")
    r.add_argument("--config", default=None)
    r.add_argument("--reward", default="brightness",
                   help="brightness|motion|checkerboard or a service URL")
    r.add_argument("--out", required=True)
    r.add_argument("--checkpoint", default=None)
    r.add_argument("--updates", type=int, default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--frames", type=int, default=5)
    r.add_argument("--resolution", type=int, default=16)
    r.add_argument("--verbose", action="store_true")
    r.set_defaults(fn=cmd_rl)

    e = sub.add_parser("eval", help="metrics")
    e.add_argument("--metric", choices=["rnds", "psnr", "ssim", "latentl2", "winrate"],
                   required=True)
    e.add_argument("--gen", default=None)
    e.add_argument("--ref", default=None)
    e.add_argument("--votes", default=None)
    e.add_argument("--peak", type=float, default=1.0)
    e.add_argument("--chunk-frames", type=int, default=5)
    e.add_argument("--csv", default=None)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("curate", help="dedup and shard a clip manifest")
    c.add_argument("--in", dest="manifest", required=True)
    c.add_argument("--dedup-threshold", type=float, default=0.95)
    c.add_argument("--hash-bits", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_curate)

    v = sub.add_parser("serve-rewards", help="run the reward service over HTTP")
    v.add_argument("--port", type=int, required=True)
    v.add_argument("--workers", type=int, default=2)
    v.add_argument("--payload", choices=["video", "latent"], default="video")
    v.add_argument("--result-dir", default=None)
    v.set_defaults(fn=cmd_serve_rewards)
    return p


def main(argv=None) -> int:
    threads = int(os.environ.get("WORLDFLOW_THREADS", "0"))
    if threads > 0:
        torch.set_num_threads(threads)
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # runtime failure -> exit 1 with diagnostic
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
