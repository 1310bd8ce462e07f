"""Synthetic clip generation, embeddings, online semantic deduplication, and
multi-axis sharding, plus the manifest/clip file formats and the filter chain
(motion-magnitude filter built in, everything else pluggable)."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensorio import load_tensor, save_tensor

EMBED_DIM = 64

DEFAULT_TAXONOMY = (
    "driving", "robot_manipulation", "robot_navigation", "human_motion",
    "sports", "nature", "animals", "underwater", "aerial", "timelapse",
    "cooking", "crafting", "construction", "factory", "warehouse", "retail",
    "indoor_scene", "outdoor_scene", "cityscape", "weather", "physics_demo",
    "fluid_motion", "vehicles", "tools", "science_lab", "agriculture",
)


@dataclass
class ClipRecord:
    id: str
    embedding: np.ndarray            # unit vector, dim 64
    resolution: tuple[int, int]      # (H, W)
    created_at: float                # monotone timestamp
    content_type: str
    duration_s: float
    aspect_ratio: float
    shard_key: str | None = None

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if self.embedding.shape != (EMBED_DIM,):
            raise ValueError(f"embedding must have dim {EMBED_DIM}")
        if abs(np.linalg.norm(self.embedding) - 1.0) > 1e-6:
            raise ValueError("embedding must be unit-norm")
        if self.duration_s < 5.0:
            raise ValueError(f"clips under 5 s are discarded (got {self.duration_s:.2f}s)")

    def pixels(self) -> int:
        return self.resolution[0] * self.resolution[1]

    def to_json(self) -> str:
        d = asdict(self)
        d["embedding"] = [float(x) for x in self.embedding]
        d["resolution"] = list(self.resolution)
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "ClipRecord":
        d = json.loads(line)
        d["resolution"] = tuple(d["resolution"])
        d["embedding"] = np.asarray(d["embedding"], dtype=np.float64)
        return cls(**d)


# ---------------------------------------------------------------------------
# toy clips


@dataclass(frozen=True)
class ClipSpec:
    kind: str = "square"             # square | circle
    size: int = 4
    velocity: tuple[float, float] = (1.0, 0.0)   # pixels/frame (vx, vy)
    fg_color: tuple[float, float, float] = (1.0, 0.2, 0.2)
    bg_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    frames: int = 17
    resolution: tuple[int, int] = (16, 16)
    fps: float = 2.0
    content_type: str = "physics_demo"

    def __post_init__(self):
        if self.kind not in ("square", "circle"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")


def spec_embedding(spec: ClipSpec) -> np.ndarray:
    """Hash-seeded unit embedding; identical specs embed identically."""
    digest = hashlib.sha256(json.dumps(asdict(spec), sort_keys=True).encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(EMBED_DIM)
    return v / np.linalg.norm(v)


def _shape_mask(spec: ClipSpec, cx: float, cy: float) -> np.ndarray:
    hh, ww = spec.resolution
    yy, xx = np.meshgrid(np.arange(hh), np.arange(ww), indexing="ij")
    # wrap-around distance along each axis
    dx = np.minimum(np.abs(xx - cx), ww - np.abs(xx - cx))
    dy = np.minimum(np.abs(yy - cy), hh - np.abs(yy - cy))
    half = spec.size / 2.0
    if spec.kind == "square":
        return ((dx <= half) & (dy <= half)).astype(np.float32)
    return ((dx ** 2 + dy ** 2) <= half ** 2).astype(np.float32)


def gen_toy_clip(spec: ClipSpec, seed: int, created_at: float | None = None
                 ) -> tuple[np.ndarray, ClipRecord]:
    """Deterministic clip of a shape translating at constant velocity with
    wrap-around borders. Returns (video (T, 3, H, W) float32, record)."""
    hh, ww = spec.resolution
    rng = np.random.default_rng(seed)
    cx0, cy0 = rng.uniform(0, ww), rng.uniform(0, hh)
    frames = []
    fg = np.asarray(spec.fg_color, dtype=np.float32).reshape(3, 1, 1)
    bg = np.asarray(spec.bg_color, dtype=np.float32).reshape(3, 1, 1)
    for t in range(spec.frames):
        cx = (cx0 + spec.velocity[0] * t) % ww
        cy = (cy0 + spec.velocity[1] * t) % hh
        mask = _shape_mask(spec, cx, cy)[None]
        frames.append(mask * fg + (1.0 - mask) * bg)
    video = np.stack(frames).astype(np.float32)
    record = ClipRecord(
        id=f"clip-{seed}-{hashlib.sha1(json.dumps(asdict(spec), sort_keys=True).encode()).hexdigest()[:8]}",
        embedding=spec_embedding(spec),
        resolution=spec.resolution,
        created_at=float(seed) if created_at is None else created_at,
        content_type=spec.content_type,
        duration_s=spec.frames / spec.fps,
        aspect_ratio=ww / hh,
    )
    return video, record


class MovingShapesDataset:
    """Pool of toy clips with captions, rendered on demand."""

    KINDS = ("square", "circle")
    COLORS = {"red": (1.0, 0.2, 0.2), "green": (0.2, 1.0, 0.2), "blue": (0.2, 0.4, 1.0)}
    MOVES = {"right": (1.0, 0.0), "left": (-1.0, 0.0), "down": (0.0, 1.0), "up": (0.0, -1.0)}

    def __init__(self, seed: int = 0, num_variants: int = 24):
        rng = np.random.default_rng(seed)
        self.variants = []
        kinds = list(self.KINDS)
        colors = list(self.COLORS)
        moves = list(self.MOVES)
        for i in range(num_variants):
            kind = kinds[i % len(kinds)]
            color = colors[(i // len(kinds)) % len(colors)]
            move = moves[(i // (len(kinds) * len(colors))) % len(moves)]
            self.variants.append((kind, color, move, int(rng.integers(0, 2 ** 31))))

    def sample(self, rng: np.random.Generator, resolution=(16, 16), frames=17
               ) -> tuple[np.ndarray, str]:
        kind, color, move, seed = self.variants[int(rng.integers(0, len(self.variants)))]
        spec = ClipSpec(kind=kind, size=max(3, resolution[0] // 4),
                        velocity=self.MOVES[move], fg_color=self.COLORS[color],
                        frames=frames, resolution=resolution)
        video, _ = gen_toy_clip(spec, seed)
        caption = f"a {color} {kind} moving {move}"
        return video, caption


# ---------------------------------------------------------------------------
# online dedup


def _bucket_of(embedding: np.ndarray, hyperplanes: np.ndarray | None) -> int:
    if hyperplanes is None:
        return 0
    signs = (hyperplanes @ embedding) >= 0
    return int(sum(int(b) << i for i, b in enumerate(signs)))


def _prefer_incumbent(incumbent: ClipRecord, arrival: ClipRecord) -> bool:
    """Tie-breaking: higher resolution wins; equal resolution keeps the older."""
    if incumbent.pixels() != arrival.pixels():
        return incumbent.pixels() > arrival.pixels()
    return incumbent.created_at <= arrival.created_at


class OnlineDeduper:
    """Single-writer streaming dedup state.

    Each arrival is compared against retained clips in its cluster bucket; any
    retained clip within the similarity threshold triggers a keep-one decision
    (resolution first, then age). hash_bits=0 keeps one global bucket, which
    makes the no-similar-pair invariant hold globally; hash_bits>0 switches to
    coarse sign-hash bucketing for scale.
    """

    def __init__(self, threshold: float = 0.95, hash_bits: int = 0, seed: int = 0):
        if not 0.0 < threshold < 1.0:
            raise ValueError(f"threshold must be in (0,1), got {threshold}")
        self.threshold = threshold
        self.hyperplanes = None
        if hash_bits > 0:
            self.hyperplanes = np.random.default_rng(seed).standard_normal((hash_bits, EMBED_DIM))
        self._buckets: dict[int, list[ClipRecord]] = {}

    def offer(self, record: ClipRecord) -> bool:
        """Process one arrival; returns True when the arrival is retained."""
        if abs(np.linalg.norm(record.embedding) - 1.0) > 1e-6:
            raise ValueError("embedding must be unit-norm")
        bucket = self._buckets.setdefault(_bucket_of(record.embedding, self.hyperplanes), [])
        similar = [r for r in bucket
                   if float(r.embedding @ record.embedding) >= self.threshold]
        if not similar:
            bucket.append(record)
            return True
        if any(_prefer_incumbent(r, record) for r in similar):
            return False
        for r in similar:
            bucket.remove(r)
        bucket.append(record)
        return True

    @property
    def retained(self) -> list[ClipRecord]:
        return [r for bucket in self._buckets.values() for r in bucket]


def online_dedup(records: Iterable[ClipRecord], threshold: float = 0.95,
                 hash_bits: int = 0, seed: int = 0) -> list[ClipRecord]:
    deduper = OnlineDeduper(threshold=threshold, hash_bits=hash_bits, seed=seed)
    for rec in records:
        deduper.offer(rec)
    return deduper.retained


# ---------------------------------------------------------------------------
# sharding


@dataclass(frozen=True)
class ShardBuckets:
    """Bucket edges for the non-categorical axes; defaults documented here.

    resolution: by min(H, W) pixels -> lt360 / 360p / 480p / 720p / 1080p+
    aspect:     W/H -> tall (<0.9) / square (0.9..1.1) / wide (>1.1)
    length:     seconds -> 5-10 / 10-30 / 30-60 / 60+
    """

    resolution_edges: tuple[float, ...] = (360, 480, 720, 1080)
    resolution_names: tuple[str, ...] = ("lt360", "360p", "480p", "720p", "1080p+")
    aspect_edges: tuple[float, ...] = (0.9, 1.1)
    aspect_names: tuple[str, ...] = ("tall", "square", "wide")
    length_edges: tuple[float, ...] = (10.0, 30.0, 60.0)
    length_names: tuple[str, ...] = ("5-10s", "10-30s", "30-60s", "60s+")
    taxonomy: tuple[str, ...] = DEFAULT_TAXONOMY


def _bucket_name(value: float, edges: Sequence[float], names: Sequence[str]) -> str:
    return names[int(np.searchsorted(np.asarray(edges), value, side="right"))]


def shard_assign(record: ClipRecord, buckets: ShardBuckets = ShardBuckets()) -> str:
    """Deterministic composite key content/resolution/aspect/length."""
    if record.content_type not in buckets.taxonomy:
        raise ValueError(f"unknown content type {record.content_type!r}")
    res = _bucket_name(min(record.resolution), buckets.resolution_edges, buckets.resolution_names)
    asp = _bucket_name(record.aspect_ratio, buckets.aspect_edges, buckets.aspect_names)
    ln = _bucket_name(record.duration_s, buckets.length_edges, buckets.length_names)
    return f"{record.content_type}/{res}/{asp}/{ln}"


def enumerate_shard_keys(buckets: ShardBuckets = ShardBuckets()) -> list[str]:
    return [f"{c}/{r}/{a}/{ln}"
            for c in buckets.taxonomy
            for r in buckets.resolution_names
            for a in buckets.aspect_names
            for ln in buckets.length_names]


# ---------------------------------------------------------------------------
# filters and files


def motion_magnitude_filter(min_motion: float = 1e-4) -> Callable[[np.ndarray], bool]:
    """Built-in filter: keep clips whose mean |frame difference| clears the bar."""

    def keep(video: np.ndarray) -> bool:
        if video.shape[0] < 2:
            return False
        return float(np.abs(np.diff(video, axis=0)).mean()) >= min_motion

    return keep


def apply_filters(video: np.ndarray, filters: Sequence[Callable[[np.ndarray], bool]]) -> bool:
    return all(f(video) for f in filters)


def write_manifest(records: Iterable[ClipRecord], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_manifest(path: str | Path) -> list[ClipRecord]:
    records = []
    with Path(path).open() as fh:
        for line in fh:
            if line.strip():
                records.append(ClipRecord.from_json(line))
    return records


def save_clip(video: np.ndarray, path: str | Path) -> None:
    save_tensor(path, video)


def load_clip(path: str | Path) -> np.ndarray:
    return load_tensor(path)


def curate(records: Sequence[ClipRecord], out_dir: str | Path,
           dedup_threshold: float = 0.95, hash_bits: int = 0,
           buckets: ShardBuckets = ShardBuckets()) -> dict:
    """Dedup a manifest, assign shard keys, and write per-shard manifests."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kept = online_dedup(records, threshold=dedup_threshold, hash_bits=hash_bits)
    shards: dict[str, list[ClipRecord]] = {}
    for rec in kept:
        rec.shard_key = shard_assign(rec, buckets)
        shards.setdefault(rec.shard_key, []).append(rec)
    for key, recs in shards.items():
        shard_path = out / (key.replace("/", "__") + ".ndjson")
        write_manifest(recs, shard_path)
    summary = {"input": len(records), "retained": len(kept), "shards": len(shards)}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary
