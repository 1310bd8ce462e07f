"""Checkpoint directory format shared by the trainer and the merge tools:
`manifest.json` (tensor name -> shape/dtype/offset, plus model config and step)
and `tensors.bin` (little-endian f32 concatenated in manifest order, which is
sorted tensor name order). Save -> load -> save is byte-identical."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT = "worldflow-checkpoint-v1"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    model_config: dict | None = None
    step: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = {k: np.asarray(v, dtype=np.float32) for k, v in self.tensors.items()}

    def clone(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.tensors.items()},
                          model_config=self.model_config, step=self.step, extra=dict(self.extra))


def save_checkpoint(ckpt: Checkpoint, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(ckpt.tensors)
    entries = {}
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        entries[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset}
        offset += arr.nbytes
        blobs.append(arr.tobytes())
    manifest = {
        "format": FORMAT,
        "step": int(ckpt.step),
        "model_config": ckpt.model_config,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    (out / "tensors.bin").write_bytes(b"".join(blobs))
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unknown checkpoint format {manifest.get('format')!r}")
    raw = (path / "tensors.bin").read_bytes()
    tensors = {}
    for name, entry in manifest["tensors"].items():
        shape = entry["shape"]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=entry["offset"])
        tensors[name] = arr.reshape(shape).copy()
    return Checkpoint(tensors, model_config=manifest.get("model_config"),
                      step=manifest.get("step", 0), extra=manifest.get("extra") or {})


def checkpoint_from_model(model, step: int = 0, config_dict: dict | None = None) -> Checkpoint:
    tensors = {k: v.detach().cpu().numpy().astype(np.float32)
               for k, v in model.state_dict().items()}
    return Checkpoint(tensors, model_config=config_dict, step=step)


def load_into_model(model, ckpt: Checkpoint) -> None:
    import torch

    state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.tensors.items()}
    model.load_state_dict(state)
