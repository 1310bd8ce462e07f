"""Raw f32 tensor files (data + sidecar shape header) and base64 wire packing."""
from __future__ import annotations

import base64
import json
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"WFTENSOR"


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    """Write `path` as raw little-endian f32 plus `<path>.shape.json` sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    path.write_bytes(arr.tobytes())
    sidecar = {"shape": list(arr.shape), "dtype": "f32"}
    Path(str(path) + ".shape.json").write_text(json.dumps(sidecar))


def load_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".shape.json").read_text())
    if sidecar.get("dtype") != "f32":
        raise ValueError(f"unsupported dtype in sidecar: {sidecar.get('dtype')}")
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    return data.reshape(sidecar["shape"]).copy()


def pack_b64(array: np.ndarray) -> str:
    """Self-describing base64 blob: magic, uint32 ndim, uint32 dims, f32 data."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = _MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return base64.b64encode(header + arr.tobytes()).decode("ascii")


def unpack_b64(blob: str) -> np.ndarray:
    raw = base64.b64decode(blob.encode("ascii"), validate=True)
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ValueError("not a packed tensor blob")
    off = len(_MAGIC)
    (ndim,) = struct.unpack_from("<I", raw, off)
    off += 4
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    data = np.frombuffer(raw, dtype="<f4", offset=off)
    return data.reshape(shape).copy()


def load_item(item: str) -> np.ndarray:
    """Resolve a wire item: an existing file path or a packed base64 blob."""
    p = Path(item)
    try:
        if p.is_file():
            return load_tensor(p)
    except OSError:
        pass  # item too long / invalid as a path: treat as base64
    return unpack_b64(item)
