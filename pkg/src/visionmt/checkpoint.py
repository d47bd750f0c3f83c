"""Flat tensor checkpoints: JSON manifest plus raw little-endian payload.

File layout: magic b"VMTCKPT1" | u64 manifest length | manifest (UTF-8
JSON) | payload. The manifest lists every entry's name, dtype, shape, offset
and byte length, plus a free-form "meta" object.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"VMTCKPT1"
_DTYPES = {
    torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(IOError):
    pass


def save_tensors(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for raw in chunks:
            f.write(raw)


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    data = p.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{p}: not a checkpoint file")
    (mlen,) = struct.unpack_from("<Q", data, 8)
    manifest = json.loads(data[16:16 + mlen])
    base = 16 + mlen
    out = {}
    for e in manifest["entries"]:
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{p}: truncated entry {e['name']}")
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
        out[e["name"]] = torch.from_numpy(arr).to(_TORCH[e["dtype"]])
    return out, manifest["meta"]


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    sd = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = set(module.state_dict()) - set(sd)
    if missing:
        raise CheckpointError(f"missing entries: {sorted(missing)[:5]}")
    module.load_state_dict(sd, strict=True)
