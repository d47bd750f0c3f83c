"""Binary shard files and the dataset manifest.

Shard layout (little-endian):

    magic b"VMTS" | version u16 | reserved u16 | count u32 | sha256(payload) 32B
    | offsets u64 * count (relative to payload start)
    | payload: per sample, u32 length + serialized sample

Serialized sample: H u16, W u16, image uint8[H*W*3], depth f32[H*W],
caption (n u16, ids u16[n]), regions (n u8, then per region box f32[4],
label i16, n u16, ids u16[n]).
"""

from __future__ import annotations

import configparser
import hashlib
import io
import struct
from pathlib import Path

import numpy as np

from .schema import Region, Sample

MAGIC = b"VMTS"
VERSION = 1
_HEADER = struct.Struct("<4sHHI32s")


class ShardCorruptError(IOError):
    pass


def _tokens_bytes(ids) -> bytes:
    ids = np.asarray(ids, dtype="<u2")
    return struct.pack("<H", len(ids)) + ids.tobytes()


def encode_sample(s: Sample) -> bytes:
    h, w, _ = s.image.shape
    out = io.BytesIO()
    out.write(struct.pack("<HH", h, w))
    out.write(np.round(s.image * 255.0).astype(np.uint8).tobytes())
    out.write(np.asarray(s.depth, dtype="<f4").tobytes())
    out.write(_tokens_bytes(s.caption))
    out.write(struct.pack("<B", len(s.regions)))
    for r in s.regions:
        out.write(np.asarray(r.box, dtype="<f4").tobytes())
        out.write(struct.pack("<h", r.label))
        out.write(_tokens_bytes(r.tokens))
    return out.getvalue()


def decode_sample(buf: bytes) -> Sample:
    pos = 0

    def take(n):
        nonlocal pos
        chunk = buf[pos:pos + n]
        if len(chunk) != n:
            raise ShardCorruptError("truncated sample record")
        pos += n
        return chunk

    def tokens():
        (n,) = struct.unpack("<H", take(2))
        return np.frombuffer(take(2 * n), dtype="<u2").astype(np.int64)

    h, w = struct.unpack("<HH", take(4))
    image = np.frombuffer(take(h * w * 3), dtype=np.uint8).reshape(h, w, 3)
    image = (image.astype(np.float32) / np.float32(255.0))
    depth = np.frombuffer(take(4 * h * w), dtype="<f4").reshape(h, w).astype(np.float32)
    caption = tokens()
    (nr,) = struct.unpack("<B", take(1))
    regions = []
    for _ in range(nr):
        box = np.frombuffer(take(16), dtype="<f4").astype(np.float32)
        (label,) = struct.unpack("<h", take(2))
        regions.append(Region(box, tokens(), label))
    return Sample(image=image, caption=caption, regions=regions, depth=depth)


def write_shard(path: str | Path, samples: list[Sample]) -> None:
    records = [encode_sample(s) for s in samples]
    payload = io.BytesIO()
    offsets = []
    for rec in records:
        offsets.append(payload.tell())
        payload.write(struct.pack("<I", len(rec)))
        payload.write(rec)
    body = payload.getvalue()
    header = _HEADER.pack(MAGIC, VERSION, 0, len(records), hashlib.sha256(body).digest())
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.asarray(offsets, dtype="<u8").tobytes())
        f.write(body)


def read_shard(path: str | Path) -> list[Sample]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ShardCorruptError(f"{path}: truncated header")
    magic, version, _, count, digest = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ShardCorruptError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ShardCorruptError(f"{path}: unsupported version {version}")
    start = _HEADER.size + 8 * count
    offsets = np.frombuffer(data[_HEADER.size:start], dtype="<u8")
    body = data[start:]
    if hashlib.sha256(body).digest() != digest:
        raise ShardCorruptError(f"{path}: checksum mismatch")
    if count and (np.any(np.diff(offsets.astype(np.int64)) <= 0) or offsets[0] != 0):
        raise ShardCorruptError(f"{path}: offsets not strictly increasing")
    samples = []
    for off in offsets:
        off = int(off)
        (n,) = struct.unpack_from("<I", body, off)
        samples.append(decode_sample(body[off + 4:off + 4 + n]))
    return samples


def write_dataset(out_dir: str | Path, samples: list[Sample], seed: int, generator: str,
                  shard_size: int = 1000, name: str = "train") -> Path:
    """Write samples as shards plus a `<name>.manifest` key-value file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = configparser.ConfigParser()
    manifest["dataset"] = {
        "name": name,
        "count": str(len(samples)),
        "seed": str(seed),
        "generator_version": generator,
    }
    manifest["shards"] = {}
    for k in range(0, len(samples), shard_size):
        fname = f"{name}-{k // shard_size:05d}.shard"
        chunk = samples[k:k + shard_size]
        write_shard(out / fname, chunk)
        manifest["shards"][fname] = str(len(chunk))
    path = out / f"{name}.manifest"
    with open(path, "w") as f:
        manifest.write(f)
    return path


def read_manifest(path: str | Path) -> configparser.ConfigParser:
    m = configparser.ConfigParser()
    if not m.read(path):
        raise FileNotFoundError(path)
    return m


def read_dataset(manifest_path: str | Path) -> list[Sample]:
    path = Path(manifest_path)
    m = read_manifest(path)
    samples = []
    for fname, count in m["shards"].items():
        chunk = read_shard(path.parent / fname)
        if len(chunk) != int(count):
            raise ShardCorruptError(f"{fname}: manifest says {count}, shard holds {len(chunk)}")
        samples.extend(chunk)
    return samples
