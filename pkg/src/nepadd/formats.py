"""On-disk formats: NEPD feature files, JSONL manifests, checkpoints, score dumps.

All binary formats are little-endian.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nepadd.errors import DataError

FEATURE_MAGIC = b"NEPD"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sHII")

CHECKPOINT_MAGIC = b"NEPK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------- features


def encode_features(features) -> bytes:
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise DataError(f"features must be (T, D), got shape {arr.shape}")
    T, D = arr.shape
    body = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, D) + body


def decode_features(buf: bytes) -> np.ndarray:
    if len(buf) < _FEATURE_HEADER.size:
        raise DataError("feature file truncated before header end")
    magic, version, T, D = _FEATURE_HEADER.unpack_from(buf)
    if magic != FEATURE_MAGIC:
        raise DataError(f"bad feature magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataError(f"unsupported feature file version {version}")
    expected = _FEATURE_HEADER.size + 4 * T * D
    if len(buf) != expected:
        raise DataError(f"feature file size {len(buf)} != expected {expected} for T={T}, D={D}")
    return np.frombuffer(buf, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(T, D)


def write_features(path, features):
    Path(path).write_bytes(encode_features(features))


def read_features(path) -> np.ndarray:
    """Load a feature file as float64 (T, D)."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    return decode_features(buf).astype(np.float64)


# ---------------------------------------------------------------- labels


def rle_encode(labels):
    """Run-length encode a 0/1 sequence as [[value, count], ...]."""
    labels = np.asarray(labels).astype(int)
    if labels.size == 0:
        return []
    edges = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [labels.size]])
    return [[int(labels[s]), int(e - s)] for s, e in zip(starts, ends)]


def rle_decode(runs):
    if not runs:
        return np.zeros(0, dtype=np.int8)
    return np.concatenate([np.full(int(n), int(v), dtype=np.int8) for v, n in runs])


# ---------------------------------------------------------------- checkpoints


def config_hash(config: dict) -> bytes:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).digest()


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    frozen: dict[str, bool] = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    config: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> bytes:
        return config_hash(self.config)


def _pack_record(name, arr, frozen):
    arr = np.asarray(arr, dtype="<f8")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", int(frozen), arr.ndim)
    return head + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()


def _unpack_record(buf, off):
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    name = buf[off:off + n].decode("utf-8")
    off += n
    frozen, rank = struct.unpack_from("<BB", buf, off)
    off += 2
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)
    return name, arr, bool(frozen), off + 8 * count


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    cfg = json.dumps(ckpt.config, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HQ", CHECKPOINT_VERSION, ckpt.step), ckpt.config_hash,
             struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(ckpt.params))]
    parts += [_pack_record(k, v, ckpt.frozen.get(k, False)) for k, v in ckpt.params.items()]
    parts.append(struct.pack("<I", len(ckpt.optimizer)))
    parts += [_pack_record(k, v, False) for k, v in ckpt.optimizer.items()]
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    try:
        if buf[:4] != CHECKPOINT_MAGIC:
            raise DataError(f"bad checkpoint magic {buf[:4]!r}")
        version, step = struct.unpack_from("<HQ", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        off = 14
        digest = buf[off:off + 32]
        off += 32
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        config = json.loads(buf[off:off + n].decode())
        off += n
        if config_hash(config) != digest:
            raise DataError("checkpoint config hash mismatch")
        params, frozen, optimizer = {}, {}, {}
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        for _ in range(n):
            name, arr, fz, off = _unpack_record(buf, off)
            params[name], frozen[name] = arr, fz
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        for _ in range(n):
            name, arr, _, off = _unpack_record(buf, off)
            optimizer[name] = arr
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt checkpoint: {exc}") from exc
    if off != len(buf):
        raise DataError(f"checkpoint has {len(buf) - off} trailing bytes")
    return Checkpoint(params, frozen, optimizer, step, config)


def save_checkpoint(path, ckpt: Checkpoint):
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf)


# ---------------------------------------------------------------- jsonl


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=False) + "\n")


def read_jsonl(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON line in {path}: {exc}") from exc
