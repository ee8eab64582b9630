"""PRNC checkpoint files.

Layout (little-endian)::

    b"PRNC"
    u32 version | u64 config hash | u32 epoch | u32 tensor count
    per tensor: u16 name length, name (utf-8), u8 rank, u32 x rank dims, f32 payload
    u32 metadata length, metadata (utf-8 JSON)
    u32 CRC32 of every byte after the magic

Parameters come first, followed by the Adam first and second moments under
``adam.m/<name>`` and ``adam.v/<name>``. The JSON metadata carries the
model and training configurations and the Adam step counter.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, init_params
from .tensor import Tensor
from .train import AdamState, TrainConfig

MAGIC = b"PRNC"
VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigMismatchError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState
    epoch: int
    train_config: TrainConfig | None
    config_hash: int

    @property
    def model_config(self) -> ModelConfig:
        return self.params.config


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode(params: ModelParams, adam: AdamState, epoch: int,
           train_config: TrainConfig | None = None) -> bytes:
    named = params.named_parameters()
    records = [(n, t.data) for n, t in named]
    for n, t in named:
        if n in adam.m:
            records.append((f"adam.m/{n}", adam.m[n]))
            records.append((f"adam.v/{n}", adam.v[n]))
    meta = {
        "model": params.config.to_dict(),
        "train": None if train_config is None else train_config.to_dict(),
        "adam": {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
    }
    body = bytearray(struct.pack("<IQII", VERSION, params.config.digest(), epoch, len(records)))
    for n, a in records:
        body += _tensor_record(n, a)
    blob = json.dumps(meta, sort_keys=True).encode()
    body += struct.pack("<I", len(blob)) + blob
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    return MAGIC + bytes(body)


def save_checkpoint(path: str | Path, params: ModelParams, adam: AdamState, epoch: int,
                    train_config: TrainConfig | None = None) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    data = encode(params, adam, epoch, train_config)
    fd, tmp = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, expect: ModelConfig | None = None) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    version, digest, epoch, count = r.unpack("<IQII", "header")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        at = r.pos
        (nlen,) = r.unpack("<H", "tensor name length")
        name = r.take(nlen, "tensor name").decode()
        (rank,) = r.unpack("<B", "tensor rank")
        dims = r.unpack(f"<{rank}I", "tensor dims")
        n = int(np.prod(dims, dtype=np.int64))
        payload = r.take(4 * n, f"payload of {name}")
        if name in arrays:
            raise CheckpointFormatError(f"duplicate tensor {name}", at)
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    (mlen,) = r.unpack("<I", "metadata length")
    meta_at = r.pos
    blob = r.take(mlen, "metadata")
    crc_at = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after checksum", r.pos)
    if zlib.crc32(buf[4:crc_at]) != crc:
        raise CheckpointFormatError("checksum mismatch", crc_at)
    try:
        meta = json.loads(blob)
        cfg = ModelConfig.from_dict(meta["model"])
    except (ValueError, KeyError, TypeError) as err:
        raise CheckpointFormatError(f"unreadable metadata: {err}", meta_at) from err
    if cfg.digest() != digest:
        raise CheckpointFormatError("config hash does not match stored model config", 8)
    if expect is not None and expect.digest() != digest:
        raise ConfigMismatchError(
            f"checkpoint config hash {digest:016x} does not match model {expect.digest():016x}")

    params = init_params(cfg)
    a = meta["adam"]
    adam = AdamState(step=a["step"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    for name, t in params.named_parameters():
        if name not in arrays:
            raise CheckpointFormatError(f"missing tensor {name}", 24)
        if arrays[name].shape != t.shape:
            raise CheckpointFormatError(f"tensor {name} has shape {arrays[name].shape}", 24)
        t.data = arrays[name].copy()
        if f"adam.m/{name}" in arrays:
            adam.m[name] = arrays[f"adam.m/{name}"].copy()
            adam.v[name] = arrays[f"adam.v/{name}"].copy()
    train_cfg = TrainConfig.from_dict(meta["train"]) if meta.get("train") else None
    return Checkpoint(params, adam, epoch, train_cfg, digest)


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expect)
