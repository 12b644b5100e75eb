"""``AVCK`` checkpoint container.

Layout (little-endian): magic ``AVCK``, u32 version, u32 tensor count, then per
tensor a u16 name length, the UTF-8 name, u8 rank, rank x u32 dims and the
values as f64 in row-major order. A u32-length-prefixed block of UTF-8
``key=value`` lines holding the model configuration closes the file.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .model import AVSENet, ModelConfig, build_student, build_teacher

MAGIC = b"AVCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray], meta: dict[str, str]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        value = np.asarray(value, dtype="<f8")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<B", value.ndim))
        out.append(struct.pack(f"<{value.ndim}I", *value.shape))
        out.append(np.ascontiguousarray(value).tobytes())
    for key, value in meta.items():
        if "\n" in key or "=" in key or "\n" in value:
            raise CheckpointError(f"cannot serialise config entry {key!r}")
    block = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    out.append(struct.pack("<I", len(block)))
    out.append(block)
    return b"".join(out)


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * n > len(data):
                raise CheckpointError(f"tensor {name!r} truncated")
            tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(dims)
            pos += 8 * n
        (block_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        block = data[pos : pos + block_len].decode("utf-8")
        if len(block.encode("utf-8")) != block_len:
            raise CheckpointError("config block truncated")
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    meta = {}
    for line in block.splitlines():
        key, _, value = line.partition("=")
        meta[key] = value
    return tensors, meta


def save_checkpoint(path, net: AVSENet, extra: dict[str, str] | None = None) -> Path:
    tensors = {k: v.detach().cpu().double().numpy() for k, v in net.state_dict().items()}
    meta = {"kind": net.kind, **net.config.to_dict(), **(extra or {})}
    path = Path(path)
    path.write_bytes(encode(tensors, meta))
    return path


def load_checkpoint(path, dtype=torch.float32) -> tuple[AVSENet, dict[str, str]]:
    tensors, meta = decode(Path(path).read_bytes())
    kind = meta.get("kind")
    if kind not in ("teacher", "student"):
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    config = ModelConfig.from_dict(meta)
    net = (build_teacher if kind == "teacher" else build_student)(config, 0).to(dtype)
    state = net.state_dict()
    if set(state) != set(tensors):
        missing = sorted(set(state) - set(tensors))
        extra = sorted(set(tensors) - set(state))
        raise CheckpointError(f"tensor mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    net.load_state_dict({k: torch.from_numpy(tensors[k].copy()).to(state[k].dtype) for k in state})
    net.eval()
    return net, meta
