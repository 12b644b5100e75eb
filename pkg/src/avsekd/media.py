"""WAV (PCM16 mono) and ``.uvf`` video container I/O."""
from __future__ import annotations

import struct
import wave
from pathlib import Path

import numpy as np

UVF_MAGIC = b"AVSE"
UVF_VERSION = 1
_UVF_HEADER = struct.Struct("<4sIIIId")


class MediaFormatError(ValueError):
    pass


def read_wav(path) -> tuple[np.ndarray, int]:
    """Returns float64 samples in [-1, 1) and the sample rate."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise MediaFormatError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise MediaFormatError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        sr = f.getframerate()
        raw = f.readframes(f.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, sr


def to_pcm16(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    return np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, samples, sample_rate: int = 16000) -> None:
    pcm = to_pcm16(samples)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


def to_u8(frames) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.dtype == np.uint8:
        return frames
    return np.clip(np.round(frames * 255.0), 0, 255).astype(np.uint8)


def write_uvf(path, frames, fps: float) -> None:
    """``frames`` is ``T x H x W``, either uint8 or floats in [0, 1]."""
    u8 = to_u8(frames)
    if u8.ndim != 3:
        raise MediaFormatError(f"expected T x H x W frames, got shape {u8.shape}")
    t, h, w = u8.shape
    with open(path, "wb") as f:
        f.write(_UVF_HEADER.pack(UVF_MAGIC, UVF_VERSION, t, h, w, float(fps)))
        f.write(np.ascontiguousarray(u8).tobytes())


def read_uvf(path) -> tuple[np.ndarray, float]:
    """Returns uint8 frames ``T x H x W`` and the frame rate."""
    data = Path(path).read_bytes()
    if len(data) < _UVF_HEADER.size:
        raise MediaFormatError(f"{path}: truncated header")
    magic, version, t, h, w, fps = _UVF_HEADER.unpack_from(data)
    if magic != UVF_MAGIC:
        raise MediaFormatError(f"{path}: bad magic {magic!r}")
    if version != UVF_VERSION:
        raise MediaFormatError(f"{path}: unsupported version {version}")
    payload = data[_UVF_HEADER.size :]
    if len(payload) != t * h * w:
        raise MediaFormatError(f"{path}: expected {t * h * w} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(t, h, w), fps
