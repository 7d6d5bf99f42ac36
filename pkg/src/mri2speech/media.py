"""On-disk media formats: the binary clip container and PCM16 WAV.

Clip container layout (all little-endian)::

    offset  size  field
    0       4     magic  b"ACLP"
    4       2     version (uint16, currently 1)
    6       2     reserved (uint16, zero)
    8       4     num_frames (uint32)
    12      4     height (uint32)
    16      4     width (uint32)
    20      8     fps (float64)
    28      ...   frames, float32, C order [num_frames, height, width]
"""

from __future__ import annotations

import struct
import wave
from pathlib import Path

import numpy as np

CLIP_MAGIC = b"ACLP"
CLIP_VERSION = 1
_HEADER = struct.Struct("<4sHHIIId")


def write_clip(path: str | Path, frames: np.ndarray, fps: float) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 3:
        raise ValueError(f"clip frames must be 3-D, got shape {frames.shape}")
    n, h, w = frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CLIP_MAGIC, CLIP_VERSION, 0, n, h, w, float(fps)))
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_clip(path: str | Path) -> tuple[np.ndarray, float]:
    """Return ``(frames, fps)``; frames as float32 ``[N, H, W]``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise OSError(f"{path}: truncated clip header")
    magic, version, _, n, h, w, fps = _HEADER.unpack_from(data)
    if magic != CLIP_MAGIC:
        raise OSError(f"{path}: not a clip container (magic {magic!r})")
    if version != CLIP_VERSION:
        raise OSError(f"{path}: unsupported clip version {version}")
    expected = n * h * w * 4
    body = data[_HEADER.size:]
    if len(body) != expected:
        raise OSError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    frames = np.frombuffer(body, dtype="<f4").reshape(n, h, w).astype(np.float32)
    return frames, fps


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    samples = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(samples * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise OSError(f"{path}: only PCM16 WAV is supported")
        channels = wf.getnchannels()
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    if channels > 1:
        pcm = pcm.reshape(-1, channels).mean(axis=1)
    return pcm, rate
