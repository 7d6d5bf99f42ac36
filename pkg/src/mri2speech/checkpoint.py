"""Checkpoint container shared by the recognizer and the TTS model.

Layout::

    b"M2SC"            magic
    uint32 LE          container version (1)
    uint64 LE          header length in bytes
    header             UTF-8 JSON: kind, config, fingerprint, step, rng_state,
                       extras, tensors=[{name, shape, offset, nbytes}]
    blob               concatenated float32 little-endian tensors
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

MAGIC = b"M2SC"
VERSION = 1


def fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class Checkpoint:
    kind: str
    config: dict
    state_dict: dict[str, torch.Tensor]
    step: int = 0
    rng_state: str = ""
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.config)

    def weight_vector(self) -> np.ndarray:
        """Every parameter flattened into one vector, in state-dict order."""
        if not self.state_dict:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([t.detach().cpu().float().reshape(-1).numpy() for t in self.state_dict.values()])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        tensors, chunks, offset = [], [], 0
        for name, t in self.state_dict.items():
            arr = np.ascontiguousarray(t.detach().cpu().float().numpy(), dtype="<f4")
            raw = arr.tobytes()
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        header = {
            "kind": self.kind,
            "config": self.config,
            "fingerprint": self.fingerprint,
            "step": self.step,
            "rng_state": self.rng_state,
            "extras": self.extras,
            "tensors": tensors,
        }
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(MAGIC + struct.pack("<IQ", VERSION, len(head)))
            fh.write(head)
            for c in chunks:
                fh.write(c)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise FileNotFoundError(f"checkpoint not found: {path}") from None
        if data[:4] != MAGIC:
            raise OSError(f"{path}: not a checkpoint file")
        version, head_len = struct.unpack_from("<IQ", data, 4)
        if version != VERSION:
            raise OSError(f"{path}: unsupported checkpoint version {version}")
        start = 4 + struct.calcsize("<IQ")
        try:
            header = json.loads(data[start:start + head_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise OSError(f"{path}: corrupt checkpoint header") from exc
        blob = memoryview(data)[start + head_len:]
        state = {}
        for spec in header["tensors"]:
            end = spec["offset"] + spec["nbytes"]
            if end > len(blob):
                raise OSError(f"{path}: truncated tensor {spec['name']}")
            arr = np.frombuffer(blob[spec["offset"]:end], dtype="<f4").reshape(spec["shape"])
            state[spec["name"]] = torch.from_numpy(arr.copy())
        ckpt = cls(header["kind"], header["config"], state, header["step"], header["rng_state"], header["extras"])
        if ckpt.fingerprint != header["fingerprint"]:
            raise OSError(f"{path}: config fingerprint mismatch")
        return ckpt


def encode_rng_state() -> str:
    return base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii")


def restore_rng_state(state: str) -> None:
    if state:
        raw = np.frombuffer(base64.b64decode(state), dtype=np.uint8).copy()
        torch.set_rng_state(torch.from_numpy(raw))
