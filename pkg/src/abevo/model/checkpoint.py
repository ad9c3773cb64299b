"""Checkpoint file: 8-byte little-endian header length, JSON header, raw little-endian arrays."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .optim import Adam
from .transformer import ModelConfig, Transformer

FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    step: int = 0
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def model(self) -> Transformer:
        model = Transformer(self.config, init=False)
        model.load_state_dict(self.tensors)
        return model


def from_model(model: Transformer, step: int = 0, optimizer: Optional[Adam] = None,
               meta: Optional[dict] = None) -> Checkpoint:
    moments = {}
    if optimizer is not None:
        for k in optimizer.trainable:
            moments[f"adam.m.{k}"] = optimizer.m[k]
            moments[f"adam.v.{k}"] = optimizer.v[k]
    return Checkpoint(model.config, model.state_dict(), step, moments, dict(meta or {}))


def save(ckpt: Checkpoint, path: str | Path, dtype: Optional[str] = None) -> None:
    """Write ``ckpt``; ``dtype`` defaults to the model's compute dtype."""
    dtype = dtype or ckpt.config.dtype
    code = _DTYPES[dtype]
    manifest = []
    blobs = []
    offset = 0
    for name, arr in list(ckpt.tensors.items()) + list(ckpt.moments.items()):
        raw = np.ascontiguousarray(arr, dtype=code).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                         "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "meta": ckpt.meta,
        "tensors": manifest,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        body = fh.read()
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
    config = ModelConfig(**header["config"])
    tensors, moments = {}, {}
    for entry in header["tensors"]:
        raw = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        arr = arr.astype(config.dtype)
        (moments if entry["name"].startswith("adam.") else tensors)[entry["name"]] = arr
    return Checkpoint(config, tensors, header["step"], moments, header.get("meta", {}))
