"""Checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"TSANCKPT"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length L in bytes
    20      L     UTF-8 JSON header
    20+L    ...   payload: float32 little-endian arrays, back to back

The JSON header holds ``config`` (the ModelConfig fields), ``iteration``,
``format_version``, free-form ``extra`` metadata and a ``tensors`` list of
``{"name", "shape", "dtype": "<f4", "offset", "nbytes"}`` entries whose
offsets are relative to the start of the payload.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, ModelParams

MAGIC = b"TSANCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, iteration: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, t in params.tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        blob = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4",
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "config": params.config.to_dict(),
        "iteration": int(iteration),
        "extra": extra or {},
        "tensors": entries,
    }).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        version, length = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        header = json.loads(fh.read(length).decode("utf-8"))
    header["_payload_start"] = 20 + length
    return header


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Returns ``(params, header)``; header carries iteration and extra metadata."""
    header = read_header(path)
    cfg = ModelConfig.from_dict(header["config"])
    tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
    data = Path(path).read_bytes()[header["_payload_start"]:]
    for e in header["tensors"]:
        raw = data[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: tensor {e['name']} truncated")
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).astype(np.float32)
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return ModelParams(cfg, tensors), header
