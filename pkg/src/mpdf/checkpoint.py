"""Single-file checkpoint: named little-endian parameter arrays plus embedded JSON.

Byte layout::

    offset 0   8 bytes   magic b"MPDFCKPT"
    offset 8   uint32    format version (1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header:
                         {"task": str, "config": {...ModelConfig...}, "extra": {...},
                          "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    offset 20+H          payload; each tensor's raw bytes at header offset (relative to payload start)

All integers little-endian. dtype strings are numpy descriptors such as "<f4" or "<f8".
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .config import ModelConfig

MAGIC = b"MPDFCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(path: str | Path, model: torch.nn.Module, config: ModelConfig, task: str, extra: dict | None = None) -> None:
    tensors = []
    chunks = []
    offset = 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        tensors.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"task": task, "config": config.to_dict(), "extra": extra or {}, "tensors": tensors}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def read_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    header = json.loads(data[start : start + hlen].decode())
    payload = start + hlen
    state = {}
    for rec in header["tensors"]:
        arr = np.frombuffer(
            data, dtype=np.dtype(rec["dtype"]), count=int(np.prod(rec["shape"], dtype=np.int64)),
            offset=payload + rec["offset"],
        ).reshape(rec["shape"])
        state[rec["name"]] = torch.from_numpy(arr.copy())
    return header, state


def load_checkpoint(path: str | Path):
    """Return (model, config, task, extra)."""
    from .model import ClassificationModel, LocalizationModel

    header, state = read_checkpoint(path)
    config = ModelConfig.from_dict(header["config"])
    task = header["task"]
    model = {"classification": ClassificationModel, "localization": LocalizationModel}[task](config)
    dtype = next(iter(state.values())).dtype if state else torch.float32
    model.to(dtype)
    model.load_state_dict(state)
    model.eval()
    return model, config, task, header.get("extra", {})
