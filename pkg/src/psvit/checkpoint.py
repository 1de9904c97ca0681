"""Binary checkpoint format.

Layout::

    b"PSVT" | u32 LE version | u32 LE header length | UTF-8 JSON header | blobs

The JSON header maps each tensor path to ``{"dtype": "f32", "shape": [...],
"offset": int, "byte_length": int}`` with offsets relative to the start of
the blob section, in header order. The model configuration is stored under
``"__config__"``.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PSVT"
VERSION = 1
CONFIG_KEY = "__config__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(tensors: Mapping[str, np.ndarray], path, config: Mapping | None = None) -> None:
    header: OrderedDict[str, object] = OrderedDict()
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        if name == CONFIG_KEY:
            raise CheckpointError(f"{CONFIG_KEY!r} is reserved")
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        header[name] = {"dtype": "f32", "shape": list(np.shape(arr)), "offset": offset, "byte_length": len(data)}
        blobs.append(data)
        offset += len(data)
    if config is not None:
        header[CONFIG_KEY] = dict(config)
    head = json.dumps(header).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict | None]:
    """Read every tensor and the stored config; raises before returning anything partial."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a PSVT checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {VERSION})")
    if 12 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"), object_pairs_hook=OrderedDict)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    config = header.pop(CONFIG_KEY, None)
    body = memoryview(raw)[12 + hlen :]
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, meta in header.items():
        if meta.get("dtype") != "f32":
            raise CheckpointError(f"{path}: tensor {name} has unsupported dtype {meta.get('dtype')}")
        start, length = int(meta["offset"]), int(meta["byte_length"])
        shape = tuple(meta["shape"])
        if start + length > len(body):
            raise CheckpointError(f"{path}: truncated data for tensor {name}")
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor {name} byte length does not match shape {shape}")
        out[name] = np.frombuffer(body[start : start + length], dtype="<f4").reshape(shape).astype(np.float32)
    return out, config


def save_model(model, path) -> None:
    save_checkpoint(model.state_dict(), path, config=model.config.to_dict())


def load_model(path, strict: bool = True):
    """Rebuild a model from the stored config and load its tensors."""
    from .model import PsVit, PsVitConfig, tie_weights

    tensors, config = load_checkpoint(path)
    if config is None:
        raise CheckpointError(f"{path}: checkpoint carries no config")
    cfg = PsVitConfig.from_dict(config)
    model = PsVit(cfg.replace(share_weights=False), seed=0)
    if cfg.share_weights:
        tie_weights(model)
    model.load_state_dict(tensors, strict=strict)
    return model
