"""Flat binary checkpoint container.

Layout::

    b"MADCKPT1" | uint64 little-endian header length | UTF-8 JSON header | raw tensor bytes

The header lists every tensor (name, kind, dtype, shape, byte offset into the
data section) and echoes the model and run configuration.  Tensors are stored
little-endian and C-contiguous, so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .models import MaskerConfig, ModelParams
from .tensor import Tensor

MAGIC = b"MADCKPT1"
_LEN = struct.Struct("<Q")
_DTYPES = {"f32": "<f4", "f64": "<f8"}


class CheckpointError(OSError):
    pass


def _entries(model: ModelParams):
    for name in sorted(model.params):
        yield name, "param", model.params[name].data
    for name in sorted(model.buffers):
        yield name, "buffer", np.asarray(model.buffers[name])


def save(path, model: ModelParams, run_config: dict | None = None) -> None:
    tensors, blobs, offset = [], [], 0
    for name, kind, arr in _entries(model):
        tag = "f32" if arr.dtype == np.float32 else "f64"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        tensors.append({"name": name, "kind": kind, "dtype": tag, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format": 1, "model_config": model.config.to_dict(),
              "run_config": run_config or {}, "tensors": tensors}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(Path(path), "wb") as fh:
            fh.write(MAGIC)
            fh.write(_LEN.pack(len(hbytes)))
            fh.write(hbytes)
            for raw in blobs:
                fh.write(raw)
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot write checkpoint ({exc})") from None


def read_header(path) -> tuple[dict, bytes]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from None
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    start = len(MAGIC) + _LEN.size
    if len(blob) < start:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = _LEN.unpack(blob[len(MAGIC):start])
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    return header, blob[start + hlen:]


def load(path) -> tuple[ModelParams, dict]:
    """Returns the model and the echoed run configuration."""
    header, data = read_header(path)
    cfg = MaskerConfig.from_dict(header["model_config"])
    params, buffers = {}, {}
    for t in header["tensors"]:
        lo, hi = t["offset"], t["offset"] + t["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"{path}: tensor {t['name']} runs past end of file")
        arr = np.frombuffer(data[lo:hi], dtype=_DTYPES[t["dtype"]]).reshape(t["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="))
        if t["kind"] == "param":
            params[t["name"]] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
        else:
            buffers[t["name"]] = arr.copy()
    return ModelParams(cfg, params, buffers), header.get("run_config", {})
