"""Flat binary checkpoint container: JSON header + little-endian f64 arrays."""
from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Dict, Union

import numpy as np

from .autodiff import Var
from .errors import ConfigError, ShapeError

__all__ = ["MAGIC", "save_checkpoint", "load_checkpoint", "load_into"]

MAGIC = b"LATC1"


def save_checkpoint(path: str, arrays: Dict[str, Union[np.ndarray, Var]]):
    """Atomic write (temp file then rename); arrays stored as f64 LE."""
    named = {}
    for name, a in arrays.items():
        data = a.data if isinstance(a, Var) else np.asarray(a)
        named[name] = np.asarray(data, dtype="<f8", order="C")
    header = {}
    offset = 0
    for name, data in named.items():
        header[name] = {"shape": list(data.shape), "offset": offset}
        offset += data.nbytes
    header_bytes = json.dumps(header, sort_keys=True).encode()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(header_bytes)))
            f.write(header_bytes)
            for data in named.values():
                f.write(data.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    hstart = len(MAGIC) + 4
    header = json.loads(blob[hstart : hstart + hlen].decode())
    base = hstart + hlen
    out = {}
    for name, meta in header.items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count,
                            offset=base + meta["offset"])
        out[name] = arr.reshape(shape).copy()
    return out


def load_into(params: Dict[str, Var], path: str):
    """Load a checkpoint into an existing parameter dict, by name."""
    loaded = load_checkpoint(path)
    if set(loaded) != set(params):
        missing = set(params) - set(loaded)
        extra = set(loaded) - set(params)
        raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)}, "
                          f"unexpected {sorted(extra)}")
    for name, arr in loaded.items():
        if arr.shape != params[name].data.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} != "
                             f"parameter shape {params[name].data.shape}")
        params[name].data = arr
