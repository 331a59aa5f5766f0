"""Binary checkpoint format.

Layout (little-endian)::

    b"TCLR" | version u32 | json_len u32 | json bytes (config snapshot)
    | n_tensors u32
    | per tensor: name_len u32 | name utf-8 | ndim u32 | dims u32 * ndim | float32 payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .autograd import Tensor
from .model import ModelConfig, ModelParams

MAGIC = b"TCLR"
VERSION = 1


def save_checkpoint(path, params: ModelParams, snapshot: dict | None = None):
    meta = {"model": params.config.to_dict(), "snapshot": snapshot or {}}
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(params.tensors))]
    for name, t in params.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{t.data.ndim}I", t.data.ndim, *t.data.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Returns ``(params, snapshot)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, jlen = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        meta = json.loads(raw[off : off + jlen])
        off += jlen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape))
            data = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            tensors[name] = Tensor(data.astype(np.float32), requires_grad=True)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return ModelParams(ModelConfig.from_dict(meta["model"]), tensors), meta.get("snapshot", {})
