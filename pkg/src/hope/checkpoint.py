"""Binary checkpoint format for trained heads.

Layout (all integers little-endian):

    b"HOPE"                      magic
    u4 version                   currently 1
    u4 n, n bytes                JSON header: head_kind, variant, cfg fields
    u4 n_blocks
    n_blocks x:
        u4 name_len, name (utf-8)
        u4 rank, rank x u4 dims
        <f4 values, row-major

Values are stored as 32-bit floats, so a 64-bit model is rounded on save.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .head import HopeConfig
from .train import build_model

MAGIC = b"HOPE"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _u4(n):
    return struct.pack("<I", n)


def save_checkpoint(model, path) -> None:
    header = {"head_kind": "linear" if model.variant is None else "hope",
              "variant": None if model.variant is None else model.variant.value,
              "cfg": model.cfg.to_dict()}
    hbytes = json.dumps(header, sort_keys=True).encode()
    blocks = list(model.named_parameters())
    with open(path, "wb") as f:
        f.write(MAGIC + _u4(VERSION) + _u4(len(hbytes)) + hbytes + _u4(len(blocks)))
        for name, t in blocks:
            nb = name.encode()
            f.write(_u4(len(nb)) + nb + _u4(t.data.ndim))
            for dim in t.data.shape:
                f.write(_u4(dim))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u4(self):
        return struct.unpack("<I", self.take(4))[0]


def read_checkpoint(path):
    """Return (header dict, {name: float32 array}) without building a model."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a HOPE checkpoint")
    version = r.u4()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(r.take(r.u4()).decode())
    arrays = {}
    for _ in range(r.u4()):
        name = r.take(r.u4()).decode()
        shape = tuple(r.u4() for _ in range(r.u4()))
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after last block")
    return header, arrays


def load_checkpoint(path, precision="f32"):
    """Rebuild the model stored at ``path``."""
    header, arrays = read_checkpoint(path)
    cfg = HopeConfig.from_dict(header["cfg"])
    model = build_model(header["head_kind"], header["variant"], cfg, precision)
    params = dict(model.named_parameters())
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise CheckpointError(f"parameter names do not match model: {missing}")
    for name, t in params.items():
        if arrays[name].shape != t.data.shape:
            raise CheckpointError(f"{name}: shape {arrays[name].shape} != {t.data.shape}")
        t.data = arrays[name].astype(t.data.dtype)
    return model
