"""NDCK checkpoint files.

Binary layout (little endian):
    magic "NDCK" | version u16 | count u32 | count x record
    record: name_len u16 | name utf-8 | ndim u8 | dims u32 x ndim | f32 payload

Values are stored as float32; the payload round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .errors import ConfigError

MAGIC = b"NDCK"
VERSION = 1


def save_checkpoint(path, params: "OrderedDict[str, np.ndarray] | dict") -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(params)))
        for name, arr in params.items():
            arr32 = np.ascontiguousarray(arr, dtype=np.float32)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr32.ndim))
            f.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
            f.write(arr32.astype("<f4").tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ConfigError(f"{path}: not an NDCK checkpoint")
        version, count = struct.unpack("<HI", f.read(6))
        if version != VERSION:
            raise ConfigError(f"{path}: unsupported NDCK version {version}")
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            n = int(np.prod(dims)) if dims else 1
            payload = f.read(4 * n)
            if len(payload) != 4 * n:
                raise ConfigError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        return out
