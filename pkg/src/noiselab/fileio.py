"""NST tensor files: a minimal binary array format with a JSON sidecar.

Binary layout (little endian):
    magic "NST1" | version u16 | dtype u8 (1 = f32 LE) | ndim u8 | dims u32 x ndim | payload

The sidecar ``<path>.json`` carries acquisition metadata. Payloads are stored
as float32 and round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"NST1"
VERSION = 1
DTYPE_F32 = 1

KINDS = ("clean", "noisy", "noise", "dark")


@dataclass
class NstMeta:
    iso: int = 0
    exposure_ratio: float = 0.0
    black_level: float = 0.0
    white_level: float = 1.0
    kind: str = "clean"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")


def save_nst(path, array, meta: NstMeta) -> None:
    path = Path(path)
    arr32 = np.ascontiguousarray(array, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HBB", VERSION, DTYPE_F32, arr32.ndim))
        f.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
        f.write(arr32.astype("<f4").tobytes())
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(asdict(meta)))


def load_nst(path) -> tuple[np.ndarray, NstMeta]:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ConfigError(f"{path}: not an NST tensor file")
        version, dtype, ndim = struct.unpack("<HBB", f.read(4))
        if version != VERSION:
            raise ConfigError(f"{path}: unsupported NST version {version}")
        if dtype != DTYPE_F32:
            raise ConfigError(f"{path}: unsupported dtype code {dtype}")
        dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
        n = int(np.prod(dims)) if dims else 1
        payload = f.read(4 * n)
        if len(payload) != 4 * n:
            raise ConfigError(f"{path}: payload length mismatch")
        array = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    sidecar = path.with_suffix(path.suffix + ".json")
    if sidecar.exists():
        meta = NstMeta(**json.loads(sidecar.read_text()))
    else:
        meta = NstMeta()
    return array, meta
