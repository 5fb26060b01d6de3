"""Bayer packing and overlapping patch tiling with absolute coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError


def pack_bayer(raw) -> np.ndarray:
    """Pack an (H, W) mosaic into four phase channels (4, H/2, W/2)."""
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ShapeError(f"expected a 2D mosaic, got shape {raw.shape}")
    h, w = raw.shape
    if h % 2 or w % 2:
        raise ShapeError(f"mosaic dims must be even, got {raw.shape}")
    return np.stack(
        [raw[0::2, 0::2], raw[0::2, 1::2], raw[1::2, 0::2], raw[1::2, 1::2]]
    )


def unpack_bayer(packed) -> np.ndarray:
    """Inverse of pack_bayer; exact round trip."""
    packed = np.asarray(packed)
    if packed.ndim != 3 or packed.shape[0] != 4:
        raise ShapeError(f"expected (4, H/2, W/2), got {packed.shape}")
    _, hh, hw = packed.shape
    raw = np.empty((hh * 2, hw * 2), dtype=packed.dtype)
    raw[0::2, 0::2] = packed[0]
    raw[0::2, 1::2] = packed[1]
    raw[1::2, 0::2] = packed[2]
    raw[1::2, 1::2] = packed[3]
    return raw


def _axis_origins(extent: int, patch: int, stride: int) -> list[int]:
    origins = []
    pos = 0
    while pos + patch <= extent:
        origins.append(pos)
        pos += stride
    last = extent - patch
    if origins[-1] != last:
        origins.append(last)
    return origins


@dataclass(frozen=True)
class TilingPlan:
    """Overlapping patch layout over an (H, W) image.

    Origins step by ``stride = round(P * (1 - overlap))``; the final origin on
    each axis is clamped so the last patch ends exactly at the border. Every
    pixel is covered by at least one patch.
    """

    image_h: int
    image_w: int
    patch: int
    overlap: float
    row_origins: tuple[int, ...]
    col_origins: tuple[int, ...]

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.row_origins for c in self.col_origins]

    def __len__(self) -> int:
        return len(self.row_origins) * len(self.col_origins)

    def coords_for(self, origin: tuple[int, int]) -> np.ndarray:
        """Absolute (row, col) coordinate map (2, P, P) for one patch."""
        r, c = origin
        rows = np.arange(r, r + self.patch)
        cols = np.arange(c, c + self.patch)
        return np.stack(np.meshgrid(rows, cols, indexing="ij"))

    def extract(self, image, origin: tuple[int, int]) -> np.ndarray:
        r, c = origin
        return np.asarray(image)[..., r : r + self.patch, c : c + self.patch]


def plan_tiles(h: int, w: int, patch: int, overlap: float) -> TilingPlan:
    if patch > min(h, w):
        raise ConfigError(f"patch {patch} exceeds image dims ({h}, {w})")
    if not 0 <= overlap < 1:
        raise ConfigError(f"overlap must be in [0, 1), got {overlap}")
    stride = max(1, round(patch * (1.0 - overlap)))
    return TilingPlan(
        image_h=h,
        image_w=w,
        patch=patch,
        overlap=overlap,
        row_origins=tuple(_axis_origins(h, patch, stride)),
        col_origins=tuple(_axis_origins(w, patch, stride)),
    )


def full_coords(h: int, w: int) -> np.ndarray:
    """Absolute coordinate map (2, H, W) for a whole sensor."""
    return np.stack(np.meshgrid(np.arange(h), np.arange(w), indexing="ij"))


def stitch(patches, plan: TilingPlan, channels: int) -> np.ndarray:
    """Reassemble patches into a full image, first writer wins on overlaps."""
    out = np.full((channels, plan.image_h, plan.image_w), np.nan)
    for patch, (r, c) in zip(patches, plan.origins):
        region = out[:, r : r + plan.patch, c : c + plan.patch]
        mask = np.isnan(region)
        region[mask] = np.asarray(patch)[mask]
    return out
