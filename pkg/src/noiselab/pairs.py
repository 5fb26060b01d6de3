"""Noise generators behind a common interface, and clean-noisy pair archives.

A generator is a callable ``(clean, coords, setting, rng) -> noise`` over a
single (C, H, W) patch with absolute (2, H, W) coordinates. Pair generation
tiles clean images, draws per-patch noise with independent derived streams,
and writes NST files plus a JSON manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffusion as dd
from .errors import ConfigError
from .fileio import NstMeta, load_nst, save_nst
from .nets import Conditioning
from .physics import CameraSetting, SyntheticCameraModel, sample_camera_noise
from .rng import Rng
from .tiling import TilingPlan


class PhysicsNoiseGenerator:
    """Draws pre-clip noise from a synthetic camera model."""

    def __init__(self, model: SyntheticCameraModel):
        self.model = model

    def __call__(self, clean, coords, setting: CameraSetting, rng: Rng):
        noise, _ = sample_camera_noise(
            clean, setting, self.model, coords, rng, clip=False
        )
        return noise


class GaussianNoiseGenerator:
    """Mismatched baseline: white Gaussian noise with a per-setting std."""

    def __init__(self, sigma_by_setting: dict[CameraSetting, float]):
        self.sigma_by_setting = dict(sigma_by_setting)

    def __call__(self, clean, coords, setting: CameraSetting, rng: Rng):
        if setting not in self.sigma_by_setting:
            raise ConfigError(f"no sigma registered for {setting}")
        return rng.normal(0.0, self.sigma_by_setting[setting], np.shape(clean))


class ZeroNoiseGenerator:
    """Stub generator for plumbing tests."""

    def __call__(self, clean, coords, setting, rng):
        return np.zeros_like(np.asarray(clean, dtype=np.float64))


class DiffusionNoiseGenerator:
    """Samples noise patches from a trained conditional diffusion model.

    Clean images are normalized to [0, 1] with the given black/white levels
    and coordinates by the sensor extent before conditioning.
    """

    def __init__(
        self,
        model: dd.DiffusionModel,
        sensor_shape: tuple[int, int, int],
        black_level: float = 0.0,
        white_level: float = 1.0,
        sampler: str = "ddim",
        steps: int = 100,
        zero_coords: bool = False,
    ):
        if sampler not in ("ddpm", "ddim"):
            raise ConfigError(f"unknown sampler {sampler!r}")
        self.model = model
        self.sensor_shape = sensor_shape
        self.black_level = black_level
        self.white_level = white_level
        self.sampler = sampler
        self.steps = steps
        self.zero_coords = zero_coords

    def conditioning(self, cleans, coords, setting: CameraSetting) -> Conditioning:
        cleans = np.asarray(cleans, dtype=np.float64)
        clean_n = (cleans - self.black_level) / (self.white_level - self.black_level)
        extent = max(self.sensor_shape[1] - 1, self.sensor_shape[2] - 1, 1)
        coords_n = np.asarray(coords, dtype=np.float64) / extent
        if self.zero_coords:
            coords_n = np.zeros_like(coords_n)
        idx = self.model.net.bank.lookup(setting)
        return Conditioning(
            clean=clean_n,
            coords=coords_n,
            setting_idx=np.full(cleans.shape[0], idx, dtype=np.int64),
        )

    def batch(self, cleans, coords, setting: CameraSetting, rng: Rng) -> np.ndarray:
        """Sample noise for a batch of patches (N, C, H, W)."""
        cleans = np.asarray(cleans, dtype=np.float64)
        cond = self.conditioning(cleans, coords, setting)
        if self.sampler == "ddpm":
            return dd.ddpm_sample(self.model, cond, cleans.shape, rng)
        return dd.ddim_sample(self.model, cond, cleans.shape, self.steps, rng)

    def __call__(self, clean, coords, setting: CameraSetting, rng: Rng):
        clean = np.asarray(clean, dtype=np.float64)
        out = self.batch(clean[None], np.asarray(coords)[None], setting, rng)
        return out[0]


# =============================================================================
# Pair archives
# =============================================================================


@dataclass(frozen=True)
class PairRecord:
    clean: str
    noisy: str
    noise: str
    iso: int
    exposure_ratio: float
    image: int
    origin: tuple[int, int]

    @property
    def setting(self) -> CameraSetting:
        return CameraSetting(iso=self.iso, exposure_ratio=self.exposure_ratio)


def generate_pairs(
    generator,
    clean_images,
    settings,
    plan: TilingPlan,
    rng: Rng,
    out_dir,
    black_level: float = 0.0,
    white_level: float = 1.0,
    clip: bool = True,
) -> Path:
    """Tile clean images, draw per-patch noise, and write the pair archive.

    Every (image, tile, setting) combination uses its own derived RNG stream,
    so archives are bit-reproducible for a fixed seed regardless of ordering.
    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for img_idx, clean in enumerate(clean_images):
        clean = np.asarray(clean, dtype=np.float64)
        for tile_idx, origin in enumerate(plan.origins):
            patch = plan.extract(clean, origin)
            coords = plan.coords_for(origin)
            for set_idx, setting in enumerate(settings):
                noise = generator(
                    patch, coords, setting, rng.derive(img_idx, tile_idx, set_idx)
                )
                noisy = patch + noise
                if clip:
                    noisy = np.clip(noisy, black_level, white_level)
                stem = f"i{img_idx:03d}_t{tile_idx:03d}_s{set_idx}"
                meta = dict(
                    iso=setting.iso,
                    exposure_ratio=setting.exposure_ratio,
                    black_level=black_level,
                    white_level=white_level,
                )
                save_nst(out_dir / f"{stem}_clean.nst", patch, NstMeta(kind="clean", **meta))
                save_nst(out_dir / f"{stem}_noisy.nst", noisy, NstMeta(kind="noisy", **meta))
                save_nst(out_dir / f"{stem}_noise.nst", noise, NstMeta(kind="noise", **meta))
                records.append(
                    dict(
                        clean=f"{stem}_clean.nst",
                        noisy=f"{stem}_noisy.nst",
                        noise=f"{stem}_noise.nst",
                        iso=setting.iso,
                        exposure_ratio=setting.exposure_ratio,
                        image=img_idx,
                        origin=list(origin),
                    )
                )
    manifest = {
        "count": len(records),
        "patch": plan.patch,
        "image_shape": [plan.image_h, plan.image_w],
        "black_level": black_level,
        "white_level": white_level,
        "pairs": records,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path


def load_manifest(manifest_path) -> list[PairRecord]:
    manifest_path = Path(manifest_path)
    data = json.loads(manifest_path.read_text())
    return [
        PairRecord(
            clean=r["clean"],
            noisy=r["noisy"],
            noise=r["noise"],
            iso=r["iso"],
            exposure_ratio=r["exposure_ratio"],
            image=r["image"],
            origin=tuple(r["origin"]),
        )
        for r in data["pairs"]
    ]


def load_pair_arrays(manifest_path, records=None):
    """Load (clean, noisy) float64 arrays for the given records."""
    base = Path(manifest_path).parent
    if records is None:
        records = load_manifest(manifest_path)
    out = []
    for r in records:
        clean, _ = load_nst(base / r.clean)
        noisy, _ = load_nst(base / r.noisy)
        out.append((clean.astype(np.float64), noisy.astype(np.float64), r.setting))
    return out


def resample_for_balance(records, min_count: int = 100):
    """Repeat under-represented camera settings up to ``min_count`` entries.

    Entries repeat cyclically, so every original appears either
    floor(min_count / n) or ceil(min_count / n) times. Groups at or above the
    floor are returned unchanged.
    """
    groups: dict[tuple, list] = {}
    for r in records:
        key = (r.iso, r.exposure_ratio) if isinstance(r, PairRecord) else (
            r["iso"],
            r["exposure_ratio"],
        )
        groups.setdefault(key, []).append(r)
    out = []
    for key, group in sorted(groups.items()):
        if not group:
            raise ConfigError(f"empty group for setting {key}")
        if len(group) >= min_count:
            out.extend(group)
        else:
            out.extend(group[i % len(group)] for i in range(min_count))
    return out
