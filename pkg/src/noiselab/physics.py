"""Physics-based sensor noise models.

The core model is Poisson-Gaussian: the observed signal is
``g * alpha * Poisson(u*) + N(0, sigma^2)`` with ``sigma^2 = g^2 sd^2 + sr^2``,
so the noise (deviation from the ideal signal ``g * alpha * u*``) has zero
mean and variance ``g^2 alpha^2 u* + sigma^2`` -- linear in the expected
photon count.

``SyntheticCameraModel`` composes that core with heavier-tailed read noise
(Tukey-Lambda), shared per-row offsets (banding) and a deterministic
fixed-pattern map keyed by absolute sensor coordinates. It is the ground-truth
distribution against which generated noise is evaluated.

All composite sampling happens in the exposure-scaled domain: a short-exposure
capture multiplied by the exposure ratio. For a ratio R the shot-noise
variance against the scaled clean level is R*g*alpha*signal and the
signal-independent variance picks up a factor R^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import Rng

# Derived-substream keys; fixed so degenerate composites reproduce the plain
# Poisson-Gaussian sampler bit for bit.
_SHOT, _READ, _ROW = 0, 1, 2


@dataclass(frozen=True)
class CameraSetting:
    """ISO and exposure ratio; hashable so embedding lookups are stable."""

    iso: int
    exposure_ratio: float

    def __post_init__(self):
        if self.iso <= 0 or self.exposure_ratio <= 0:
            raise ConfigError(f"invalid camera setting {self}")


@dataclass(frozen=True)
class PhysicsNoiseParams:
    """Poisson-Gaussian parameters at a reference gain."""

    g: float  # system gain (ISO scaling)
    alpha_qe: float  # quantum efficiency in (0, 1]
    sigma_d: float  # dark-current std (pre-gain)
    sigma_r: float  # read std (post-gain)

    def __post_init__(self):
        if self.g <= 0 or not 0 < self.alpha_qe <= 1:
            raise ConfigError(f"invalid gain/QE in {self}")
        if self.sigma_d < 0 or self.sigma_r < 0:
            raise ConfigError(f"negative noise std in {self}")

    @property
    def sigma2(self) -> float:
        """Total signal-independent Gaussian variance g^2 sd^2 + sr^2."""
        return self.g**2 * self.sigma_d**2 + self.sigma_r**2


@dataclass(frozen=True)
class TukeyLambdaParams:
    lambda_shape: float = 0.1
    mu: float = 0.0
    sigma_scale: float = 1.0

    def __post_init__(self):
        if self.sigma_scale <= 0:
            raise ConfigError("tukey-lambda scale must be positive")


def tukey_lambda_quantile(p, lambda_shape: float):
    """Inverse CDF of the unit-scale Tukey-Lambda distribution.

    Q(p) = (p^l - (1-p)^l) / l, with the logistic limit log(p/(1-p)) at l=0.
    """
    p = np.asarray(p, dtype=np.float64)
    if lambda_shape == 0.0:
        return np.log(p / (1.0 - p))
    return (p**lambda_shape - (1.0 - p) ** lambda_shape) / lambda_shape


def tukey_lambda_variance(lambda_shape: float) -> float:
    """Closed-form variance of the unit-scale distribution (lambda > -1/2)."""
    lam = lambda_shape
    if lam <= -0.5:
        raise ConfigError("variance undefined for lambda <= -1/2")
    if lam == 0.0:
        return math.pi**2 / 3.0
    return (2.0 / lam**2) * (
        1.0 / (1.0 + 2.0 * lam)
        - math.gamma(lam + 1.0) ** 2 / math.gamma(2.0 * lam + 2.0)
    )


def sample_tukey_lambda(params: TukeyLambdaParams, shape, rng: Rng) -> np.ndarray:
    """I.i.d. draws via inverse-transform sampling of uniform(0,1)."""
    u = rng.uniform(size=shape)
    return params.mu + params.sigma_scale * tukey_lambda_quantile(
        u, params.lambda_shape
    )


def sample_poisson_gaussian(clean, p: PhysicsNoiseParams, rng: Rng) -> np.ndarray:
    """Noise draw of the core model given expected photon counts ``clean``.

    Returns g*alpha*(Poisson(clean) - clean) + N(0, sigma^2), elementwise
    independent and zero-mean with variance g^2 alpha^2 clean + sigma^2.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if np.any(clean < 0):
        raise ValueError("expected photon counts must be non-negative")
    ga = p.g * p.alpha_qe
    shot = ga * (rng.derive(_SHOT).poisson(clean).astype(np.float64) - clean)
    read = rng.derive(_READ).normal(0.0, math.sqrt(p.sigma2), size=clean.shape)
    return shot + read


@dataclass(frozen=True)
class FixedPatternConfig:
    """Deterministic per-pixel offset structure.

    A smooth ramp concentrated at the sensor bottom (low-frequency offset)
    modulated slowly along columns, plus per-column micro-offsets drawn once
    from ``pattern_seed``. Amplitudes are per-channel via ``channel_factors``
    and scale linearly with exposure ratio.
    """

    ramp_amplitude: float = 0.0
    ramp_power: float = 4.0
    col_mod_depth: float = 0.3
    col_sigma: float = 0.0
    channel_factors: tuple[float, ...] = (1.0,)
    pattern_seed: int = 0


@dataclass(frozen=True)
class SyntheticCameraModel:
    """Composite synthetic camera used as ground-truth oracle.

    ``params`` holds the Poisson-Gaussian core at ``iso_ref``; the effective
    gain scales linearly with ISO. ``row_band_sigma`` and the fixed pattern
    are expressed in the scaled domain at ``ratio_ref`` and scale linearly
    with the exposure ratio.
    """

    params: PhysicsNoiseParams
    sensor_shape: tuple[int, int, int]  # (channels, height, width)
    read_noise_kind: str = "gaussian"
    tukey: TukeyLambdaParams | None = None
    row_band_sigma: float = 0.0
    fixed_pattern: FixedPatternConfig = field(default_factory=FixedPatternConfig)
    black_level: float = 0.0
    white_level: float = 1.0
    iso_ref: int = 100
    ratio_ref: float = 1.0

    def __post_init__(self):
        if self.read_noise_kind not in ("gaussian", "tukey_lambda"):
            raise ConfigError(f"unknown read noise kind {self.read_noise_kind!r}")
        if self.read_noise_kind == "tukey_lambda" and self.tukey is None:
            raise ConfigError("tukey_lambda read noise needs TukeyLambdaParams")
        if len(self.fixed_pattern.channel_factors) != self.sensor_shape[0]:
            raise ConfigError(
                "fixed_pattern.channel_factors must match sensor channel count"
            )

    # -- derived quantities ----------------------------------------------

    def effective_params(self, setting: CameraSetting) -> PhysicsNoiseParams:
        return PhysicsNoiseParams(
            g=self.params.g * setting.iso / self.iso_ref,
            alpha_qe=self.params.alpha_qe,
            sigma_d=self.params.sigma_d,
            sigma_r=self.params.sigma_r,
        )

    def shot_slope(self, setting: CameraSetting) -> float:
        """Slope of noise variance vs scaled clean signal: R * g_eff * alpha."""
        p = self.effective_params(setting)
        return setting.exposure_ratio * p.g * p.alpha_qe

    def signal_independent_variance(self, setting: CameraSetting) -> float:
        """Per-pixel variance of the random signal-independent components."""
        p = self.effective_params(setting)
        r = setting.exposure_ratio
        if self.read_noise_kind == "gaussian":
            var = r**2 * p.sigma2
        else:
            tl_var = self.tukey.sigma_scale**2 * tukey_lambda_variance(
                self.tukey.lambda_shape
            )
            var = r**2 * (p.g**2 * p.sigma_d**2 + tl_var)
        var += (self.row_band_sigma * r / self.ratio_ref) ** 2
        return var

    def _col_offsets(self) -> np.ndarray:
        fp = self.fixed_pattern
        width = self.sensor_shape[2]
        return Rng(fp.pattern_seed, 0).normal(0.0, 1.0, size=width) * fp.col_sigma

    def fixed_pattern_at(self, coords, setting: CameraSetting) -> np.ndarray:
        """Deterministic offset map for absolute ``coords`` (2, H, W)."""
        coords = np.asarray(coords)
        if coords.ndim != 3 or coords.shape[0] != 2:
            raise ShapeError(f"coords must be (2, H, W), got {coords.shape}")
        fp = self.fixed_pattern
        nchan, sensor_h, sensor_w = self.sensor_shape
        rows = coords[0].astype(np.int64)
        cols = coords[1].astype(np.int64)
        if rows.max() >= sensor_h or cols.max() >= sensor_w:
            raise ShapeError("coords exceed the sensor extent")
        u = rows / max(sensor_h - 1, 1)
        ramp = fp.ramp_amplitude * u**fp.ramp_power
        colmod = 1.0 + fp.col_mod_depth * np.sin(2.0 * np.pi * cols / sensor_w)
        base = ramp * colmod + self._col_offsets()[cols]
        scale = setting.exposure_ratio / self.ratio_ref
        factors = np.asarray(fp.channel_factors)[:, None, None]
        return factors * base[None, :, :] * scale

    # -- config round trip -------------------------------------------------

    def to_config(self) -> dict:
        cfg = {
            "g": self.params.g,
            "alpha_qe": self.params.alpha_qe,
            "sigma_d": self.params.sigma_d,
            "sigma_r": self.params.sigma_r,
            "sensor_shape": list(self.sensor_shape),
            "read_noise_kind": self.read_noise_kind,
            "row_band_sigma": self.row_band_sigma,
            "black_level": self.black_level,
            "white_level": self.white_level,
            "iso_ref": self.iso_ref,
            "ratio_ref": self.ratio_ref,
            "fixed_pattern": {
                "ramp_amplitude": self.fixed_pattern.ramp_amplitude,
                "ramp_power": self.fixed_pattern.ramp_power,
                "col_mod_depth": self.fixed_pattern.col_mod_depth,
                "col_sigma": self.fixed_pattern.col_sigma,
                "channel_factors": list(self.fixed_pattern.channel_factors),
                "pattern_seed": self.fixed_pattern.pattern_seed,
            },
        }
        if self.tukey is not None:
            cfg["tukey"] = {
                "lambda_shape": self.tukey.lambda_shape,
                "mu": self.tukey.mu,
                "sigma_scale": self.tukey.sigma_scale,
            }
        return cfg

    @classmethod
    def from_config(cls, cfg: dict) -> "SyntheticCameraModel":
        try:
            fp = cfg.get("fixed_pattern", {})
            tukey = cfg.get("tukey")
            return cls(
                params=PhysicsNoiseParams(
                    g=cfg["g"],
                    alpha_qe=cfg["alpha_qe"],
                    sigma_d=cfg["sigma_d"],
                    sigma_r=cfg["sigma_r"],
                ),
                sensor_shape=tuple(cfg["sensor_shape"]),
                read_noise_kind=cfg.get("read_noise_kind", "gaussian"),
                tukey=TukeyLambdaParams(**tukey) if tukey else None,
                row_band_sigma=cfg.get("row_band_sigma", 0.0),
                fixed_pattern=FixedPatternConfig(
                    ramp_amplitude=fp.get("ramp_amplitude", 0.0),
                    ramp_power=fp.get("ramp_power", 4.0),
                    col_mod_depth=fp.get("col_mod_depth", 0.3),
                    col_sigma=fp.get("col_sigma", 0.0),
                    channel_factors=tuple(fp.get("channel_factors", (1.0,))),
                    pattern_seed=fp.get("pattern_seed", 0),
                ),
                black_level=cfg.get("black_level", 0.0),
                white_level=cfg.get("white_level", 1.0),
                iso_ref=cfg.get("iso_ref", 100),
                ratio_ref=cfg.get("ratio_ref", 1.0),
            )
        except KeyError as exc:
            raise ConfigError(f"camera config missing field {exc}") from exc


def sample_camera_noise(
    clean,
    setting: CameraSetting,
    model: SyntheticCameraModel,
    coords,
    rng: Rng,
    clip: bool = True,
):
    """Composite noise draw in the scaled domain.

    ``clean`` is a (C, H, W) scaled clean image within
    [black_level, white_level]; ``coords`` are absolute (2, H, W) pixel
    coordinates. Returns ``(noise, noisy)`` where ``noise`` is pre-clip and
    ``noisy = clip(clean + noise)`` (unclipped when ``clip`` is False).

    Component streams are derived from ``rng`` independently (shot, read,
    row), so conditioning on a zero clean image reproduces exactly the
    signal-independent components of the full draw.
    """
    clean = np.asarray(clean, dtype=np.float64)
    coords = np.asarray(coords)
    if clean.ndim != 3 or clean.shape[0] != model.sensor_shape[0]:
        raise ShapeError(
            f"clean must be (C, H, W) with C={model.sensor_shape[0]}, got {clean.shape}"
        )
    if coords.shape != (2,) + clean.shape[1:]:
        raise ShapeError(
            f"coords shape {coords.shape} does not match clean {clean.shape}"
        )
    if np.any(clean < model.black_level - 1e-9) or np.any(
        clean > model.white_level + 1e-9
    ):
        raise ValueError("clean values outside [black_level, white_level]")

    p = model.effective_params(setting)
    r = setting.exposure_ratio
    ga = p.g * p.alpha_qe

    # Shot noise: Poisson on short-exposure photon counts, scaled back up.
    u_short = (clean - model.black_level) / (ga * r)
    shot = r * ga * (rng.derive(_SHOT).poisson(u_short).astype(np.float64) - u_short)

    # Signal-independent random part.
    read_rng = rng.derive(_READ)
    if model.read_noise_kind == "gaussian":
        read = r * read_rng.normal(0.0, math.sqrt(p.sigma2), size=clean.shape)
    else:
        dark = read_rng.normal(0.0, p.g * p.sigma_d, size=clean.shape)
        tl = sample_tukey_lambda(model.tukey, clean.shape, read_rng.derive(1))
        read = r * (dark + tl)

    noise = shot + read

    if model.row_band_sigma > 0:
        row_sigma = model.row_band_sigma * r / model.ratio_ref
        rows = rng.derive(_ROW).normal(
            0.0, row_sigma, size=(clean.shape[0], clean.shape[1], 1)
        )
        noise = noise + rows

    fp = model.fixed_pattern_at(coords, setting)
    noise = noise + fp

    noisy = clean + noise
    if clip:
        noisy = np.clip(noisy, model.black_level, model.white_level)
    return noise, noisy


def sample_dark_frames(
    model: SyntheticCameraModel, setting: CameraSetting, count: int, rng: Rng
) -> np.ndarray:
    """Unclipped dark frames: black level plus signal-independent noise."""
    c, h, w = model.sensor_shape
    clean = np.full((c, h, w), model.black_level)
    coords = np.stack(np.meshgrid(np.arange(h), np.arange(w), indexing="ij"))
    frames = np.empty((count, c, h, w))
    for i in range(count):
        noise, _ = sample_camera_noise(
            clean, setting, model, coords, rng.derive(i), clip=False
        )
        frames[i] = model.black_level + noise
    return frames


def compute_dark_shading(dark_frames) -> np.ndarray:
    """Elementwise mean over a stack of dark frames (N, ...)."""
    dark_frames = np.asarray(dark_frames, dtype=np.float64)
    if dark_frames.ndim < 2 or dark_frames.shape[0] < 1:
        raise ValueError("need at least one dark frame")
    return dark_frames.mean(axis=0)


def dark_shading_correct(noisy, shading) -> np.ndarray:
    noisy = np.asarray(noisy, dtype=np.float64)
    shading = np.asarray(shading, dtype=np.float64)
    if noisy.shape != shading.shape:
        raise ShapeError(f"shapes {noisy.shape} vs {shading.shape} differ")
    return noisy - shading


def shot_noise_augment(clean, noisy, delta: float, gain: float, rng: Rng):
    """Shot-noise augmentation of a clean-noisy pair.

    The pair is darkened to ``delta * clean`` and a mean-removed Poisson
    increment of variance ``gain * Delta`` (with ``Delta = (1-delta) * clean``
    the clean signal decrement and ``gain`` the DN-per-photon factor
    g*alpha) is added to the noisy image. The pair mean offset
    E[noisy' - clean'] equals E[noisy - clean] while the shot-noise power
    grows by ``gain * Delta`` elementwise.
    """
    if not 0 < delta <= 1:
        raise ConfigError(f"delta must be in (0, 1], got {delta}")
    if gain <= 0:
        raise ConfigError("gain must be positive")
    clean = np.asarray(clean, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    if np.any(clean < 0):
        raise ValueError("clean must be non-negative")
    if clean.shape != noisy.shape:
        raise ShapeError(f"shapes {clean.shape} vs {noisy.shape} differ")
    dec = (1.0 - delta) * clean
    increment = gain * rng.poisson(dec / gain).astype(np.float64) - dec
    return delta * clean, noisy - dec + increment
