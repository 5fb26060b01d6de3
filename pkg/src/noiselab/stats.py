"""Statistical evaluation of noise samples.

Implements the evaluation protocol used throughout: histogram KL divergence,
per-clean-value mean/variance curves, the generated/GT std ratio, PSNR/SSIM,
and the decomposition of conditional generators into signal-independent and
signal-dependent components.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ConfigError, ShapeError
from .rng import Rng

DEFAULT_BINS = 200
DEFAULT_EPS = 1e-8


@dataclass(frozen=True)
class NoiseHistogram:
    edges: np.ndarray  # (nbins+1,) uniform bin edges
    counts: np.ndarray  # (nbins,)
    total: int
    eps: float = DEFAULT_EPS

    @classmethod
    def from_samples(
        cls,
        samples,
        bins: int = DEFAULT_BINS,
        value_range: tuple[float, float] | None = None,
        eps: float = DEFAULT_EPS,
    ) -> "NoiseHistogram":
        """Histogram with uniform bins; default range spans +/- 6 sample std."""
        samples = np.asarray(samples, dtype=np.float64).ravel()
        if value_range is None:
            mu, sd = samples.mean(), samples.std()
            sd = sd if sd > 0 else 1.0
            value_range = (mu - 6.0 * sd, mu + 6.0 * sd)
        counts, edges = np.histogram(samples, bins=bins, range=value_range)
        # total counts in-range mass so the sum-to-total invariant holds even
        # when a tail sample falls outside the configured range
        return cls(edges=edges, counts=counts, total=int(counts.sum()), eps=eps)

    def probabilities(self) -> np.ndarray:
        """Epsilon-smoothed bin probabilities (sums to 1)."""
        smoothed = self.counts + self.eps
        return smoothed / smoothed.sum()


def kld(real_hist: NoiseHistogram, gen_hist: NoiseHistogram) -> float:
    """Discrete KL divergence KL(real || gen) in nats over shared bins."""
    if real_hist.edges.shape != gen_hist.edges.shape or not np.array_equal(
        real_hist.edges, gen_hist.edges
    ):
        raise ShapeError("histograms use different binning")
    p = real_hist.probabilities()
    q = gen_hist.probabilities()
    return float(np.sum(p * np.log(p / q)))


def kld_from_samples(real, gen, bins: int = DEFAULT_BINS) -> float:
    """KLD with bins fit to the real samples (the reference distribution)."""
    real_hist = NoiseHistogram.from_samples(real, bins=bins)
    gen_hist = NoiseHistogram.from_samples(
        gen, bins=bins, value_range=(real_hist.edges[0], real_hist.edges[-1])
    )
    return kld(real_hist, gen_hist)


@dataclass(frozen=True)
class CleanLevelStats:
    """Noise mean/variance gathered per quantized clean level.

    Levels with no samples are flagged via ``count == 0``; their mean/var
    entries are NaN, not zero.
    """

    levels: np.ndarray  # (M+1,) integer levels 0..M
    mean: np.ndarray
    var: np.ndarray
    count: np.ndarray

    @property
    def occupied(self) -> np.ndarray:
        return self.count > 0


def per_clean_value_stats(
    clean, noise, max_level: int = 255, step: float | None = None, offset: float = 0.0
) -> CleanLevelStats:
    """Per-clean-value noise statistics.

    ``clean`` is quantized to integer levels ``round((clean - offset)/step)``
    clipped to [0, max_level]; for each level the co-located noise pixels are
    gathered and their mean and variance computed. With ``step=None`` the
    clean values are assumed to already be integer levels.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ShapeError(f"clean {clean.shape} vs noise {noise.shape}")
    if step is not None:
        idx = np.rint((clean - offset) / step).astype(np.int64)
    else:
        idx = np.rint(clean).astype(np.int64)
    idx = np.clip(idx, 0, max_level).ravel()
    flat = noise.ravel()

    count = np.bincount(idx, minlength=max_level + 1).astype(np.int64)
    s1 = np.bincount(idx, weights=flat, minlength=max_level + 1)
    s2 = np.bincount(idx, weights=flat * flat, minlength=max_level + 1)
    mean = np.full(max_level + 1, np.nan)
    var = np.full(max_level + 1, np.nan)
    occ = count > 0
    mean[occ] = s1[occ] / count[occ]
    var[occ] = s2[occ] / count[occ] - mean[occ] ** 2
    var[occ] = np.maximum(var[occ], 0.0)
    return CleanLevelStats(
        levels=np.arange(max_level + 1), mean=mean, var=var, count=count
    )


def fit_variance_line(stats: CleanLevelStats, level_scale: float = 1.0):
    """Weighted least-squares line var = slope * level + intercept.

    ``level_scale`` converts integer levels back to physical clean units.
    Weights are the per-level sample counts.
    """
    occ = stats.occupied
    if occ.sum() < 2:
        raise ConfigError("need at least two occupied levels to fit a line")
    x = stats.levels[occ] * level_scale
    y = stats.var[occ]
    w = stats.count[occ].astype(np.float64)
    coeffs = np.polyfit(x, y, deg=1, w=np.sqrt(w))
    return float(coeffs[0]), float(coeffs[1])


def std_ratio(generated, ground_truth) -> float:
    """Empirical std(generated) / std(ground truth)."""
    generated = np.asarray(generated, dtype=np.float64).ravel()
    ground_truth = np.asarray(ground_truth, dtype=np.float64).ravel()
    gt_std = ground_truth.std()
    if gt_std == 0:
        raise ConfigError("ground-truth samples have zero std")
    return float(generated.std() / gt_std)


# -- PSNR / SSIM ---------------------------------------------------------


def psnr(pred, ref, data_range: float) -> float:
    """Peak signal-to-noise ratio in dB; inf for identical inputs."""
    if data_range <= 0:
        raise ConfigError("data_range must be positive")
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ShapeError(f"shapes {pred.shape} vs {ref.shape}")
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(ax**2) / (2.0 * sigma**2))
    return k / k.sum()


def ssim(pred, ref, data_range: float, win_size: int = 11, sigma: float = 1.5) -> float:
    """Structural similarity with an 11-tap Gaussian window.

    Accepts (H, W) or (C, H, W); channels are averaged. Windows are evaluated
    on the interior (valid) region.
    """
    if data_range <= 0:
        raise ConfigError("data_range must be positive")
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ShapeError(f"shapes {pred.shape} vs {ref.shape}")
    if pred.ndim == 2:
        pred, ref = pred[None], ref[None]

    kernel = _gaussian_kernel(win_size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def blur(img):
        out = correlate1d(img, kernel, axis=-1, mode="reflect")
        return correlate1d(out, kernel, axis=-2, mode="reflect")

    half = win_size // 2
    vals = []
    for x, y in zip(pred, ref):
        mx, my = blur(x), blur(y)
        sxx = blur(x * x) - mx * mx
        syy = blur(y * y) - my * my
        sxy = blur(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        smap = num / den
        vals.append(smap[half:-half, half:-half].mean())
    return float(np.mean(vals))


def psnr_ssim(pred, ref, data_range: float) -> tuple[float, float]:
    return psnr(pred, ref, data_range), ssim(pred, ref, data_range)


# -- Noise decomposition ---------------------------------------------------


@dataclass(frozen=True)
class NoiseDecomposition:
    full: np.ndarray
    signal_independent: np.ndarray
    signal_dependent: np.ndarray


def decompose_noise(generator, clean, coords, setting, rng: Rng) -> NoiseDecomposition:
    """Split a conditional generator's output into noise components.

    ``generator(clean, coords, setting, rng) -> noise``. The signal-independent
    part is the generator conditioned on a zero clean image with the same RNG
    stream; the signal-dependent part is the residual.
    """
    clean = np.asarray(clean, dtype=np.float64)
    full = generator(clean, coords, setting, rng)
    indep = generator(np.zeros_like(clean), coords, setting, rng)
    return NoiseDecomposition(
        full=full, signal_independent=indep, signal_dependent=full - indep
    )
