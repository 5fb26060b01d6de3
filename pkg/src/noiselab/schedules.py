"""Diffusion noise schedules and the DDPM coefficient algebra.

A schedule is a table of per-step corruption rates beta_t with the derived
alpha_t = 1 - beta_t and the cumulative product alpha_bar. The quantity that
drives everything downstream is the injected-noise coefficient
c_t = sqrt(1 - alpha_bar_t): schedules in the sigmoid family keep c_t flat
near t=0, which preserves the variance of the generated samples at the end of
the reverse process.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

# Logistic parameterization (steepness a, midpoint m) of the noise
# coefficient c(u) over u = t/T, rescaled to hit 0 at u=0 and 1 at u=1.
# Steepness grows 1 -> 3, so the curve gets flatter near u=0.
SIGMOID_PARAMS = {
    "sigmoid1": (6.0, 0.5),
    "sigmoid2": (10.0, 0.6),
    "sigmoid3": (14.0, 0.65),
}

SCHEDULE_NAMES = ("cosine", "sigmoid1", "sigmoid2", "sigmoid3", "linear")

BETA_MIN = 1e-8
BETA_MAX = 0.999


@dataclass(frozen=True)
class Schedule:
    """Immutable beta/alpha/alpha_bar tables for one named scheme.

    ``beta`` has length T (index t-1 holds beta_t); ``alpha_bar`` has length
    T+1 with alpha_bar[0] = 1, so alpha_bar[t] is the cumulative product
    through step t.
    """

    name: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        alpha = 1.0 - self.beta
        alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        self.beta.setflags(write=False)
        alpha.setflags(write=False)
        alpha_bar.setflags(write=False)

    def noise_coefficient(self) -> np.ndarray:
        """c_t = sqrt(1 - alpha_bar_t) for t = 0..T."""
        return np.sqrt(1.0 - self.alpha_bar)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _target_alpha_bar(name: str, T: int) -> np.ndarray:
    """Raw alpha_bar curve for t = 0..T before beta clamping."""
    t = np.arange(T + 1, dtype=np.float64)
    u = t / T
    if name == "cosine":
        s = 0.008
        f = np.cos((u + s) / (1.0 + s) * np.pi / 2.0) ** 2
        return f / f[0]
    if name in SIGMOID_PARAMS:
        a, m = SIGMOID_PARAMS[name]
        lo, hi = _sigmoid(-a * m), _sigmoid(a * (1.0 - m))
        c = (_sigmoid(a * (u - m)) - lo) / (hi - lo)
        return 1.0 - c**2
    if name == "linear":
        beta = np.linspace(1e-4, 0.02, T)
        return np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    raise ConfigError(f"unknown schedule {name!r}; known: {SCHEDULE_NAMES}")


def build_schedule(name: str, T: int) -> Schedule:
    """Build the named schedule with T steps.

    beta_t is recovered from the raw alpha_bar curve via
    beta_t = 1 - alpha_bar_t / alpha_bar_{t-1}, clamped to [1e-8, 0.999];
    alpha_bar is then recomputed from the clamped betas so the cumulative
    product identity holds exactly.
    """
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    ab = _target_alpha_bar(name, T)
    beta = 1.0 - ab[1:] / ab[:-1]
    beta = np.clip(beta, BETA_MIN, BETA_MAX)
    return Schedule(name=name, T=T, beta=beta)


@dataclass(frozen=True)
class DdpmCoefficients:
    """Per-step constants of the DDPM forward/reverse processes.

    The reverse mean is ``mean_coef_x * x_t - mean_coef_eps * eps_hat`` and
    the reverse step adds Gaussian noise of variance ``posterior_variance``.
    """

    t: int
    sqrt_alpha_bar: float
    sqrt_one_minus_alpha_bar: float
    posterior_variance: float
    mean_coef_x: float
    mean_coef_eps: float


def ddpm_coefficients(s: Schedule, t: int) -> DdpmCoefficients:
    if not 1 <= t <= s.T:
        raise ConfigError(f"timestep {t} outside [1, {s.T}]")
    ab_t = s.alpha_bar[t]
    ab_prev = s.alpha_bar[t - 1]
    beta_t = s.beta[t - 1]
    alpha_t = s.alpha[t - 1]
    one_minus = 1.0 - ab_t
    return DdpmCoefficients(
        t=t,
        sqrt_alpha_bar=float(np.sqrt(ab_t)),
        sqrt_one_minus_alpha_bar=float(np.sqrt(one_minus)),
        posterior_variance=float((1.0 - ab_prev) / one_minus * beta_t),
        mean_coef_x=float(1.0 / np.sqrt(alpha_t)),
        mean_coef_eps=float(beta_t / (np.sqrt(one_minus) * np.sqrt(alpha_t))),
    )


def dump_csv(s: Schedule, fileobj) -> None:
    """Write (t, beta, alpha_bar, c_t) rows for plotting."""
    writer = csv.writer(fileobj)
    writer.writerow(["t", "beta", "alpha_bar", "c_t"])
    c = s.noise_coefficient()
    writer.writerow([0, "", f"{s.alpha_bar[0]:.12g}", f"{c[0]:.12g}"])
    for t in range(1, s.T + 1):
        writer.writerow(
            [t, f"{s.beta[t-1]:.12g}", f"{s.alpha_bar[t]:.12g}", f"{c[t]:.12g}"]
        )
