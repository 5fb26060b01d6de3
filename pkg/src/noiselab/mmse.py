"""MMSE denoising analytics: posterior, estimator, and output variance.

For a signal u with prior variance s2^2 observed through v = u + e,
e ~ N(0, s1^2), the MSE-optimal denoiser is the posterior mean and its output
variance is s2^4 / (s2^2 + s1^2) -- strictly smaller than the prior variance
whenever s1 > 0. The same shrinkage holds under Gaussian-mixture priors, where
the output variance is computed by Gauss-Hermite quadrature over v.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, roots_hermite

from .errors import ConfigError
from .rng import Rng

GH_NODES = 200


@dataclass(frozen=True)
class GaussianPrior:
    lam: float
    sigma2: float  # standard deviation of the prior

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ConfigError("prior std must be non-negative")

    def variance(self) -> float:
        return self.sigma2**2

    def mean(self) -> float:
        return self.lam

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        return rng.normal(self.lam, self.sigma2, size=n)


@dataclass(frozen=True)
class GmmPrior:
    weights: tuple[float, ...]
    means: tuple[float, ...]
    stds: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w <= 0):
            raise ConfigError("mixture weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError(f"mixture weights sum to {w.sum()}, expected 1")
        if len(self.weights) != len(self.means) or len(self.means) != len(self.stds):
            raise ConfigError("mixture component lists must have equal length")

    def mean(self) -> float:
        w, m = np.asarray(self.weights), np.asarray(self.means)
        return float(np.sum(w * m))

    def variance(self) -> float:
        w = np.asarray(self.weights)
        m = np.asarray(self.means)
        s = np.asarray(self.stds)
        mu = np.sum(w * m)
        return float(np.sum(w * (s**2 + (m - mu) ** 2)))

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        comp = rng.derive(0).generator().choice(
            len(self.weights), size=n, p=np.asarray(self.weights)
        )
        m = np.asarray(self.means)[comp]
        s = np.asarray(self.stds)[comp]
        return m + s * rng.derive(1).standard_normal(n)


@dataclass(frozen=True)
class MmseSetup:
    prior: GaussianPrior | GmmPrior
    sigma1: float  # measurement noise standard deviation

    def __post_init__(self):
        if self.sigma1 < 0:
            raise ConfigError("measurement noise std must be non-negative")


@dataclass(frozen=True)
class GaussianPosterior:
    mean: np.ndarray
    variance: float


@dataclass(frozen=True)
class MixturePosterior:
    weights: np.ndarray  # (..., K) posterior weights pi_k(v)
    means: np.ndarray  # (..., K)
    variances: np.ndarray  # (K,)

    @property
    def mean(self) -> np.ndarray:
        return np.sum(self.weights * self.means, axis=-1)

    @property
    def variance(self) -> np.ndarray:
        mu = self.mean[..., None]
        return np.sum(
            self.weights * (self.variances + (self.means - mu) ** 2), axis=-1
        )


def posterior(setup: MmseSetup, v):
    """Posterior distribution of u given the measurement(s) v."""
    v = np.asarray(v, dtype=np.float64)
    s1sq = setup.sigma1**2
    if isinstance(setup.prior, GaussianPrior):
        lam, s2sq = setup.prior.lam, setup.prior.sigma2**2
        if s1sq == 0.0:
            return GaussianPosterior(mean=v.copy(), variance=0.0)
        k = s2sq / (s2sq + s1sq)
        return GaussianPosterior(mean=lam + k * (v - lam), variance=s2sq * s1sq / (s2sq + s1sq))

    w = np.asarray(setup.prior.weights)
    mu = np.asarray(setup.prior.means)
    tau_sq = np.asarray(setup.prior.stds) ** 2
    if s1sq == 0.0:
        # Noiseless limit: point mass at v in every component.
        ones = np.broadcast_to(w, v.shape + w.shape).copy()
        means = np.broadcast_to(v[..., None], v.shape + w.shape).copy()
        return MixturePosterior(weights=ones, means=means, variances=np.zeros_like(tau_sq))
    evid_var = tau_sq + s1sq
    log_w = (
        np.log(w)
        - 0.5 * np.log(2.0 * np.pi * evid_var)
        - 0.5 * (v[..., None] - mu) ** 2 / evid_var
    )
    log_w = log_w - logsumexp(log_w, axis=-1, keepdims=True)
    k = tau_sq / evid_var
    comp_means = mu + k * (v[..., None] - mu)
    comp_vars = tau_sq * s1sq / evid_var
    return MixturePosterior(weights=np.exp(log_w), means=comp_means, variances=comp_vars)


def mmse_estimator(setup: MmseSetup, v):
    """Posterior mean E[u | v]; vectorized over v."""
    post = posterior(setup, v)
    return post.mean


def mmse_output_variance(setup: MmseSetup, n_nodes: int = GH_NODES) -> float:
    """Variance of the MMSE estimate over the measurement distribution.

    Gaussian prior: closed form s2^4 / (s2^2 + s1^2). GMM prior:
    Gauss-Hermite quadrature of Var_V(E[u|V]) with ``n_nodes`` nodes per
    mixture component of the evidence distribution.
    """
    s1sq = setup.sigma1**2
    if isinstance(setup.prior, GaussianPrior):
        s2sq = setup.prior.sigma2**2
        if s2sq == 0.0:
            return 0.0
        return s2sq**2 / (s2sq + s1sq)

    w = np.asarray(setup.prior.weights)
    mu = np.asarray(setup.prior.means)
    evid_std = np.sqrt(np.asarray(setup.prior.stds) ** 2 + s1sq)
    nodes, weights = roots_hermite(n_nodes)
    # V ~ sum_k w_k N(mu_k, tau_k^2 + s1^2); integrate m(v) and m(v)^2.
    e1 = 0.0
    e2 = 0.0
    for wk, mk, sk in zip(w, mu, evid_std):
        v = mk + np.sqrt(2.0) * sk * nodes
        m = mmse_estimator(setup, v)
        e1 += wk * np.sum(weights * m) / np.sqrt(np.pi)
        e2 += wk * np.sum(weights * m * m) / np.sqrt(np.pi)
    return float(e2 - e1**2)


@dataclass(frozen=True)
class PropositionReport:
    analytic: float
    empirical: float
    rel_err: float
    n_samples: int


def verify_proposition_mc(
    setup: MmseSetup, n_samples: int, rng: Rng
) -> PropositionReport:
    """Monte-Carlo check of the variance-shrinkage formula.

    Draws (u, v) pairs, pushes v through the MMSE estimator and compares the
    empirical variance of the estimates against the analytic/quadrature
    value.
    """
    if n_samples < 10**5:
        raise ConfigError("need at least 1e5 samples for a meaningful check")
    u = setup.prior.sample(n_samples, rng.derive(0))
    v = u + setup.sigma1 * rng.derive(1).standard_normal(n_samples)
    est = mmse_estimator(setup, v)
    empirical = float(np.var(est))
    analytic = mmse_output_variance(setup)
    rel = abs(empirical - analytic) / analytic if analytic > 0 else abs(empirical)
    return PropositionReport(
        analytic=analytic, empirical=empirical, rel_err=rel, n_samples=n_samples
    )
