"""Toy denoiser training and evaluation."""

import numpy as np
import pytest

from noiselab.denoise import evaluate_denoiser, train_toy_denoiser
from noiselab.errors import ConfigError
from noiselab.nets import DenoiserConfig
from noiselab.stats import psnr


def _flat_pairs(rng, n, sigma, size=16, block=4):
    # Blocky piecewise-constant clean content: denoisable structure.
    pairs = []
    for i in range(n):
        coarse = rng.derive(i, 0).uniform(0.2, 0.8, (1, size // block, size // block))
        clean = np.kron(coarse, np.ones((block, block)))
        noisy = clean + rng.derive(i, 1).normal(0.0, sigma, clean.shape)
        pairs.append((clean, noisy))
    return pairs


def test_empty_archive_rejected(rng):
    with pytest.raises(ConfigError):
        train_toy_denoiser([], steps=1, batch=1, lr=1e-3, rng=rng)


def test_zero_noise_pairs_stay_near_identity(rng):
    pairs = [(p[0], p[0].copy()) for p in _flat_pairs(rng, 8, 0.0)]
    net, losses = train_toy_denoiser(
        pairs, steps=60, batch=4, lr=1e-3, rng=rng.derive(1),
        config=DenoiserConfig(in_channels=1, base_channels=6),
    )
    metrics = evaluate_denoiser(net, pairs, data_range=1.0)
    # identity task: residual head stays near zero, PSNR stays huge
    assert metrics["psnr"] > 50.0


def test_training_beats_identity_on_gaussian_noise(rng):
    train_pairs = _flat_pairs(rng.derive(0), 24, 0.1)
    test_pairs = _flat_pairs(rng.derive(1), 8, 0.1)
    net, losses = train_toy_denoiser(
        train_pairs, steps=500, batch=8, lr=2e-3, rng=rng.derive(2),
        config=DenoiserConfig(in_channels=1, base_channels=8),
    )
    trained = evaluate_denoiser(net, test_pairs, data_range=1.0)
    identity = evaluate_denoiser(None, test_pairs, data_range=1.0)
    assert losses[-1] < losses[0]
    assert trained["psnr"] > identity["psnr"] + 3.0


def test_identity_baseline_matches_direct_psnr(rng):
    pairs = _flat_pairs(rng, 4, 0.05)
    metrics = evaluate_denoiser(None, pairs, data_range=1.0)
    direct = np.mean([psnr(noisy, clean, 1.0) for clean, noisy in pairs])
    assert metrics["psnr"] == pytest.approx(direct)
