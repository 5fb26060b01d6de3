"""Downstream toy denoiser: L1-trained UNet over clean-noisy pairs.

The denoiser is the consumer of generated pair archives; comparing its test
PSNR across pair sources (physics oracle, diffusion model, mismatched
Gaussian) measures how useful the synthesized noise actually is.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nets import DenoiserConfig, DenoiserUNet
from .optim import Adam
from .rng import Rng
from .stats import psnr, ssim
from .tensor import Tensor


def train_toy_denoiser(
    pairs,
    steps: int,
    batch: int,
    lr: float,
    rng: Rng,
    config: DenoiserConfig | None = None,
    lr_final: float | None = None,
):
    """Train a small residual UNet with L1 loss on (clean, noisy) pairs.

    ``pairs`` is a sequence of (clean, noisy) arrays of identical shape.
    Returns (denoiser, loss history).
    """
    if not pairs:
        raise ConfigError("pair archive is empty")
    cfg = config or DenoiserConfig(in_channels=np.asarray(pairs[0][0]).shape[0])
    net = DenoiserUNet(cfg, rng.derive(0))
    adam = Adam(net.parameters(), lr=lr)
    losses = []
    lr_final = lr_final if lr_final is not None else lr / 10.0
    for step in range(steps):
        frac = step / max(steps - 1, 1)
        adam.lr = lr_final + 0.5 * (lr - lr_final) * (1 + math.cos(math.pi * frac))
        picks = rng.derive(1, step).integers(0, len(pairs), size=batch)
        clean = np.stack([np.asarray(pairs[i][0]) for i in picks])
        noisy = np.stack([np.asarray(pairs[i][1]) for i in picks])
        out = net.forward(Tensor(noisy))
        loss = T.l1_loss(out, clean)
        losses.append(loss.item())
        T.backward(loss)
        adam.step()
    return net, losses


def evaluate_denoiser(denoiser, test_pairs, data_range: float) -> dict:
    """Mean PSNR/SSIM of the denoiser over held-out pairs.

    ``denoiser=None`` evaluates the identity baseline (the noisy input).
    """
    psnrs, ssims = [], []
    for clean, noisy in test_pairs:
        clean = np.asarray(clean, dtype=np.float64)
        noisy = np.asarray(noisy, dtype=np.float64)
        if denoiser is None:
            restored = noisy
        else:
            with T.no_grad():
                restored = denoiser.forward(Tensor(noisy[None])).data[0]
            restored = np.clip(restored, noisy.min() - data_range, noisy.max() + data_range)
        p = psnr(restored, clean, data_range)
        psnrs.append(min(p, 99.0))  # cap the identical-image sentinel
        ssims.append(ssim(restored, clean, data_range))
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))}
