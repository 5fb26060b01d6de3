"""Conditional noise-prediction networks.

The main model is a two-branch network: a per-pixel MLP branch (1x1
convolutions, receptive field one) suited to signal-dependent components like
shot noise, and a UNet branch that captures locally correlated structure.
Both branches see the concatenation of the diffused noise and the clean
image; their outputs are summed. Conditioning enters through sinusoidal
timestep embeddings (FiLM), a sinusoidal positional encoder driven by
absolute pixel coordinates, and a camera-setting embedding bank integrated
via single-query cross-attention.

Also provided: a small 1D UNet for scalar-distribution studies and a plain
2D UNet used as the downstream denoiser.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .physics import CameraSetting
from .rng import Rng
from .tensor import Tensor


class Module:
    """Minimal parameter container with named traversal."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (name, p.data.astype(np.float32)) for name, p in self.named_parameters()
        )

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(
                f"state dict mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"param {name}: shape {arr.shape} vs {p.shape}")
            p.data = arr.copy()
            p.zero_grad()


def _param(rng: Rng | None, shape, std: float) -> Tensor:
    if std == 0.0 or rng is None:
        return Tensor(np.zeros(shape), requires_grad=True)
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: Rng, zero_init: bool = False):
        std = 0.0 if zero_init else math.sqrt(2.0 / cin)
        self.w = _param(rng, (cin, cout), std)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_channel_bias(T.matmul(x, self.w), self.b)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng: Rng, stride=1, padding=None, zero_init=False):
        std = 0.0 if zero_init else math.sqrt(2.0 / (cin * k * k))
        self.w = _param(rng, (cout, cin, k, k), std)
        self.b = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.w, stride=self.stride, padding=self.padding)
        return T.add_channel_bias(y, self.b)


class Conv1d(Module):
    def __init__(self, cin, cout, k, rng: Rng, stride=1, padding=None, zero_init=False):
        std = 0.0 if zero_init else math.sqrt(2.0 / (cin * k))
        self.w = _param(rng, (cout, cin, k), std)
        self.b = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv1d(x, self.w, stride=self.stride, padding=self.padding)
        return T.add_channel_bias(y, self.b)


class LayerNorm(Module):
    """Across-channel normalization at every position (keeps locality)."""

    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class ChannelNorm(Module):
    """Per-channel normalization over the spatial axes (batch-free).

    Used inside residual branches: the spatial scale it removes is
    re-injected by the timestep FiLM, so noise-level information survives.
    """

    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.instance_norm(x, self.gamma, self.beta)


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Classic sinusoidal features of (possibly fractional) timesteps."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class TimestepEncoder(Module):
    """Sinusoidal features refined by a two-layer MLP."""

    def __init__(self, dim: int, rng: Rng):
        self.dim = dim
        self.l1 = Linear(dim, dim, rng.derive(0))
        self.l2 = Linear(dim, dim, rng.derive(1))

    def __call__(self, t) -> Tensor:
        emb = Tensor(sinusoidal_embedding(t, self.dim))
        return self.l2(T.silu(self.l1(emb)))


class FilmHead(Module):
    """Projects a conditioning vector to per-channel scale and shift."""

    def __init__(self, emb_dim: int, channels: int, rng: Rng):
        self.proj = Linear(emb_dim, 2 * channels, rng, zero_init=True)
        self.channels = channels

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        sr = self.proj(emb)
        s = T.slice_axis(sr, 1, 0, self.channels)
        r = T.slice_axis(sr, 1, self.channels, 2 * self.channels)
        return T.channel_affine(x, s, r)


class PositionalEncoder(Module):
    """Sinusoidal positional embedding of a coordinate map.

    coords (N, 2, H, W) -> ctilde = Conv1x1(coords);
    p = Conv1x1([ctilde, sin(ctilde), cos(ctilde)]).
    """

    def __init__(self, pe_channels: int, rng: Rng):
        self.coord_proj = Conv2d(2, pe_channels, 1, rng.derive(0))
        self.embed_proj = Conv2d(3 * pe_channels, pe_channels, 1, rng.derive(1))
        self.pe_channels = pe_channels

    def __call__(self, coords: Tensor) -> Tensor:
        if coords.ndim != 4 or coords.shape[1] != 2:
            raise ShapeError(f"coords must be (N, 2, H, W), got {coords.shape}")
        ct = self.coord_proj(coords)
        feats = T.concat([ct, T.sin(ct), T.cos(ct)], axis=1)
        return self.embed_proj(feats)


class PositionalInjection(Module):
    """Scale-and-shift injection: f * (1 + s) + r with s, r from the embedding."""

    def __init__(self, pe_channels: int, channels: int, rng: Rng):
        self.proj = Conv2d(pe_channels, 2 * channels, 1, rng, zero_init=True)
        self.channels = channels

    def __call__(self, f: Tensor, p: Tensor) -> Tensor:
        sr = self.proj(p)
        s = T.slice_axis(sr, 1, 0, self.channels)
        r = T.slice_axis(sr, 1, self.channels, 2 * self.channels)
        return T.add(T.mul(f, T.add(s, 1.0)), r)


class CameraEmbeddingBank(Module):
    """Embedding bank over camera settings, strictly larger than needed."""

    def __init__(self, settings, embed_dim: int, rng: Rng, bank_size: int | None = None):
        settings = list(settings)
        if not settings:
            raise ConfigError("need at least one camera setting")
        m = bank_size if bank_size is not None else 2 * len(settings) + 8
        if m <= len(settings):
            raise ConfigError(f"bank size {m} must exceed {len(settings)} settings")
        self.table = _param(rng, (m, embed_dim), 0.02)
        self.index: dict[CameraSetting, int] = {s: i for i, s in enumerate(settings)}
        self.embed_dim = embed_dim

    @property
    def size(self) -> int:
        return self.table.shape[0]

    def lookup(self, setting: CameraSetting) -> int:
        if setting not in self.index:
            known = sorted(
                (s.iso, s.exposure_ratio) for s in self.index
            )
            raise ConfigError(f"unregistered camera setting {setting}; known: {known}")
        return self.index[setting]

    def embed(self, indices) -> Tensor:
        return T.take_rows(self.table, np.asarray(indices, dtype=np.int64))


class CrossAttention2d(Module):
    """Residual single-query-set cross-attention between features and an
    embedding vector: f + Softmax(Q K^T / sqrt(d)) V."""

    def __init__(self, channels: int, embed_dim: int, attn_dim: int, rng: Rng):
        self.w_q = Conv2d(channels, attn_dim, 1, rng.derive(0))
        self.w_k = Linear(embed_dim, attn_dim, rng.derive(1))
        self.w_v = Linear(embed_dim, channels, rng.derive(2))
        self.attn_dim = attn_dim

    def __call__(self, f: Tensor, z: Tensor) -> Tensor:
        n, c, h, w = f.shape
        q = self.w_q(f)  # (N, d, H, W)
        q = T.transpose(T.reshape(q, (n, self.attn_dim, h * w)), (0, 2, 1))
        k = T.reshape(self.w_k(z), (n, 1, self.attn_dim))
        v = T.reshape(self.w_v(z), (n, 1, c))
        scores = T.scale(T.bmm(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.attn_dim))
        attn = T.softmax(scores, axis=2)  # (N, HW, 1)
        out = T.bmm(attn, v)  # (N, HW, C)
        out = T.reshape(T.transpose(out, (0, 2, 1)), (n, c, h, w))
        return T.add(f, out)


class ConvBlock2d(Module):
    """Residual block: x + conv(silu(inject(film(norm(conv(x)))))).

    The second conv is zero-initialized, so blocks start as the identity.
    """

    def __init__(self, channels, emb_dim, rng: Rng, pe_channels=None):
        self.conv1 = Conv2d(channels, channels, 3, rng.derive(0))
        self.norm = ChannelNorm(channels)
        self.film = FilmHead(emb_dim, channels, rng.derive(1))
        self.pe_inject = (
            PositionalInjection(pe_channels, channels, rng.derive(2))
            if pe_channels
            else None
        )
        self.conv2 = Conv2d(channels, channels, 3, rng.derive(3), zero_init=True)

    def __call__(self, x, t_emb, p=None) -> Tensor:
        h = self.film(self.norm(self.conv1(x)), t_emb)
        if self.pe_inject is not None and p is not None:
            h = self.pe_inject(h, p)
        return T.add(x, self.conv2(T.silu(h)))


class ConvBlock1d(Module):
    def __init__(self, channels, emb_dim, rng: Rng):
        self.conv1 = Conv1d(channels, channels, 3, rng.derive(0))
        self.norm = ChannelNorm(channels)
        self.film = FilmHead(emb_dim, channels, rng.derive(1))
        self.conv2 = Conv1d(channels, channels, 3, rng.derive(2), zero_init=True)

    def __call__(self, x, t_emb) -> Tensor:
        h = self.film(self.norm(self.conv1(x)), t_emb)
        return T.add(x, self.conv2(T.silu(h)))


@dataclass(frozen=True)
class Conditioning:
    """Inputs the noise model is conditioned on; fields may be None when a
    network does not use them. Arrays are batched (leading N axis)."""

    clean: np.ndarray | None = None
    coords: np.ndarray | None = None
    setting_idx: np.ndarray | None = None


# =============================================================================
# Two-branch 2D network
# =============================================================================


@dataclass(frozen=True)
class TwoBranchConfig:
    in_channels: int = 2
    base_channels: int = 12
    depth: int = 2
    emb_dim: int = 32
    pe_channels: int = 8
    cam_embed_dim: int = 8
    cam_attn_dim: int = 8
    mlp_hidden: int = 24
    use_mlp_branch: bool = True
    use_positional: bool = True
    bank_size: int | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TwoBranchConfig":
        return cls(**d)


class MlpBranch(Module):
    """Per-pixel branch: three 1x1 conv layers, camera encoding, and a
    timestep-modulated residual layer. Receptive field is exactly one pixel."""

    def __init__(self, cfg: TwoBranchConfig, bank: CameraEmbeddingBank, rng: Rng):
        cin = 2 * cfg.in_channels
        m = cfg.mlp_hidden
        self.l1 = Conv2d(cin, m, 1, rng.derive(0))
        self.l2 = Conv2d(m, m, 1, rng.derive(1))
        self.l3 = Conv2d(m, m, 1, rng.derive(2))
        self.cam = CrossAttention2d(m, cfg.cam_embed_dim, cfg.cam_attn_dim, rng.derive(3))
        self.res_norm = LayerNorm(m)
        self.res_film = FilmHead(cfg.emb_dim, m, rng.derive(4))
        self.res_conv = Conv2d(m, m, 1, rng.derive(5))
        self.out = Conv2d(m, cfg.in_channels, 1, rng.derive(6), zero_init=True)

    def __call__(self, x, t_emb, z) -> Tensor:
        h = T.silu(self.l1(x))
        h = T.silu(self.l2(h))
        h = T.silu(self.l3(h))
        if z is not None:
            h = self.cam(h, z)
        h = T.add(h, self.res_conv(T.silu(self.res_film(self.res_norm(h), t_emb))))
        return self.out(h)


class UnetBranch(Module):
    """Conditional UNet: stride-2 downsampling, nearest-neighbour upsampling,
    skip connections, timestep FiLM and positional injections at every
    resolution level, camera cross-attention at the bottleneck."""

    def __init__(self, cfg: TwoBranchConfig, bank: CameraEmbeddingBank, rng: Rng):
        cin = 2 * cfg.in_channels
        chans = [cfg.base_channels * (2**i) for i in range(cfg.depth + 1)]
        pe = cfg.pe_channels if cfg.use_positional else None
        self.depth = cfg.depth
        self.stem = Conv2d(cin, chans[0], 3, rng.derive(0))
        self.enc_blocks = [
            ConvBlock2d(chans[i], cfg.emb_dim, rng.derive(10 + i), pe)
            for i in range(cfg.depth)
        ]
        self.downs = [
            Conv2d(chans[i], chans[i + 1], 3, rng.derive(20 + i), stride=2)
            for i in range(cfg.depth)
        ]
        self.mid_block = ConvBlock2d(chans[-1], cfg.emb_dim, rng.derive(30), pe)
        self.mid_cam = CrossAttention2d(
            chans[-1], cfg.cam_embed_dim, cfg.cam_attn_dim, rng.derive(31)
        )
        self.ups = [
            Conv2d(chans[i + 1], chans[i], 3, rng.derive(40 + i))
            for i in range(cfg.depth)
        ]
        self.dec_blocks = [
            ConvBlock2d(chans[i], cfg.emb_dim, rng.derive(60 + i), pe)
            for i in range(cfg.depth)
        ]
        self.out = Conv2d(chans[0], cfg.in_channels, 3, rng.derive(70), zero_init=True)

    def __call__(self, x, t_emb, z, p_maps) -> Tensor:
        h = self.stem(x)
        skips = []
        for i in range(self.depth):
            h = self.enc_blocks[i](h, t_emb, p_maps[i] if p_maps else None)
            skips.append(h)
            h = self.downs[i](h)
        h = self.mid_block(h, t_emb, p_maps[self.depth] if p_maps else None)
        if z is not None:
            h = self.mid_cam(h, z)
        for i in reversed(range(self.depth)):
            h = T.add(self.ups[i](T.upsample_nearest(h, 2)), skips[i])
            h = self.dec_blocks[i](h, t_emb, p_maps[i] if p_maps else None)
        return self.out(h)


class TwoBranchNet(Module):
    """Noise predictor: sum of the MLP branch and the UNet branch.

    A zero-initialized input-gain head (driven by the timestep embedding)
    carries the linear part of the optimal predictor; the branches model the
    conditional structure around it.
    """

    def __init__(self, cfg: TwoBranchConfig, settings, rng: Rng):
        self.cfg = cfg
        self.t_enc = TimestepEncoder(cfg.emb_dim, rng.derive(0))
        self.bank = CameraEmbeddingBank(
            settings, cfg.cam_embed_dim, rng.derive(1), cfg.bank_size
        )
        self.pos_enc = (
            PositionalEncoder(cfg.pe_channels, rng.derive(2))
            if cfg.use_positional
            else None
        )
        self.unet = UnetBranch(cfg, self.bank, rng.derive(3))
        self.mlp = MlpBranch(cfg, self.bank, rng.derive(4)) if cfg.use_mlp_branch else None
        self.input_gain = Linear(cfg.emb_dim, cfg.in_channels, rng.derive(5), zero_init=True)

    def _pe_maps(self, coords: np.ndarray):
        if self.pos_enc is None or coords is None:
            return None
        maps = []
        for i in range(self.cfg.depth + 1):
            strided = np.ascontiguousarray(coords[:, :, :: 2**i, :: 2**i])
            maps.append(self.pos_enc(Tensor(strided)))
        return maps

    def forward(self, n_t: Tensor, t, cond: Conditioning) -> Tensor:
        if cond.clean is None:
            raise ConfigError("two-branch net needs clean-image conditioning")
        if cond.clean.shape != n_t.shape:
            raise ShapeError(
                f"clean {cond.clean.shape} does not match noise {n_t.shape}"
            )
        x = T.concat([n_t, Tensor(cond.clean)], axis=1)
        t_emb = self.t_enc(t)
        z = (
            self.bank.embed(cond.setting_idx)
            if cond.setting_idx is not None
            else None
        )
        p_maps = self._pe_maps(cond.coords)
        out = self.unet(x, t_emb, z, p_maps)
        if self.mlp is not None:
            out = T.add(out, self.mlp(x, t_emb, z))
        return T.add(out, T.channel_scale(n_t, self.input_gain(t_emb)))


# =============================================================================
# 1D toy network
# =============================================================================


@dataclass(frozen=True)
class Toy1DConfig:
    hidden: int = 16
    emb_dim: int = 32

    def to_dict(self) -> dict:
        return {"hidden": self.hidden, "emb_dim": self.emb_dim}


class Toy1DNet(Module):
    """Small 1D UNet conditioned on timestep and a clean-level channel.

    A zero-initialized input-gain head lets the net express the t-dependent
    linear component of the optimal predictor directly; the UNet learns the
    conditional residual structure.
    """

    def __init__(self, cfg: Toy1DConfig, rng: Rng):
        h = cfg.hidden
        self.cfg = cfg
        self.t_enc = TimestepEncoder(cfg.emb_dim, rng.derive(0))
        self.stem = Conv1d(2, h, 3, rng.derive(1))
        self.block1 = ConvBlock1d(h, cfg.emb_dim, rng.derive(2))
        self.down = Conv1d(h, 2 * h, 3, rng.derive(3), stride=2)
        self.mid = ConvBlock1d(2 * h, cfg.emb_dim, rng.derive(4))
        self.up = Conv1d(2 * h, h, 3, rng.derive(5))
        self.block2 = ConvBlock1d(h, cfg.emb_dim, rng.derive(7))
        self.out = Conv1d(h, 1, 1, rng.derive(8), zero_init=True)
        self.input_gain = Linear(cfg.emb_dim, 1, rng.derive(9), zero_init=True)

    def forward(self, n_t: Tensor, t, cond: Conditioning) -> Tensor:
        clean = cond.clean if cond.clean is not None else np.zeros(n_t.shape)
        x = T.concat([n_t, Tensor(clean)], axis=1)
        t_emb = self.t_enc(t)
        h = self.stem(x)
        h = self.block1(h, t_emb)
        skip = h
        h = self.mid(self.down(h), t_emb)
        h = T.add(self.up(T.upsample_nearest(h, 2)), skip)
        h = self.block2(h, t_emb)
        return T.add(self.out(h), T.channel_scale(n_t, self.input_gain(t_emb)))


# =============================================================================
# Downstream denoiser
# =============================================================================


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 2
    base_channels: int = 12
    depth: int = 2

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class _PlainBlock(Module):
    def __init__(self, channels, rng: Rng):
        self.conv1 = Conv2d(channels, channels, 3, rng.derive(0))
        self.norm = ChannelNorm(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng.derive(1), zero_init=True)

    def __call__(self, x) -> Tensor:
        return T.add(x, self.conv2(T.silu(self.norm(self.conv1(x)))))


class DenoiserUNet(Module):
    """Plain UNet denoiser; predicts a residual added to the noisy input."""

    def __init__(self, cfg: DenoiserConfig, rng: Rng):
        chans = [cfg.base_channels * (2**i) for i in range(cfg.depth + 1)]
        self.cfg = cfg
        self.depth = cfg.depth
        self.stem = Conv2d(cfg.in_channels, chans[0], 3, rng.derive(0))
        self.enc_blocks = [_PlainBlock(chans[i], rng.derive(10 + i)) for i in range(cfg.depth)]
        self.downs = [
            Conv2d(chans[i], chans[i + 1], 3, rng.derive(20 + i), stride=2)
            for i in range(cfg.depth)
        ]
        self.mid = _PlainBlock(chans[-1], rng.derive(30))
        self.ups = [
            Conv2d(chans[i + 1], chans[i], 3, rng.derive(40 + i)) for i in range(cfg.depth)
        ]
        self.dec_blocks = [_PlainBlock(chans[i], rng.derive(60 + i)) for i in range(cfg.depth)]
        self.out = Conv2d(chans[0], cfg.in_channels, 3, rng.derive(70), zero_init=True)

    def forward(self, noisy: Tensor) -> Tensor:
        h = self.stem(noisy)
        skips = []
        for i in range(self.depth):
            h = self.enc_blocks[i](h)
            skips.append(h)
            h = self.downs[i](h)
        h = self.mid(h)
        for i in reversed(range(self.depth)):
            h = T.add(self.ups[i](T.upsample_nearest(h, 2)), skips[i])
            h = self.dec_blocks[i](h)
        return T.add(noisy, self.out(h))
