"""Forward diffusion, training objective, and DDPM/DDIM samplers.

The model is generic over the noise predictor: anything with
``forward(n_t: Tensor, t, cond) -> Tensor``. Data enters in "noise units" and
is converted to network units through a per-setting affine map stored with
the model; the samplers return denormalized noise.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .errors import ConfigError, NumericError
from .nets import Conditioning, Toy1DConfig, Toy1DNet, TwoBranchConfig, TwoBranchNet
from .optim import Adam
from .physics import CameraSetting
from .rng import Rng
from .schedules import Schedule, build_schedule, ddpm_coefficients
from .tensor import Tensor


@dataclass
class Normalization:
    """Affine map between noise units and network units, per setting index.

    network = (noise - offset[idx]) / scale[idx]. A single entry (index 0)
    serves unconditional toys.
    """

    offset: np.ndarray = field(default_factory=lambda: np.zeros(1))
    scale: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        self.offset = np.atleast_1d(np.asarray(self.offset, dtype=np.float64))
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        if np.any(self.scale <= 0):
            raise ConfigError("normalization scales must be positive")

    def normalize(self, x, setting_idx=None):
        off, scl = self._broadcast(setting_idx, np.asarray(x).ndim)
        return (x - off) / scl

    def denormalize(self, x, setting_idx=None):
        off, scl = self._broadcast(setting_idx, np.asarray(x).ndim)
        return x * scl + off

    def _broadcast(self, setting_idx, ndim):
        if setting_idx is None:
            return float(self.offset[0]), float(self.scale[0])
        idx = np.asarray(setting_idx, dtype=np.int64)
        tail = (1,) * (ndim - 1)
        return self.offset[idx].reshape((-1,) + tail), self.scale[idx].reshape(
            (-1,) + tail
        )


@dataclass
class DiffusionModel:
    schedule: Schedule
    net: object  # noise predictor with .forward(n_t, t, cond)
    normalization: Normalization = field(default_factory=Normalization)

    def predict_eps(self, n_t: Tensor, t, cond: Conditioning) -> Tensor:
        """Predicted noise for diffused input ``n_t`` at timestep(s) ``t``."""
        t_arr = np.atleast_1d(np.asarray(t))
        if np.any(t_arr < 1) or np.any(t_arr > self.schedule.T):
            raise ConfigError(f"timesteps outside [1, {self.schedule.T}]")
        return self.net.forward(n_t, t, cond)


def q_sample(n0, t, schedule: Schedule, rng: Rng):
    """Forward diffusion: returns (n_t, eps) with
    n_t = sqrt(alpha_bar_t) n0 + sqrt(1 - alpha_bar_t) eps, eps ~ N(0, I).

    ``t`` may be a scalar or a per-sample vector matching n0's batch axis.
    """
    n0 = np.asarray(n0, dtype=np.float64)
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t_arr < 0) or np.any(t_arr > schedule.T):
        raise ConfigError(f"timesteps outside [0, {schedule.T}]")
    ab = schedule.alpha_bar[t_arr]
    if t_arr.size == 1:
        sa, so = np.sqrt(ab[0]), np.sqrt(1.0 - ab[0])
    else:
        tail = (1,) * (n0.ndim - 1)
        sa = np.sqrt(ab).reshape((-1,) + tail)
        so = np.sqrt(1.0 - ab).reshape((-1,) + tail)
    eps = rng.standard_normal(n0.shape)
    return sa * n0 + so * eps, eps


def training_step(
    model: DiffusionModel, batch: dict, rng: Rng, adam: Adam
) -> float:
    """One MSE step on the noise-prediction objective.

    ``batch`` carries noise-unit arrays: ``n0`` (N, C, ...) plus optional
    ``clean``, ``coords``, ``setting_idx`` conditioning. Samples per-example
    timesteps uniformly, applies the forward process, backpropagates the MSE
    between injected and predicted noise, and applies one Adam update.
    """
    n0 = np.asarray(batch["n0"], dtype=np.float64)
    setting_idx = batch.get("setting_idx")
    n0n = model.normalization.normalize(n0, setting_idx)
    t = rng.derive(0).integers(1, model.schedule.T + 1, size=n0.shape[0])
    n_t, eps = q_sample(n0n, t, model.schedule, rng.derive(1))
    cond = Conditioning(
        clean=batch.get("clean"), coords=batch.get("coords"), setting_idx=setting_idx
    )
    eps_hat = model.predict_eps(Tensor(n_t), t, cond)
    loss = T.mse_loss(eps_hat, eps)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError(
            f"non-finite training loss at step {adam.step_count + 1}: {value}"
        )
    T.backward(loss)
    adam.step()
    return value


def _predict_eps_np(model, x, t_vec, cond):
    with T.no_grad():
        return model.predict_eps(Tensor(x), t_vec, cond).data


def ddpm_sample(
    model: DiffusionModel,
    cond: Conditioning,
    shape,
    rng: Rng,
    log_steps=(),
):
    """Ancestral sampling from pure noise down to t=0.

    ``shape`` is the batched sample shape (N, C, ...). The final step is
    deterministic (its posterior variance is zero). Returns the denormalized
    sample, plus a {t: denormalized state} dict when ``log_steps`` is given.
    """
    s = model.schedule
    x = rng.derive(s.T + 1).standard_normal(shape)
    logged = {}
    setting_idx = cond.setting_idx
    for t in range(s.T, 0, -1):
        co = ddpm_coefficients(s, t)
        t_vec = np.full(shape[0], t)
        eps_hat = _predict_eps_np(model, x, t_vec, cond)
        mean = co.mean_coef_x * x - co.mean_coef_eps * eps_hat
        if not np.all(np.isfinite(mean)):
            raise NumericError(f"non-finite sample state at reverse step t={t}")
        if co.posterior_variance > 0:
            x = mean + np.sqrt(co.posterior_variance) * rng.derive(t).standard_normal(
                shape
            )
        else:
            x = mean
        if t - 1 in log_steps:
            logged[t - 1] = model.normalization.denormalize(x, setting_idx)
    out = model.normalization.denormalize(x, setting_idx)
    if log_steps:
        return out, logged
    return out


def ddim_timesteps(T_total: int, steps: int) -> np.ndarray:
    """Strictly decreasing timestep subsequence from T to 1."""
    if not 1 <= steps <= T_total:
        raise ConfigError(f"DDIM steps {steps} outside [1, {T_total}]")
    ts = np.unique(np.linspace(1, T_total, steps).round().astype(int))[::-1]
    return ts


def ddim_sample(
    model: DiffusionModel,
    cond: Conditioning,
    shape,
    steps: int,
    rng: Rng,
    eta: float = 0.0,
):
    """DDIM sampling over a timestep subsequence.

    With ``eta=0`` the update is deterministic given the initial state; with
    ``eta=1`` and the full subsequence it matches DDPM's ancestral variance.
    """
    s = model.schedule
    ts = ddim_timesteps(s.T, steps)
    if np.any(np.diff(ts) >= 0):
        raise ConfigError("DDIM timestep subsequence must be strictly decreasing")
    x = rng.derive(s.T + 1).standard_normal(shape)
    setting_idx = cond.setting_idx
    for i, t in enumerate(ts):
        ab_t = s.alpha_bar[t]
        ab_prev = s.alpha_bar[ts[i + 1]] if i + 1 < len(ts) else s.alpha_bar[0]
        t_vec = np.full(shape[0], t)
        eps_hat = _predict_eps_np(model, x, t_vec, cond)
        x0_pred = (x - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
        sigma = eta * np.sqrt(
            (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
        )
        dir_coef = np.sqrt(np.maximum(1.0 - ab_prev - sigma**2, 0.0))
        x = np.sqrt(ab_prev) * x0_pred + dir_coef * eps_hat
        if sigma > 0:
            x = x + sigma * rng.derive(int(t)).standard_normal(shape)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite sample state at DDIM step t={t}")
    return model.normalization.denormalize(x, setting_idx)


# =============================================================================
# Persistence: NDCK parameters + JSON config sidecar
# =============================================================================

_NORM_OFFSET = "__normalization/offset"
_NORM_SCALE = "__normalization/scale"


def save_model(path, model: DiffusionModel, net_kind: str, net_config: dict,
               settings: list[CameraSetting] | None = None) -> None:
    """Write network parameters (NDCK) plus a JSON sidecar describing the
    architecture, schedule, and registered settings."""
    params = OrderedDict(model.net.state_dict())
    params[_NORM_OFFSET] = model.normalization.offset
    params[_NORM_SCALE] = model.normalization.scale
    ckpt.save_checkpoint(path, params)
    sidecar = {
        "net_kind": net_kind,
        "net_config": net_config,
        "schedule": {"name": model.schedule.name, "T": model.schedule.T},
        "settings": [
            {"iso": s.iso, "exposure_ratio": s.exposure_ratio} for s in settings or []
        ],
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def load_model(path) -> tuple[DiffusionModel, list[CameraSetting]]:
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise ConfigError(f"missing model sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    params = ckpt.load_checkpoint(path)
    norm = Normalization(
        offset=params.pop(_NORM_OFFSET), scale=params.pop(_NORM_SCALE)
    )
    settings = [
        CameraSetting(iso=s["iso"], exposure_ratio=s["exposure_ratio"])
        for s in sidecar.get("settings", [])
    ]
    kind = sidecar["net_kind"]
    rng = Rng(0)  # parameters are overwritten immediately
    if kind == "two_branch":
        net = TwoBranchNet(TwoBranchConfig.from_dict(sidecar["net_config"]), settings, rng)
    elif kind == "toy1d":
        net = Toy1DNet(Toy1DConfig(**sidecar["net_config"]), rng)
    else:
        raise ConfigError(f"unknown net kind {kind!r}")
    net.load_state_dict(params)
    schedule = build_schedule(sidecar["schedule"]["name"], sidecar["schedule"]["T"])
    return DiffusionModel(schedule=schedule, net=net, normalization=norm), settings
