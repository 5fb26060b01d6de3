"""Experiment protocols: the runnable studies behind the acceptance suite.

Five named experiments:

- ``poisson1d``: train 1D diffusion models on Poisson noise targets under
  several schedules; report generated/GT std ratios, per-step mean-variance
  curves, and a DDPM vs DDIM comparison.
- ``tukey_lambda``: the same study over seven Tukey-Lambda scale values.
- ``toy2d``: train the two-branch 2D model and its UNet-only ablation on a
  synthetic camera, generate stitched noise under several conditioning
  variants, and report KLD / fixed-pattern correlation / patch-mean
  stability, plus the downstream denoiser transfer comparison.
- ``mmse``: the variance-shrinkage verification grid.
- ``schedule_dump``: CSV tables of schedule curves.

Heavy studies fan out over a process pool; every task owns derived RNG
streams, so results are bit-reproducible regardless of scheduling.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffusion as dd
from .denoise import evaluate_denoiser, train_toy_denoiser
from .errors import ConfigError
from .mmse import GaussianPrior, GmmPrior, MmseSetup, verify_proposition_mc
from .nets import (
    Conditioning,
    DenoiserConfig,
    Toy1DConfig,
    Toy1DNet,
    TwoBranchConfig,
    TwoBranchNet,
)
from .optim import Adam
from .pairs import (
    DiffusionNoiseGenerator,
    GaussianNoiseGenerator,
    PhysicsNoiseGenerator,
)
from .physics import (
    CameraSetting,
    FixedPatternConfig,
    PhysicsNoiseParams,
    SyntheticCameraModel,
    TukeyLambdaParams,
    sample_camera_noise,
    sample_tukey_lambda,
    tukey_lambda_variance,
)
from .rng import Rng
from .schedules import build_schedule, dump_csv
from .stats import (
    kld_from_samples,
    per_clean_value_stats,
    std_ratio,
)
from .tiling import full_coords, plan_tiles, stitch

EXPERIMENT_NAMES = ("poisson1d", "tukey_lambda", "toy2d", "mmse", "schedule_dump")


def _worker_count(threads: int | None) -> int:
    if threads is not None and threads > 0:
        return max(1, min(threads, os.cpu_count() or 1))
    return max(1, os.cpu_count() or 1)


def _limit_blas_threads(n: int = 1):
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except Exception:
        pass


def _run_parallel(fn, tasks, workers: int):
    """Run ``fn`` over tasks, in processes when more than one worker."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(task) for task in tasks]
    with ProcessPoolExecutor(
        max_workers=workers, initializer=_limit_blas_threads
    ) as ex:
        return list(ex.map(fn, tasks))


# =============================================================================
# 1D toy targets
# =============================================================================


@dataclass(frozen=True)
class Poisson1DTarget:
    """Scaled Poisson shot noise over a range of expected photon counts.

    Per element: level u ~ Uniform{lo..hi}, noise = ga * (Poisson(u) - u).
    The conditioning channel carries u / hi.
    """

    ga: float = 0.02
    lo: int = 5
    hi: int = 50

    name = "poisson"

    def sample(self, n: int, length: int, rng: Rng):
        levels = rng.derive(0).integers(self.lo, self.hi + 1, size=(n, 1, length))
        noise = self.noise_for(levels, rng.derive(1))
        return {"n0": noise, "clean": levels / self.hi, "levels": levels}

    def noise_for(self, levels, rng: Rng):
        lam = np.asarray(levels, dtype=np.float64)
        return self.ga * (rng.poisson(lam).astype(np.float64) - lam)

    def pooled_std(self) -> float:
        mean_var = self.ga**2 * np.mean(np.arange(self.lo, self.hi + 1))
        return float(np.sqrt(mean_var))


@dataclass(frozen=True)
class TukeyLambda1DTarget:
    """Signal-independent Tukey-Lambda noise at a fixed shape."""

    sigma: float
    lam: float = 0.1

    name = "tukey_lambda"

    def sample(self, n: int, length: int, rng: Rng):
        params = TukeyLambdaParams(self.lam, 0.0, self.sigma)
        noise = sample_tukey_lambda(params, (n, 1, length), rng.derive(1))
        return {"n0": noise, "clean": None, "levels": None}

    def noise_for(self, levels, rng: Rng):
        shape = np.shape(levels)
        return sample_tukey_lambda(TukeyLambdaParams(self.lam, 0.0, self.sigma), shape, rng)

    def pooled_std(self) -> float:
        return self.sigma * math.sqrt(tukey_lambda_variance(self.lam))


@dataclass(frozen=True)
class Gaussian1DTarget:
    sigma: float

    name = "gaussian"

    def sample(self, n: int, length: int, rng: Rng):
        return {
            "n0": rng.derive(1).normal(0.0, self.sigma, (n, 1, length)),
            "clean": None,
            "levels": None,
        }

    def noise_for(self, levels, rng: Rng):
        return rng.normal(0.0, self.sigma, np.shape(levels))

    def pooled_std(self) -> float:
        return self.sigma


# =============================================================================
# 1D training / sampling
# =============================================================================

TOY1D_DEFAULTS = dict(
    T=1000,
    steps=3000,
    batch=48,
    length=32,
    hidden=16,
    lr=2e-3,
    lr_final=2e-4,
)


def train_toy1d_model(
    target, schedule_name: str, rng: Rng, **overrides
) -> tuple[dd.DiffusionModel, list[float]]:
    """Train a small 1D diffusion model on the target distribution.

    The data keeps its natural scale (identity normalization): the schedule
    study hinges on the target std being well below the unit diffusion noise,
    as it is for real scaled sensor noise.
    """
    cfg = dict(TOY1D_DEFAULTS)
    cfg.update(overrides)
    schedule = build_schedule(schedule_name, cfg["T"])
    net = Toy1DNet(Toy1DConfig(hidden=cfg["hidden"]), rng.derive(0))
    model = dd.DiffusionModel(schedule=schedule, net=net)
    adam = Adam(net.parameters(), lr=cfg["lr"])
    losses = []
    for step in range(cfg["steps"]):
        if cfg.get("lr_final"):
            frac = step / max(cfg["steps"] - 1, 1)
            adam.lr = cfg["lr_final"] + 0.5 * (cfg["lr"] - cfg["lr_final"]) * (
                1 + math.cos(math.pi * frac)
            )
        data = target.sample(cfg["batch"], cfg["length"], rng.derive(1, step))
        batch = {"n0": data["n0"], "clean": data["clean"]}
        losses.append(dd.training_step(model, batch, rng.derive(2, step), adam))
    return model, losses


def sample_toy1d(
    model: dd.DiffusionModel,
    target,
    n_elems: int,
    rng: Rng,
    sampler: str = "ddpm",
    ddim_steps: int = 100,
    length: int = 32,
    log_steps=(),
):
    """Draw generated noise (and matched conditioning levels) from the model."""
    n = max(1, n_elems // length)
    data = target.sample(n, length, rng.derive(0))
    cond = Conditioning(clean=data["clean"])
    shape = (n, 1, length)
    if sampler == "ddpm":
        out = dd.ddpm_sample(model, cond, shape, rng.derive(1), log_steps=log_steps)
        if log_steps:
            gen, logged = out
        else:
            gen, logged = out, {}
    elif sampler == "ddim":
        gen = dd.ddim_sample(model, cond, shape, ddim_steps, rng.derive(1))
        logged = {}
    else:
        raise ConfigError(f"unknown sampler {sampler!r}")
    return {"generated": gen, "levels": data["levels"], "logged": logged}


def _ratio_for_target(task) -> dict:
    """Worker task: train one (target, schedule) pair and measure ratios."""
    target, schedule_name, seed, cfg = task
    rng = Rng(seed)
    model, losses = train_toy1d_model(target, schedule_name, rng.derive(0), **cfg["train"])
    res = sample_toy1d(
        model,
        target,
        cfg["n_eval"],
        rng.derive(1),
        sampler=cfg.get("sampler", "ddpm"),
        ddim_steps=cfg.get("ddim_steps", 100),
        length=cfg["train"].get("length", TOY1D_DEFAULTS["length"]),
        log_steps=cfg.get("log_steps", ()),
    )
    gen = res["generated"]
    gt = target.noise_for(
        res["levels"] if res["levels"] is not None else np.zeros(gen.shape),
        rng.derive(2),
    )
    out = {
        "target": target.name,
        "sigma": getattr(target, "sigma", None),
        "schedule": schedule_name,
        "ratio": std_ratio(gen, gt),
        "gen_std": float(np.std(gen)),
        "gt_std": float(np.std(gt)),
        "final_loss": float(np.mean(losses[-50:])),
    }
    if res["logged"]:
        curves = {}
        levels = res["levels"]
        for t, state in res["logged"].items():
            st = per_clean_value_stats(levels, state, max_level=target.hi)
            occ = st.occupied
            curves[str(t)] = {
                "levels": st.levels[occ].tolist(),
                "var": st.var[occ].tolist(),
                "mean": st.mean[occ].tolist(),
            }
        out["curves"] = curves
    if cfg.get("compare_ddim"):
        res_ddim = sample_toy1d(
            model,
            target,
            cfg["n_eval"],
            rng.derive(3),
            sampler="ddim",
            ddim_steps=cfg.get("ddim_steps", 100),
            length=cfg["train"].get("length", TOY1D_DEFAULTS["length"]),
        )
        gen_ddim = res_ddim["generated"]
        gt2 = target.noise_for(
            res_ddim["levels"] if res_ddim["levels"] is not None else np.zeros(gen_ddim.shape),
            rng.derive(4),
        )
        out["ddim"] = {
            "ratio": std_ratio(gen_ddim, gt2),
            "gen_var": float(np.var(gen_ddim)),
            "kld": float(kld_from_samples(gt2, gen_ddim)),
        }
        out["ddpm_kld"] = float(kld_from_samples(gt, gen))
        out["ddpm_gen_var"] = float(np.var(gen))
    return out


POISSON1D_DEFAULTS = dict(
    schedules=("cosine", "sigmoid2", "sigmoid3"),
    seed=2024,
    n_eval=16384,
    ga=0.02,
    train=dict(),
    log_steps=(50, 20, 10, 5, 2, 1, 0),
    compare_ddim="sigmoid2",  # DDPM-1000 vs DDIM-100 on the chosen schedule
    ddim_steps=100,
)


def run_poisson1d(config: dict | None = None, threads: int | None = None) -> dict:
    cfg = dict(POISSON1D_DEFAULTS)
    cfg.update(config or {})
    target = Poisson1DTarget(ga=cfg["ga"])
    tasks = []
    for i, name in enumerate(cfg["schedules"]):
        task_cfg = dict(cfg)
        task_cfg["compare_ddim"] = cfg["compare_ddim"] in (name, True)
        tasks.append((target, name, cfg["seed"] + i, task_cfg))
    results = _run_parallel(_ratio_for_target, tasks, _worker_count(threads))
    return {"experiment": "poisson1d", "results": results}


TUKEY_DEFAULTS = dict(
    schedules=("cosine", "sigmoid2", "sigmoid3"),
    # Unit-scale TL(0.1) has std ~1.54, so these scale values span effective
    # noise stds ~0.08 to ~0.46 -- from schedule-sensitive to insensitive.
    sigmas=(0.05, 0.07, 0.09, 0.12, 0.16, 0.22, 0.3),
    lam=0.1,
    seed=77,
    n_eval=12288,
    train=dict(steps=2200),
)


def run_tukey_lambda(config: dict | None = None, threads: int | None = None) -> dict:
    cfg = dict(TUKEY_DEFAULTS)
    cfg.update(config or {})
    tasks = []
    for i, sigma in enumerate(cfg["sigmas"]):
        for j, name in enumerate(cfg["schedules"]):
            target = TukeyLambda1DTarget(sigma=sigma, lam=cfg["lam"])
            tasks.append((target, name, cfg["seed"] + 100 * i + j, cfg))
    results = _run_parallel(_ratio_for_target, tasks, _worker_count(threads))
    by_sigma: dict[float, dict[str, float]] = {}
    for r in results:
        by_sigma.setdefault(r["sigma"], {})[r["schedule"]] = r["ratio"]
    return {
        "experiment": "tukey_lambda",
        "results": results,
        "ratios_by_sigma": {str(k): v for k, v in sorted(by_sigma.items())},
    }


# =============================================================================
# MMSE grid
# =============================================================================

MMSE_DEFAULTS = dict(
    sigma2_grid=(0.5, 1.0, 2.0),
    sigma1_grid=(0.0, 0.5, 1.0, 2.0),
    n_samples=10**6,
    seed=5,
    gmm=dict(weights=(0.4, 0.6), means=(-1.0, 1.5), stds=(0.6, 1.2)),
)


def run_mmse(config: dict | None = None, threads: int | None = None) -> dict:
    cfg = dict(MMSE_DEFAULTS)
    cfg.update(config or {})
    rng = Rng(cfg["seed"])
    grid = []
    for i, s2 in enumerate(cfg["sigma2_grid"]):
        for j, s1 in enumerate(cfg["sigma1_grid"]):
            setup = MmseSetup(prior=GaussianPrior(lam=0.0, sigma2=s2), sigma1=s1)
            report = verify_proposition_mc(setup, cfg["n_samples"], rng.derive(i, j))
            grid.append(
                {
                    "sigma2": s2,
                    "sigma1": s1,
                    "analytic": report.analytic,
                    "empirical": report.empirical,
                    "rel_err": report.rel_err,
                }
            )
    g = cfg["gmm"]
    gmm_setup = MmseSetup(
        prior=GmmPrior(weights=tuple(g["weights"]), means=tuple(g["means"]),
                       stds=tuple(g["stds"])),
        sigma1=0.7,
    )
    gmm_report = verify_proposition_mc(gmm_setup, cfg["n_samples"], rng.derive(99))
    return {
        "experiment": "mmse",
        "grid": grid,
        "gmm": {
            "analytic": gmm_report.analytic,
            "empirical": gmm_report.empirical,
            "rel_err": gmm_report.rel_err,
        },
    }


# =============================================================================
# Schedule dump
# =============================================================================


def run_schedule_dump(config: dict | None = None, threads: int | None = None) -> dict:
    cfg = dict(name="sigmoid2", T=1000)
    cfg.update(config or {})
    out = cfg.get("out")
    schedule = build_schedule(cfg["name"], cfg["T"])
    if out:
        with open(out, "w") as f:
            dump_csv(schedule, f)
    c = schedule.noise_coefficient()
    return {
        "experiment": "schedule_dump",
        "name": cfg["name"],
        "T": cfg["T"],
        "alpha_bar_T": float(schedule.alpha_bar[-1]),
        "c_mid": float(c[cfg["T"] // 2]),
        "out": str(out) if out else None,
    }


# =============================================================================
# 2D toy study
# =============================================================================


def default_toy_camera() -> SyntheticCameraModel:
    """Two-channel 128x128 toy sensor with strong structured components.

    Noise scales land in the regime of scaled real sensor noise: per-pixel
    stds of a few percent of full scale at the low setting, ~0.1 at the high
    one, with prominent banding and a bottom-concentrated fixed pattern.
    """
    return SyntheticCameraModel(
        params=PhysicsNoiseParams(g=2e-5, alpha_qe=0.8, sigma_d=1.0, sigma_r=1.5e-4),
        sensor_shape=(2, 128, 128),
        read_noise_kind="gaussian",
        row_band_sigma=0.012,
        fixed_pattern=FixedPatternConfig(
            ramp_amplitude=0.05,
            ramp_power=4.0,
            col_mod_depth=0.3,
            col_sigma=0.015,
            channel_factors=(1.0, 0.85),
            pattern_seed=21,
        ),
        black_level=0.0,
        white_level=1.0,
        iso_ref=800,
        ratio_ref=100.0,
    )


TOY2D_SETTINGS = (CameraSetting(800, 100.0), CameraSetting(6400, 300.0))

TOY2D_DEFAULTS = dict(
    seed=31,
    patch=64,
    sensor=128,
    train_steps=2200,
    batch=6,
    T=512,
    schedule="sigmoid2",
    base_channels=12,
    depth=2,
    lr=1.5e-3,
    lr_final=2e-4,
    n_train_images=12,
    n_eval_frames=24,
    ddim_steps=100,
    include_denoiser=True,
    denoiser=dict(),
)


def make_toy_clean_images(n: int, sensor: int, rng: Rng) -> list[np.ndarray]:
    """Smooth synthetic clean content in [0.02, 0.75] on the toy sensor."""
    images = []
    coarse = sensor // 8
    for i in range(n):
        base = rng.derive(i).uniform(0.0, 1.0, size=(2, coarse, coarse))
        img = np.kron(base, np.ones((8, 8)))
        # simple separable smoothing to avoid blocky edges
        kernel = np.ones(9) / 9.0
        img = np.apply_along_axis(
            lambda m: np.convolve(m, kernel, mode="same"), 1, img
        )
        img = np.apply_along_axis(
            lambda m: np.convolve(m, kernel, mode="same"), 2, img
        )
        lo, hi = img.min(), img.max()
        img = 0.02 + 0.73 * (img - lo) / max(hi - lo, 1e-9)
        images.append(img)
    return images


def _noise_dataset_2d(camera, settings, images, patch, rng: Rng):
    """Per-patch training records: noise plus conditioning, in noise units."""
    plan = plan_tiles(camera.sensor_shape[1], camera.sensor_shape[2], patch, 0.25)
    records = []
    for img_idx, img in enumerate(images):
        for tile_idx, origin in enumerate(plan.origins):
            clean_patch = plan.extract(img, origin)
            coords = plan.coords_for(origin)
            for set_idx, setting in enumerate(settings):
                noise, _ = sample_camera_noise(
                    clean_patch,
                    setting,
                    camera,
                    coords,
                    rng.derive(img_idx, tile_idx, set_idx),
                    clip=False,
                )
                records.append(
                    {
                        "noise": noise,
                        "clean": clean_patch,
                        "coords": coords,
                        "setting_idx": set_idx,
                    }
                )
    return records


def _per_setting_normalization(records, n_settings: int) -> dd.Normalization:
    offsets = np.zeros(n_settings)
    scales = np.ones(n_settings)
    for idx in range(n_settings):
        pool = np.concatenate(
            [r["noise"].ravel() for r in records if r["setting_idx"] == idx]
        )
        offsets[idx] = pool.mean()
        scales[idx] = max(pool.std(), 1e-12)
    return dd.Normalization(offset=offsets, scale=scales)


def load_archive_records(manifest_path):
    """Training records (noise/clean/coords/setting) from a pair archive.

    Returns (records, settings, sensor_extent) where sensor_extent is the
    larger source-image dimension (used to normalize absolute coordinates).
    """
    import json as _json

    from .fileio import load_nst
    from .pairs import load_manifest

    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    meta = _json.loads(manifest_path.read_text())
    patch = meta["patch"]
    sensor_extent = max(meta.get("image_shape", [patch, patch]))
    settings = sorted(
        {
            CameraSetting(r.iso, r.exposure_ratio)
            for r in load_manifest(manifest_path)
        },
        key=lambda s: (s.iso, s.exposure_ratio),
    )
    index = {s: i for i, s in enumerate(settings)}
    records = []
    for r in load_manifest(manifest_path):
        clean, _ = load_nst(base / r.clean)
        noise, _ = load_nst(base / r.noise)
        r0, c0 = r.origin
        rows = np.arange(r0, r0 + patch)
        cols = np.arange(c0, c0 + patch)
        records.append(
            {
                "noise": noise.astype(np.float64),
                "clean": clean.astype(np.float64),
                "coords": np.stack(np.meshgrid(rows, cols, indexing="ij")),
                "setting_idx": index[r.setting],
            }
        )
    return records, settings, sensor_extent


def train_toy2d_model(
    camera: SyntheticCameraModel,
    settings,
    rng: Rng,
    use_mlp_branch: bool = True,
    progress=None,
    records=None,
    **overrides,
) -> dd.DiffusionModel:
    cfg = dict(TOY2D_DEFAULTS)
    cfg.update(overrides)
    if records is None:
        images = make_toy_clean_images(
            cfg["n_train_images"], cfg["sensor"], rng.derive(0)
        )
        records = _noise_dataset_2d(
            camera, settings, images, cfg["patch"], rng.derive(1)
        )
    norm = _per_setting_normalization(records, len(settings))
    net_cfg = TwoBranchConfig(
        in_channels=camera.sensor_shape[0],
        base_channels=cfg["base_channels"],
        depth=cfg["depth"],
        use_mlp_branch=use_mlp_branch,
    )
    net = TwoBranchNet(net_cfg, settings, rng.derive(2))
    model = dd.DiffusionModel(
        schedule=build_schedule(cfg["schedule"], cfg["T"]), net=net, normalization=norm
    )
    adam = Adam(net.parameters(), lr=cfg["lr"])
    extent = cfg["sensor"] - 1
    order_rng = rng.derive(3)
    for step in range(cfg["train_steps"]):
        frac = step / max(cfg["train_steps"] - 1, 1)
        adam.lr = cfg["lr_final"] + 0.5 * (cfg["lr"] - cfg["lr_final"]) * (
            1 + math.cos(math.pi * frac)
        )
        picks = order_rng.derive(step).integers(0, len(records), size=cfg["batch"])
        batch = {
            "n0": np.stack([records[i]["noise"] for i in picks]),
            "clean": np.stack([records[i]["clean"] for i in picks]),
            "coords": np.stack([records[i]["coords"] for i in picks]) / extent,
            "setting_idx": np.array([records[i]["setting_idx"] for i in picks]),
        }
        loss = dd.training_step(model, batch, rng.derive(4, step), adam)
        if progress and step % 200 == 0:
            progress(f"step {step}/{cfg['train_steps']} loss {loss:.4f}")
    return model


def _generate_stitched_frames(
    generator: DiffusionNoiseGenerator,
    camera,
    setting,
    clean_image,
    n_frames: int,
    patch: int,
    rng: Rng,
):
    """Sample patch-wise noise frames and stitch them to full sensors."""
    _, h, w = camera.sensor_shape
    plan = plan_tiles(h, w, patch, 0.0)
    cleans = np.stack([plan.extract(clean_image, o) for o in plan.origins])
    coords = np.stack([plan.coords_for(o) for o in plan.origins]).astype(np.float64)
    frames = []
    patch_means = []
    for k in range(n_frames):
        noise = generator.batch(cleans, coords, setting, rng.derive(k))
        frames.append(stitch(list(noise), plan, camera.sensor_shape[0]))
        patch_means.extend([p.mean() for p in noise])
    return np.stack(frames), np.array(patch_means), plan


def _toy2d_condition_stats(camera, setting, clean_image, frames, gt_frames):
    """KLD, per-level variance curve, and fixed-pattern correlation."""
    levels = np.rint(clean_image * 255).astype(np.int64)
    levels_rep = np.broadcast_to(levels, frames.shape)
    klv = kld_from_samples(gt_frames.ravel(), frames.ravel())
    st = per_clean_value_stats(levels_rep, frames, max_level=255)
    # Fixed-pattern correlation over the bottom third of the sensor.
    h = camera.sensor_shape[1]
    fp = camera.fixed_pattern_at(full_coords(h, camera.sensor_shape[2]), setting)
    mean_map = frames.mean(axis=0)
    bottom = slice(2 * h // 3, h)
    r = np.corrcoef(fp[:, bottom, :].ravel(), mean_map[:, bottom, :].ravel())[0, 1]
    return {
        "kld": float(klv),
        "fp_corr_bottom": float(r),
        "gen_std": float(frames.std()),
        "gt_std": float(gt_frames.std()),
        "levels": st.levels[st.occupied].tolist(),
        "levels_var": st.var[st.occupied].tolist(),
        "levels_count": st.count[st.occupied].tolist(),
    }


def run_toy2d(config: dict | None = None, threads: int | None = None,
              progress=print) -> dict:
    cfg = dict(TOY2D_DEFAULTS)
    cfg.update(config or {})
    camera = default_toy_camera()
    settings = list(TOY2D_SETTINGS)
    rng = Rng(cfg["seed"])

    def log(msg):
        if progress:
            progress(f"[toy2d] {msg}")

    # Two trainings: full two-branch and UNet-only ablation.
    log("training full and unet-only models")
    trained = dict(_run_parallel(_train_toy2d_task, [
        (name, use_mlp, cfg, threads)
        for name, use_mlp in (("full", True), ("unet_only", False))
    ], min(2, _worker_count(threads))))

    eval_setting = settings[1]  # high-ISO, strong structure
    eval_image = make_toy_clean_images(1, cfg["sensor"], rng.derive(90))[0]
    gt_frames = []
    coords = full_coords(camera.sensor_shape[1], camera.sensor_shape[2])
    for k in range(cfg["n_eval_frames"]):
        noise, _ = sample_camera_noise(
            eval_image, eval_setting, camera, coords, rng.derive(91, k), clip=False
        )
        gt_frames.append(noise)
    gt_frames = np.stack(gt_frames)

    log("generating frames for full / zero-coords / unet-only conditions")
    gen_tasks = [
        ("full", trained["full"], False, cfg, eval_image, eval_setting),
        ("zero_coords", trained["full"], True, cfg, eval_image, eval_setting),
        ("unet_only", trained["unet_only"], False, cfg, eval_image, eval_setting),
    ]
    outs = dict(
        _run_parallel(_generate_condition_task, gen_tasks, min(2, _worker_count(threads)))
    )
    report: dict = {"experiment": "toy2d", "conditions": {}}
    for name, (frames, patch_means) in outs.items():
        stats = _toy2d_condition_stats(camera, eval_setting, eval_image, frames, gt_frames)
        stats["patch_mean_std"] = float(np.std(patch_means))
        report["conditions"][name] = stats

    # Camera-setting injectivity: generated variance ordering across settings
    # must match the oracle's.
    log("checking per-setting variance ordering")
    low_setting = settings[0]
    _, (frames_low, _) = _generate_condition_task(
        ("low", trained["full"], False, dict(cfg, n_eval_frames=6), eval_image,
         low_setting)
    )
    gt_low = np.stack(
        [
            sample_camera_noise(
                eval_image, low_setting, camera, coords, rng.derive(95, k), clip=False
            )[0]
            for k in range(6)
        ]
    )
    report["setting_variances"] = {
        "low": {"gen_var": float(frames_low.var()), "gt_var": float(gt_low.var())},
        "high": {
            "gen_var": float(outs["full"][0].var()),
            "gt_var": float(gt_frames.var()),
        },
    }

    if cfg["include_denoiser"]:
        log("running denoiser transfer study")
        report["denoiser"] = _denoiser_transfer_study(
            camera, settings, trained["full"], cfg, rng.derive(93), log
        )
    return report


def _generate_condition_task(task):
    name, model, zero_coords, cfg, eval_image, eval_setting = task
    _limit_blas_threads(1 if (os.cpu_count() or 1) > 1 else 2)
    camera = default_toy_camera()
    gen = DiffusionNoiseGenerator(
        model,
        camera.sensor_shape,
        camera.black_level,
        camera.white_level,
        sampler="ddim",
        steps=cfg["ddim_steps"],
        zero_coords=zero_coords,
    )
    frames, patch_means, _ = _generate_stitched_frames(
        gen, camera, eval_setting, eval_image, cfg["n_eval_frames"],
        cfg["patch"], Rng(cfg["seed"]).derive(92, hash_name(name)),
    )
    return name, (frames, patch_means)


def hash_name(name: str) -> int:
    return int.from_bytes(name.encode()[:4].ljust(4, b"_"), "little") % 100003


def _train_toy2d_task(task):
    name, use_mlp, cfg, threads = task
    _limit_blas_threads(1 if _worker_count(threads) > 1 else 2)
    camera = default_toy_camera()
    settings = list(TOY2D_SETTINGS)
    model = train_toy2d_model(
        camera,
        settings,
        Rng(cfg["seed"]).derive(hash_name(name)),
        use_mlp_branch=use_mlp,
        **{k: v for k, v in cfg.items() if k in TOY2D_DEFAULTS},
    )
    return name, model


# =============================================================================
# Denoiser transfer (downstream utility)
# =============================================================================

DENOISER_DEFAULTS = dict(
    steps=1400,
    batch=8,
    lr=1.5e-3,
    base_channels=12,
    n_pair_images=6,
    n_test_images=4,
)


def _denoiser_transfer_study(camera, settings, diffusion_model, cfg, rng: Rng, log):
    dcfg = dict(DENOISER_DEFAULTS)
    dcfg.update(cfg.get("denoiser") or {})
    patch = cfg["patch"]
    h, w = camera.sensor_shape[1], camera.sensor_shape[2]
    plan = plan_tiles(h, w, patch, 0.0)
    train_images = make_toy_clean_images(dcfg["n_pair_images"], cfg["sensor"], rng.derive(0))
    test_images = make_toy_clean_images(dcfg["n_test_images"], cfg["sensor"], rng.derive(1))

    oracle_gen = PhysicsNoiseGenerator(camera)
    sigma_match = {
        s: math.sqrt(
            camera.signal_independent_variance(s)
            + camera.shot_slope(s) * 0.35  # mid-range clean level
        )
        for s in settings
    }
    gauss_gen = GaussianNoiseGenerator(sigma_match)
    diff_gen = DiffusionNoiseGenerator(
        diffusion_model,
        camera.sensor_shape,
        camera.black_level,
        camera.white_level,
        sampler="ddim",
        steps=cfg["ddim_steps"],
    )

    def build_pairs(generator, stream):
        # One batched draw per (image, setting): the diffusion sampler
        # amortizes its reverse steps over all tiles at once.
        pairs = []
        for img_idx, img in enumerate(train_images):
            cleans = np.stack([plan.extract(img, o) for o in plan.origins])
            coords = np.stack([plan.coords_for(o) for o in plan.origins]).astype(
                np.float64
            )
            for set_idx, setting in enumerate(settings):
                if hasattr(generator, "batch"):
                    noise = generator.batch(
                        cleans, coords, setting, stream.derive(img_idx, set_idx)
                    )
                else:
                    noise = np.stack(
                        [
                            generator(
                                cleans[k], coords[k], setting,
                                stream.derive(img_idx, set_idx, k),
                            )
                            for k in range(len(cleans))
                        ]
                    )
                noisy = np.clip(
                    cleans + noise, camera.black_level, camera.white_level
                )
                pairs.extend((cleans[k], noisy[k]) for k in range(len(cleans)))
        return pairs

    log("building oracle/diffusion/gaussian pair sets")
    pair_sets = {
        "oracle": build_pairs(oracle_gen, rng.derive(10)),
        "diffusion": build_pairs(diff_gen, rng.derive(11)),
        "gaussian": build_pairs(gauss_gen, rng.derive(12)),
    }
    test_pairs = []
    for img_idx, img in enumerate(test_images):
        for tile_idx, origin in enumerate(plan.origins):
            clean_patch = plan.extract(img, origin)
            coords = plan.coords_for(origin)
            for set_idx, setting in enumerate(settings):
                noise = oracle_gen(
                    clean_patch, coords, setting, rng.derive(13, img_idx, tile_idx, set_idx)
                )
                noisy = np.clip(
                    clean_patch + noise, camera.black_level, camera.white_level
                )
                test_pairs.append((clean_patch, noisy))

    results = {}
    tasks = [
        (name, pairs, dcfg, camera.sensor_shape[0], cfg["seed"])
        for name, pairs in pair_sets.items()
    ]
    outs = _run_parallel(_train_denoiser_task, tasks, min(3, _worker_count(None)))
    for name, state in outs:
        denoiser = _denoiser_from_state(state, camera.sensor_shape[0], dcfg)
        results[name] = evaluate_denoiser(
            denoiser, test_pairs, data_range=camera.white_level - camera.black_level
        )
    identity = evaluate_denoiser(
        None, test_pairs, data_range=camera.white_level - camera.black_level
    )
    return {"identity": identity, "by_source": results}


def _train_denoiser_task(task):
    name, pairs, dcfg, channels, seed = task
    _limit_blas_threads(1)
    denoiser, _ = train_toy_denoiser(
        pairs,
        steps=dcfg["steps"],
        batch=dcfg["batch"],
        lr=dcfg["lr"],
        rng=Rng(seed).derive(hash_name(name)),
        config=DenoiserConfig(in_channels=channels, base_channels=dcfg["base_channels"]),
    )
    return name, denoiser.state_dict()


def _denoiser_from_state(state, channels, dcfg):
    from .nets import DenoiserUNet

    net = DenoiserUNet(
        DenoiserConfig(in_channels=channels, base_channels=dcfg["base_channels"]),
        Rng(0),
    )
    net.load_state_dict(state)
    return net


# =============================================================================
# Dispatch
# =============================================================================


def run_experiment(name: str, config: dict | None = None,
                   threads: int | None = None) -> dict:
    runners = {
        "poisson1d": run_poisson1d,
        "tukey_lambda": run_tukey_lambda,
        "toy2d": run_toy2d,
        "mmse": run_mmse,
        "schedule_dump": run_schedule_dump,
    }
    if name not in runners:
        raise ConfigError(f"unknown experiment {name!r}; known: {EXPERIMENT_NAMES}")
    return runners[name](config, threads=threads)


def write_report(report: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{report['experiment']}_report.json"
    path.write_text(json.dumps(report, indent=2, default=_json_default))
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")
