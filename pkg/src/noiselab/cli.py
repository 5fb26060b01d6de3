"""Command-line interface.

Verbs: schedule dump, physics sample, diffusion train|sample, mmse verify,
stats compare, pairs generate, denoise train|eval, experiment run.
Exit codes: 0 success, 2 configuration error, 3 numeric failure.

Heavy imports happen inside command handlers so ``--threads`` can cap BLAS
pools before numpy spins them up.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noiselab",
        description="Low-light noise synthesis: physics oracles, diffusion "
        "generators, and statistical verification.",
    )
    parser.add_argument("--seed", type=int, default=0, help="global RNG seed")
    parser.add_argument("--threads", type=int, default=None, help="worker/BLAS thread cap")
    parser.add_argument("--out", type=str, default=None, help="output file or directory")
    sub = parser.add_subparsers(dest="group", required=True)

    p = sub.add_parser("schedule", help="noise-schedule utilities")
    ps = p.add_subparsers(dest="verb", required=True)
    d = ps.add_parser("dump", help="write (t, beta, alpha_bar, c_t) rows as CSV")
    d.add_argument("--name", default="sigmoid2")
    d.add_argument("--T", type=int, default=1000)

    p = sub.add_parser("physics", help="synthetic camera sampling")
    ps = p.add_subparsers(dest="verb", required=True)
    s = ps.add_parser("sample", help="draw a clean-noisy pair from a camera config")
    s.add_argument("--config", required=True, help="camera model JSON")
    s.add_argument("--clean", required=True, help="clean image (NST)")
    s.add_argument("--iso", type=int, required=True)
    s.add_argument("--ratio", type=float, required=True)
    s.add_argument("--origin", type=int, nargs=2, default=(0, 0),
                   help="absolute (row, col) of the patch on the sensor")

    p = sub.add_parser("diffusion", help="train or sample diffusion models")
    ps = p.add_subparsers(dest="verb", required=True)
    t = ps.add_parser("train", help="train the 2D two-branch model")
    t.add_argument("--config", default=None, help="JSON overrides for the toy study")
    t.add_argument("--data", default=None,
                   help="pair archive manifest.json; default trains on the "
                   "built-in synthetic camera")
    t.add_argument("--ckpt", required=True, help="output checkpoint (NDCK)")
    s = ps.add_parser("sample", help="sample noise conditioned on a clean image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--clean", required=True, help="clean image (NST)")
    s.add_argument("--iso", type=int, required=True)
    s.add_argument("--ratio", type=float, required=True)
    s.add_argument("--sampler", choices=("ddpm", "ddim"), default="ddpm")
    s.add_argument("--steps", type=int, default=100, help="DDIM step count")
    s.add_argument("--coords", default="auto",
                   help="'auto' for absolute coords, 'zero' for the ablation")

    p = sub.add_parser("mmse", help="variance-shrinkage verification")
    ps = p.add_subparsers(dest="verb", required=True)
    v = ps.add_parser("verify")
    v.add_argument("--prior", choices=("gaussian", "gmm"), default="gaussian")
    v.add_argument("--sigma2", type=float, default=1.0)
    v.add_argument("--sigma1", type=float, default=0.5)
    v.add_argument("--n", type=int, default=10**6)

    p = sub.add_parser("stats", help="compare noise archives")
    ps = p.add_subparsers(dest="verb", required=True)
    c = ps.add_parser("compare", help="KLD + per-clean-level curves for two pair dirs")
    c.add_argument("--real", required=True, help="manifest.json of the reference pairs")
    c.add_argument("--gen", required=True, help="manifest.json of the generated pairs")
    c.add_argument("--csv", default=None, help="per-level curve CSV path")
    c.add_argument("--levels", type=int, default=255)

    p = sub.add_parser("pairs", help="clean-noisy pair generation")
    ps = p.add_subparsers(dest="verb", required=True)
    g = ps.add_parser("generate")
    g.add_argument("--config", required=True, help="camera model JSON")
    g.add_argument("--clean", required=True, nargs="+", help="clean NST images")
    g.add_argument("--iso", type=int, nargs="+", required=True)
    g.add_argument("--ratio", type=float, nargs="+", required=True)
    g.add_argument("--patch", type=int, default=64)
    g.add_argument("--overlap", type=float, default=0.25)

    p = sub.add_parser("denoise", help="toy denoiser training/evaluation")
    ps = p.add_subparsers(dest="verb", required=True)
    t = ps.add_parser("train")
    t.add_argument("--pairs", required=True, help="pair archive manifest.json")
    t.add_argument("--steps", type=int, default=1400)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=1.5e-3)
    t.add_argument("--ckpt", required=True)
    e = ps.add_parser("eval")
    e.add_argument("--pairs", required=True, help="held-out pair manifest.json")
    e.add_argument("--ckpt", required=True)

    p = sub.add_parser("experiment", help="run a named experiment protocol")
    ps = p.add_subparsers(dest="verb", required=True)
    r = ps.add_parser("run")
    r.add_argument("name", help="poisson1d | tukey_lambda | toy2d | mmse | schedule_dump")
    r.add_argument("--config", default=None, help="JSON config overrides (file or literal)")
    return parser


def _load_json_arg(value):
    if value is None:
        return None
    path = Path(value)
    if path.exists():
        return json.loads(path.read_text())
    return json.loads(value)


def _emit(payload: dict, out: str | None):
    text = json.dumps(payload, indent=2, default=str)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _cmd_schedule_dump(args) -> int:
    from .schedules import build_schedule, dump_csv

    schedule = build_schedule(args.name, args.T)
    if args.out:
        with open(args.out, "w") as f:
            dump_csv(schedule, f)
    else:
        dump_csv(schedule, sys.stdout)
    return 0


def _cmd_physics_sample(args) -> int:
    import numpy as np

    from .fileio import NstMeta, load_nst, save_nst
    from .physics import CameraSetting, SyntheticCameraModel, sample_camera_noise
    from .rng import Rng

    model = SyntheticCameraModel.from_config(_load_json_arg(args.config))
    clean, meta = load_nst(args.clean)
    clean = clean.astype(np.float64)
    setting = CameraSetting(iso=args.iso, exposure_ratio=args.ratio)
    r0, c0 = args.origin
    h, w = clean.shape[-2:]
    rows = np.arange(r0, r0 + h)
    cols = np.arange(c0, c0 + w)
    coords = np.stack(np.meshgrid(rows, cols, indexing="ij"))
    noise, noisy = sample_camera_noise(
        clean, setting, model, coords, Rng(args.seed), clip=True
    )
    out_dir = Path(args.out or "pair_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    common = dict(
        iso=args.iso,
        exposure_ratio=args.ratio,
        black_level=model.black_level,
        white_level=model.white_level,
    )
    save_nst(out_dir / "noise.nst", noise, NstMeta(kind="noise", **common))
    save_nst(out_dir / "noisy.nst", noisy, NstMeta(kind="noisy", **common))
    print(f"wrote {out_dir}/noise.nst and {out_dir}/noisy.nst")
    return 0


def _cmd_diffusion_train(args) -> int:
    from . import diffusion as dd
    from .experiments import (
        TOY2D_DEFAULTS,
        TOY2D_SETTINGS,
        default_toy_camera,
        load_archive_records,
        train_toy2d_model,
    )
    from .rng import Rng

    cfg = dict(TOY2D_DEFAULTS)
    cfg.update(_load_json_arg(args.config) or {})
    camera = default_toy_camera()
    if args.data:
        records, settings, sensor_extent = load_archive_records(args.data)
        cfg["sensor"] = sensor_extent
    else:
        records, settings = None, list(TOY2D_SETTINGS)
    model = train_toy2d_model(
        camera, settings, Rng(args.seed),
        progress=lambda m: print(m, flush=True),
        records=records,
        **{k: v for k, v in cfg.items() if k in TOY2D_DEFAULTS},
    )
    dd.save_model(
        args.ckpt, model, "two_branch", model.net.cfg.to_dict(), settings
    )
    print(f"saved {args.ckpt}")
    return 0


def _cmd_diffusion_sample(args) -> int:
    import numpy as np

    from . import diffusion as dd
    from .fileio import NstMeta, load_nst, save_nst
    from .pairs import DiffusionNoiseGenerator
    from .physics import CameraSetting
    from .rng import Rng
    from .tiling import full_coords

    model, settings = dd.load_model(args.ckpt)
    clean, meta = load_nst(args.clean)
    clean = clean.astype(np.float64)
    setting = CameraSetting(iso=args.iso, exposure_ratio=args.ratio)
    h, w = clean.shape[-2:]
    gen = DiffusionNoiseGenerator(
        model,
        sensor_shape=(clean.shape[0], h, w),
        black_level=meta.black_level,
        white_level=meta.white_level,
        sampler=args.sampler,
        steps=args.steps,
        zero_coords=(args.coords == "zero"),
    )
    noise = gen(clean, full_coords(h, w), setting, Rng(args.seed))
    out = args.out or "generated_noise.nst"
    save_nst(
        out,
        noise,
        NstMeta(
            iso=args.iso,
            exposure_ratio=args.ratio,
            black_level=meta.black_level,
            white_level=meta.white_level,
            kind="noise",
        ),
    )
    print(f"wrote {out}")
    return 0


def _cmd_mmse_verify(args) -> int:
    from .mmse import GaussianPrior, GmmPrior, MmseSetup, verify_proposition_mc
    from .rng import Rng

    if args.prior == "gaussian":
        prior = GaussianPrior(lam=0.0, sigma2=args.sigma2)
    else:
        prior = GmmPrior(weights=(0.4, 0.6), means=(-1.0, 1.5), stds=(0.6, 1.2))
    report = verify_proposition_mc(
        MmseSetup(prior=prior, sigma1=args.sigma1), args.n, Rng(args.seed)
    )
    _emit(
        {
            "prior": args.prior,
            "sigma1": args.sigma1,
            "analytic": report.analytic,
            "empirical": report.empirical,
            "rel_err": report.rel_err,
            "n_samples": report.n_samples,
        },
        args.out,
    )
    return 0


def _cmd_stats_compare(args) -> int:
    import csv as csvmod

    import numpy as np

    from .fileio import load_nst
    from .pairs import load_manifest
    from .stats import kld_from_samples, per_clean_value_stats, std_ratio

    def gather(manifest):
        base = Path(manifest).parent
        cleans, noises = [], []
        for rec in load_manifest(manifest):
            clean, meta = load_nst(base / rec.clean)
            noise, _ = load_nst(base / rec.noise)
            scale = (meta.white_level - meta.black_level) / args.levels
            cleans.append(((clean - meta.black_level) / scale).astype(np.float64))
            noises.append(noise.astype(np.float64))
        return np.stack(cleans), np.stack(noises)

    real_clean, real_noise = gather(args.real)
    gen_clean, gen_noise = gather(args.gen)
    report = {
        "kld": kld_from_samples(real_noise.ravel(), gen_noise.ravel()),
        "std_ratio": std_ratio(gen_noise, real_noise),
    }
    st = per_clean_value_stats(gen_clean, gen_noise, max_level=args.levels)
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csvmod.writer(f)
            w.writerow(["level", "mean", "var", "count"])
            for i in range(args.levels + 1):
                if st.count[i]:
                    w.writerow([i, st.mean[i], st.var[i], int(st.count[i])])
    _emit(report, args.out)
    return 0


def _cmd_pairs_generate(args) -> int:
    import numpy as np

    from .fileio import load_nst
    from .pairs import PhysicsNoiseGenerator, generate_pairs
    from .physics import CameraSetting, SyntheticCameraModel
    from .rng import Rng
    from .tiling import plan_tiles

    model = SyntheticCameraModel.from_config(_load_json_arg(args.config))
    if len(args.iso) != len(args.ratio):
        from .errors import ConfigError

        raise ConfigError("--iso and --ratio must have equal counts")
    settings = [
        CameraSetting(iso=i, exposure_ratio=r) for i, r in zip(args.iso, args.ratio)
    ]
    cleans = [load_nst(p)[0].astype(np.float64) for p in args.clean]
    h, w = cleans[0].shape[-2:]
    plan = plan_tiles(h, w, args.patch, args.overlap)
    manifest = generate_pairs(
        PhysicsNoiseGenerator(model),
        cleans,
        settings,
        plan,
        Rng(args.seed),
        args.out or "pairs_out",
        black_level=model.black_level,
        white_level=model.white_level,
    )
    print(f"wrote {manifest}")
    return 0


def _cmd_denoise_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .denoise import train_toy_denoiser
    from .pairs import load_pair_arrays
    from .rng import Rng

    data = load_pair_arrays(args.pairs)
    pairs = [(clean, noisy) for clean, noisy, _ in data]
    net, losses = train_toy_denoiser(
        pairs, steps=args.steps, batch=args.batch, lr=args.lr, rng=Rng(args.seed)
    )
    save_checkpoint(args.ckpt, net.state_dict())
    print(f"saved {args.ckpt} (final loss {sum(losses[-20:]) / 20:.5f})")
    return 0


def _cmd_denoise_eval(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .denoise import evaluate_denoiser
    from .nets import DenoiserConfig, DenoiserUNet
    from .pairs import load_pair_arrays
    from .rng import Rng

    data = load_pair_arrays(args.pairs)
    pairs = [(clean, noisy) for clean, noisy, _ in data]
    state = load_checkpoint(args.ckpt)
    channels = pairs[0][0].shape[0]
    base = state["stem.w"].shape[0]
    net = DenoiserUNet(DenoiserConfig(in_channels=channels, base_channels=base), Rng(0))
    net.load_state_dict(state)
    metrics = evaluate_denoiser(net, pairs, data_range=1.0)
    baseline = evaluate_denoiser(None, pairs, data_range=1.0)
    _emit({"denoiser": metrics, "identity": baseline}, args.out)
    return 0


def _cmd_experiment_run(args) -> int:
    from .experiments import run_experiment, write_report

    config = _load_json_arg(args.config) or {}
    report = run_experiment(args.name, config, threads=args.threads)
    if args.out:
        path = write_report(report, args.out)
        print(f"wrote {path}")
    else:
        _emit(report, None)
    return 0


_HANDLERS = {
    ("schedule", "dump"): _cmd_schedule_dump,
    ("physics", "sample"): _cmd_physics_sample,
    ("diffusion", "train"): _cmd_diffusion_train,
    ("diffusion", "sample"): _cmd_diffusion_sample,
    ("mmse", "verify"): _cmd_mmse_verify,
    ("stats", "compare"): _cmd_stats_compare,
    ("pairs", "generate"): _cmd_pairs_generate,
    ("denoise", "train"): _cmd_denoise_train,
    ("denoise", "eval"): _cmd_denoise_eval,
    ("experiment", "run"): _cmd_experiment_run,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(args.threads)
        except ImportError:
            pass
    from .errors import ConfigError, NumericError

    handler = _HANDLERS[(args.group, args.verb)]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
