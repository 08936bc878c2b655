"""``lddim`` command line: dataset generation, prior training, sampling,
inversion, sweeps, evaluation and plotting.

Every command is a pure function of the configuration file, the command-line
overrides and the master seed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import rng as rngmod
from .adjoint import forward_solve
from .config import ConfigError, RunConfig, describe_keys, log_metrics, resolved_k_offset
from .fields import Manifest, build_dataset
from .fvm import BoundaryConditions
from .grid import ScalarField2D, read_field, write_field

log = logging.getLogger("lddim")

COMMANDS = ("generate", "train-vae", "train-diffusion", "sample", "invert", "sweep", "evaluate", "plot")


class CommandError(RuntimeError):
    """User-facing failure; the message is printed and the exit code is 1."""


# -- helpers -------------------------------------------------------------------------

def _bc(cfg: RunConfig) -> BoundaryConditions:
    return BoundaryConditions(cfg.left_head, cfg.right_head)


def _out(args, default) -> Path:
    return Path(args.out) if args.out else Path(default)


def _split_counts(n: int) -> tuple[int, int, int]:
    n_val, n_test = int(round(0.2 * n)), int(round(0.1 * n))
    return n - n_val - n_test, n_val, n_test


def _train_config(cfg: RunConfig, stage: str):
    from .prior.train import TrainConfig

    lr, epochs = (cfg.lr, cfg.epochs) if stage == "vae" else (cfg.diffusion_lr, cfg.diffusion_epochs)
    return TrainConfig(lr=lr, epochs=epochs, batch=cfg.batch, lambda_kl=cfg.lambda_kl, T=cfg.T,
                       latent_channels=cfg.latent_channels, vae_channels=cfg.vae_channels,
                       unet_base=cfg.unet_base, seed=cfg.seed)


def _inversion_config(cfg: RunConfig):
    from .inversion import InversionConfig

    return InversionConfig(beta=cfg.beta, eta=cfg.eta, max_iter=cfg.max_iter, ddim_steps=cfg.ddim_steps,
                           prior_mode=cfg.prior_mode, optimizer=cfg.optimizer, seed=cfg.seed,
                           k_obs_weight=cfg.k_obs_weight, smoothing=cfg.smoothing, init_log_k=cfg.init_log_k)


def _load_prior(cfg: RunConfig, need_diffusion: bool):
    from .prior import load_prior

    d = Path(cfg.prior_dir)
    vae, diff = d / "vae.ldad", d / "diffusion.ldad"
    if not vae.exists():
        raise CommandError(f"VAE checkpoint not found: {vae}")
    if need_diffusion and not diff.exists():
        raise CommandError(f"diffusion checkpoint not found: {diff}")
    return load_prior(vae, diff if diff.exists() else None)


def _read(path) -> ScalarField2D:
    try:
        return read_field(path)
    except OSError as exc:
        raise CommandError(f"cannot read field {path}: {exc.strerror or exc}") from exc


def _read_manifest(dataset) -> tuple[Path, Manifest]:
    root = Path(dataset)
    return root, Manifest.read(root / "manifest.txt")


def _test_fields(dataset) -> list[ScalarField2D]:
    root, m = _read_manifest(dataset)
    recs = m.split("test") or m.split("val") or m.split("train")
    if not recs:
        raise CommandError(f"dataset {root} contains no fields")
    return [_read(root / r.filename) for r in recs]


# -- commands ------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, args) -> None:
    n = args.n if args.n is not None else cfg.n_total
    splits = _split_counts(n) if args.n is not None else cfg.splits
    out = _out(args, cfg.dataset)
    m = build_dataset(cfg.kind, out, n, splits, cfg.seed, nx=cfg.nx, ny=cfg.ny, k_offset=cfg.k_offset)
    log.info("wrote %d %s fields to %s", len(m.records), cfg.kind, out)


def cmd_train_vae(cfg: RunConfig, args) -> None:
    from .prior.train import load_training_data, train_vae

    data = load_training_data(cfg.dataset)
    train_vae(data, _train_config(cfg, "vae"), _out(args, cfg.prior_dir), resume=cfg.resume)


def cmd_train_diffusion(cfg: RunConfig, args) -> None:
    from .prior.train import load_training_data, train_diffusion, vae_from_checkpoint

    out = _out(args, cfg.prior_dir)
    vae_path = out / "vae.ldad"
    if not vae_path.exists():
        raise CommandError(f"diffusion training needs a trained VAE; no checkpoint at {vae_path} (run train-vae first)")
    data = load_training_data(cfg.dataset)
    vae, _, _ = vae_from_checkpoint(vae_path)
    train_diffusion(data, vae, _train_config(cfg, "diffusion"), out, resume=cfg.resume)


def cmd_sample(cfg: RunConfig, args) -> None:
    from .prior import sample

    prior = _load_prior(cfg, need_diffusion=not args.vae)
    g = rngmod.stream(cfg.seed, "sample")
    z = g.standard_normal((cfg.n_samples,) + prior.latent_shape)
    out = _out(args, "samples")
    out.mkdir(parents=True, exist_ok=True)
    if args.vae:
        # VAE baseline: standard normal draws in the scaled latent space, no chain
        fields = sample(z, prior, n_steps=None)
    else:
        fields = sample(z, prior, n_steps=cfg.sample_steps)
    for i, f in enumerate(fields):
        write_field(out / f"sample_{i:04d}.ldf2", f)
    log.info("wrote %d samples to %s", len(fields), out)


def _truth_for_inversion(cfg: RunConfig) -> ScalarField2D | None:
    if cfg.truth:
        return _read(cfg.truth)
    if cfg.observations:
        return None
    fields = _test_fields(cfg.dataset)
    if cfg.truth_index >= len(fields):
        raise CommandError(f"truth_index {cfg.truth_index} out of range; the test split has {len(fields)} fields")
    return fields[cfg.truth_index]


def cmd_invert(cfg: RunConfig, args) -> None:
    from .inversion import (
        InversionProblem,
        ObservationSet,
        pixel_space_invert,
        run_inversion,
        synthetic_observations,
        write_result,
    )
    from .metrics import field_metrics

    icfg = _inversion_config(cfg)
    bc = _bc(cfg)
    pixel = icfg.prior_mode == "pixel-space"
    prior = None
    if not pixel or (Path(cfg.prior_dir) / "vae.ldad").exists():
        prior = _load_prior(cfg, need_diffusion=icfg.prior_mode == "latent-diffusion")
    offset = prior.norm.k_offset if prior is not None else resolved_k_offset(cfg)

    truth = _truth_for_inversion(cfg)
    h_true = None
    if truth is not None:
        h_true = forward_solve(ScalarField2D.like(truth, truth.values + offset), bc).h
    if cfg.observations:
        obs = ObservationSet.from_csv(cfg.observations)
    else:
        obs = synthetic_observations(h_true, cfg.obs_grid, K_true=truth, k_side=cfg.k_obs_grid,
                                     noise_std=cfg.noise_std, seed=cfg.seed)

    if pixel:
        shape = (truth.ny, truth.nx) if truth is not None else (cfg.ny, cfg.nx)
        spacing = (truth.dx, truth.dy) if truth is not None else (100.0 / cfg.nx, 100.0 / cfg.ny)
        res = pixel_space_invert(obs, icfg, shape=shape, prior=prior, bc=bc, spacing=spacing, k_offset=offset)
    else:
        res = run_inversion(InversionProblem(obs, icfg, prior, bc))
    if truth is not None:
        in_log = log_metrics(cfg, offset)
        kh, kt = res.k_hat, truth
        if in_log:
            kh = ScalarField2D.like(kh, kh.values + offset)
            kt = ScalarField2D.like(kt, kt.values + offset)
        res.metrics = field_metrics(kh, kt, res.h_hat, h_true, in_log)
    out = _out(args, "inversion")
    write_result(res, out, run=cfg.prior_mode)
    obs.to_csv(out / "observations.csv")
    log.info("inversion finished after %d iterations (best %d); bundle in %s", res.iterations, res.best_iter, out)


def cmd_sweep(cfg: RunConfig, args) -> None:
    from .inversion import experiment_sweep, write_sweep

    icfg = _inversion_config(cfg)
    prior = None
    if icfg.prior_mode != "pixel-space" or (Path(cfg.prior_dir) / "vae.ldad").exists():
        prior = _load_prior(cfg, need_diffusion=icfg.prior_mode == "latent-diffusion")
    offset = prior.norm.k_offset if prior is not None else resolved_k_offset(cfg)
    truths = _test_fields(cfg.dataset)[: cfg.sweep_seeds]
    seeds = [cfg.seed + s for s in range(cfg.sweep_seeds)]
    rows, summary = experiment_sweep(cfg.sweep_kind, truths, prior, icfg, seeds, layouts=cfg.sweep_layouts,
                                     log_domain=log_metrics(cfg, offset), k_side=cfg.k_obs_grid,
                                     workers=cfg.workers, bc=_bc(cfg))
    out = _out(args, "sweep")
    write_sweep(rows, summary, out)
    failed = [r for r in rows if r["status"] != "ok"]
    if failed:
        log.warning("%d of %d sweep runs did not finish cleanly; see %s", len(failed), len(rows), out / "runs.csv")


def _field_files(path: Path) -> list[Path]:
    files = sorted(path.glob("**/*.ldf2"))
    if not files:
        raise CommandError(f"no .ldf2 files under {path}")
    return files


def cmd_evaluate(cfg: RunConfig, args) -> None:
    """Two files: field metrics. Two directories: FID and KID between the sets."""
    from .inversion import write_metrics_csv
    from .metrics import FeatureExtractor, fid, field_metrics, kid

    a, b = Path(args.pred), Path(args.truth)
    for p in (a, b):
        if not p.exists():
            raise CommandError(f"path not found: {p}")
    out = _out(args, ".")
    out.mkdir(parents=True, exist_ok=True)
    if a.is_dir() != b.is_dir():
        raise CommandError("evaluate takes two fields or two directories of fields")
    if a.is_dir():
        ext = FeatureExtractor(cfg.extractor_seed, cfg.embed_dim)
        offset = resolved_k_offset(cfg)

        def embed_dir(d):
            fields = [np.log(_read(f).values + offset) for f in _field_files(d)]
            return np.concatenate([ext(fields[i:i + 64]) for i in range(0, len(fields), 64)])

        ea, eb = embed_dir(a), embed_dir(b)
        rows = [("fid", fid(eb, ea, shrinkage=1e-6)), ("kid", kid(eb, ea))]
        write_metrics_csv(out / "metrics.csv", [(a.name, k, v) for k, v in rows])
        return
    pred, truth = _read(a), _read(b)
    if not pred.same_grid(truth):
        raise CommandError(f"{a} and {b} are on different grids")
    offset = resolved_k_offset(cfg)
    bc = _bc(cfg)
    h_pred = forward_solve(ScalarField2D.like(pred, pred.values + offset), bc).h
    h_true = forward_solve(ScalarField2D.like(truth, truth.values + offset), bc).h
    in_log = log_metrics(cfg, offset)
    kp, kt = pred, truth
    if in_log:
        kp = ScalarField2D.like(pred, pred.values + offset)
        kt = ScalarField2D.like(truth, truth.values + offset)
    m = field_metrics(kp, kt, h_pred, h_true, in_log)
    write_metrics_csv(out / "metrics.csv", [(a.stem, k, v) for k, v in m.rows()])


def heatmap_figure(f: ScalarField2D, values: np.ndarray, title: str, label: str):
    """Viridis heatmap in physical coordinates with a colorbar spanning the data range."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lo, hi = float(values.min()), float(values.max())
    pad = 0.0 if lo < hi else max(abs(lo) * 1e-6, 1e-12)
    half_x, half_y = f.nx * f.dx / 2, f.ny * f.dy / 2
    fig, ax = plt.subplots(figsize=(4.8, 4.0), dpi=100)
    im = ax.imshow(values, origin="lower", cmap="viridis", vmin=lo - pad, vmax=hi + pad,
                   extent=(-half_x, half_x, -half_y, half_y), interpolation="nearest")
    cb = fig.colorbar(im, ax=ax)
    cb.set_label(label)
    if pad:
        cb.set_ticks([lo])
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title)
    return fig


def cmd_plot(cfg: RunConfig, args) -> None:
    import matplotlib.pyplot as plt

    f = _read(args.field)
    values = f.values
    if args.log:
        if np.any(values <= 0):
            raise CommandError(f"{args.field} has non-positive values; cannot plot ln K")
        values = np.log(values)
    out = _out(args, ".")
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.field).stem
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        for row in f.values[::-1]:    # top row of the image first
            w.writerow([repr(float(v)) for v in row])
    fig = heatmap_figure(f, values, stem, "ln K" if args.log else "value")
    # no Software tag: identical inputs give identical bytes across matplotlib builds
    fig.savefig(out / f"{stem}.png", metadata={"Software": None})
    plt.close(fig)


HANDLERS = {
    "generate": cmd_generate, "train-vae": cmd_train_vae, "train-diffusion": cmd_train_diffusion,
    "sample": cmd_sample, "invert": cmd_invert, "sweep": cmd_sweep, "evaluate": cmd_evaluate, "plot": cmd_plot,
}


# -- entry point ---------------------------------------------------------------------

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # the subcommand copies suppress their defaults so flags given before the
    # subcommand name are not reset
    d = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file", **d)
    common.add_argument("--seed", type=int, help="master seed (overrides the config)", **d)
    common.add_argument("--out", help="output directory", **d)
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key; repeatable", **d)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr", **d)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)

    p = argparse.ArgumentParser(
        prog="lddim", parents=[_global_flags(suppress=False)], formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Conductivity inversion from sparse head data with a latent diffusion prior.",
        epilog=describe_keys(),
    )
    p.add_argument("--version", action="version", version=f"lddim {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, epilog=describe_keys(),
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    g = add("generate", "synthesise a conductivity dataset")
    g.add_argument("--n", type=int, help="total field count; splits become 70/20/10")
    add("train-vae", "train the VAE on the dataset")
    add("train-diffusion", "train the latent denoiser on a frozen VAE")
    s = add("sample", "draw fields from the trained prior")
    s.add_argument("--vae", action="store_true", help="decode standard normal latents without the diffusion chain")
    add("invert", "estimate conductivity from head observations")
    add("sweep", "seed-sensitivity or observation-density experiment")
    e = add("evaluate", "metrics between two fields, or FID/KID between two directories")
    e.add_argument("pred")
    e.add_argument("truth")
    pl = add("plot", "render a field as a PNG heatmap plus CSV")
    pl.add_argument("field")
    pl.add_argument("--log", action="store_true", help="plot the natural log of the field")
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value.strip())
    if args.seed is not None:
        cfg.set("seed", str(args.seed))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        HANDLERS[args.command](cfg, args)
    except (CommandError, ConfigError, FileNotFoundError, OSError, ValueError, RuntimeError) as exc:
        print(f"lddim {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
