"""Two-stage training: the VAE first, then the denoiser on frozen-VAE latents.

Each epoch draws from its own counter-based stream ``(seed, stage, epoch)``,
so training resumed from an epoch checkpoint continues bit for bit.
"""

from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import rng as rngmod
from ..autodiff import Adam, NonFiniteGradientError, Tape, Tensor, backward, checkpoint, ops
from ..fields import Manifest
from ..grid import read_field
from .model import Normalization, vae_from_arrays
from .networks import UNet, Vae, VaeShape, reparameterize, vae_loss
from .schedule import NoiseSchedule, make_schedule

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss or gradient went non-finite; parameters were rolled back."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch: int = 16
    lambda_kl: float = 1e-4
    T: int = 1000
    latent_channels: int = 4
    vae_channels: tuple[int, ...] = (16, 32, 64)
    unet_base: int = 32
    seed: int = 0
    extra: dict = field(default_factory=dict)


@dataclass
class TrainingData:
    train: np.ndarray   # (n, 1, ny, nx) network units
    val: np.ndarray
    norm: Normalization
    spacing: tuple[float, float]


def load_training_data(dataset_dir) -> TrainingData:
    root = Path(dataset_dir)
    if not (root / "manifest.txt").exists():
        raise FileNotFoundError(f"dataset manifest not found: {root / 'manifest.txt'}")
    m = Manifest.read(root / "manifest.txt")
    norm = Normalization(float(m.header["u_min"]), float(m.header["u_max"]), float(m.header["k_offset"]))
    arrays, spacing = {}, (1.0, 1.0)
    for split in ("train", "val"):
        fields = [read_field(root / r.filename) for r in m.split(split)]
        if fields:
            spacing = (fields[0].dx, fields[0].dy)
        arrays[split] = np.stack([norm.to_network(f.values)[None] for f in fields]) if fields else None
    if arrays["train"] is None:
        raise ValueError(f"dataset {root} has an empty training split")
    return TrainingData(arrays["train"], arrays["val"], norm, spacing)


# -- bookkeeping -------------------------------------------------------------

def _write_log(path: Path, rows: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for r in rows:
            w.writerow([r[0], repr(float(r[1])), repr(float(r[2]))])


def _read_log(path: Path) -> list[tuple]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"])) for r in csv.DictReader(fh)]


def _grads_by_name(params) -> dict[str, np.ndarray]:
    return {name: t.grad for name, t in params.items()}


def _batches(n: int, batch: int, g: np.random.Generator):
    order = g.permutation(n)
    for a in range(0, n, batch):
        yield order[a:a + batch]


def _chunks(n: int, size: int = 64):
    for a in range(0, n, size):
        yield slice(a, min(n, a + size))


def _save(path: Path, tensors: "OrderedDict[str, np.ndarray]") -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    checkpoint.save(tmp, tensors)
    tmp.replace(path)


# -- stage 1: VAE --------------------------------------------------------------

def _vae_arrays(vae: Vae, opt: Adam, norm: Normalization, spacing, epoch: int) -> "OrderedDict[str, np.ndarray]":
    s = vae.shape
    out = OrderedDict()
    for k, v in vae.parameters().arrays().items():
        out["vae." + k] = v
    out.update(opt.state_arrays())
    out["meta.resolution"] = np.array(s.resolution, dtype=np.float64)
    out["meta.latent_channels"] = np.array([s.latent_channels], dtype=np.float64)
    out["meta.vae_channels"] = np.array(s.channels, dtype=np.float64)
    out["meta.norm"] = np.array([norm.u_min, norm.u_max, norm.k_offset])
    out["meta.spacing"] = np.array(spacing, dtype=np.float64)
    out["meta.epoch"] = np.array([float(epoch)])
    return out


def vae_validation_loss(vae: Vae, y: np.ndarray | None, lambda_kl: float) -> float:
    """Mean-path (``eps = 0``) loss over ``y``, averaged per sample."""
    if y is None or len(y) == 0:
        return float("nan")
    total = 0.0
    for sl in _chunks(len(y)):
        x = Tensor(y[sl])
        mu, sigma = vae.encode(x)
        total += vae_loss(x, vae.decode(mu), mu, sigma, lambda_kl).item() * len(y[sl])
    return total / len(y)


def train_vae(data: TrainingData, config: TrainConfig, out_dir, resume: bool = False) -> Vae:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log_path = out / "vae.ldad", out / "vae_log.csv"
    shape = VaeShape(tuple(data.train.shape[2:]), config.latent_channels, tuple(config.vae_channels))
    vae = Vae(shape, rngmod.stream(config.seed, "init", "vae"))
    params = vae.parameters()
    opt = Adam(params, lr=config.lr)
    start, rows = 0, []
    if resume and ckpt.exists():
        arrays = checkpoint.load(ckpt)
        params.load(arrays, prefix="vae.")
        opt.load_state(arrays)
        start = int(arrays["meta.epoch"][0])
        rows = [r for r in _read_log(log_path) if r[0] <= start]

    for epoch in range(start + 1, config.epochs + 1):
        g = rngmod.stream(config.seed, "train-vae", epoch)
        snapshot = OrderedDict((k, v.copy()) for k, v in params.arrays().items())
        losses = []
        try:
            for idx in _batches(len(data.train), config.batch, g):
                x = Tensor(data.train[idx])
                eps = g.standard_normal((len(idx),) + shape.latent_shape)
                with Tape() as tape:
                    mu, sigma = vae.encode(x)
                    x_hat = vae.decode(reparameterize(mu, sigma, eps))
                    loss = vae_loss(x, x_hat, mu, sigma, config.lambda_kl)
                if not np.isfinite(loss.item()):
                    raise NonFiniteGradientError(f"non-finite VAE loss at epoch {epoch}")
                backward(tape, loss)
                opt.step(_grads_by_name(params))
                losses.append(loss.item())
        except NonFiniteGradientError as exc:
            params.load(snapshot)
            raise TrainingDivergedError(f"{exc}; parameters restored, last good checkpoint is {ckpt}") from exc
        val = vae_validation_loss(vae, data.val, config.lambda_kl)
        rows.append((epoch, float(np.mean(losses)), val))
        log.info("vae epoch %d train %.6g val %.6g", epoch, rows[-1][1], val)
        _save(ckpt, _vae_arrays(vae, opt, data.norm, data.spacing, epoch))
        _write_log(log_path, rows)
    return vae


# -- stage 2: denoiser -----------------------------------------------------------

def diffusion_loss(denoiser, z0: np.ndarray, schedule: NoiseSchedule, g: np.random.Generator) -> Tensor:
    """Noise-matching loss ``mean_b ||eps - eps_theta(z_t, t)||^2`` for one draw of (t, eps).

    ``denoiser(z_t: Tensor, t: ndarray) -> Tensor``.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim != 4 or len(z0) == 0:
        raise ValueError(f"diffusion_loss needs a non-empty (n, c, h, w) batch, got {z0.shape}")
    n = len(z0)
    t = g.integers(1, schedule.T + 1, size=n)
    eps = g.standard_normal(z0.shape)
    a = schedule.alpha_bar[t][:, None, None, None]
    z_t = np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps
    pred = denoiser(Tensor(z_t), t)
    return ops.mul(ops.sum(ops.square(ops.sub(pred, Tensor(eps)))), 1.0 / n)


def encode_dataset(vae: Vae, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mus, sigmas = [], []
    for sl in _chunks(len(y)):
        mu, sigma = vae.encode(Tensor(y[sl]))
        mus.append(mu.data)
        sigmas.append(sigma.data)
    return np.concatenate(mus), np.concatenate(sigmas)


def diffusion_validation_loss(unet: UNet, z0: np.ndarray | None, schedule: NoiseSchedule, seed: int) -> float:
    """Loss on fixed (t, eps) draws so epochs are comparable."""
    if z0 is None or len(z0) == 0:
        return float("nan")
    total = 0.0
    for sl in _chunks(len(z0)):
        g = rngmod.stream(seed, "train-diffusion", "val", sl.start)
        total += diffusion_loss(unet, z0[sl], schedule, g).item() * (sl.stop - sl.start)
    return total / len(z0)


def _diffusion_arrays(unet: UNet, opt: Adam, schedule: NoiseSchedule, scale: float, vae_sum: str,
                      epoch: int) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for k, v in unet.parameters().arrays().items():
        out["unet." + k] = v
    out.update(opt.state_arrays())
    out["meta.T"] = np.array([float(schedule.T)])
    out["meta.latent_scale"] = np.array([scale])
    out["meta.unet_base"] = np.array([float(unet.inp.weight.shape[0])])
    out["meta.latent_shape"] = np.array(unet.latent_shape, dtype=np.float64)
    out["meta.vae_checksum"] = np.frombuffer(bytes.fromhex(vae_sum), dtype=np.uint8).astype(np.float64)
    out["meta.epoch"] = np.array([float(epoch)])
    return out


def train_diffusion(data: TrainingData, vae: Vae, config: TrainConfig, out_dir,
                    resume: bool = False) -> tuple[UNet, float]:
    """Train the denoiser on latents of the frozen ``vae``; returns (unet, latent_scale)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log_path = out / "diffusion.ldad", out / "diffusion_log.csv"
    vae.parameters().freeze()
    before = vae.parameters().checksum()
    schedule = make_schedule(config.T)

    mu, sigma = encode_dataset(vae, data.train)
    spread = float(np.std(mu))
    scale = 1.0 / spread if spread > 0 else 1.0
    val_z0 = scale * encode_dataset(vae, data.val)[0] if data.val is not None and len(data.val) else None

    unet = UNet(vae.shape.latent_shape, rngmod.stream(config.seed, "init", "unet"), base=config.unet_base)
    params = unet.parameters()
    opt = Adam(params, lr=config.lr)
    start, rows = 0, []
    if resume and ckpt.exists():
        arrays = checkpoint.load(ckpt)
        params.load(arrays, prefix="unet.")
        opt.load_state(arrays)
        start = int(arrays["meta.epoch"][0])
        rows = [r for r in _read_log(log_path) if r[0] <= start]

    for epoch in range(start + 1, config.epochs + 1):
        g = rngmod.stream(config.seed, "train-diffusion", epoch)
        snapshot = OrderedDict((k, v.copy()) for k, v in params.arrays().items())
        losses = []
        try:
            for idx in _batches(len(mu), config.batch, g):
                z0 = scale * (mu[idx] + sigma[idx] * g.standard_normal(mu[idx].shape))
                with Tape() as tape:
                    loss = diffusion_loss(unet, z0, schedule, g)
                if not np.isfinite(loss.item()):
                    raise NonFiniteGradientError(f"non-finite diffusion loss at epoch {epoch}")
                backward(tape, loss)
                opt.step(_grads_by_name(params))
                losses.append(loss.item())
        except NonFiniteGradientError as exc:
            params.load(snapshot)
            raise TrainingDivergedError(f"{exc}; parameters restored, last good checkpoint is {ckpt}") from exc
        val = diffusion_validation_loss(unet, val_z0, schedule, config.seed)
        rows.append((epoch, float(np.mean(losses)), val))
        log.info("diffusion epoch %d train %.6g val %.6g", epoch, rows[-1][1], val)
        _save(ckpt, _diffusion_arrays(unet, opt, schedule, scale, before, epoch))
        _write_log(log_path, rows)

    if vae.parameters().checksum() != before:
        raise RuntimeError("VAE parameters changed during diffusion training")
    return unet, scale



def vae_from_checkpoint(path) -> tuple[Vae, Normalization, tuple[float, float]]:
    return vae_from_arrays(checkpoint.load(path))
