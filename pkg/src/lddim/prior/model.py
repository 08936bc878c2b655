"""The assembled latent diffusion prior ``G``: DDIM chain, latent scaling, decoder
and the map from network units back to conductivity.

Network IO uses ``y = 2 (u - u_min) / (u_max - u_min) - 1`` with
``u = ln(K + k_offset)``; the solver sees ``exp(u)``, i.e. ``K + k_offset``.
Diffusion runs on ``latent_scale * z`` so the latents it models have unit
spread.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, checkpoint, ops
from ..grid import ScalarField2D
from .networks import UNet, Vae, VaeShape
from .schedule import NoiseSchedule, ddim_step, ddim_timesteps, make_schedule


@dataclass(frozen=True)
class Normalization:
    u_min: float
    u_max: float
    k_offset: float = 0.0

    def __post_init__(self):
        if not self.u_max > self.u_min:
            raise ValueError(f"normalization needs u_max > u_min, got {self.u_min}, {self.u_max}")

    def to_network(self, K: np.ndarray) -> np.ndarray:
        u = np.log(np.asarray(K, dtype=np.float64) + self.k_offset)
        return 2.0 * (u - self.u_min) / (self.u_max - self.u_min) - 1.0

    def log_conductivity(self, y):
        """``u`` from network units; tape-aware for tensors."""
        half = 0.5 * (self.u_max - self.u_min)
        if isinstance(y, Tensor):
            return ops.add(ops.mul(y, half), self.u_min + half)
        return np.asarray(y) * half + (self.u_min + half)

    def solver_conductivity(self, y):
        """``exp(u) = K + k_offset``, always positive."""
        u = self.log_conductivity(y)
        return ops.exp(u) if isinstance(u, Tensor) else np.exp(u)

    def conductivity(self, y) -> np.ndarray:
        y = y.data if isinstance(y, Tensor) else y
        return np.exp(self.log_conductivity(y)) - self.k_offset


class LatentDiffusionPrior:
    def __init__(self, vae: Vae, unet: UNet | None, schedule: NoiseSchedule,
                 norm: Normalization, latent_scale: float = 1.0, spacing: tuple[float, float] = (1.0, 1.0)):
        self.vae = vae
        self.unet = unet
        self.schedule = schedule
        self.norm = norm
        self.latent_scale = float(latent_scale)
        self.spacing = spacing

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.vae.shape.latent_shape

    @property
    def resolution(self) -> tuple[int, int]:
        return tuple(self.vae.shape.resolution)

    def freeze(self) -> None:
        self.vae.parameters().freeze()
        if self.unet is not None:
            self.unet.parameters().freeze()

    # -- differentiable pieces ------------------------------------------------
    def ddim_chain(self, z_T, n_steps: int):
        """Run the deterministic reverse chain from ``T`` to 0."""
        if self.unet is None:
            raise RuntimeError("prior has no denoiser; load a diffusion checkpoint first")
        ts = ddim_timesteps(self.schedule, n_steps)
        z = z_T
        for t, t_prev in zip(ts[:-1], ts[1:]):
            zt = z if isinstance(z, Tensor) else Tensor(z)
            eps = self.unet(zt, t)
            z = ddim_step(z, t, t_prev, eps if isinstance(z, Tensor) else eps.data, self.schedule)
        return z

    def decode_latent(self, z0):
        """Scaled latent -> network-unit field (n, 1, ny, nx)."""
        zt = z0 if isinstance(z0, Tensor) else Tensor(z0)
        return self.vae.decode(ops.mul(zt, 1.0 / self.latent_scale))

    def generate(self, z, n_steps: int | None):
        """``G(z)``: with ``n_steps`` the input is ``z_T`` and passes through the
        chain; with ``None`` it is ``z_0`` and goes straight to the decoder."""
        z0 = self.ddim_chain(z, n_steps) if n_steps is not None else z
        return self.decode_latent(z0)

    def encode_fields(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mu, sigma = self.vae.encode(Tensor(y))
        return mu.data, sigma.data

    # -- persistence ----------------------------------------------------------
    def meta_arrays(self) -> "OrderedDict[str, np.ndarray]":
        s = self.vae.shape
        meta = OrderedDict()
        meta["meta.resolution"] = np.array(s.resolution, dtype=np.float64)
        meta["meta.latent_channels"] = np.array([s.latent_channels], dtype=np.float64)
        meta["meta.vae_channels"] = np.array(s.channels, dtype=np.float64)
        meta["meta.norm"] = np.array([self.norm.u_min, self.norm.u_max, self.norm.k_offset])
        meta["meta.spacing"] = np.array(self.spacing, dtype=np.float64)
        meta["meta.T"] = np.array([self.schedule.T], dtype=np.float64)
        meta["meta.latent_scale"] = np.array([self.latent_scale])
        if self.unet is not None:
            meta["meta.unet_base"] = np.array([self.unet.inp.weight.shape[0]], dtype=np.float64)
        return meta


def vae_from_arrays(arrays) -> tuple[Vae, Normalization, tuple[float, float]]:
    shape = VaeShape(
        tuple(int(v) for v in arrays["meta.resolution"]),
        int(arrays["meta.latent_channels"][0]),
        tuple(int(v) for v in arrays["meta.vae_channels"]),
    )
    vae = Vae(shape, np.random.default_rng(0))
    vae.parameters().load(arrays, prefix="vae.")
    u_min, u_max, k_off = (float(v) for v in arrays["meta.norm"])
    spacing = tuple(float(v) for v in arrays["meta.spacing"])
    return vae, Normalization(u_min, u_max, k_off), spacing


def load_prior(vae_path, diffusion_path=None) -> LatentDiffusionPrior:
    """Rebuild a frozen prior from checkpoint files."""
    try:
        va = checkpoint.load(vae_path)
    except OSError as exc:
        raise FileNotFoundError(f"cannot read VAE checkpoint {vae_path}: {exc.strerror}") from exc
    vae, norm, spacing = vae_from_arrays(va)
    unet, schedule, scale = None, make_schedule(1000), 1.0
    if diffusion_path is not None:
        try:
            da = checkpoint.load(diffusion_path)
        except OSError as exc:
            raise FileNotFoundError(f"cannot read diffusion checkpoint {diffusion_path}: {exc.strerror}") from exc
        schedule = make_schedule(int(da["meta.T"][0]))
        scale = float(da["meta.latent_scale"][0])
        unet = UNet(vae.shape.latent_shape, np.random.default_rng(0), base=int(da["meta.unet_base"][0]))
        unet.parameters().load(da, prefix="unet.")
    prior = LatentDiffusionPrior(vae, unet, schedule, norm, scale, spacing)
    prior.freeze()
    return prior


def sample(z_T: np.ndarray, prior: LatentDiffusionPrior, n_steps: int = 50) -> list[ScalarField2D]:
    """Draw fields (physical conductivity) from latent noise ``z_T`` of shape (n, c, h, w)."""
    z_T = np.asarray(z_T, dtype=np.float64)
    if z_T.ndim == 3:
        z_T = z_T[None]
    y = prior.generate(z_T, n_steps).data
    ny, nx = prior.resolution
    dx, dy = prior.spacing
    return [ScalarField2D(nx, ny, dx, dy, prior.norm.conductivity(yi[0])) for yi in y]

