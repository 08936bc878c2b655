"""Latent diffusion prior: VAE, noise schedule, DDIM sampler and U-Net denoiser."""

from .model import LatentDiffusionPrior, Normalization, load_prior, sample
from .networks import UNet, Vae, VaeShape, gaussian_kl, reparameterize, timestep_embedding, vae_loss
from .schedule import (
    NoiseSchedule,
    ddim_coefficients,
    ddim_step,
    ddim_timesteps,
    forward_diffuse,
    forward_step,
    make_schedule,
    predicted_z0,
)
from .train import (
    TrainConfig,
    TrainingData,
    TrainingDivergedError,
    diffusion_loss,
    encode_dataset,
    load_training_data,
    train_diffusion,
    train_vae,
)

__all__ = [
    "LatentDiffusionPrior", "Normalization", "load_prior", "sample", "UNet", "Vae", "VaeShape",
    "gaussian_kl", "reparameterize", "timestep_embedding", "vae_loss", "NoiseSchedule",
    "ddim_coefficients", "ddim_step", "ddim_timesteps", "forward_diffuse", "forward_step",
    "make_schedule", "predicted_z0", "TrainConfig", "TrainingData", "TrainingDivergedError",
    "diffusion_loss", "encode_dataset", "load_training_data", "train_diffusion", "train_vae",
]
