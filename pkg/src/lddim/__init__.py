"""Latent-diffusion differentiable inversion of conductivity fields from head data."""

__version__ = "0.1.0"
