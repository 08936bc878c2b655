"""Convolutional VAE and the U-Net noise predictor.

Shapes follow (batch, channels, height, width). Encoder blocks are stride-2
4x4 convolutions, so a 100x100 field maps to 50, 25, 12 and a 32x32 field to
16, 8, 4; the decoder mirrors the chain with transposed convolutions whose
output padding restores odd extents exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Conv2d, ConvTranspose2d, Dense, Module, ShapeError, Tensor, ops


def down_size(n: int) -> int:
    return (n + 2 - 4) // 2 + 1


@dataclass(frozen=True)
class VaeShape:
    resolution: tuple[int, int]           # (ny, nx) of the field
    latent_channels: int = 4
    channels: tuple[int, ...] = (16, 32, 64)

    def sizes(self) -> list[tuple[int, int]]:
        out = [tuple(self.resolution)]
        for _ in self.channels:
            h, w = out[-1]
            out.append((down_size(h), down_size(w)))
        return out

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        h, w = self.sizes()[-1]
        return (self.latent_channels, h, w)


class Encoder(Module):
    """Stride-2 conv blocks with SiLU, then 1x1 heads for the mean and log-variance.

    The heads start at zero, so an untrained encoder returns ``mu = 0`` and
    ``sigma = 1``.
    """

    def __init__(self, shape: VaeShape, rng: np.random.Generator):
        self.shape = shape
        chans = (1,) + tuple(shape.channels)
        self.blocks = [Conv2d(chans[i], chans[i + 1], 4, rng, stride=2, padding=1) for i in range(len(shape.channels))]
        self.mu_head = Conv2d(chans[-1], shape.latent_channels, 1, rng, zero=True)
        self.logvar_head = Conv2d(chans[-1], shape.latent_channels, 1, rng, zero=True)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        ny, nx = self.shape.resolution
        if x.data.ndim != 4 or x.shape[1:] != (1, ny, nx):
            raise ShapeError(f"encode: expected input (n, 1, {ny}, {nx}), got {x.shape}")
        for conv in self.blocks:
            x = ops.silu(conv(x))
        return self.mu_head(x), self.logvar_head(x)


class Decoder(Module):
    def __init__(self, shape: VaeShape, rng: np.random.Generator):
        self.shape = shape
        chans = tuple(shape.channels)
        sizes = shape.sizes()
        self.stem = Conv2d(shape.latent_channels, chans[-1], 1, rng)
        ups = []
        for level in range(len(chans) - 1, -1, -1):
            c_in = chans[level]
            c_out = chans[level - 1] if level > 0 else chans[0]
            (h_out, w_out), (h_in, _) = sizes[level], sizes[level + 1]
            pad = h_out - 2 * h_in
            if pad not in (0, 1) or sizes[level][1] - 2 * sizes[level + 1][1] != pad:
                raise ValueError(f"resolution {shape.resolution} cannot be mirrored by the decoder")
            ups.append(ConvTranspose2d(c_in, c_out, 4, rng, stride=2, padding=1, output_padding=pad))
        self.ups = ups
        self.head = Conv2d(chans[0], 1, 3, rng, padding=1)

    def __call__(self, z: Tensor) -> Tensor:
        if z.data.ndim != 4 or z.shape[1:] != self.shape.latent_shape:
            raise ShapeError(f"decode: expected latent (n, {self.shape.latent_shape}), got {z.shape}")
        x = ops.silu(self.stem(z))
        for up in self.ups:
            x = ops.silu(up(x))
        return self.head(x)


class Vae(Module):
    def __init__(self, shape: VaeShape, rng: np.random.Generator):
        self.shape = shape
        self.encoder = Encoder(shape, rng)
        self.decoder = Decoder(shape, rng)

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Returns ``(mu, sigma)``; ``sigma = exp(logvar / 2) > 0``."""
        mu, logvar = self.encoder(x)
        return mu, ops.exp(ops.mul(logvar, 0.5))

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z)


def reparameterize(mu: Tensor, sigma: Tensor, eps: np.ndarray) -> Tensor:
    """``mu + sigma * eps``; ``eps`` is a constant, so no gradient reaches it."""
    eps = np.asarray(eps, dtype=np.float64)
    if mu.shape != sigma.shape or mu.shape != eps.shape:
        raise ShapeError(f"reparameterize: shapes {mu.shape}, {sigma.shape}, {eps.shape} differ")
    return ops.add(mu, ops.mul(sigma, Tensor(eps)))


def gaussian_kl(mu: Tensor, sigma: Tensor) -> Tensor:
    """``KL(N(mu, sigma^2) || N(0, 1))`` summed over all entries."""
    var = ops.square(sigma)
    terms = ops.sub(ops.add(ops.add(ops.square(mu), var), -1.0), ops.log(var))
    return ops.mul(ops.sum(terms), 0.5)


def vae_loss(x: Tensor, x_hat: Tensor, mu: Tensor, sigma: Tensor, lambda_kl: float = 1e-4) -> Tensor:
    """L1 reconstruction plus weighted KL, both summed over entries and averaged over the batch."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"vae_loss: field shapes {x.shape} and {x_hat.shape} differ")
    n = x.shape[0] if x.data.ndim == 4 else 1
    rec = ops.sum(ops.abs(ops.sub(x, x_hat)))
    total = ops.add(rec, ops.mul(gaussian_kl(mu, sigma), float(lambda_kl)))
    return ops.mul(total, 1.0 / n)


# -- denoiser ---------------------------------------------------------------

def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class ResBlock(Module):
    """conv -> +time -> SiLU -> conv, with a 1x1 skip when channel counts differ."""

    def __init__(self, c_in: int, c_out: int, t_dim: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.time = Dense(t_dim, c_out, rng)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, padding=1)
        self.skip = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = ops.silu(ops.add_channelwise(self.conv1(x), self.time(temb)))
        h = self.conv2(h)
        return ops.add(h, self.skip(x) if self.skip is not None else x)


class UNet(Module):
    """Two-level U-Net noise predictor ``eps_theta(z_t, t)``.

    Levels run at the latent resolution and two stride-2 reductions of it;
    the output convolution starts at zero.
    """

    def __init__(self, latent_shape: tuple[int, int, int], rng: np.random.Generator,
                 base: int = 32, t_dim: int = 32):
        c = latent_shape[0]
        self.latent_shape = tuple(latent_shape)
        self.t_dim = t_dim
        self.t1 = Dense(t_dim, 2 * t_dim, rng)
        self.t2 = Dense(2 * t_dim, 2 * t_dim, rng)
        e = 2 * t_dim
        self.inp = Conv2d(c, base, 3, rng, padding=1)
        self.enc0 = ResBlock(base, base, e, rng)
        self.down0 = Conv2d(base, 2 * base, 3, rng, stride=2, padding=1)
        self.enc1 = ResBlock(2 * base, 2 * base, e, rng)
        self.down1 = Conv2d(2 * base, 2 * base, 3, rng, stride=2, padding=1)
        self.mid = ResBlock(2 * base, 2 * base, e, rng)
        h0, w0 = latent_shape[1:]
        h1, w1 = (h0 + 1) // 2, (w0 + 1) // 2
        h2, w2 = (h1 + 1) // 2, (w1 + 1) // 2
        self.up1 = ConvTranspose2d(2 * base, 2 * base, 4, rng, stride=2, padding=1, output_padding=h1 - 2 * h2)
        self.dec1 = ResBlock(4 * base, 2 * base, e, rng)
        self.up0 = ConvTranspose2d(2 * base, base, 4, rng, stride=2, padding=1, output_padding=h0 - 2 * h1)
        self.dec0 = ResBlock(2 * base, base, e, rng)
        self.out = Conv2d(base, c, 3, rng, padding=1, zero=True)
        if w1 - 2 * w2 != h1 - 2 * h2 or w0 - 2 * w1 != h0 - 2 * h1:
            raise ValueError(f"latent shape {latent_shape} must have matching row/column parity")

    def __call__(self, z: Tensor, t) -> Tensor:
        if z.data.ndim != 4 or z.shape[1:] != self.latent_shape:
            raise ShapeError(f"denoiser: expected (n, {self.latent_shape}), got {z.shape}")
        t = np.broadcast_to(np.asarray(t), (z.shape[0],))
        temb = ops.silu(self.t1(Tensor(timestep_embedding(t, self.t_dim))))
        temb = ops.silu(self.t2(temb))
        x0 = self.enc0(self.inp(z), temb)
        x1 = self.enc1(ops.silu(self.down0(x0)), temb)
        m = self.mid(ops.silu(self.down1(x1)), temb)
        u1 = self.dec1(ops.concat([ops.silu(self.up1(m)), x1], axis=1), temb)
        u0 = self.dec0(ops.concat([ops.silu(self.up0(u1)), x0], axis=1), temb)
        return self.out(ops.silu(u0))
