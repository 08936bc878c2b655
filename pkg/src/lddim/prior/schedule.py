"""Variance-preserving noise schedule, forward diffusion and DDIM updates.

Timesteps are 1-based; ``alpha_bar[0] = 1`` is the clean-data convention, so
arrays are indexed directly by ``t`` in ``0..T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, ops


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray       # (T + 1,), beta[0] = 0
    alpha: np.ndarray      # 1 - beta
    alpha_bar: np.ndarray  # cumulative product, alpha_bar[0] = 1

    def check_t(self, t: int, allow_zero: bool = False) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return t


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"schedule needs T >= 1, got {T}")
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T) if T > 1 else beta_start
    alpha = 1.0 - beta
    alpha_bar = np.empty(T + 1)
    alpha_bar[0] = 1.0
    for t in range(1, T + 1):
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t]
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def ddim_timesteps(schedule: NoiseSchedule, n_steps: int) -> list[int]:
    """Strided descending subsequence ``[t_n, ..., t_1, 0]`` starting at ``T``."""
    if not 1 <= n_steps <= schedule.T:
        raise ValueError(f"n_steps must lie in [1, {schedule.T}], got {n_steps}")
    ts = np.unique(np.round(np.linspace(0, schedule.T, n_steps + 1)).astype(int))
    return [int(t) for t in ts[::-1]]


def forward_diffuse(z0, t: int, eps, schedule: NoiseSchedule):
    """``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; works on arrays or tensors."""
    t = schedule.check_t(t)
    a = schedule.alpha_bar[t]
    if isinstance(z0, Tensor) or isinstance(eps, Tensor):
        return ops.add(ops.mul(z0, float(np.sqrt(a))), ops.mul(eps, float(np.sqrt(1 - a))))
    z0, eps = np.asarray(z0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 shape {z0.shape} does not match eps shape {eps.shape}")
    return np.sqrt(a) * z0 + np.sqrt(1 - a) * eps


def forward_step(z_prev, t: int, eps, schedule: NoiseSchedule):
    """Single transition ``q(z_t | z_{t-1})`` drawn with noise ``eps``."""
    t = schedule.check_t(t)
    return np.sqrt(schedule.alpha[t]) * np.asarray(z_prev) + np.sqrt(schedule.beta[t]) * np.asarray(eps)


def ddim_coefficients(t: int, t_prev: int, schedule: NoiseSchedule) -> tuple[float, float]:
    """``(c_z, c_eps)`` with ``z_prev = c_z z_t + c_eps eps_pred``."""
    t = schedule.check_t(t)
    t_prev = schedule.check_t(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ValueError(f"DDIM step needs t > t_prev, got t={t}, t_prev={t_prev}")
    a, ap = schedule.alpha_bar[t], schedule.alpha_bar[t_prev]
    c_z = np.sqrt(ap / a)
    c_eps = np.sqrt(1.0 - ap) - np.sqrt(ap) * np.sqrt(1.0 - a) / np.sqrt(a)
    return float(c_z), float(c_eps)


def predicted_z0(z_t, t: int, eps_pred, schedule: NoiseSchedule):
    a = schedule.alpha_bar[schedule.check_t(t)]
    return (np.asarray(z_t) - np.sqrt(1 - a) * np.asarray(eps_pred)) / np.sqrt(a)


def ddim_step(z_t, t: int, t_prev: int, eps_pred, schedule: NoiseSchedule):
    """Deterministic DDIM update from ``t`` to ``t_prev``.

    ``z_prev = sqrt(abar_prev) * z0_hat + sqrt(1 - abar_prev) * eps_pred`` with
    ``z0_hat = (z_t - sqrt(1 - abar_t) eps_pred) / sqrt(abar_t)``, evaluated in
    the folded form of :func:`ddim_coefficients` so the array and tape paths
    agree bit for bit. Tensors are recorded on the active tape.
    """
    c_z, c_eps = ddim_coefficients(t, t_prev, schedule)
    if isinstance(z_t, Tensor) or isinstance(eps_pred, Tensor):
        return ops.add(ops.mul(z_t, c_z), ops.mul(eps_pred, c_eps))
    z_t, eps_pred = np.asarray(z_t, dtype=np.float64), np.asarray(eps_pred, dtype=np.float64)
    if z_t.shape != eps_pred.shape:
        raise ValueError(f"z_t shape {z_t.shape} does not match eps_pred shape {eps_pred.shape}")
    return z_t * c_z + eps_pred * c_eps
