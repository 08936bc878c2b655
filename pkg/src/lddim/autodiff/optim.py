from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .nn import ParameterSet


class NonFiniteGradientError(FloatingPointError):
    pass


class Adam:
    """Bias-corrected Adam over a :class:`ParameterSet`.

    Moments are keyed by parameter name so optimizer state can be written to
    and restored from a checkpoint alongside the parameters.
    """

    def __init__(self, params: ParameterSet, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items())
        self.v = OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items())
        self.step_count = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        adam_step(self, grads)

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        out["adam.step"] = np.array([float(self.step_count)])
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=np.float64)
        self.step_count = int(arrays["adam.step"][0])


def adam_step(opt: Adam, grads: dict[str, np.ndarray]) -> None:
    """Apply one Adam update in place. ``grads`` maps parameter names to arrays.

    All gradients are checked before any state is touched, so a NaN leaves the
    optimizer and parameters exactly as they were.
    """
    for name, g in grads.items():
        if name not in opt.m:
            raise KeyError(f"unknown parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name!r}")
    opt.step_count += 1
    t = opt.step_count
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        m = opt.m[name] = b1 * opt.m[name] + (1.0 - b1) * g
        v = opt.v[name] = b2 * opt.v[name] + (1.0 - b2) * g * g
        p = opt.params[name]
        p.data = p.data - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


class ArrayAdam:
    """Adam on a bare numpy array, used for latent-space and pixel-space inversion."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def update(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return x - self.lr * mhat / (np.sqrt(vhat) + self.eps)
