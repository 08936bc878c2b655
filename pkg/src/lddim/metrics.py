"""Reconstruction and distribution metrics.

Field metrics accept :class:`ScalarField2D` or plain 2-D arrays. FID and KID
operate on embedding matrices of shape (n_samples, d); embeddings come from
a fixed, seeded random convolutional network applied to Sobel edge maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import rng as rngmod
from .autodiff import Tensor, ops
from .grid import ScalarField2D


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, ScalarField2D) else np.asarray(x, dtype=np.float64)


def _pair(pred, truth, op: str) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pred, ScalarField2D) and isinstance(truth, ScalarField2D):
        pred.require_same_grid(truth, op)
    p, t = _values(pred), _values(truth)
    if p.shape != t.shape:
        raise ValueError(f"{op}: shapes {p.shape} and {t.shape} differ")
    return p, t


def relative_l2(pred, truth) -> float:
    """``||pred - truth|| / ||truth||``."""
    p, t = _pair(pred, truth, "relative_l2")
    denom = np.linalg.norm(t)
    if denom == 0:
        raise ValueError("relative_l2: reference field has zero norm")
    return float(np.linalg.norm(p - t) / denom)


def mean_corrected_relative(pred, truth) -> float:
    """``||pred - truth|| / ||truth - mean(truth)||``."""
    p, t = _pair(pred, truth, "mean_corrected_relative")
    denom = np.linalg.norm(t - t.mean())
    if denom == 0:
        raise ValueError("mean_corrected_relative: reference field is constant")
    return float(np.linalg.norm(p - t) / denom)


def ssim(pred, truth, window: int = 7, dynamic_range: float | None = None,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over stride-1 uniform windows.

    Borders use replicate padding, so every pixel anchors one window.
    ``dynamic_range`` defaults to ``max - min`` of ``truth``.
    """
    p, t = _pair(pred, truth, "ssim")
    if window > min(p.shape):
        raise ValueError(f"ssim: window {window} exceeds field extent {p.shape}")
    L = float(t.max() - t.min()) if dynamic_range is None else float(dynamic_range)
    if not L > 0:
        raise ValueError("ssim: dynamic range must be positive (constant reference needs an explicit value)")
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2

    def local_mean(a):
        return ndimage.uniform_filter(a, size=window, mode="nearest")

    mp, mt = local_mean(p), local_mean(t)
    vp = local_mean(p * p) - mp * mp
    vt = local_mean(t * t) - mt * mt
    cov = local_mean(p * t) - mp * mt
    index = ((2 * mp * mt + c1) * (2 * cov + c2)) / ((mp * mp + mt * mt + c1) * (vp + vt + c2))
    return float(np.mean(index))


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def sobel_response(field) -> tuple[np.ndarray, np.ndarray]:
    """Raw horizontal and vertical Sobel responses with replicate borders."""
    v = _values(field)
    if v.ndim != 2 or min(v.shape) < 3:
        raise ValueError(f"sobel: field must be at least 3x3, got {v.shape}")
    gx = ndimage.correlate(v, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(v, SOBEL_Y, mode="nearest")
    return gx, gy


def sobel_edges(field, normalize: bool = True) -> np.ndarray:
    """Gradient magnitude, min-max scaled to [0, 1] (all zeros if flat)."""
    gx, gy = sobel_response(field)
    mag = np.hypot(gx, gy)
    if not normalize:
        return mag
    span = mag.max() - mag.min()
    return (mag - mag.min()) / span if span > 0 else np.zeros_like(mag)


class FeatureExtractor:
    """Fixed random 3-layer conv net with ReLU, average-pooled to ``d`` features.

    The last layer has ``d / 4`` channels pooled over a 2x2 grid of blocks, so
    the embedding keeps coarse position information.
    """

    def __init__(self, seed: int = 0, d: int = 64):
        if d % 4:
            raise ValueError(f"embedding dimension must be divisible by 4, got {d}")
        g = rngmod.stream(seed, "extractor")
        self.seed, self.d = seed, d
        chans = (1, 16, 32, d // 4)
        self.weights = [g.standard_normal((chans[i + 1], chans[i], 3, 3)) * np.sqrt(2.0 / (9 * chans[i]))
                        for i in range(3)]
        self.biases = [0.1 * g.standard_normal(chans[i + 1]) for i in range(3)]

    def __call__(self, fields) -> np.ndarray:
        batch = np.stack([sobel_edges(f) for f in fields])[:, None]
        x = Tensor(batch)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ops.relu(ops.conv2d(x, Tensor(w), Tensor(b), stride=2 if i < 2 else 1, padding=1))
        a = x.data
        rows = np.array_split(np.arange(a.shape[2]), 2)
        cols = np.array_split(np.arange(a.shape[3]), 2)
        pooled = [a[:, :, r][:, :, :, c].mean(axis=(2, 3)) for r in rows for c in cols]
        return np.concatenate(pooled, axis=1)


def embed(field, extractor_seed: int = 0, d: int = 64) -> np.ndarray:
    return FeatureExtractor(extractor_seed, d)([field])[0]


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(real: np.ndarray, gen: np.ndarray, shrinkage: float = 0.0) -> float:
    """Fréchet distance ``||mu - mu'||^2 + tr(S + S' - 2 (S S')^(1/2))``.

    The trace of the cross term is taken from the eigenvalues of
    ``0.5 (B + B^T)``, ``B = S^(1/2) S' S^(1/2)``, which share the spectrum of
    ``S S'`` but are guaranteed symmetric.
    """
    x, y = np.atleast_2d(np.asarray(real, float)), np.atleast_2d(np.asarray(gen, float))
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"fid: embedding shapes {x.shape} and {y.shape} are incompatible")
    d = x.shape[1]
    if shrinkage == 0.0 and min(len(x), len(y)) < d + 1:
        raise ValueError(f"fid: need at least d + 1 = {d + 1} samples per set (or shrinkage > 0)")
    if min(len(x), len(y)) < 2:
        raise ValueError("fid: need at least two samples per set")
    mu1, mu2 = x.mean(axis=0), y.mean(axis=0)
    s1 = np.atleast_2d(np.cov(x, rowvar=False)) + shrinkage * np.eye(d)
    s2 = np.atleast_2d(np.cov(y, rowvar=False)) + shrinkage * np.eye(d)
    r1 = _sqrt_psd(s1)
    b = r1 @ s2 @ r1
    w = np.linalg.eigvalsh(0.5 * (b + b.T))
    floor = -1e-10 * max(1.0, float(np.max(np.abs(w))))
    if np.any(w < floor):
        raise ValueError(f"fid: covariance product has a negative eigenvalue {w.min():.3e}")
    tr_cross = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * tr_cross)


def polynomial_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a.shape[1]
    return (a @ b.T / d + 1.0) ** 3


def kid(real: np.ndarray, gen: np.ndarray) -> float:
    """Unbiased squared MMD with kernel ``((1/d) u.v + 1)^3``."""
    x, y = np.asarray(real, float), np.asarray(gen, float)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"kid: embedding shapes {x.shape} and {y.shape} are incompatible")
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise ValueError("kid: need at least two samples per set")
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sxx + syy - 2.0 * kxy.sum() / (n * m))


@dataclass(frozen=True)
class MetricsBundle:
    eps_K: float
    eps_h: float
    eps_K_tilde: float
    ssim: float
    evaluated_in_log: bool

    def rows(self) -> list[tuple[str, float]]:
        return [("eps_K", self.eps_K), ("eps_h", self.eps_h), ("eps_K_tilde", self.eps_K_tilde),
                ("ssim", self.ssim), ("evaluated_in_log", float(self.evaluated_in_log))]


def field_metrics(k_hat, k_true, h_hat, h_true, log_domain: bool) -> MetricsBundle:
    """Bundle of conductivity and head errors; conductivity in ln K when ``log_domain``."""
    kp, kt = _pair(k_hat, k_true, "field_metrics")
    if log_domain:
        kp, kt = np.log(kp), np.log(kt)
    window = min(7, min(kt.shape))
    return MetricsBundle(
        eps_K=relative_l2(kp, kt),
        eps_h=relative_l2(h_hat, h_true),
        eps_K_tilde=mean_corrected_relative(kp, kt),
        ssim=ssim(kp, kt, window=window),
        evaluated_in_log=log_domain,
    )
