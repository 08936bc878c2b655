"""Synthetic conductivity fields and on-disk datasets.

Two generators:

* spectral Gaussian random fields, ``Y = IFFT(sqrt(S) * FFT(xi))`` with
  ``S(k) = exp(-0.5 |k|^2 lam^2)`` and ``k`` in cycles per domain; ``Y`` is
  standardised, clipped to [-3, 3], exponentiated and min-max scaled to [0, 1];
* bimaterial fields: two log-normal phases (means ln 1e-5 and ln 1e-8) with
  Matérn(nu=1) fluctuations, assigned by thresholding a long-range Matérn
  splitting field at its empirical alpha-quantile, ``alpha = 0.25 + 0.5 p``.

Lengths for the Matérn fields are in metres on the physical grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .grid import ScalarField2D, write_field

DOMAIN_LENGTH = 100.0
GAUSSIAN_LAMBDAS = tuple(np.round(np.linspace(0.1, 0.7, 7), 10))


def _spacing(n: int, domain: float = DOMAIN_LENGTH) -> float:
    return domain / n


@dataclass(frozen=True)
class GrfParams:
    correlation_length: float
    nx: int = 32
    ny: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.correlation_length > 0:
            raise ValueError(f"correlation length must be positive, got {self.correlation_length}")
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid must be at least 2x2")


def gaussian_log_field(params: GrfParams) -> np.ndarray:
    """Standardised (pre-clip) log field ``Y`` of shape (ny, nx)."""
    g = rngmod.stream(params.seed, "grf")
    ny, nx = params.ny, params.nx
    xi = (g.standard_normal((ny, nx)) + 1j * g.standard_normal((ny, nx))) / np.sqrt(2.0)
    kx = np.fft.fftfreq(nx, d=1.0 / nx)
    ky = np.fft.fftfreq(ny, d=1.0 / ny)
    k2 = kx[None, :] ** 2 + ky[:, None] ** 2
    S = np.exp(-0.5 * k2 * params.correlation_length ** 2)
    y = np.fft.ifft2(np.sqrt(S) * np.fft.fft2(xi)).real
    y = y - y.mean()
    y = y / y.std()
    # one correction pass pins mean and variance to roundoff
    y = y - y.mean()
    return y / np.sqrt(np.mean(y * y))


def gaussian_field(params: GrfParams) -> ScalarField2D:
    y = np.clip(gaussian_log_field(params), -3.0, 3.0)
    k = np.exp(y)
    k = (k - k.min()) / (k.max() - k.min())
    return ScalarField2D(params.nx, params.ny, _spacing(params.nx), _spacing(params.ny), k)


def matern_correlation(r, length: float, nu: float = 1.0):
    """Matérn correlation ``rho(r) = 2^(1-nu)/Gamma(nu) (sqrt(2 nu) r / l)^nu K_nu(sqrt(2 nu) r / l)``."""
    from scipy.special import gamma, kv

    r = np.asarray(r, dtype=np.float64)
    s = np.sqrt(2 * nu) * r / length
    with np.errstate(invalid="ignore"):
        out = 2 ** (1 - nu) / gamma(nu) * s ** nu * kv(nu, s)
    return np.where(r == 0, 1.0, out)


def matern_gaussian_process(length: float, nu: float, nx: int, ny: int, seed: int,
                            dx: float | None = None, dy: float | None = None,
                            variance: float = 1.0, pad: int = 2, stream: str = "matern") -> ScalarField2D:
    """Zero-mean stationary Matérn field by spectral synthesis on a padded periodic grid.

    The discrete spectrum is normalised to sum to one, so the pointwise
    variance equals ``variance`` exactly in expectation and the covariance is
    the periodised Matérn kernel on the ``pad``-times larger torus.
    """
    if nu != 1:
        raise ValueError(f"only nu = 1 is supported, got nu = {nu}")
    if not length > 0:
        raise ValueError(f"length must be positive, got {length}")
    dx = _spacing(nx) if dx is None else dx
    dy = _spacing(ny) if dy is None else dy
    Nx, Ny = pad * nx, pad * ny
    fx = np.fft.fftfreq(Nx, d=dx)
    fy = np.fft.fftfreq(Ny, d=dy)
    f2 = fx[None, :] ** 2 + fy[:, None] ** 2
    dens = (2 * nu / length ** 2 + 4 * np.pi ** 2 * f2) ** (-(nu + 1))
    w = dens / dens.sum()
    g = rngmod.stream(seed, stream)
    noise = g.standard_normal((Ny, Nx)) + 1j * g.standard_normal((Ny, Nx))
    full = np.fft.ifft2(np.sqrt(variance * w) * noise).real * (Nx * Ny)
    return ScalarField2D(nx, ny, dx, dy, full[:ny, :nx])


@dataclass(frozen=True)
class BimaterialParams:
    nx: int = 32
    ny: int = 32
    seed: int = 0
    high_log_mean: float = float(np.log(1e-5))
    low_log_mean: float = float(np.log(1e-8))
    matern_nu: float = 1.0
    matern_length: float = 50.0
    split_length: float = 200.0
    phase_variance: float = 1.0
    threshold_p: float | None = None

    def resolved_p(self) -> float:
        if self.threshold_p is not None:
            if not 0.0 <= self.threshold_p <= 1.0:
                raise ValueError(f"threshold_p must lie in [0, 1], got {self.threshold_p}")
            return float(self.threshold_p)
        return float(rngmod.stream(self.seed, "threshold").uniform())

    def alpha(self) -> float:
        return 0.25 + 0.5 * self.resolved_p()


def bimaterial_phases(params: BimaterialParams) -> tuple[ScalarField2D, np.ndarray]:
    """Conductivity field plus the boolean high-conductivity indicator."""
    nx, ny = params.nx, params.ny
    phi1 = matern_gaussian_process(params.matern_length, params.matern_nu, nx, ny, params.seed,
                                   variance=params.phase_variance, stream="phase-high")
    phi2 = matern_gaussian_process(params.matern_length, params.matern_nu, nx, ny, params.seed,
                                   variance=params.phase_variance, stream="phase-low")
    split = matern_gaussian_process(params.split_length, params.matern_nu, nx, ny, params.seed, stream="split")
    alpha = params.alpha()
    n = nx * ny
    n_high = int(round((1.0 - alpha) * n))
    # rank-based threshold: exactly n_high cells lie above the empirical alpha-quantile
    order = np.argsort(split.values, axis=None, kind="stable")
    high = np.zeros(n, dtype=bool)
    high[order[n - n_high:]] = True
    high = high.reshape(ny, nx)
    logk = np.where(high, params.high_log_mean + phi1.values, params.low_log_mean + phi2.values)
    return ScalarField2D(nx, ny, phi1.dx, phi1.dy, np.exp(logk)), high


def bimaterial_field(params: BimaterialParams) -> ScalarField2D:
    return bimaterial_phases(params)[0]


# -- datasets ---------------------------------------------------------------

@dataclass
class SampleRecord:
    split: str
    filename: str
    seed: int
    params: dict = field(default_factory=dict)

    def to_line(self) -> str:
        kv = " ".join(f"{k}={v}" for k, v in self.params.items())
        return f"{self.split} {self.filename} {self.seed} {kv}".rstrip()

    @classmethod
    def from_line(cls, line: str) -> "SampleRecord":
        parts = line.split()
        params = {}
        for token in parts[3:]:
            k, _, v = token.partition("=")
            params[k] = v
        return cls(parts[0], parts[1], int(parts[2]), params)


@dataclass
class Manifest:
    header: dict
    records: list[SampleRecord]

    def write(self, path) -> None:
        lines = ["# " + " ".join(f"{k}={v}" for k, v in self.header.items())]
        lines += [r.to_line() for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read dataset manifest {path}: {exc.strerror}") from exc
        header, records = {}, []
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                for token in line[1:].split():
                    k, _, v = token.partition("=")
                    header[k] = v
            else:
                records.append(SampleRecord.from_line(line))
        return cls(header, records)

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]


SPLITS = ("train", "val", "test")


def _fmt(x: float) -> str:
    return repr(float(x))


def generate_sample(kind: str, seed: int, index: int, nx: int, ny: int) -> tuple[ScalarField2D, dict]:
    if kind == "gaussian":
        lam = GAUSSIAN_LAMBDAS[index % len(GAUSSIAN_LAMBDAS)]
        return gaussian_field(GrfParams(lam, nx, ny, seed)), {"lambda": _fmt(lam)}
    if kind == "bimaterial":
        p = BimaterialParams(nx=nx, ny=ny, seed=seed)
        return bimaterial_field(p), {"p": _fmt(p.resolved_p()), "alpha": _fmt(p.alpha())}
    raise ValueError(f"unknown dataset kind {kind!r}; expected 'gaussian' or 'bimaterial'")


def build_dataset(kind: str, out_dir, n_total: int, splits: tuple[int, int, int], master_seed: int,
                  nx: int = 32, ny: int = 32, k_offset: float | None = None) -> Manifest:
    """Generate ``n_total`` fields into ``out_dir/{train,val,test}`` plus ``manifest.txt``.

    The manifest header records the ln-domain min/max of the training split,
    which fixes the network input normalisation.
    """
    if sum(splits) != n_total:
        raise ValueError(f"splits {splits} do not sum to n_total={n_total}")
    if k_offset is None:
        k_offset = GAUSSIAN_K_OFFSET if kind == "gaussian" else 0.0
    out = Path(out_dir)
    try:
        for name in SPLITS:
            (out / name).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory under {out}: {exc.strerror}") from exc

    order = rngmod.stream(master_seed, "split").permutation(n_total)
    labels = np.empty(n_total, dtype=object)
    bounds = np.cumsum((0,) + tuple(splits))
    for name, a, b in zip(SPLITS, bounds[:-1], bounds[1:]):
        labels[order[a:b]] = name

    records, lo, hi = [], np.inf, -np.inf
    for i in range(n_total):
        seed = rngmod.child_seed(master_seed, "generate", i)
        K, params = generate_sample(kind, seed, i, nx, ny)
        rel = f"{labels[i]}/{i:06d}.ldf2"
        path = out / rel
        try:
            write_field(path, K)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc.strerror}") from exc
        if labels[i] == "train":
            u = np.log(K.values + k_offset)
            lo, hi = min(lo, float(u.min())), max(hi, float(u.max()))
        records.append(SampleRecord(labels[i], rel, seed, params))

    header = {
        "kind": kind, "n_total": n_total, "splits": ",".join(map(str, splits)),
        "master_seed": master_seed, "nx": nx, "ny": ny,
        "k_offset": _fmt(k_offset), "u_min": _fmt(lo), "u_max": _fmt(hi),
    }
    manifest = Manifest(header, records)
    manifest.write(out / "manifest.txt")
    return manifest


# Gaussian fields are min-max scaled to [0, 1], so the minimum cell is exactly
# zero; the solver and the ln-domain network see K + GAUSSIAN_K_OFFSET.
GAUSSIAN_K_OFFSET = 0.01
