"""Key-value run configuration.

Files hold one ``key = value`` per line; ``#`` starts a comment. Every key
is declared in :data:`SCHEMA` with its type, default and a one-line
description; unknown keys are rejected by name.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(" ", "").split(",") if p)


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str
    choices: tuple = ()
    minimum: float | None = None

    def check(self, name: str, value: Any) -> None:
        if self.choices and value not in self.choices:
            raise ConfigError(f"{name} must be one of {', '.join(self.choices)}; got {value!r}")
        if self.minimum is not None:
            items = value if isinstance(value, tuple) else (value,)
            if any(v is not None and v < self.minimum for v in items):
                raise ConfigError(f"{name} must be >= {self.minimum}; got {value!r}")


SCHEMA: dict[str, Key] = {
    # grid and boundary conditions
    "nx": Key(int, 32, "cells along x; the domain is 100 m wide", minimum=2),
    "ny": Key(int, 32, "cells along y; the domain is 100 m tall", minimum=2),
    "left_head": Key(float, 1.0, "Dirichlet head on the left boundary"),
    "right_head": Key(float, 0.0, "Dirichlet head on the right boundary"),
    # dataset
    "kind": Key(str, "gaussian", "field family", choices=("gaussian", "bimaterial")),
    "n_total": Key(int, 2000, "number of generated fields", minimum=1),
    "splits": Key(_ints, (1400, 400, 200), "train,val,test counts (rescaled 70/20/10 when --n is given)", minimum=0),
    "k_offset": Key(_opt_float, None, "added to K before the log and the solver; auto = 0.01 gaussian, 0 bimaterial"),
    # prior training
    "lr": Key(float, 2e-3, "VAE learning rate"),
    "epochs": Key(int, 30, "VAE epochs", minimum=0),
    "batch": Key(int, 16, "minibatch size for both training stages", minimum=1),
    "lambda_kl": Key(float, 1e-4, "KL weight in the VAE loss", minimum=0),
    "latent_channels": Key(int, 4, "latent channels; spatial extent follows from the resolution", minimum=1),
    "vae_channels": Key(_ints, (16, 32, 64), "channels of the stride-2 encoder blocks", minimum=1),
    "T": Key(int, 1000, "diffusion steps", minimum=1),
    "unet_base": Key(int, 32, "base channel count of the denoiser", minimum=1),
    "diffusion_lr": Key(float, 1e-3, "denoiser learning rate"),
    "diffusion_epochs": Key(int, 200, "denoiser epochs", minimum=0),
    "resume": Key(_bool, False, "continue training from the checkpoint in the output directory"),
    # sampling
    "sample_steps": Key(int, 50, "DDIM steps when sampling", minimum=1),
    "n_samples": Key(int, 16, "fields drawn by the sample command", minimum=1),
    # inversion
    "beta": Key(float, 1e-3, "latent regularisation weight", minimum=0),
    "eta": Key(float, 1e-2, "step size", minimum=0),
    "max_iter": Key(int, 500, "optimisation iterations", minimum=1),
    "ddim_steps": Key(int, 20, "DDIM steps inside the inversion", minimum=1),
    "prior_mode": Key(str, "latent-diffusion", "parametrisation being optimised",
                      choices=("latent-diffusion", "vae-only", "pixel-space")),
    "optimizer": Key(str, "adam", "adam, or gd for plain gradient descent", choices=("adam", "gd")),
    "k_obs_weight": Key(float, 0.0, "weight of the ln-K misfit at conductivity observations", minimum=0),
    "smoothing": Key(float, 0.0, "pixel-space Tikhonov weight", minimum=0),
    "init_log_k": Key(_opt_float, None, "pixel-space starting ln(K + k_offset); auto = prior midpoint"),
    "obs_grid": Key(int, 16, "head observations per side (uniform grid)", minimum=1),
    "k_obs_grid": Key(int, 0, "conductivity observations per side (0 = none)", minimum=0),
    "noise_std": Key(float, 0.0, "standard deviation of head noise added to synthetic observations", minimum=0),
    "log_metrics": Key(str, "auto", "evaluate K in ln units; auto means true when k_offset is 0",
                         choices=("true", "false", "auto")),
    # sweeps
    "sweep_kind": Key(str, "observation-density", "sweep protocol", choices=("seed-sensitivity", "observation-density")),
    "sweep_seeds": Key(int, 5, "number of seeds per layout", minimum=1),
    "sweep_layouts": Key(_ints, (3, 5, 12, 16), "observation grids per side", minimum=1),
    "workers": Key(int, 1, "worker processes for sweeps", minimum=1),
    # evaluation
    "extractor_seed": Key(int, 0, "seed of the fixed feature extractor for FID/KID"),
    "embed_dim": Key(int, 64, "embedding dimension for FID/KID", minimum=4),
    "seed": Key(int, 0, "master seed", minimum=0),
    # paths
    "dataset": Key(str, "data", "dataset directory (generate writes here unless --out is given)"),
    "prior_dir": Key(str, "run", "directory holding vae.ldad and diffusion.ldad"),
    "truth": Key(str, "", "reference conductivity (.ldf2) for invert; empty picks test field truth_index"),
    "truth_index": Key(int, 0, "test-split field used when truth and observations are empty", minimum=0),
    "observations": Key(str, "", "observation CSV for invert; empty means synthesise from the truth"),
}


class RunConfig:
    """Parsed configuration; attribute access by key name."""

    def __init__(self, values: dict[str, Any] | None = None):
        self._values = {k: spec.default for k, spec in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = SCHEMA[key].parse(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        SCHEMA[key].check(key, value)
        self._values[key] = value

    def __getattr__(self, key: str):
        values = self.__dict__.get("_values")
        if values is None or key not in values:
            raise AttributeError(key)
        return values[key]

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            try:
                cfg.set(key.strip(), value.strip())
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config file {path}: {exc.strerror}") from exc
        return cls.parse(text, str(path))

    def dump(self) -> str:
        lines = []
        for k, v in self._values.items():
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            lines.append(f"{k} = {'auto' if v is None else v}")
        return "\n".join(lines) + "\n"


def resolved_k_offset(cfg: RunConfig) -> float:
    from .fields import GAUSSIAN_K_OFFSET

    if cfg.k_offset is not None:
        return float(cfg.k_offset)
    return GAUSSIAN_K_OFFSET if cfg.kind == "gaussian" else 0.0


def log_metrics(cfg: RunConfig, k_offset: float) -> bool:
    return k_offset == 0.0 if cfg.log_metrics == "auto" else cfg.log_metrics == "true"


def describe_keys() -> str:
    width = max(map(len, SCHEMA))
    rows = []
    for k, spec in SCHEMA.items():
        d = spec.default
        shown = "auto" if d is None else ",".join(map(str, d)) if isinstance(d, tuple) else d
        rows.append(f"  {k:<{width}}  (default {shown})  {spec.help}")
    return "config keys:\n" + "\n".join(rows)
