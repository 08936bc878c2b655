"""Latent-space inversion of conductivity from sparse head observations.

The objective is ``J(z) = sum_i (h*_i - h_i(K(z)))^2 + beta * 0.5 ||z||^2``
(plus an optional ln-K misfit at conductivity observation points). Heads
come from the finite-volume solve, so the PDE holds exactly at every
iterate. The gradient combines the adjoint solve for ``dJ/dK`` with a tape
pullback through the prior: ``(dK/dz)^T grad_K + beta z``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .adjoint import ForwardState, StaleStateError, forward_solve, solver_vjp
from .autodiff import ArrayAdam, Tape, Tensor, vjp
from .fvm import BoundaryConditions, SolverError
from .grid import ScalarField2D, write_field
from .metrics import MetricsBundle, field_metrics

log = logging.getLogger(__name__)

PRIOR_MODES = ("latent-diffusion", "vae-only", "pixel-space")
OPTIMIZERS = ("adam", "gd")
OBSERVATION_GRIDS = (3, 5, 12, 16)


# -- observations -------------------------------------------------------------

def grid_positions(n_cells: int, n_obs: int) -> np.ndarray:
    """``n_obs`` evenly spaced cell indices, one per equal-width strip."""
    if not 1 <= n_obs <= n_cells:
        raise ValueError(f"cannot place {n_obs} observations along {n_cells} cells")
    return ((np.arange(n_obs) + 0.5) * n_cells / n_obs).astype(int)


@dataclass(frozen=True)
class ObservationSet:
    """Head observations at cell centres, plus optional conductivity observations.

    ``cells`` and ``k_cells`` hold (row j, column i) pairs.
    """

    cells: np.ndarray
    heads: np.ndarray
    k_cells: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))
    k_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=int).reshape(-1, 2)
        kc = np.asarray(self.k_cells, dtype=int).reshape(-1, 2)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "heads", np.asarray(self.heads, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "k_cells", kc)
        object.__setattr__(self, "k_values", np.asarray(self.k_values, dtype=np.float64).reshape(-1))
        if len(self.heads) != len(cells) or len(self.k_values) != len(kc):
            raise ValueError("observation locations and values have different lengths")
        if not np.all(np.isfinite(self.heads)):
            raise ValueError("observed heads must be finite")
        if len(self.k_values) and not np.all(self.k_values > 0):
            raise ValueError("observed conductivities must be positive")
        for name, c in (("head", cells), ("conductivity", kc)):
            if len({tuple(x) for x in c}) != len(c):
                raise ValueError(f"duplicate {name} observation locations")

    def __len__(self) -> int:
        return len(self.heads)

    def validate(self, nx: int, ny: int) -> None:
        for c in (self.cells, self.k_cells):
            if len(c) and (c.min() < 0 or np.any(c[:, 0] >= ny) or np.any(c[:, 1] >= nx)):
                raise IndexError(f"observation index outside the {nx}x{ny} grid")

    def flat(self, nx: int) -> np.ndarray:
        return self.cells[:, 0] * nx + self.cells[:, 1]

    def k_flat(self, nx: int) -> np.ndarray:
        return self.k_cells[:, 0] * nx + self.k_cells[:, 1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "j", "i", "value"])
            for (j, i), v in zip(self.cells, self.heads):
                w.writerow(["head", j, i, repr(float(v))])
            for (j, i), v in zip(self.k_cells, self.k_values):
                w.writerow(["conductivity", j, i, repr(float(v))])

    @classmethod
    def from_csv(cls, path) -> "ObservationSet":
        heads, hc, kv, kc = [], [], [], []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                cell = (int(row["j"]), int(row["i"]))
                if row["kind"] == "head":
                    hc.append(cell)
                    heads.append(float(row["value"]))
                elif row["kind"] == "conductivity":
                    kc.append(cell)
                    kv.append(float(row["value"]))
                else:
                    raise ValueError(f"unknown observation kind {row['kind']!r} in {path}")
        return cls(np.array(hc, dtype=int).reshape(-1, 2), heads, np.array(kc, dtype=int).reshape(-1, 2), kv)


def uniform_layout(nx: int, ny: int, n_side: int) -> np.ndarray:
    rows, cols = grid_positions(ny, n_side), grid_positions(nx, n_side)
    return np.array([(j, i) for j in rows for i in cols], dtype=int)


def synthetic_observations(h_true: ScalarField2D, n_side: int, K_true: ScalarField2D | None = None,
                           k_side: int = 0, noise_std: float = 0.0, seed: int = 0) -> ObservationSet:
    """Sample heads (and optionally conductivities) of a reference solution on uniform grids."""
    cells = uniform_layout(h_true.nx, h_true.ny, n_side)
    heads = h_true.values[cells[:, 0], cells[:, 1]].copy()
    if noise_std > 0:
        heads = heads + noise_std * rngmod.stream(seed, "observe").standard_normal(heads.shape)
    kc, kv = np.zeros((0, 2), dtype=int), np.zeros(0)
    if k_side:
        if K_true is None:
            raise ValueError("conductivity observations need the reference conductivity")
        kc = uniform_layout(K_true.nx, K_true.ny, k_side)
        kv = K_true.values[kc[:, 0], kc[:, 1]].copy()
    return ObservationSet(cells, heads, kc, kv)


# -- configuration ---------------------------------------------------------------

@dataclass(frozen=True)
class InversionConfig:
    beta: float = 1e-3
    eta: float = 1e-2
    max_iter: int = 500
    ddim_steps: int = 20
    prior_mode: str = "latent-diffusion"
    optimizer: str = "adam"
    seed: int = 0
    k_obs_weight: float = 0.0
    smoothing: float = 0.0          # pixel-space Tikhonov weight on ln-K differences
    init_log_k: float | None = None  # pixel-space starting value; default is the prior midpoint
    early_stop_window: int = 50
    early_stop_tol: float = 1e-8

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.eta < 0:
            raise ValueError(f"eta must be non-negative, got {self.eta}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}, got {self.prior_mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.k_obs_weight < 0 or self.smoothing < 0:
            raise ValueError("k_obs_weight and smoothing must be non-negative")


# -- objective ---------------------------------------------------------------------

def data_misfit(h_hat: ScalarField2D, obs: ObservationSet) -> float:
    """``sum_i (h*_i - h_hat_i)^2`` over the observed cells."""
    obs.validate(h_hat.nx, h_hat.ny)
    pred = h_hat.values[obs.cells[:, 0], obs.cells[:, 1]] if len(obs) else np.zeros(0)
    return float(np.sum((obs.heads - pred) ** 2))


def latent_regularizer(z: np.ndarray) -> float:
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * float(np.sum(z * z))


def _k_misfit(Ks: np.ndarray, obs: ObservationSet, k_offset: float, nx: int) -> tuple[float, np.ndarray]:
    """ln-K misfit at conductivity observations and its gradient wrt ``Ks``."""
    grad = np.zeros(Ks.size)
    if not len(obs.k_values):
        return 0.0, grad
    idx = obs.k_flat(nx)
    ks = Ks.reshape(-1)[idx]
    r = np.log(ks) - np.log(obs.k_values + k_offset)
    np.add.at(grad, idx, 2.0 * r / ks)
    return float(np.sum(r * r)), grad


@dataclass
class ObjectiveState:
    """Everything the gradient needs from one objective evaluation."""

    z: np.ndarray
    forward: ForwardState
    misfit: float
    k_misfit: float
    regularizer: float
    total: float
    tape: Tape | None = None
    K_tensor: Tensor | None = None
    z_tensor: Tensor | None = None


class InversionProblem:
    """Objective and gradient for one observation set under one prior mode.

    For the latent modes ``prior`` is a :class:`LatentDiffusionPrior`; the
    pixel-space mode optimises ``u = ln(K + k_offset)`` per cell and uses
    ``prior`` only for its grid spacing (``None`` gives unit spacing).
    """

    def __init__(self, obs: ObservationSet, config: InversionConfig, prior=None,
                 bc: BoundaryConditions | None = None, shape: tuple[int, int] | None = None,
                 spacing: tuple[float, float] | None = None, k_offset: float | None = None):
        self.obs, self.config, self.prior = obs, config, prior
        self.bc = bc or BoundaryConditions()
        if prior is not None:
            self.ny, self.nx = prior.resolution
            self.dx, self.dy = spacing or prior.spacing
            self.k_offset = prior.norm.k_offset if k_offset is None else k_offset
        else:
            if config.prior_mode != "pixel-space" or shape is None:
                raise ValueError("latent prior modes need a prior; pixel-space needs a grid shape")
            self.ny, self.nx = shape
            self.dx, self.dy = spacing or (1.0, 1.0)
            self.k_offset = 0.0 if k_offset is None else k_offset
        obs.validate(self.nx, self.ny)

    @property
    def n_steps(self) -> int | None:
        return self.config.ddim_steps if self.config.prior_mode == "latent-diffusion" else None

    def initial_point(self) -> np.ndarray:
        cfg = self.config
        if cfg.prior_mode == "pixel-space":
            if cfg.init_log_k is not None:
                u0 = cfg.init_log_k
            elif self.prior is not None:
                u0 = 0.5 * (self.prior.norm.u_min + self.prior.norm.u_max)
            else:
                u0 = 0.0
            return np.full((self.ny, self.nx), float(u0))
        return rngmod.stream(cfg.seed, "invert").standard_normal((1,) + self.prior.latent_shape)

    def _field(self, values: np.ndarray) -> ScalarField2D:
        return ScalarField2D(self.nx, self.ny, self.dx, self.dy, values)

    def objective(self, z: np.ndarray) -> tuple[float, ObjectiveState]:
        cfg = self.config
        z = np.array(z, dtype=np.float64)
        tape = K_t = z_t = None
        if cfg.prior_mode == "pixel-space":
            Ks = np.exp(z)
            d = z
            reg = 0.5 * float(np.sum(np.diff(d, axis=0) ** 2) + np.sum(np.diff(d, axis=1) ** 2))
            weight = cfg.smoothing
        else:
            z_t = Tensor(z, requires_grad=True)
            with Tape() as tape:
                y = self.prior.generate(z_t, self.n_steps)
                K_t = self.prior.norm.solver_conductivity(y)
            Ks = K_t.data[0, 0]
            reg = latent_regularizer(z)
            weight = cfg.beta
        if not np.all(np.isfinite(Ks)) or not np.all(Ks > 0):
            raise SolverError("generated conductivity is not finite and positive")
        fwd = forward_solve(self._field(Ks), self.bc)
        misfit = data_misfit(fwd.h, self.obs)
        kmis, _ = _k_misfit(Ks, self.obs, self.k_offset, self.nx)
        total = misfit + cfg.k_obs_weight * kmis + weight * reg
        state = ObjectiveState(z, fwd, misfit, kmis, reg, total, tape, K_t, z_t)
        return total, state

    def gradient(self, z: np.ndarray, state: ObjectiveState) -> np.ndarray:
        if state is None or not np.array_equal(np.asarray(z), state.z):
            raise StaleStateError("objective state was computed for a different point")
        cfg = self.config
        fwd = state.forward
        cot = np.zeros(self.nx * self.ny)
        if len(self.obs):
            idx = self.obs.flat(self.nx)
            np.add.at(cot, idx, -2.0 * (self.obs.heads - fwd.h.flat()[idx]))
        gK = solver_vjp(fwd, fwd.K, self._field(cot.reshape(self.ny, self.nx))).values
        if cfg.k_obs_weight:
            gK = gK + cfg.k_obs_weight * _k_misfit(fwd.K.values, self.obs, self.k_offset, self.nx)[1].reshape(gK.shape)
        if cfg.prior_mode == "pixel-space":
            u = state.z
            g = gK * fwd.K.values
            if cfg.smoothing:
                lap = np.zeros_like(u)
                dx_, dy_ = np.diff(u, axis=1), np.diff(u, axis=0)
                lap[:, 1:] += dx_
                lap[:, :-1] -= dx_
                lap[1:, :] += dy_
                lap[:-1, :] -= dy_
                g = g + cfg.smoothing * lap
            return g
        grads = vjp(state.tape, state.K_tensor, gK.reshape(state.K_tensor.shape))
        return grads[state.z_tensor] + cfg.beta * state.z


def objective(z, problem: InversionProblem):
    return problem.objective(z)


def objective_gradient(z, state: ObjectiveState, problem: InversionProblem) -> np.ndarray:
    return problem.gradient(z, state)


# -- optimisation loop ---------------------------------------------------------------

@dataclass
class InversionResult:
    k_hat: ScalarField2D          # physical conductivity (solver field minus offset)
    h_hat: ScalarField2D
    z_hat: np.ndarray
    history: list[tuple[int, float, float, float, float]]  # iter, misfit, regularizer, total, grad_norm
    iterations: int
    best_iter: int
    aborted: bool = False
    message: str = ""
    metrics: MetricsBundle | None = None

    @property
    def loss(self) -> np.ndarray:
        return np.array([r[3] for r in self.history])

    @property
    def misfit(self) -> np.ndarray:
        return np.array([r[1] for r in self.history])

    @property
    def grad_norms(self) -> np.ndarray:
        return np.array([r[4] for r in self.history])


def run_inversion(problem: InversionProblem) -> InversionResult:
    """Gradient iterations from the seeded starting point; returns the best iterate."""
    cfg = problem.config
    z = problem.initial_point()
    adam = ArrayAdam(cfg.eta) if cfg.optimizer == "adam" else None
    history = []
    best = None
    aborted, message = False, ""
    for it in range(cfg.max_iter):
        try:
            J, state = problem.objective(z)
            if not math.isfinite(J):
                raise FloatingPointError(f"non-finite objective at iteration {it}")
            g = problem.gradient(z, state)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient at iteration {it}")
        except (FloatingPointError, SolverError) as exc:
            aborted, message = True, str(exc)
            log.warning("inversion aborted: %s", exc)
            break
        reg = state.regularizer
        history.append((it, state.misfit, reg, J, float(np.linalg.norm(g))))
        if best is None or J < best[0]:
            best = (J, it, z.copy(), state.forward)
        w = cfg.early_stop_window
        if it >= w and abs(history[-1 - w][3] - J) <= cfg.early_stop_tol * max(abs(history[-1 - w][3]), 1e-300):
            break
        z = adam.update(z, g) if adam is not None else z - cfg.eta * g
    if best is None:
        raise SolverError(f"inversion failed before the first iterate: {message}")
    _, best_it, z_best, fwd = best
    k_hat = ScalarField2D.like(fwd.K, fwd.K.values - problem.k_offset)
    return InversionResult(k_hat, fwd.h, z_best, history, len(history), best_it, aborted, message)


def invert(obs: ObservationSet, config: InversionConfig, prior, bc: BoundaryConditions | None = None) -> InversionResult:
    if config.prior_mode == "pixel-space":
        raise ValueError("use pixel_space_invert for the pixel-space mode")
    return run_inversion(InversionProblem(obs, config, prior, bc))


def vae_prior_invert(obs: ObservationSet, config: InversionConfig, prior,
                     bc: BoundaryConditions | None = None) -> InversionResult:
    """Optimise ``z_0`` through the decoder alone."""
    return run_inversion(InversionProblem(obs, replace(config, prior_mode="vae-only"), prior, bc))


def pixel_space_invert(obs: ObservationSet, config: InversionConfig, shape=None, prior=None,
                       bc: BoundaryConditions | None = None, spacing=None, k_offset=None) -> InversionResult:
    """Optimise ln K per cell with adjoint gradients and optional smoothing."""
    cfg = replace(config, prior_mode="pixel-space")
    return run_inversion(InversionProblem(obs, cfg, prior, bc, shape=shape, spacing=spacing, k_offset=k_offset))


def attach_metrics(result: InversionResult, K_true: ScalarField2D, h_true: ScalarField2D,
                   log_domain: bool) -> InversionResult:
    result.metrics = field_metrics(result.k_hat, K_true, result.h_hat, h_true, log_domain)
    return result


# -- result bundle ---------------------------------------------------------------------

def write_result(result: InversionResult, out_dir, run: str = "run") -> None:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create result directory {out}: {exc.strerror}") from exc
    write_field(out / "k_hat.ldf2", result.k_hat)
    write_field(out / "h_hat.ldf2", result.h_hat)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "misfit", "regularizer", "total", "grad_norm"])
        for it, mis, reg, tot, gn in result.history:
            w.writerow([it, repr(mis), repr(reg), repr(tot), repr(gn)])
    rows = [("iterations", float(result.iterations)), ("best_iter", float(result.best_iter)),
            ("final_misfit", result.history[result.best_iter][1]), ("aborted", float(result.aborted))]
    if result.metrics is not None:
        rows = result.metrics.rows() + rows
    write_metrics_csv(out / "metrics.csv", [(run, k, v) for k, v in rows])


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "metric", "value"])
        for run, metric, value in rows:
            w.writerow([run, metric, repr(float(value))])


# -- experiment sweeps ------------------------------------------------------------------

SWEEP_KINDS = ("seed-sensitivity", "observation-density")
SUMMARY_METRICS = ("eps_K", "eps_h", "eps_K_tilde", "ssim")


@dataclass(frozen=True)
class SweepRun:
    kind: str
    seed: int
    layout: int
    truth_index: int


def sweep_plan(kind: str, seeds, layouts, n_truths: int) -> list[SweepRun]:
    """Observation-density pairs seed ``s`` with truth ``s mod n``; seed-sensitivity keeps truth 0."""
    if kind not in SWEEP_KINDS:
        raise ValueError(f"sweep kind must be one of {SWEEP_KINDS}, got {kind!r}")
    if n_truths < 1:
        raise ValueError("sweep needs at least one reference field")
    runs = []
    for layout in layouts:
        for s in seeds:
            truth = int(s) % n_truths if kind == "observation-density" else 0
            runs.append(SweepRun(kind, int(s), int(layout), truth))
    return runs


def _solver_field(K: ScalarField2D, k_offset: float) -> ScalarField2D:
    return ScalarField2D.like(K, K.values + k_offset)


def run_sweep_case(run: SweepRun, truth: ScalarField2D, prior, config: InversionConfig,
                   log_domain: bool, k_side: int = 0, bc: BoundaryConditions | None = None) -> dict:
    """One (seed, layout) inversion; failures are reported in the row, not raised."""
    row = {"kind": run.kind, "seed": run.seed, "layout": f"{run.layout}x{run.layout}",
           "truth_index": run.truth_index, "status": "ok"}
    try:
        offset = prior.norm.k_offset if prior is not None else 0.0
        h_true = forward_solve(_solver_field(truth, offset), bc).h
        obs = synthetic_observations(h_true, run.layout, K_true=truth, k_side=k_side)
        cfg = replace(config, seed=run.seed)
        if cfg.prior_mode == "pixel-space":
            res = pixel_space_invert(obs, cfg, shape=(truth.ny, truth.nx), prior=prior, bc=bc)
        else:
            res = run_inversion(InversionProblem(obs, cfg, prior, bc))
        k_hat, k_true = res.k_hat, truth
        if log_domain:
            k_hat, k_true = _solver_field(k_hat, offset), _solver_field(truth, offset)
        m = field_metrics(k_hat, k_true, res.h_hat, h_true, log_domain)
        row.update({k: v for k, v in m.rows() if k in SUMMARY_METRICS})
        row.update(final_misfit=res.history[res.best_iter][1], iterations=res.iterations)
        if res.aborted:
            row["status"] = "aborted: " + res.message
    except Exception as exc:  # noqa: BLE001 - a failed run must not stop the sweep
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
    return row


def _run_star(args):
    return run_sweep_case(*args)


def experiment_sweep(kind: str, truths: list[ScalarField2D], prior, config: InversionConfig,
                     seeds, layouts=OBSERVATION_GRIDS, log_domain: bool = True, k_side: int = 0,
                     workers: int = 1, bc: BoundaryConditions | None = None) -> tuple[list[dict], list[dict]]:
    """Run every (seed, layout) case; returns (per-run rows, per-layout summary rows)."""
    plan = sweep_plan(kind, seeds, layouts, len(truths))
    jobs = [(r, truths[r.truth_index], prior, config, log_domain, k_side, bc) for r in plan]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_star, jobs))
    else:
        rows = [_run_star(j) for j in jobs]
    return rows, summarize(rows)


def summarize(rows: list[dict]) -> list[dict]:
    out = []
    for layout in dict.fromkeys(r["layout"] for r in rows):
        good = [r for r in rows if r["layout"] == layout and r["status"] == "ok"]
        for metric in SUMMARY_METRICS:
            vals = np.array([r[metric] for r in good if metric in r])
            if len(vals) == 0:
                stats = dict(median=float("nan"), q1=float("nan"), q3=float("nan"), mean=float("nan"))
            else:
                q1, med, q3 = np.percentile(vals, [25, 50, 75])
                stats = dict(median=float(med), q1=float(q1), q3=float(q3), mean=float(vals.mean()))
            out.append({"layout": layout, "metric": metric, **stats, "n": len(vals)})
    return out


RUN_COLUMNS = ("kind", "seed", "layout", "truth_index", "status", "eps_K", "eps_h", "eps_K_tilde", "ssim",
               "final_misfit", "iterations")
SUMMARY_COLUMNS = ("layout", "metric", "median", "q1", "q3", "mean", "n")


def _cell(v):
    return repr(v) if isinstance(v, float) else v


def write_sweep(rows: list[dict], summary: list[dict], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, cols, data in (("runs.csv", RUN_COLUMNS, rows), ("summary.csv", SUMMARY_COLUMNS, summary)):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in data:
                w.writerow([_cell(r.get(c, "")) for c in cols])
