"""Two-point flux finite-volume discretisation of steady Darcy flow.

Solves ``div(K grad h) = 0`` with fixed heads on the left/right faces and
no-flux top/bottom faces. Face transmissibilities use the harmonic mean of
the adjacent cell conductivities. The matrix is assembled with a negative
diagonal (row ``p`` reads ``sum_f T_f (h_q - h_p)``); Dirichlet faces act
through a ghost transmissibility ``2 K_p dy/dx`` over the half-cell distance,
folded into the diagonal and the right-hand side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import GridError, ScalarField2D

DIRECT_SOLVE_LIMIT = 40_000
RESIDUAL_TOL = 1e-10


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class BoundaryConditions:
    """Fixed heads on the left (x = x_min) and right (x = x_max) faces; top and bottom are no-flux."""

    left_dirichlet: float = 1.0
    right_dirichlet: float = 0.0

    def bounds(self) -> tuple[float, float]:
        return min(self.left_dirichlet, self.right_dirichlet), max(self.left_dirichlet, self.right_dirichlet)


@dataclass(eq=False)
class SparseLinearSystem:
    """CSR matrix plus right-hand side for one conductivity field."""

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    vals: np.ndarray
    rhs: np.ndarray
    nx: int
    ny: int
    dx: float
    dy: float

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, self.col_idx, self.row_ptr), shape=(self.n, self.n))

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def residual(self, h: np.ndarray) -> float:
        """Relative residual ``||A h - b|| / ||b||`` (absolute when b = 0)."""
        r = self.to_scipy() @ h.reshape(-1) - self.rhs
        return float(np.linalg.norm(r) / max(np.linalg.norm(self.rhs), 1e-300))


def harmonic_face_conductivity(k_left, k_right):
    """``2 kL kR / (kL + kR)``; works elementwise on arrays."""
    kl = np.asarray(k_left, dtype=np.float64)
    kr = np.asarray(k_right, dtype=np.float64)
    if np.any(kl <= 0) or np.any(kr <= 0):
        raise ValueError("harmonic_face_conductivity: conductivities must be strictly positive")
    out = 2.0 * kl * kr / (kl + kr)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Transmissibilities:
    tx: np.ndarray      # (ny, nx-1) between (j, i) and (j, i+1)
    ty: np.ndarray      # (ny-1, nx) between (j, i) and (j+1, i)
    t_left: np.ndarray  # (ny,) ghost faces on x = x_min
    t_right: np.ndarray  # (ny,)


def transmissibilities(K: ScalarField2D) -> Transmissibilities:
    k = K.values
    gx, gy = K.dy / K.dx, K.dx / K.dy
    return Transmissibilities(
        tx=gx * harmonic_face_conductivity(k[:, :-1], k[:, 1:]),
        ty=gy * harmonic_face_conductivity(k[:-1, :], k[1:, :]),
        t_left=2.0 * gx * k[:, 0],
        t_right=2.0 * gx * k[:, -1],
    )


def _check_conductivity(K: ScalarField2D) -> None:
    if K.nx < 2 or K.ny < 2:
        raise GridError(f"assemble_system needs at least 2x2 cells, got {K.nx}x{K.ny}")
    if np.any(K.values <= 0):
        raise ValueError("conductivity must be strictly positive everywhere")


def assemble_system(K: ScalarField2D, bc: BoundaryConditions) -> SparseLinearSystem:
    _check_conductivity(K)
    nx, ny = K.nx, K.ny
    t = transmissibilities(K)
    idx = np.arange(nx * ny).reshape(ny, nx)

    diag = np.zeros((ny, nx))
    diag[:, :-1] -= t.tx
    diag[:, 1:] -= t.tx
    diag[:-1, :] -= t.ty
    diag[1:, :] -= t.ty
    diag[:, 0] -= t.t_left
    diag[:, -1] -= t.t_right

    rhs = np.zeros((ny, nx))
    rhs[:, 0] -= t.t_left * bc.left_dirichlet
    rhs[:, -1] -= t.t_right * bc.right_dirichlet

    rows = np.concatenate([idx.ravel(), idx[:, :-1].ravel(), idx[:, 1:].ravel(), idx[:-1, :].ravel(), idx[1:, :].ravel()])
    cols = np.concatenate([idx.ravel(), idx[:, 1:].ravel(), idx[:, :-1].ravel(), idx[1:, :].ravel(), idx[:-1, :].ravel()])
    vals = np.concatenate([diag.ravel(), t.tx.ravel(), t.tx.ravel(), t.ty.ravel(), t.ty.ravel()])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(nx * ny, nx * ny))
    A.sum_duplicates()
    A.sort_indices()
    return SparseLinearSystem(
        n=nx * ny,
        row_ptr=A.indptr.astype(np.int64),
        col_idx=A.indices.astype(np.int64),
        vals=A.data.copy(),
        rhs=rhs.ravel(),
        nx=nx, ny=ny, dx=K.dx, dy=K.dy,
    )


class Factorization:
    """Solver for ``A x = b`` and ``A^T x = b`` built once per system.

    The TPFA matrix is symmetric negative definite, so the factorisation is
    of ``-A``. Above ``DIRECT_SOLVE_LIMIT`` unknowns a Jacobi-preconditioned
    conjugate-gradient iteration replaces the LU factorisation.
    """

    def __init__(self, system: SparseLinearSystem):
        self.system = system
        self._neg = (-system.to_scipy()).tocsc()
        self.direct = system.n <= DIRECT_SOLVE_LIMIT
        if self.direct:
            self._lu = spla.splu(self._neg)
        else:
            d = self._neg.diagonal()
            self._precond = spla.LinearOperator(self._neg.shape, matvec=lambda v: v / d)

    def _cg(self, b: np.ndarray) -> np.ndarray:
        x, info = spla.cg(self._neg, b, rtol=1e-14, atol=0.0, maxiter=20 * self.system.n, M=self._precond)
        if info != 0:
            raise SolverError(f"conjugate gradient did not converge (info={info})")
        return x

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = -np.asarray(b, dtype=np.float64)
        return self._lu.solve(b) if self.direct else self._cg(b)

    def solve_transpose(self, b: np.ndarray) -> np.ndarray:
        b = -np.asarray(b, dtype=np.float64)
        return self._lu.solve(b, trans="T") if self.direct else self._cg(b)


def solve_with(fact: Factorization) -> ScalarField2D:
    system = fact.system
    h = fact.solve(system.rhs)
    if not np.all(np.isfinite(h)):
        raise SolverError("head solution contains non-finite values")
    res = system.residual(h)
    if res >= RESIDUAL_TOL:
        raise SolverError(f"linear solve residual {res:.3e} exceeds tolerance {RESIDUAL_TOL:.0e}")
    return ScalarField2D(system.nx, system.ny, system.dx, system.dy, h.reshape(system.ny, system.nx))


def solve_head(system: SparseLinearSystem) -> ScalarField2D:
    return solve_with(Factorization(system))


def darcy_velocity(K: ScalarField2D, h: ScalarField2D, bc: BoundaryConditions) -> tuple[np.ndarray, np.ndarray]:
    """Face-normal Darcy velocities ``u = -K grad h`` consistent with the TPFA fluxes.

    Returns ``(ux, uy)`` with ``ux`` of shape (ny, nx+1) on x-faces (left to
    right, including both Dirichlet faces) and ``uy`` of shape (ny+1, nx) on
    y-faces (bottom to top, zero on the no-flux faces).
    """
    K.require_same_grid(h, "darcy_velocity")
    _check_conductivity(K)
    t = transmissibilities(K)
    hv = h.values
    # flux through an x-face is T * (h_left - h_right); dividing by the face
    # area dy gives the velocity
    ux = np.zeros((K.ny, K.nx + 1))
    ux[:, 1:-1] = t.tx * (hv[:, :-1] - hv[:, 1:]) / K.dy
    ux[:, 0] = t.t_left * (bc.left_dirichlet - hv[:, 0]) / K.dy
    ux[:, -1] = t.t_right * (hv[:, -1] - bc.right_dirichlet) / K.dy
    uy = np.zeros((K.ny + 1, K.nx))
    uy[1:-1, :] = t.ty * (hv[:-1, :] - hv[1:, :]) / K.dx
    return ux, uy


def divergence(ux: np.ndarray, uy: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Net outflow per cell, ``(ux_e - ux_w) dy + (uy_n - uy_s) dx``."""
    return (ux[:, 1:] - ux[:, :-1]) * dy + (uy[1:, :] - uy[:-1, :]) * dx


def solve_darcy(K: ScalarField2D, bc: BoundaryConditions | None = None) -> ScalarField2D:
    return solve_head(assemble_system(K, bc or BoundaryConditions()))
