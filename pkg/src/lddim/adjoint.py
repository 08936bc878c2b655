"""Discrete-adjoint gradients of head-based losses with respect to conductivity.

With the discrete residual ``R(h, K) = A(K) h - b(K) = 0`` and a loss
``l(h)``, the gradient is ``dl/dK = -lambda^T dR/dK`` where
``A^T lambda = dl/dh``. ``dR/dK`` is never formed: each face contributes
through the derivative of its harmonic-mean transmissibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fvm import (
    BoundaryConditions,
    Factorization,
    SolverError,
    SparseLinearSystem,
    assemble_system,
    solve_with,
)
from .grid import GridError, ScalarField2D


class StaleStateError(RuntimeError):
    """The VJP was requested for a conductivity field other than the cached one."""


@dataclass(frozen=True)
class AdjointState:
    lam: ScalarField2D


@dataclass(eq=False)
class ForwardState:
    """Everything the VJP reuses from a forward solve. Treat as immutable."""

    K: ScalarField2D
    bc: BoundaryConditions
    system: SparseLinearSystem
    factorization: Factorization
    h: ScalarField2D


def forward_solve(K: ScalarField2D, bc: BoundaryConditions | None = None) -> ForwardState:
    bc = bc or BoundaryConditions()
    system = assemble_system(K, bc)
    fact = Factorization(system)
    return ForwardState(K=K, bc=bc, system=system, factorization=fact, h=solve_with(fact))


def solve_adjoint(system: SparseLinearSystem, r: ScalarField2D,
                  factorization: Factorization | None = None) -> AdjointState:
    """Solve ``A^T lambda = r``.

    Dirichlet faces are imposed through ghost transmissibilities, so no row
    of ``A`` is an identity row and every cell carries a genuine adjoint value.
    """
    if r.n != system.n or (r.nx, r.ny) != (system.nx, system.ny):
        raise GridError(f"adjoint right-hand side has grid {r.nx}x{r.ny}, system is {system.nx}x{system.ny}")
    fact = factorization or Factorization(system)
    rv = r.flat()
    lam = fact.solve_transpose(rv)
    if not np.all(np.isfinite(lam)):
        raise SolverError("adjoint solution contains non-finite values")
    At = system.to_scipy().T
    res = np.linalg.norm(At @ lam - rv) / max(np.linalg.norm(rv), 1e-300)
    if np.linalg.norm(rv) > 0 and res >= 1e-10:
        raise SolverError(f"adjoint residual {res:.3e} exceeds tolerance")
    return AdjointState(ScalarField2D(system.nx, system.ny, system.dx, system.dy, lam.reshape(system.ny, system.nx)))


def conductivity_gradient(adj: AdjointState, h: ScalarField2D, K: ScalarField2D,
                          bc: BoundaryConditions | None = None) -> ScalarField2D:
    """``-lambda^T (dR/dK)`` accumulated face by face."""
    bc = bc or BoundaryConditions()
    K.require_same_grid(h, "conductivity_gradient")
    K.require_same_grid(adj.lam, "conductivity_gradient")
    k, hv, lam = K.values, h.values, adj.lam.values
    gx, gy = K.dy / K.dx, K.dx / K.dy
    grad = np.zeros_like(k)

    # x-faces between (j, i) and (j, i+1)
    kp, kq = k[:, :-1], k[:, 1:]
    s2 = (kp + kq) ** 2
    w = (lam[:, :-1] - lam[:, 1:]) * (hv[:, 1:] - hv[:, :-1])
    grad[:, :-1] -= w * gx * 2.0 * kq * kq / s2
    grad[:, 1:] -= w * gx * 2.0 * kp * kp / s2

    # y-faces between (j, i) and (j+1, i)
    kp, kq = k[:-1, :], k[1:, :]
    s2 = (kp + kq) ** 2
    w = (lam[:-1, :] - lam[1:, :]) * (hv[1:, :] - hv[:-1, :])
    grad[:-1, :] -= w * gy * 2.0 * kq * kq / s2
    grad[1:, :] -= w * gy * 2.0 * kp * kp / s2

    # ghost faces: R_p += 2 gx K_p (h_D - h_p)
    grad[:, 0] -= lam[:, 0] * 2.0 * gx * (bc.left_dirichlet - hv[:, 0])
    grad[:, -1] -= lam[:, -1] * 2.0 * gx * (bc.right_dirichlet - hv[:, -1])
    return ScalarField2D.like(K, grad)


def solver_vjp(state: ForwardState, K: ScalarField2D, cotangent: ScalarField2D) -> ScalarField2D:
    """Pull ``dl/dh`` back to ``dl/dK`` using the cached forward factorisation."""
    if state is None:
        raise StaleStateError("no forward solve has been performed")
    if not (state.K.same_grid(K) and np.array_equal(state.K.values, K.values)):
        raise StaleStateError("solver_vjp called for a conductivity field that differs from the cached forward state")
    adj = solve_adjoint(state.system, cotangent, state.factorization)
    return conductivity_gradient(adj, state.h, state.K, state.bc)


class DarcySolver:
    """Forward solver that remembers its last state so the VJP can reuse it."""

    def __init__(self, bc: BoundaryConditions | None = None):
        self.bc = bc or BoundaryConditions()
        self.state: ForwardState | None = None

    def forward(self, K: ScalarField2D) -> ScalarField2D:
        self.state = forward_solve(K, self.bc)
        return self.state.h

    def vjp(self, K: ScalarField2D, cotangent: ScalarField2D) -> ScalarField2D:
        return solver_vjp(self.state, K, cotangent)
