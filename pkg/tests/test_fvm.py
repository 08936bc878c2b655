from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lddim.fvm import (
    BoundaryConditions,
    assemble_system,
    darcy_velocity,
    divergence,
    harmonic_face_conductivity,
    solve_head,
)
from lddim.grid import GridError, ScalarField2D, from_bytes, read_field, to_bytes, write_field

BC = BoundaryConditions(1.0, 0.0)


def paper_grid(values) -> ScalarField2D:
    return ScalarField2D(100, 100, 1.0, 1.0, values)


def test_harmonic_equal_values():
    assert harmonic_face_conductivity(2.0, 2.0) == 2.0


def test_harmonic_hand_value():
    assert harmonic_face_conductivity(1.0, 3.0) == pytest.approx(1.5, rel=1e-15)


def test_harmonic_bimaterial_contrast():
    getcontext().prec = 50
    a, b = Decimal("1e-5"), Decimal("1e-8")
    exact = float(2 * a * b / (a + b))
    assert harmonic_face_conductivity(1e-5, 1e-8) == pytest.approx(exact, rel=1e-14)
    assert exact == pytest.approx(1.998e-8, rel=1e-3)


@given(st.floats(1e-12, 1e12), st.floats(1e-12, 1e12))
def test_harmonic_bounded_by_twice_min(a, b):
    assert harmonic_face_conductivity(a, b) <= 2 * min(a, b) * (1 + 1e-12)


def test_harmonic_rejects_non_positive():
    with pytest.raises(ValueError):
        harmonic_face_conductivity(0.0, 1.0)
    with pytest.raises(ValueError):
        harmonic_face_conductivity(-1.0, 1.0)


def test_interior_row_homogeneous():
    K = ScalarField2D.constant(5, 5, 1.0)
    A = assemble_system(K, BC).to_dense()
    p = 2 * 5 + 2
    row = A[p]
    assert row[p] == -4.0
    assert sorted(row[[p - 1, p + 1, p - 5, p + 5]]) == [1.0, 1.0, 1.0, 1.0]
    assert np.count_nonzero(row) == 5
    assert assemble_system(K, BC).rhs[p] == 0.0


def test_two_by_two_hand_assembly():
    K = ScalarField2D.constant(2, 2, 1.0)
    s = assemble_system(K, BC)
    expected = np.array([
        [-4.0, 1.0, 1.0, 0.0],
        [1.0, -4.0, 0.0, 1.0],
        [1.0, 0.0, -4.0, 1.0],
        [0.0, 1.0, 1.0, -4.0],
    ])
    assert np.array_equal(s.to_dense(), expected)
    assert np.array_equal(s.rhs, [-2.0, 0.0, -2.0, 0.0])
    h = solve_head(s).values
    assert np.allclose(h, [[0.75, 0.25], [0.75, 0.25]], atol=1e-14)


def test_csr_structure(rng):
    K = ScalarField2D(6, 4, 1.0, 2.0, rng.uniform(0.5, 2, (4, 6)))
    s = assemble_system(K, BC)
    assert s.row_ptr.shape == (s.n + 1,)
    for p in range(s.n):
        cols = s.col_idx[s.row_ptr[p]:s.row_ptr[p + 1]]
        assert np.all(np.diff(cols) > 0)
        assert len(cols) <= 5


def test_row_sums_vanish_away_from_dirichlet(rng):
    K = ScalarField2D(7, 6, 1.0, 1.0, rng.uniform(0.1, 10.0, (6, 7)))
    A = assemble_system(K, BC).to_dense()
    sums = A.sum(axis=1).reshape(6, 7)
    assert np.allclose(sums[:, 1:-1], 0.0, atol=1e-13)
    assert np.all(sums[:, 0] < 0) and np.all(sums[:, -1] < 0)


def test_assembly_rejects_bad_input():
    with pytest.raises(ValueError):
        assemble_system(ScalarField2D(3, 3, 1, 1, np.r_[np.ones(8), 0.0]), BC)
    with pytest.raises(GridError):
        assemble_system(ScalarField2D.constant(1, 4, 1.0), BC)


def test_homogeneous_linear_head_on_paper_grid():
    K = paper_grid(np.ones((100, 100)))
    h = solve_head(assemble_system(K, BC))
    x, _ = K.cell_centers()
    exact = (50.0 - x) / 100.0
    assert np.max(np.abs(h.values - exact[None, :])) < 1e-10


def test_two_slab_series_conductance():
    k = np.ones((100, 100))
    k[:, 50:] = 4.0
    K = paper_grid(k)
    h = solve_head(assemble_system(K, BC)).values
    # 1-D series resistances over half-domains of width 50 m
    r_left, r_right = 50.0 / 1.0, 50.0 / 4.0
    h_interface = r_right / (r_left + r_right)
    assert h_interface == pytest.approx(0.2)
    x, _ = K.cell_centers()
    exact = np.where(x < 0, 1.0 + (h_interface - 1.0) * (x + 50.0) / 50.0, h_interface * (50.0 - x) / 50.0)
    assert np.max(np.abs(h - exact[None, :])) < 1e-8
    # interface value from the two adjacent cells' linear profiles
    from_left = h[:, 49] + (h[:, 49] - h[:, 48]) / 2
    assert np.max(np.abs(from_left - h_interface)) < 1e-8


def test_equal_dirichlet_gives_constant_head(rng):
    K = ScalarField2D(9, 7, 1.0, 1.0, np.exp(rng.standard_normal((7, 9))))
    h = solve_head(assemble_system(K, BoundaryConditions(0.3, 0.3))).values
    assert np.max(np.abs(h - 0.3)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(
    st.integers(2, 12), st.integers(2, 12), st.integers(0, 2**31),
    st.floats(-5, 5), st.floats(-5, 5), st.floats(0.0, 4.0),
)
def test_maximum_principle_and_residual(nx, ny, seed, left, right, spread):
    r = np.random.default_rng(seed)
    K = ScalarField2D(nx, ny, 1.0, 1.5, np.exp(spread * r.standard_normal((ny, nx))))
    bc = BoundaryConditions(left, right)
    s = assemble_system(K, bc)
    h = solve_head(s)
    lo, hi = bc.bounds()
    tol = 1e-12 * max(1.0, abs(lo), abs(hi))
    assert np.all(h.values >= lo - tol) and np.all(h.values <= hi + tol)
    if np.linalg.norm(s.rhs) > 0:
        assert s.residual(h.values) < 1e-10


def test_reflection_symmetry(rng):
    k = np.exp(rng.standard_normal((12, 16)))
    h = solve_head(assemble_system(ScalarField2D(16, 12, 1, 1, k), BoundaryConditions(1.0, 0.0))).values
    hr = solve_head(assemble_system(ScalarField2D(16, 12, 1, 1, k[:, ::-1]), BoundaryConditions(0.0, 1.0))).values
    assert np.max(np.abs(hr[:, ::-1] - h)) < 1e-12


def test_velocity_homogeneous():
    K = paper_grid(np.ones((100, 100)))
    h = solve_head(assemble_system(K, BC))
    ux, uy = darcy_velocity(K, h, BC)
    assert ux.shape == (100, 101) and uy.shape == (101, 100)
    assert np.max(np.abs(ux - 0.01)) < 1e-12
    assert np.max(np.abs(uy)) < 1e-12


def test_velocity_constant_head_is_zero(rng):
    K = ScalarField2D(6, 5, 1, 1, np.exp(rng.standard_normal((5, 6))))
    bc = BoundaryConditions(2.0, 2.0)
    ux, uy = darcy_velocity(K, ScalarField2D.constant(6, 5, 2.0), bc)
    assert np.all(ux == 0) and np.all(uy == 0)


def test_velocity_flux_continuity_across_slabs():
    k = np.ones((100, 100))
    k[:, 50:] = 4.0
    K = paper_grid(k)
    h = solve_head(assemble_system(K, BC))
    ux, uy = darcy_velocity(K, h, BC)
    # series flow: one uniform velocity q = dh / (R_left + R_right)
    q = 1.0 / (50.0 / 1.0 + 50.0 / 4.0)
    assert np.max(np.abs(ux[:, 49] - ux[:, 51])) < 1e-10
    assert np.max(np.abs(ux - q)) < 1e-10


def test_velocity_grid_mismatch():
    with pytest.raises(GridError):
        darcy_velocity(ScalarField2D.constant(4, 4, 1.0), ScalarField2D.constant(5, 4, 1.0), BC)


def test_flux_balance_after_solve(rng):
    K = ScalarField2D(20, 15, 2.0, 1.0, np.exp(1.5 * rng.standard_normal((15, 20))))
    h = solve_head(assemble_system(K, BC))
    ux, uy = darcy_velocity(K, h, BC)
    div = divergence(ux, uy, K.dx, K.dy)
    scale = np.max(np.abs(ux)) * K.dy
    assert np.max(np.abs(div)) / scale < 1e-10


def _manufactured_error(n: int) -> float:
    # K = f(x) g(y) with f = exp(a x): the head depends on x only,
    # h(x) = 1 - (F(x) - F(-L)) / (F(L) - F(-L)), F = -exp(-a x) / a
    L, a = 50.0, 0.04
    d = 2 * L / n
    K0 = ScalarField2D(n, n, d, d, np.ones((n, n)))
    x, y = K0.cell_centers()
    k = np.exp(a * x)[None, :] * (1.5 + np.sin(np.pi * y / L))[:, None]
    K = ScalarField2D.like(K0, k)
    h = solve_head(assemble_system(K, BC)).values

    def F(s):
        return -np.exp(-a * s) / a

    exact = 1.0 - (F(x) - F(-L)) / (F(L) - F(-L))
    return float(np.max(np.abs(h - exact[None, :])))


def test_refinement_order():
    errs = [_manufactured_error(n) for n in (10, 20, 40)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 0.9), orders


def test_ldf2_round_trip(tmp_path, rng):
    f = ScalarField2D(7, 3, 0.5, 2.25, rng.standard_normal((3, 7)) * 1e-300)
    path = tmp_path / "f.ldf2"
    write_field(path, f)
    g = read_field(path)
    assert (g.nx, g.ny, g.dx, g.dy) == (7, 3, 0.5, 2.25)
    assert g.values.tobytes() == f.values.tobytes()
    assert to_bytes(g) == path.read_bytes()
    raw = path.read_bytes()
    assert raw[:4] == b"LDF2" and len(raw) == 4 + 4 + 4 + 4 + 8 + 8 + 21 * 8


def test_ldf2_rejects_corruption():
    raw = to_bytes(ScalarField2D.constant(2, 2, 1.0))
    with pytest.raises(GridError):
        from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(GridError):
        from_bytes(raw[:-1])
