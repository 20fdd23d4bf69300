import logging

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from shallowflow import fem
from shallowflow.constraints import make_zero_mean_system
from shallowflow.geometry import BathymetryGrid, build_mesh
from shallowflow.linalg import (BreakdownError, IC0Breakdown, Precond, Preconditioner, SolverError, apply_ic0,
                                ic0_factor, pcg_solve, solve_pressure_system, spmv, write_matrix_market)


def tridiag(n, seed=0):
    rng = np.random.default_rng(seed)
    off = rng.uniform(-1, 1, n - 1)
    d = 2.5 + rng.uniform(0, 1, n)
    return sp.diags([off, d, off], [-1, 0, 1], format="csr")


def spd(n, seed, density=0.3):
    rng = np.random.default_rng(seed)
    R = sp.random(n, n, density=density, random_state=rng)
    A = (R @ R.T + n * sp.identity(n)).tocsr()
    A.sort_indices()
    return A


def test_spmv_examples():
    x = np.arange(5.0)
    np.testing.assert_array_equal(spmv(sp.identity(5, format="csr"), x), x)
    np.testing.assert_array_equal(spmv(sp.csr_matrix([[4.0, 1.0], [1.0, 3.0]]), np.ones(2)), [5.0, 4.0])
    with pytest.raises(ValueError):
        spmv(sp.identity(3, format="csr"), np.ones(2))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_spmv_matches_dense(seed):
    rng = np.random.default_rng(seed)
    A = sp.random(20, 20, density=0.3, random_state=rng, format="csr")
    x = rng.normal(size=20)
    np.testing.assert_allclose(spmv(A, x), A.toarray() @ x, rtol=0, atol=1e-13 * (1 + np.abs(x).sum()))


def test_pcg_examples():
    b = np.array([1.0, -2.0, 3.0])
    x, rep = pcg_solve(sp.identity(3, format="csr"), b)
    np.testing.assert_array_equal(x, b)
    assert rep.iterations == 1 and rep.converged
    x, rep = pcg_solve(sp.csr_matrix([[4.0, 1.0], [1.0, 3.0]]), np.array([1.0, 2.0]), tol=1e-14)
    np.testing.assert_allclose(x, [1 / 11, 7 / 11], atol=1e-14)
    x, rep = pcg_solve(sp.diags([1.0, 10.0, 100.0], format="csr"), b, Precond.DIAG)
    assert rep.iterations == 1
    np.testing.assert_allclose(x, b / [1, 10, 100], rtol=1e-15)


def test_pcg_zero_rhs_and_errors():
    x, rep = pcg_solve(spd(5, 1), np.zeros(5))
    assert not x.any() and rep.iterations == 0
    with pytest.raises(ValueError):
        pcg_solve(spd(5, 1), np.ones(5), tol=0.0)
    with pytest.raises(ValueError):
        pcg_solve(spd(5, 1), np.ones(4))
    with pytest.raises(BreakdownError):
        pcg_solve(sp.diags([1.0, -1.0], format="csr"), np.array([1.0, 1.0]))


def test_pcg_reports_non_convergence():
    A = spd(40, 2)
    _, rep = pcg_solve(A, np.ones(40), tol=1e-14, max_iter=2)
    assert not rep.converged and rep.iterations == 2 and rep.final_residual > 1e-14


@pytest.mark.parametrize("kind", list(Precond))
def test_pcg_converged_residual_below_tolerance(kind):
    A = spd(60, 3)
    b = np.random.default_rng(3).normal(size=60)
    x, rep = pcg_solve(A, b, kind, tol=1e-9)
    assert rep.converged
    assert np.linalg.norm(b - A @ x) / np.linalg.norm(b) <= 1e-9
    assert rep.final_residual <= 1e-9


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_preconditioners_agree(seed):
    A = spd(50, seed)
    b = np.random.default_rng(seed).normal(size=50)
    tol = 1e-10
    xs = [pcg_solve(A, b, k, tol=tol)[0] for k in Precond]
    for x in xs[1:]:
        assert np.linalg.norm(x - xs[0]) <= 10 * tol * np.linalg.norm(xs[0])


def test_pcg_error_decreases_in_energy_norm():
    A = spd(40, 5)
    b = np.random.default_rng(5).normal(size=40)
    exact = np.linalg.solve(A.toarray(), b)
    errs = []
    for k in range(1, 25):
        x, _ = pcg_solve(A, b, Precond.IC0, tol=1e-30, max_iter=k)
        e = x - exact
        errs.append(e @ A @ e)
    assert all(b_ <= a_ * (1 + 1e-12) for a_, b_ in zip(errs, errs[1:]))


def test_ic0_examples():
    d = np.array([4.0, 9.0, 2.0])
    L = ic0_factor(sp.diags(d, format="csr"))
    np.testing.assert_allclose(L.toarray(), np.diag(np.sqrt(d)), rtol=1e-15)
    np.testing.assert_array_equal(ic0_factor(sp.identity(4, format="csr")).toarray(), np.eye(4))


@pytest.mark.parametrize("make", [lambda: tridiag(30, 1),
                                  lambda: sp.csr_matrix(np.diag(np.full(6, 10.0)) + np.pad(np.ones((1, 5)), ((5, 0), (0, 1)))
                                                        + np.pad(np.ones((5, 1)), ((0, 1), (5, 0))))])
def test_ic0_equals_cholesky_without_fill(make):
    A = make()
    A.sort_indices()
    L = ic0_factor(A)
    np.testing.assert_allclose(L.toarray(), np.linalg.cholesky(A.toarray()), atol=1e-14)


def test_ic0_matches_a_on_its_pattern(small_box):
    _, mesh = small_box
    A = fem.assemble_mass(mesh, "Q1")
    L = ic0_factor(A)
    LLt = (L @ L.T).toarray()
    rows, cols = A.nonzero()
    np.testing.assert_allclose(LLt[rows, cols], A.toarray()[rows, cols], atol=1e-14 * abs(A).max())


def test_apply_ic0_examples():
    r = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(apply_ic0(sp.identity(3, format="csr"), r), r)
    np.testing.assert_allclose(apply_ic0(sp.diags([2.0] * 3, format="csr"), r), r / 4)
    A = tridiag(20, 4)
    r = np.random.default_rng(4).normal(size=20)
    np.testing.assert_allclose(apply_ic0(ic0_factor(A), r), np.linalg.solve(A.toarray(), r), atol=1e-13)
    with pytest.raises(SolverError):
        apply_ic0(sp.csr_matrix(([1.0, 0.0], [0, 1], [0, 1, 2]), shape=(2, 2)), np.ones(2))


def test_ic0_breakdown_falls_back_to_diag(caplog):
    A = sp.csr_matrix([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(IC0Breakdown):
        ic0_factor(A)
    with caplog.at_level(logging.WARNING):
        P = Preconditioner(A, Precond.IC0)
    assert P.kind is Precond.DIAG and P.requested is Precond.IC0
    assert "falling back" in caplog.text


def two_hex_pressure():
    mesh = build_mesh(BathymetryGrid.uniform(2, 1, 1.0, 1.0, 1.0), 1, min_depth=0.0)
    A = fem.assemble_pressure_laplacian(mesh)
    m = fem.lumped_mass(mesh, "Q1")
    return A, m


def test_pressure_system_matches_dense_oracle():
    A, m = two_hex_pressure()
    aug = make_zero_mean_system(A, m)
    rng = np.random.default_rng(6)
    g = rng.normal(size=len(m))
    rhs = np.append(g, 0.0)
    q, mu, rep = solve_pressure_system(aug, rhs, tol=1e-12)
    dense = np.linalg.solve(aug.toarray(), rhs)
    np.testing.assert_allclose(q, dense[:-1], atol=1e-8 * np.abs(dense).max())
    assert mu == pytest.approx(dense[-1], abs=1e-8)
    # the multiplier absorbs the mean of an incompatible source
    assert mu == pytest.approx(g.sum() / m.sum(), rel=1e-13)
    assert rep.converged and rep.final_residual <= 1e-10
    assert abs(m @ q) <= 1e-12 * np.linalg.norm(q) * m.sum()


def test_pressure_system_errors():
    A, m = two_hex_pressure()
    aug = make_zero_mean_system(A, m)
    with pytest.raises(ValueError):
        solve_pressure_system(aug, np.zeros(3))
    with pytest.raises(SolverError):
        solve_pressure_system(aug, np.append(np.arange(len(m), dtype=float), 0.0), tol=1e-14, max_iter=1)


def test_matrix_market_dump(tmp_path):
    from scipy.io import mmread

    A = tridiag(5)
    write_matrix_market(A, tmp_path / "a.mtx")
    np.testing.assert_array_equal(mmread(str(tmp_path / "a.mtx")).toarray(), A.toarray())
