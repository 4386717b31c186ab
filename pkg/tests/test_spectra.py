"""Twisted operator tests: exact gauge identities, continuum eigenvalues,
and the Hessian-of-the-ground-state identity for the intensity form.

Continuum oracles are Bessel cross-product roots of the separated annulus
problem, frozen to full precision.
"""

import math

import numpy as np
import pytest

from windcover.forms import neumann_laplacian
from windcover.spectra import (
    assemble,
    eigenpairs,
    eigenvalue_curve,
    first_order_matrix,
    hessian_check,
    principal_eigenpair,
    quadratic_form_I,
    solve_g_omega,
)

# Annulus (1, 2), all Neumann: principal eigenvalue of -H_{t omega}.
MU_HALF = 0.11531566437098677
MU_TENTH = 0.004620646140420966
# Annulus (1, 2), Dirichlet outer, Neumann hole: untwisted ground state.
LAM0_DIRICHLET = 3.2184751263930886

I_ANNULUS = (4.0 / 3.0) * math.log(2.0)


@pytest.fixture(scope="module")
def annulus_form(annulus_basis):
    return annulus_basis.form(0)


@pytest.fixture(scope="module")
def dirichlet_form(annulus_dirichlet_basis):
    return annulus_dirichlet_basis.form(0)


@pytest.fixture(scope="module")
def ground(annulus_grid, annulus_basis):
    op0 = assemble(annulus_grid, annulus_basis.form(0), 0.0)
    res = principal_eigenpair(op0)
    return op0, np.real(res.vector(0)), res.mu


class TestAssemble:
    def test_untwisted_is_real_laplacian(self, annulus_grid, annulus_form):
        op = assemble(annulus_grid, annulus_form, 0.0)
        assert not np.iscomplexobj(op.matrix.data)
        L = neumann_laplacian(annulus_grid)
        assert (op.matrix != L).nnz == 0

    def test_no_form_is_real(self, annulus_grid):
        op = assemble(annulus_grid, None, 0.7)
        assert not np.iscomplexobj(op.matrix.data)

    def test_hermitian(self, annulus_grid, annulus_form):
        # Bitwise-antisymmetric edge integrals conjugate the phases
        # exactly, so the defect is at rounding level.
        for t in (0.3, 0.9, 2.4):
            op = assemble(annulus_grid, annulus_form, t)
            assert op.hermiticity_defect() < 1e-14

    def test_dirichlet_elimination(self, annulus_dirichlet_grid,
                                   dirichlet_form):
        grid = annulus_dirichlet_grid
        op = assemble(grid, dirichlet_form, 0.3)
        n_dir = int(grid.is_dirichlet.sum())
        assert n_dir > 0
        assert op.n_dof == grid.n_active - n_dir
        v = np.sin(np.arange(op.n_dof, dtype=float))
        assert np.array_equal(op.restrict(op.embed(v)), v)
        assert np.all(op.embed(v)[grid.is_dirichlet] == 0.0)


class TestEigen:
    def test_neumann_ground_state(self, annulus_grid, annulus_form):
        res = principal_eigenpair(assemble(annulus_grid, annulus_form, 0.0))
        assert abs(res.mu) < 1e-12
        v = np.real(res.vector(0))
        assert np.abs(v - v.mean()).max() < 1e-8 * abs(v.mean())
        assert res.residuals[0] < 1e-10

    def test_mass_orthonormal_in_degenerate_cluster(self, annulus_grid,
                                                    annulus_form):
        # t = 1/2 is a branch crossing: the angular modes pair up and the
        # Lanczos basis of the cluster needs the explicit re-orthogonalization.
        op = assemble(annulus_grid, annulus_form, 0.5)
        res = eigenpairs(op, k=6)
        V = res.vectors.T
        G = np.conj(V.T) @ (op.mass[:, None] * V)
        assert np.abs(G - np.eye(6)).max() < 1e-12
        assert res.residuals.max() < 1e-8

    def test_continuum_eigenvalues(self, annulus_grid, annulus_form):
        got_half = principal_eigenpair(
            assemble(annulus_grid, annulus_form, 0.5)).mu
        got_tenth = principal_eigenpair(
            assemble(annulus_grid, annulus_form, 0.1)).mu
        assert got_half == pytest.approx(MU_HALF, rel=1e-2)
        assert got_tenth == pytest.approx(MU_TENTH, rel=1e-2)

    def test_periodicity_and_evenness(self, annulus_grid, annulus_form):
        mu = {t: principal_eigenpair(assemble(annulus_grid, annulus_form,
                                              t)).mu
              for t in (0.3, 1.3, -0.3)}
        assert mu[1.3] == pytest.approx(mu[0.3], rel=1e-12)
        assert mu[-0.3] == pytest.approx(mu[0.3], rel=1e-12)

    def test_curve_minimal_at_integers(self, annulus_grid, annulus_form):
        ts = np.array([0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0])
        curve = eigenvalue_curve(annulus_grid, annulus_form, ts)
        assert abs(curve[0]) < 1e-12
        assert abs(curve[-1]) < 1e-12
        assert curve[1:-1].min() > 1e-3

    def test_dirichlet_integer_twist_identity(self, annulus_dirichlet_grid,
                                              dirichlet_form):
        lam0 = principal_eigenpair(
            assemble(annulus_dirichlet_grid, dirichlet_form, 0.0)).mu
        mu1 = principal_eigenpair(
            assemble(annulus_dirichlet_grid, dirichlet_form, 1.0)).mu
        assert mu1 == pytest.approx(lam0, rel=1e-12)
        # Staircase Dirichlet walls bias the level first order in h.
        assert lam0 == pytest.approx(LAM0_DIRICHLET, rel=2e-2)


class TestPerturbation:
    def test_first_order_antisymmetric(self, ground):
        op0, _, _ = ground
        iA1 = first_order_matrix(op0)
        s = iA1 + iA1.T
        assert (np.abs(s.data).max() if s.nnz else 0.0) == 0.0

    def test_g_omega_solve(self, ground, annulus_form):
        op0, phi0, lam0 = ground
        sol = solve_g_omega(op0, phi0, lam0)
        assert sol.residual < 1e-10
        assert abs(float(phi0 @ (op0.mass * sol.g))) < 1e-10

    def test_gauge_invariance(self, ground, annulus_form):
        op0, phi0, lam0 = ground
        iA1 = first_order_matrix(op0)
        sol = solve_g_omega(op0, phi0, lam0, iA1=iA1)
        base = quadratic_form_I(op0, annulus_form, phi0, sol.g, iA1=iA1)
        shifted = quadratic_form_I(op0, annulus_form, phi0,
                                   sol.g + 0.37 * phi0, iA1=iA1)
        assert shifted == pytest.approx(base, rel=1e-10)

    def test_quadratic_form_value(self, ground, annulus_form, annulus_basis):
        op0, phi0, lam0 = ground
        sol = solve_g_omega(op0, phi0, lam0)
        val = quadratic_form_I(op0, annulus_form, phi0, sol.g)
        assert val == pytest.approx(I_ANNULUS, rel=1e-2)
        assert val == pytest.approx(annulus_basis.gram_I_neumann()[0, 0],
                                    rel=1e-2)

    def test_hessian_identity(self, annulus_grid, annulus_form):
        report = hessian_check(annulus_grid, annulus_form)
        assert report["relative_error"] < 0.02
        hand = hessian_check(annulus_grid, annulus_form,
                             i_reference=I_ANNULUS)
        assert hand["relative_error"] < 0.02

    def test_hessian_rejects_bad_ts(self, annulus_grid, annulus_form):
        with pytest.raises(ValueError):
            hessian_check(annulus_grid, annulus_form, ts=(0.1, 0.07))
