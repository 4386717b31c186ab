"""Twisted Laplacians -H_omega, their spectra, and the intensity form I.

The discrete operator multiplies each lattice link by the unitary phase
exp(2 pi i t int_edge omega) with the edge integral computed exactly
(signed angles for the rotation parts, potential differences for the exact
parts). Every plaquette holonomy is then exactly trivial and every hole
loop carries an exactly integer period, so the spectrum is exactly
1-periodic and even in t, and the t = 0 operator is the real Laplacian.

Eigenproblems are generalized, A v = mu M v, with M the diagonal of wet
cell areas, matching the quadrature weights used everywhere else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix, diags
from scipy.sparse.linalg import eigsh, splu

from .forms import OneForm
from .geometry import Grid

FOUR_PI2 = 4.0 * math.pi**2


@dataclass
class TwistedOperator:
    """Sparse Hermitian form of -H_{t omega} with the grid's conditions."""

    grid: Grid
    t: float
    matrix: csr_matrix          # (n_dof, n_dof), complex for t != 0
    mass: np.ndarray            # (n_dof,) wet cell areas
    dof_of_active: np.ndarray   # (n_active,) dof index or -1 (Dirichlet)
    active_of_dof: np.ndarray   # (n_dof,) active index
    edge_vals: np.ndarray       # (n_active, 4) edge integrals of omega

    @property
    def n_dof(self) -> int:
        return self.mass.shape[0]

    def mass_matrix(self):
        return diags(self.mass)

    def embed(self, v: np.ndarray) -> np.ndarray:
        """Pad a dof vector with zeros at eliminated Dirichlet nodes."""
        out = np.zeros(self.grid.n_active, dtype=v.dtype)
        out[self.active_of_dof] = v
        return out

    def restrict(self, v: np.ndarray) -> np.ndarray:
        return v[self.active_of_dof]

    def hermiticity_defect(self) -> float:
        d = self.matrix - self.matrix.getH()
        return float(np.abs(d.data).max()) if d.nnz else 0.0


def _dof_maps(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    keep = ~grid.is_dirichlet
    active_of_dof = np.nonzero(keep)[0].astype(np.int32)
    dof_of_active = np.full(grid.n_active, -1, dtype=np.int32)
    dof_of_active[active_of_dof] = np.arange(active_of_dof.size, dtype=np.int32)
    return dof_of_active, active_of_dof


def assemble(grid: Grid, form: OneForm | None, t: float) -> TwistedOperator:
    """Build -H_{t omega} as a sparse matrix on the non-Dirichlet nodes.

    Link p -> q contributes -frac * exp(2 pi i t e_pq) off-diagonal and
    +frac on the diagonal. Links into Dirichlet nodes keep the diagonal
    term only (value zero eliminated); links into the exterior carry zero
    flux. t = 0 (or no form) produces a real matrix.
    """
    dof_of_active, active_of_dof = _dof_maps(grid)
    n_dof = active_of_dof.size
    if form is not None:
        edge_vals = form.edge_integrals()
    else:
        edge_vals = np.zeros((grid.n_active, 4))
    use_complex = (t != 0.0) and form is not None
    dtype = np.complex128 if use_complex else np.float64

    rows, cols, vals = [], [], []
    diag = np.zeros(n_dof)
    for d in range(4):
        q = grid.nbr[:, d]
        f = grid.face_frac[:, d]
        has = q >= 0
        p_act = np.nonzero(has)[0]
        p_dof = dof_of_active[p_act]
        q_dof = dof_of_active[q[p_act]]
        on_dof = p_dof >= 0
        # Diagonal: every wet face to an active neighbor contributes.
        np.add.at(diag, p_dof[on_dof], f[p_act[on_dof]])
        pair = on_dof & (q_dof >= 0)
        rows.append(p_dof[pair])
        cols.append(q_dof[pair])
        fr = f[p_act[pair]]
        if use_complex:
            vals.append(-fr * np.exp(2j * math.pi * t * edge_vals[p_act[pair], d]))
        else:
            vals.append(-fr.astype(dtype))
    rows.append(np.arange(n_dof))
    cols.append(np.arange(n_dof))
    vals.append(diag.astype(dtype))
    A = csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_dof, n_dof), dtype=dtype,
    )
    return TwistedOperator(
        grid=grid, t=t, matrix=A, mass=grid.mass[active_of_dof].copy(),
        dof_of_active=dof_of_active, active_of_dof=active_of_dof,
        edge_vals=edge_vals,
    )


@dataclass
class EigenResult:
    """Sorted eigenpairs of a twisted operator."""

    t: float
    mus: np.ndarray             # (k,) ascending, real
    vectors: np.ndarray         # (k, n_dof), M-orthonormal
    residuals: np.ndarray       # (k,)

    @property
    def mu(self) -> float:
        return float(self.mus[0])

    def vector(self, j: int = 0) -> np.ndarray:
        return self.vectors[j]


def eigenpairs(op: TwistedOperator, k: int = 1, sigma: float = -0.05,
               tol: float = 0.0) -> EigenResult:
    """Smallest k eigenpairs by shift-invert Lanczos with a fixed start.

    The start vector is the constant vector (deterministic), the shift
    sits below the spectrum so the factorized matrix is definite.
    """
    n = op.n_dof
    k = min(k, n - 2)
    v0 = np.ones(n, dtype=op.matrix.dtype)
    M = op.mass_matrix().tocsc()
    mus, vecs = eigsh(op.matrix.tocsc(), k=k, M=M, sigma=sigma,
                      which="LM", v0=v0, tol=tol)
    order = np.argsort(mus)
    mus = mus[order]
    vecs = vecs[:, order]
    # Loewdin M-orthonormalization: degenerate clusters come back with an
    # arbitrary, not exactly M-orthogonal, basis; kernel sums need the
    # exact spectral projector. Off-cluster blocks are already near
    # identity, so this barely perturbs isolated modes.
    G = np.conj(vecs.T) @ (op.mass[:, None] * vecs)
    gw, gv = np.linalg.eigh(G)
    vecs = vecs @ ((gv / np.sqrt(gw)) @ np.conj(gv.T))
    # Fix the phase: largest-|entry| component real positive.
    res = np.zeros(k)
    out = np.empty((k, n), dtype=vecs.dtype)
    for j in range(k):
        v = vecs[:, j]
        pivot = int(np.argmax(np.abs(v)))
        piv = v[pivot]
        if abs(piv) > 0:
            v = v * (abs(piv) / piv)
        if not np.iscomplexobj(v) and v[pivot] < 0:
            v = -v
        out[j] = v
        r = op.matrix @ v - mus[j] * (op.mass * v)
        res[j] = float(np.linalg.norm(r) / max(np.linalg.norm(op.mass * v), 1e-300))
    return EigenResult(t=op.t, mus=mus.astype(float), vectors=out, residuals=res)


def principal_eigenpair(op: TwistedOperator, tol: float = 0.0) -> EigenResult:
    """Ground eigenpair; residual per the 1e-8 contract."""
    res = eigenpairs(op, k=1, tol=tol)
    if res.residuals[0] > 1e-8:
        raise RuntimeError(f"eigen residual {res.residuals[0]:.2e} exceeds 1e-8")
    return res


def eigenvalue_curve(grid: Grid, form: OneForm, ts: np.ndarray) -> np.ndarray:
    """mu_{t omega} for each t (independent assemblies and solves)."""
    return np.array([principal_eigenpair(assemble(grid, form, float(t))).mu
                     for t in ts])


def first_order_matrix(op: TwistedOperator) -> csr_matrix:
    """i dA/dt at t = 0: real antisymmetric, entries 2 pi frac e_pq.

    Represents the measure-weighted operator 4 pi omega . grad; exact
    M-antisymmetry makes the g_omega solvability condition hold to
    machine precision.
    """
    grid = op.grid
    dof_of_active = op.dof_of_active
    rows, cols, vals = [], [], []
    for d in range(4):
        q = grid.nbr[:, d]
        f = grid.face_frac[:, d]
        has = q >= 0
        p_act = np.nonzero(has)[0]
        p_dof = dof_of_active[p_act]
        q_dof = dof_of_active[q[p_act]]
        pair = (p_dof >= 0) & (q_dof >= 0)
        rows.append(p_dof[pair])
        cols.append(q_dof[pair])
        vals.append(2.0 * math.pi * f[p_act[pair]] * op.edge_vals[p_act[pair], d])
    n = op.n_dof
    return csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )


@dataclass
class GOmegaSolution:
    """First-order eigenfunction correction g_omega."""

    g: np.ndarray               # (n_dof,) real
    residual: float
    solvability: float          # |<phi0, 4 pi omega . grad phi0>| (weighted)
    multiplier: float           # Lagrange multiplier of the bordered solve


def solve_g_omega(op0: TwistedOperator, phi0: np.ndarray, lam0: float,
                  iA1: csr_matrix | None = None) -> GOmegaSolution:
    """Solve (A0 - lam0 M) g = (i A1) phi0 with g M-orthogonal to phi0.

    op0 must be the untwisted (t = 0) operator. The right side is exactly
    M-orthogonal to phi0 (iA1 is antisymmetric), so the bordered system
    [[A0 - lam0 M, M phi0], [(M phi0)^T, 0]] is nonsingular and sparse.
    """
    from scipy.sparse import bmat

    if iA1 is None:
        iA1 = first_order_matrix(op0)
    phi0 = np.real(phi0)
    r = iA1 @ phi0
    solvability = abs(float(phi0 @ r))
    scale = float(np.abs(r).max()) + 1e-300
    if solvability > 1e-10 * scale:
        raise RuntimeError(f"solvability defect {solvability:.2e}")
    A = np.real(op0.matrix) if np.iscomplexobj(op0.matrix.data) else op0.matrix
    Mphi = op0.mass * phi0
    K = bmat([[A - lam0 * diags(op0.mass), Mphi[:, None]],
              [Mphi[None, :], None]], format="csc")
    sol = splu(K).solve(np.concatenate([r, [0.0]]))
    g, alpha = sol[:-1], float(sol[-1])
    shifted = (A @ g) - lam0 * (op0.mass * g) + alpha * Mphi
    residual = float(np.linalg.norm(shifted - r) / max(np.linalg.norm(r), 1e-300))
    return GOmegaSolution(g=g, residual=residual, solvability=solvability,
                          multiplier=alpha)


def quadratic_form_I(op0: TwistedOperator, form: OneForm, phi0: np.ndarray,
                     g: np.ndarray, iA1: csr_matrix | None = None) -> float:
    """I(omega) = 8 pi^2 int |omega|^2 phi0^2 + 8 pi int phi0 omega . grad g.

    First term by node quadrature with the wet-cell masses; second term
    through the antisymmetric pairing 2 <phi0, (i A1) g>, which is gauge
    invariant under g -> g + c phi0 to machine precision.
    """
    if iA1 is None:
        iA1 = first_order_matrix(op0)
    phi0 = np.real(phi0)
    om = form.node_values[op0.active_of_dof]
    om2 = (om * om).sum(axis=1)
    term1 = 8.0 * math.pi**2 * float((op0.mass * om2 * phi0**2).sum())
    term2 = 2.0 * float(phi0 @ (iA1 @ g))
    return term1 + term2


def hessian_check(grid: Grid, form: OneForm, ts: tuple[float, float] = (0.1, 0.05),
                  i_reference: float | None = None) -> dict:
    """Second-difference check: 2 (mu_t - lam0) / t^2 against I(omega).

    ts must be (t, t/2); Richardson extrapolation removes the leading t^2
    error. When i_reference is omitted it is computed from the g_omega
    quadrature on the same grid.
    """
    t_big, t_small = ts
    if not math.isclose(t_small * 2.0, t_big, rel_tol=1e-12):
        raise ValueError("ts must be (t, t/2) for Richardson extrapolation")
    op0 = assemble(grid, form, 0.0)
    base = principal_eigenpair(op0)
    lam0 = base.mu
    phi0 = np.real(base.vector(0))
    iA1 = first_order_matrix(op0)
    if i_reference is None:
        gsol = solve_g_omega(op0, phi0, lam0, iA1=iA1)
        i_reference = quadratic_form_I(op0, form, phi0, gsol.g, iA1=iA1)
    q = {}
    for t in ts:
        mu_t = principal_eigenpair(assemble(grid, form, t)).mu
        q[t] = 2.0 * (mu_t - lam0) / t**2
    richardson = (4.0 * q[t_small] - q[t_big]) / 3.0
    return {
        "lambda0": lam0,
        "ratios": q,
        "richardson": richardson,
        "i_reference": float(i_reference),
        "relative_error": abs(richardson - i_reference) / abs(i_reference),
    }
