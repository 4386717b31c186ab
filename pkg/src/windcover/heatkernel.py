"""Cover heat kernel reconstruction from twisted spectra.

The kernel on the Z^k cover is recovered as a character-torus integral of
twisted kernels,

    Hhat(t, x, g_n y) = int_0^1 e^{-2 pi i n s} e^{-2 pi i s xi(x,y)}
                        K_s(t, x, y) ds,

with K_s the spectral heat kernel of -H_{s omega}. The integrand is
exactly 1-periodic in s (the twisted eigenfields change by integer-period
phases), so the equispaced trapezoid rule converges spectrally and the
default 64 points are far beyond the needed accuracy. Desk-scale kernel
work is restricted to k = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import spectra
from .forms import FormBasis, OneForm
from .geometry import Grid

TWO_PI = 2.0 * math.pi


@dataclass
class SpectralTable:
    """Eigendecompositions of -H_{s omega} on an equispaced s grid."""

    grid: Grid
    form: OneForm
    s_values: np.ndarray        # (M,) = m/M
    mus: np.ndarray             # (M, k_eig) ascending per row
    phis: np.ndarray            # (M, k_eig, n_active) complex, Dirichlet zeros
    mass: np.ndarray            # (n_active,)
    lam0: float                 # untwisted ground eigenvalue (s = 0 row)

    @property
    def n_quad(self) -> int:
        return self.s_values.size

    @property
    def k_eig(self) -> int:
        return self.mus.shape[1]

    def mode_count(self, t: float, s_index: int) -> int:
        """Modes retained at time t: mu <= lam0 + 30/t, at least one.

        The table must extend past the cutoff or the truncation is not
        certified.
        """
        cutoff = self.lam0 + 30.0 / t
        mus = self.mus[s_index]
        if mus[-1] <= cutoff:
            raise RuntimeError(
                f"mode table too short: mu_max = {mus[-1]:.4f} <= cutoff "
                f"{cutoff:.4f} at t = {t}")
        return max(1, int(np.searchsorted(mus, cutoff, side="right")))

    def kernel_values(self, t: float, x: int, y: int) -> np.ndarray:
        """K_s(t, x, y) for every s row, truncated at the mode cutoff."""
        out = np.empty(self.n_quad, dtype=np.complex128)
        for m in range(self.n_quad):
            k = self.mode_count(t, m)
            w = np.exp(-self.mus[m, :k] * t)
            out[m] = np.sum(w * self.phis[m, :k, x] * np.conj(self.phis[m, :k, y]))
        return out


def build_table(grid: Grid, form: OneForm, n_quad: int = 64,
                k_eig: int = 12) -> SpectralTable:
    """Solve the k_eig lowest modes of -H_{s omega} at s = m/n_quad.

    The s = 0 row is real; its ground eigenvalue is lam0 for the whole
    table (exact 1-periodicity makes the grid {m/M} cover the torus).
    """
    s_values = np.arange(n_quad) / n_quad
    mus = np.empty((n_quad, k_eig))
    phis = np.empty((n_quad, k_eig, grid.n_active), dtype=np.complex128)
    for m, s in enumerate(s_values):
        op = spectra.assemble(grid, form, float(s))
        res = spectra.eigenpairs(op, k=k_eig)
        if res.residuals.max() > 1e-8:
            raise RuntimeError(
                f"eigen residual {res.residuals.max():.2e} at s = {s}")
        mus[m] = res.mus
        for j in range(k_eig):
            phis[m, j] = op.embed(res.vectors[j])
    return SpectralTable(grid=grid, form=form, s_values=s_values, mus=mus,
                         phis=phis, mass=grid.mass, lam0=float(mus[0, 0]))


def twisted_kernel(op: spectra.TwistedOperator, t: float, x: int, y: int,
                   n_modes: int = 12) -> complex:
    """K_s(t, x, y) by a fresh eigensolve of the given operator.

    Convenience form; bulk work goes through a SpectralTable. The
    truncation must satisfy the e^{-mu t} < 1e-12 contract relative to
    the ground term, checked against the last computed mode.
    """
    res = spectra.eigenpairs(op, k=n_modes)
    if math.exp(-(res.mus[-1] - res.mus[0]) * t) > 1e-12:
        raise RuntimeError(f"n_modes = {n_modes} too small at t = {t}")
    vx = np.array([op.embed(res.vector(j))[x] for j in range(n_modes)])
    vy = np.array([op.embed(res.vector(j))[y] for j in range(n_modes)])
    return complex(np.sum(np.exp(-res.mus * t) * vx * np.conj(vy)))


@dataclass
class KernelEstimate:
    """One value of the cover kernel with its error bookkeeping."""

    t: float
    x: int
    y: int
    n: int
    value: float
    imag_residue: float
    quad_error: float           # trapezoid halving difference
    trunc_error: float          # bound on the discarded spectral tail

    def __post_init__(self):
        if self.value < -1e-10:
            raise RuntimeError(f"kernel positivity violated: {self.value:.3e}")


def _phase_sum(kernel_row: np.ndarray, s_values: np.ndarray, n: int,
               xi: float) -> complex:
    ph = np.exp(-2j * math.pi * s_values * (n + xi))
    return complex(np.mean(ph * kernel_row))


def cover_kernel(table: SpectralTable, t: float, x: int, y: int, n: int,
                 xi: float = 0.0) -> KernelEstimate:
    """Hhat(t, x, g_n y) by torus quadrature; real part with residue check.

    xi is the in-domain path integral of omega from x to y (0 when x = y);
    pass basis.xi output for distinct points.
    """
    row = table.kernel_values(t, x, y)
    full = _phase_sum(row, table.s_values, n, xi)
    half = _phase_sum(row[::2], table.s_values[::2], n, xi)
    k_last = min(table.mode_count(t, m) for m in range(table.n_quad))
    trunc = float(np.exp(-(table.mus[:, min(k_last, table.k_eig - 1)].min()
                           - table.lam0) * t))
    value = float(full.real)
    imag = abs(full.imag)
    scale = float(np.abs(row).max())
    # Relative check with an absolute floor at the quadrature's own
    # rounding level, so machine-zero sheets do not trip it.
    if imag > max(1e-8 * abs(value), 1e-13 * scale, 1e-300):
        raise RuntimeError(f"phase-convention error: imag residue {imag:.3e} "
                           f"against value {value:.3e}")
    return KernelEstimate(t=t, x=x, y=y, n=n, value=value, imag_residue=imag,
                          quad_error=abs(full - half), trunc_error=trunc)


def sheet_range(table: SpectralTable, t: float, tol: float = 1e-10) -> int:
    """Smallest N with the Gaussian sheet tail below tol at |n| = N.

    Uses the crude profile bound amp * exp(-2 pi^2 n^2 / (I t)) with the
    I-form read from the table's own curvature, then clamps so the sheet
    window stays well inside the quadrature bandwidth (honest sum, not
    discrete Fourier inversion).
    """
    # Curvature of mu(s) at 0 from the first off-zero row.
    s1 = table.s_values[1]
    i_form = max(2.0 * (table.mus[1, 0] - table.lam0) / s1**2, 1e-6)
    amp = float(np.abs(table.kernel_values(t, 0, 0)).max()) + 1e-300
    n = 1
    while amp * math.exp(-TWO_PI * math.pi * n * n / (i_form * t)) > tol:
        n += 1
    return min(n, (table.n_quad - 2) // 4)


def base_consistency(table: SpectralTable, t: float, x: int, y: int,
                     xi: float = 0.0, n_sheets: int | None = None) -> float:
    """|sum_n Hhat(t,x,g_n y) - K_0(t,x,y)|, the sheet-sum identity."""
    if n_sheets is None:
        n_sheets = sheet_range(table, t)
    row = table.kernel_values(t, x, y)
    total = 0.0
    for n in range(-n_sheets, n_sheets + 1):
        total += cover_kernel(table, t, x, y, n, xi=xi).value
    base = row[0].real
    return abs(total - base)


@dataclass
class AsymptoticProfile:
    """Long-time constants: lambda0, C_I, and the dual metric d_I^2."""

    lambda0: float
    c_i: float
    gram: np.ndarray            # (k, k) I-Gram matrix A
    xi: np.ndarray              # (k,) path integrals from x to y
    phi0_x: float
    phi0_y: float
    gram_inv: np.ndarray = field(init=False)

    def __post_init__(self):
        vals = np.linalg.eigvalsh(self.gram)
        if vals.min() <= 0:
            raise RuntimeError("profile error: I-Gram matrix not positive definite")
        self.gram_inv = np.linalg.inv(self.gram)
        if self.c_i <= 0:
            raise RuntimeError("profile error: C_I must be positive")

    @property
    def k(self) -> int:
        return self.gram.shape[0]

    def d2(self, n) -> float:
        """d_I(x, g_n y)^2 = (n + xi)^T A^{-1} (n + xi)."""
        v = np.atleast_1d(np.asarray(n, dtype=float)) + self.xi
        return float(v @ self.gram_inv @ v)

    def predicted(self, t: float, n) -> float:
        """C_I exp(-2 pi^2 d_I^2 / t), the Theorem-limit right side."""
        return self.c_i * math.exp(-TWO_PI * math.pi * self.d2(n) / t)


def asymptotic_profile(basis: FormBasis, eig0: spectra.EigenResult,
                       op0: spectra.TwistedOperator, x: int, y: int,
                       gram: np.ndarray | None = None) -> AsymptoticProfile:
    """Profile at grid nodes x, y.

    C_I = (2 pi)^{k/2} det(A)^{-1/2} phi0(x) phi0(y) with the operator's
    own ground state (M-normalized, positive). gram defaults to the
    all-Neumann 8 pi^2 Sigma matrix; pass the quadratic_form_I Gram for
    mixed conditions.
    """
    if gram is None:
        gram = basis.gram_I_neumann()
    phi0 = np.real(op0.embed(eig0.vector(0)))
    if phi0[np.argmax(np.abs(phi0))] < 0:
        phi0 = -phi0
    k = gram.shape[0]
    det = float(np.linalg.det(gram))
    c_i = (TWO_PI) ** (k / 2.0) / math.sqrt(det) * phi0[x] * phi0[y]
    xi = np.zeros(k) if x == y else basis.xi(basis.grid.xy[x], basis.grid.xy[y])
    return AsymptoticProfile(lambda0=eig0.mu, c_i=c_i, gram=gram, xi=xi,
                             phi0_x=float(phi0[x]), phi0_y=float(phi0[y]))


def gram_matrix_I(grid: Grid, basis: FormBasis) -> np.ndarray:
    """I-Gram matrix A_ij by polarization of quadratic_form_I.

    Each evaluation solves its own g correction, so this covers mixed
    conditions where the all-Neumann shortcut A = 8 pi^2 Sigma fails.
    """
    op0 = spectra.assemble(grid, None, 0.0)
    base = spectra.principal_eigenpair(op0)
    phi0 = np.real(base.vector(0))
    k = basis.k

    def q(coeffs: np.ndarray) -> float:
        form = OneForm(basis=basis, coeffs=coeffs)
        op = spectra.assemble(grid, form, 0.0)
        iA1 = spectra.first_order_matrix(op)
        g = spectra.solve_g_omega(op, phi0, base.mu, iA1=iA1).g
        return spectra.quadratic_form_I(op, form, phi0, g, iA1=iA1)

    A = np.zeros((k, k))
    for i in range(k):
        ei = np.eye(k)[i]
        A[i, i] = q(ei)
    for i in range(k):
        for j in range(i + 1, k):
            ei, ej = np.eye(k)[i], np.eye(k)[j]
            A[i, j] = A[j, i] = 0.25 * (q(ei + ej) - q(ei - ej))
    return A


def asymptotic_check(table: SpectralTable, profile: AsymptoticProfile,
                     ts, x: int, y: int, sheets, xi: float = 0.0) -> list[dict]:
    """Rows (t, n, lhs, predicted, diff) of the long-time law.

    lhs = t^{k/2} e^{lambda0 t} Hhat(t, x, g_n y); diff must shrink along
    increasing t for each sheet (checked by the caller).
    """
    rows = []
    for t in ts:
        for n in sheets:
            est = cover_kernel(table, t, x, y, int(n), xi=xi)
            lhs = t ** (profile.k / 2.0) * math.exp(profile.lambda0 * t) * est.value
            rhs = profile.predicted(t, int(n))
            rows.append({"t": float(t), "n": int(n), "hhat": lhs,
                         "predicted": rhs, "diff": abs(lhs - rhs)})
    return rows


def sheet_profile(table: SpectralTable, t: float, x: int,
                  n_max: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sheet distribution (n, Hhat_n) at x = y; weights clipped at zero."""
    if n_max is None:
        n_max = sheet_range(table, t)
    ns = np.arange(-n_max, n_max + 1)
    vals = np.array([cover_kernel(table, t, x, x, int(n)).value for n in ns])
    return ns, np.clip(vals, 0.0, None)


def sheet_profile_variance(table: SpectralTable, t: float, x: int,
                           n_max: int | None = None) -> float:
    """Variance of the normalized sheet distribution at heat time t.

    Long-time law: approaches I t / (4 pi^2); with the Brownian dictionary
    T = 2t this is the winding variance Sigma T.
    """
    ns, w = sheet_profile(table, t, x, n_max)
    total = w.sum()
    if total <= 0:
        raise RuntimeError("sheet profile vanished")
    mean = float((w * ns).sum() / total)
    return float((w * (ns - mean) ** 2).sum() / total)
