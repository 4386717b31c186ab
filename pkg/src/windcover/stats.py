"""Statistical verification of the winding limit theorems.

Checks, on a simulated ensemble, that rho(T)/T drifts to zero, that
rho(T)/sqrt(T) is centered normal with the harmonic covariance Sigma,
and that the time-averaged quadratic variation converges to the
volume-averaged Gram matrix. The annulus closed forms (sigma^2 and the
large-time variance line) are implemented directly.

rho(T) is integer valued, so the normality test compares the observed
integer histogram with the exact law of floor(N(0, Sigma_ii T)) rather
than with quantile bins of a continuous density; integer cells are
merged until every expected count is at least 5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .forms import FormBasis

MIN_EXPECTED = 5.0


def _rho_of(ensemble) -> np.ndarray:
    rho = ensemble.rho if hasattr(ensemble, "rho") else np.asarray(ensemble)
    return np.atleast_2d(np.asarray(rho, dtype=float))


@dataclass(frozen=True)
class DriftEstimate:
    """Componentwise mean of rho(T)/T with jackknife standard errors."""

    mean: np.ndarray
    se: np.ndarray
    n: int
    unreliable: bool

    def z_scores(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.mean / self.se


def drift_estimate(ensemble, T: float | None = None) -> DriftEstimate:
    """Estimate the drift b = lim rho(T)/T; the theorem asserts b = 0."""
    rho = _rho_of(ensemble)
    if T is None:
        T = float(ensemble.config.T)
    if T <= 0.0:
        raise ValueError("domain error: drift needs T > 0")
    n = rho.shape[0]
    scaled = rho / T
    mean = scaled.mean(axis=0)
    if n < 2:
        return DriftEstimate(mean=mean, se=np.full(rho.shape[1], np.nan),
                             n=n, unreliable=True)
    # Leave-one-out means: m_i = (n*mean - x_i)/(n-1).
    loo = (n * mean - scaled) / (n - 1)
    se = np.sqrt((n - 1) / n * ((loo - loo.mean(axis=0)) ** 2).sum(axis=0))
    return DriftEstimate(mean=mean, se=se, n=n, unreliable=False)


def _lattice_chi2(values: np.ndarray, scale: float) -> tuple:
    """Goodness of fit of integer data against floor(N(0, scale^2)).

    Returns (statistic, dof, p_value, n_bins); dof = n_bins - 1 since the
    null is fully specified. Fewer than two mergeable bins means the test
    is degenerate (p = nan).
    """
    n = values.size
    if scale <= 0.0:
        return np.nan, 0, np.nan, 0
    m_lo = int(math.floor(-8.0 * scale)) - 1
    m_hi = int(math.ceil(8.0 * scale))
    cells = np.arange(m_lo, m_hi + 1)
    upper = sps.norm.cdf((cells + 1) / scale)
    lower = sps.norm.cdf(cells / scale)
    probs = upper - lower
    probs[0] += lower[0]
    probs[-1] += 1.0 - upper[-1]
    counts = np.array([(values == m).sum() for m in cells], dtype=float)
    counts[0] += (values < m_lo).sum()
    counts[-1] += (values > m_hi).sum()

    bins_o, bins_e = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(counts, n * probs):
        acc_o += o
        acc_e += e
        if acc_e >= MIN_EXPECTED:
            bins_o.append(acc_o)
            bins_e.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0.0:
        if bins_e:
            bins_o[-1] += acc_o
            bins_e[-1] += acc_e
        else:
            bins_o.append(acc_o)
            bins_e.append(acc_e)
    if len(bins_e) < 2:
        return np.nan, 0, np.nan, len(bins_e)
    obs = np.array(bins_o)
    exp = np.array(bins_e)
    stat = float(((obs - exp) ** 2 / exp).sum())
    dof = len(bins_e) - 1
    return stat, dof, float(sps.chi2.sf(stat, dof)), len(bins_e)


@dataclass(frozen=True)
class CltReport:
    """Comparison of an ensemble with the N(0, Sigma) winding limit."""

    T: float
    n: int
    mean: np.ndarray           # of rho(T)/T
    mean_se: np.ndarray
    cov: np.ndarray            # of rho(T)/sqrt(T)
    target: np.ndarray         # Sigma
    diag_rel: np.ndarray
    diag_pass: bool
    offdiag_abs: np.ndarray
    offdiag_limit: np.ndarray
    offdiag_pass: bool
    sign_match: bool
    chi2_stats: np.ndarray
    chi2_dofs: np.ndarray
    p_values: np.ndarray
    degenerate: bool

    @property
    def p_value(self) -> float:
        good = self.p_values[~np.isnan(self.p_values)]
        return float(good.min()) if good.size else float("nan")

    @property
    def passed(self) -> bool:
        return self.diag_pass and self.offdiag_pass and not self.degenerate


def clt_covariance(ensemble, T: float | None = None,
                   sigma_target: np.ndarray | None = None) -> CltReport:
    """Test rho(T)/sqrt(T) against N(0, Sigma) entrywise plus normality."""
    rho = _rho_of(ensemble)
    if T is None:
        T = float(ensemble.config.T)
    if sigma_target is None:
        raise ValueError("domain error: sigma_target required")
    target = np.asarray(sigma_target, dtype=float)
    n, k = rho.shape
    drift = drift_estimate(rho, T) if T > 0 else None

    degenerate = T <= 0.0
    if degenerate:
        cov = np.zeros((k, k))
    else:
        scaled = rho / math.sqrt(T)
        cov = np.atleast_2d(np.cov(scaled, rowvar=False))
        if not cov.any():
            degenerate = True

    diag_rel = np.abs(np.diag(cov) - np.diag(target)) / np.diag(target)
    geomean = np.sqrt(np.outer(np.diag(target), np.diag(target)))
    off = ~np.eye(k, dtype=bool)
    offdiag_abs = np.abs(cov - target)[off]
    offdiag_limit = 0.1 * geomean[off]
    sign_match = bool(np.all(np.sign(cov[off]) == np.sign(target[off])) |
                      np.all(np.abs(target[off]) < 1e-12)) if k > 1 else True

    stats = np.full(k, np.nan)
    dofs = np.zeros(k)
    ps = np.full(k, np.nan)
    if not degenerate:
        for i in range(k):
            s = math.sqrt(target[i, i] * T)
            stats[i], dofs[i], ps[i], nb = _lattice_chi2(rho[:, i], s)
            if nb < 2:
                degenerate = True
    return CltReport(
        T=T, n=n,
        mean=drift.mean if drift else np.zeros(k),
        mean_se=drift.se if drift else np.full(k, np.nan),
        cov=cov, target=target,
        diag_rel=diag_rel,
        diag_pass=bool((diag_rel < 0.10).all()) and not degenerate,
        offdiag_abs=offdiag_abs,
        offdiag_limit=offdiag_limit,
        offdiag_pass=bool((offdiag_abs < offdiag_limit).all()),
        sign_match=sign_match,
        chi2_stats=stats, chi2_dofs=dofs, p_values=ps,
        degenerate=degenerate,
    )


@dataclass(frozen=True)
class QvReport:
    """Time-averaged quadratic variation against the ergodic limit."""

    empirical: np.ndarray      # mean over trajectories of qv/T
    target: np.ndarray         # Sigma = (1/vol) int w_i . w_j
    diag_rel: np.ndarray

    @property
    def passed(self) -> bool:
        return bool((self.diag_rel < 0.05).all())


def ergodic_qv_check(ensemble, basis: FormBasis) -> QvReport:
    """Compare mean qv/T with the volume average Sigma (5% on diagonal)."""
    T = float(ensemble.config.T)
    if T <= 0.0:
        raise ValueError("domain error: qv check needs T > 0")
    empirical = ensemble.qv.mean(axis=0) / T
    target = basis.covariance_matrix()
    diag_rel = np.abs(np.diag(empirical) - np.diag(target)) / np.diag(target)
    return QvReport(empirical=empirical, target=target, diag_rel=diag_rel)


def annulus_sigma(r1: float, r2: float) -> float:
    """sigma^2 = ln(r2/r1) / (2 pi^2 (r2^2 - r1^2)) for the annulus."""
    if not 0.0 < r1 < r2:
        raise ValueError("domain error: need 0 < r1 < r2")
    return math.log(r2 / r1) / (2.0 * math.pi**2 * (r2**2 - r1**2))


def wen_variance(r0: float, r1: float, r2: float, t: float) -> float:
    """Large-time variance line of the annulus winding number.

    var(rho(t)) ~ (1/4 pi^2)(ln^2(r2/r1) - ln^2(r1/r0))
                  + sigma^2 (t - (r2^2 - r0^2)/2 + r1^2 ln(r2/r0))
    for a walk started at radius r0; the slope in t is annulus_sigma.
    """
    if not r1 <= r0 <= r2:
        raise ValueError("domain error: need r1 <= r0 <= r2")
    sig = annulus_sigma(r1, r2)
    intercept = (math.log(r2 / r1) ** 2 - math.log(r1 / r0) ** 2) \
        / (4.0 * math.pi**2)
    return intercept + sig * (t - (r2**2 - r0**2) / 2.0
                              + r1**2 * math.log(r2 / r0))
