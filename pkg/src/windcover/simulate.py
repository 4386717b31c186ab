"""Reflected Brownian motion in a multi-hole planar domain, with winding.

Euler increments with exact mirror reflection on the circular walls. The
winding coordinates are tracked by exact signed subtended angles per
step, so a closed sampled loop winds an exact integer no matter how it
is partitioned; the exact-correction potentials enter only through
endpoint differences and are applied at checkpoint times (telescoping
makes per-step and per-checkpoint application identical).

Each trajectory owns a counter-based RNG stream keyed by
(base_seed, trajectory index), so ensembles are independent of batching
and execution order and rerunning a configuration reproduces every
output array bit for bit.

The walk has generator Laplacian/2 (standard Brownian motion); kernel
work elsewhere uses heat time with generator Laplacian, so cross checks
apply the dictionary T = 2 t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .forms import FormBasis, interpolate, tau_segment_integral, tau_values
from .geometry import PlanarDomain

TRACKERS = ("angle", "stratonovich", "both")
# Wrapped per-step winding at or beyond this is ambiguous (the chord may
# have crossed a hole): reject and retry the step at half scale.
WINDING_GUARD = 0.45
MAX_HALVINGS = 8
SUBSTEP_SALT = np.uint64(0x9E3779B97F4A7C15)


class SimulationError(RuntimeError):
    """Raised when the sampled ensemble violates its own preconditions."""


@dataclass(frozen=True)
class SimConfig:
    """Ensemble description; every field enters the RNG or the scheme."""

    dt: float
    T: float
    base_seed: int
    n_traj: int
    start: object = "uniform"      # point (x, y) or "uniform"
    tracker: str = "angle"
    checkpoints: tuple = ()        # defaults to (T/4, T/2, 3T/4, T)

    def __post_init__(self):
        if self.dt <= 0 or self.T < 0:
            raise ValueError("config error: dt > 0 and T >= 0 required")
        if self.n_traj < 1:
            raise ValueError("config error: n_traj >= 1 required")
        if self.tracker not in TRACKERS:
            raise ValueError(f"config error: tracker must be one of {TRACKERS}")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError("config error: T must be an integer multiple of dt")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def checkpoint_steps(self) -> list:
        times = self.checkpoints or (self.T / 4, self.T / 2,
                                     3 * self.T / 4, self.T)
        steps = set()
        for c in times:
            s = c / self.dt
            if abs(s - round(s)) > 1e-6 or not 0 <= round(s) <= self.n_steps:
                raise ValueError(f"config error: checkpoint {c} is not a "
                                 "step multiple within [0, T]")
            steps.add(int(round(s)))
        return sorted(steps)

    def validate_domain(self, domain: PlanarDomain) -> None:
        if not domain.holes:
            raise ValueError("config error: winding needs at least one hole")
        r_min = min(h.radius for h in domain.holes)
        if self.dt > r_min**2 / 100.0:
            raise ValueError(
                f"config error: dt = {self.dt} exceeds (min hole radius)^2 "
                f"/ 100 = {r_min**2 / 100.0:.3g}")
        if not isinstance(self.start, str):
            p = np.asarray(self.start, dtype=float)
            if not bool(domain.contains(p)):
                raise ValueError("config error: start point outside the domain")


@dataclass
class WindingState:
    """Winding coordinates of one trajectory; rho is always floor(theta)."""

    theta: np.ndarray
    rho: np.ndarray
    theta_strat: np.ndarray | None = None

    @classmethod
    def zeros(cls, k: int, stratonovich: bool = False) -> "WindingState":
        return cls(theta=np.zeros(k),
                   rho=np.zeros(k, dtype=np.int64),
                   theta_strat=np.zeros(k) if stratonovich else None)


def winding_number(theta: np.ndarray) -> np.ndarray:
    """Componentwise floor (not truncation): (-0.3) -> -1."""
    return np.floor(theta).astype(np.int64)


def step(domain: PlanarDomain, pos: np.ndarray, dw: np.ndarray) -> np.ndarray:
    """One Euler move with mirror reflection; the result is inside M."""
    cand = np.asarray(pos, dtype=float) + np.asarray(dw, dtype=float)
    if bool(domain.contains(cand)):
        return cand
    mirrored, _, _ = domain.boundary_projection(cand)
    if not bool(domain.contains(mirrored)):
        raise ValueError("reflection error: mirror image left the domain")
    return mirrored


def track_winding(prev: np.ndarray, nxt: np.ndarray, basis: FormBasis,
                  state: WindingState) -> WindingState:
    """Advance the winding state across the segment prev -> nxt.

    Angle part: exact wrapped subtended angle about each anchor; exact
    part: interpolated potential difference. A wrapped increment at or
    beyond 0.45 means the chord may have crossed a hole: step rejection.
    """
    prev = np.asarray(prev, dtype=float)
    nxt = np.asarray(nxt, dtype=float)
    k = basis.k
    raw = np.empty(k)
    for m in range(k):
        seg = float(tau_segment_integral(prev, nxt, basis.anchors[m]))
        if abs(seg) >= WINDING_GUARD:
            raise ValueError(
                f"step rejection: winding increment {seg:.3f} ambiguous")
        dphi = (interpolate(basis.grid, basis.phi[m], nxt)
                - interpolate(basis.grid, basis.phi[m], prev))[0]
        raw[m] = seg + dphi
    theta = state.theta + basis.recombination @ raw
    strat = state.theta_strat
    if strat is not None:
        mid = 0.5 * (prev + nxt)
        vals = np.stack([basis.form(j).evaluate(mid)[0] for j in range(k)])
        strat = strat + vals @ (nxt - prev)
    return WindingState(theta=theta, rho=winding_number(theta),
                        theta_strat=strat)


@dataclass
class EnsembleResult:
    """Terminal and checkpoint winding data for one configuration."""

    config: SimConfig
    theta: np.ndarray              # (n, k) at T, angle tracker
    rho: np.ndarray                # (n, k) int, floor(theta)
    qv: np.ndarray                 # (n, k, k) int_0^T w_i(W_s).w_j(W_s) ds
    theta_strat: np.ndarray | None
    checkpoint_times: np.ndarray   # (c,)
    checkpoint_theta: np.ndarray   # (c, n, k)
    checkpoint_rho: np.ndarray     # (c, n, k) int
    start_xy: np.ndarray           # (n, 2)
    end_xy: np.ndarray             # (n, 2)
    n_rejected: int
    rejection_rate: float
    warnings: list = field(default_factory=list)
    rng_scheme: str = "philox key=(base_seed, traj)"

    @property
    def n_traj(self) -> int:
        return self.theta.shape[0]

    @property
    def k(self) -> int:
        return self.theta.shape[1]


def _traj_generator(base_seed: int, traj: int) -> np.random.Generator:
    key = np.array([np.uint64(base_seed % 2**64), np.uint64(traj)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _substep_generator(base_seed: int, traj: int, step_index: int,
                       depth: int) -> np.random.Generator:
    key = np.array([np.uint64(base_seed % 2**64) ^ SUBSTEP_SALT,
                    np.uint64(traj)], dtype=np.uint64)
    counter = np.array([np.uint64(step_index), np.uint64(depth),
                        np.uint64(0), np.uint64(0)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def _uniform_start(domain: PlanarDomain, gen: np.random.Generator) -> np.ndarray:
    c = domain.outer.center_array
    r = domain.outer.radius
    while True:
        p = c + r * (2.0 * gen.random(2) - 1.0)
        if bool(domain.contains(p)):
            return p


class _Engine:
    """Vectorized ensemble state shared by the main loop and retries."""

    def __init__(self, domain: PlanarDomain, basis: FormBasis,
                 config: SimConfig):
        self.domain = domain
        self.basis = basis
        self.config = config
        self.k = basis.k
        n = config.n_traj
        self.anchors = basis.anchors
        # Dual pointwise products for the quadratic variation, one node
        # field per (i, j) pair, interpolated at the left endpoints.
        dual = basis.dual_node_values()
        self.pairs = [(i, j) for i in range(self.k) for j in range(i, self.k)]
        self.qv_fields = [np.ascontiguousarray((dual[i] * dual[j]).sum(axis=1))
                          for i, j in self.pairs]
        self.track_strat = config.tracker in ("stratonovich", "both")
        if self.track_strat:
            rec = basis.recombination
            self.grad_dual = np.tensordot(rec, basis.grad_phi, axes=(1, 0))
        self.pos = np.empty((n, 2))
        self.theta_raw = np.zeros((n, self.k))
        self.qv = np.zeros((n, len(self.pairs)))
        self.strat = np.zeros((n, self.k)) if self.track_strat else None
        self.rejected_steps = 0

    # -- pointwise evaluations ------------------------------------------

    def dual_values(self, points: np.ndarray) -> np.ndarray:
        """(k, n, 2) dual forms at arbitrary points (analytic + exact)."""
        k = self.k
        raw = np.stack([tau_values(points, self.anchors[m]) for m in range(k)])
        for m in range(k):
            raw[m, :, 0] += interpolate(self.basis.grid,
                                        self.basis.grad_phi[m][:, 0], points)
            raw[m, :, 1] += interpolate(self.basis.grid,
                                        self.basis.grad_phi[m][:, 1], points)
        return np.tensordot(self.basis.recombination, raw, axes=(1, 0))

    def qv_values(self, points: np.ndarray) -> np.ndarray:
        """(n, n_pairs) quadratic-variation integrand at the points."""
        out = np.empty((points.shape[0], len(self.pairs)))
        for c, f in enumerate(self.qv_fields):
            out[:, c] = interpolate(self.basis.grid, f, points)
        return out

    def phi_values(self, points: np.ndarray) -> np.ndarray:
        """(n, k) correction potentials at the points."""
        out = np.empty((points.shape[0], self.k))
        for m in range(self.k):
            out[:, m] = interpolate(self.basis.grid, self.basis.phi[m], points)
        return out

    # -- scalar retry path ----------------------------------------------

    def _retry(self, i: int, step_index: int, dt: float, depth: int) -> None:
        """Redo one trajectory's step with 2^depth fresh half-increments."""
        if depth > MAX_HALVINGS:
            raise SimulationError(
                f"step rejection persists at depth {depth} "
                f"(trajectory {i}, step {step_index})")
        gen = _substep_generator(self.config.base_seed, i, step_index, depth)
        m = 2**depth
        incs = gen.standard_normal((m, 2)) * math.sqrt(dt / m)
        pos0 = self.pos[i].copy()
        theta0 = self.theta_raw[i].copy()
        qv0 = self.qv[i].copy()
        strat0 = self.strat[i].copy() if self.strat is not None else None
        try:
            p = pos0
            for s in range(m):
                nxt = step(self.domain, p, incs[s])
                segs = np.array([
                    float(tau_segment_integral(p, nxt, self.anchors[j]))
                    for j in range(self.k)])
                if np.abs(segs).max() >= WINDING_GUARD:
                    raise ValueError("step rejection")
                self.qv[i] += self.qv_values(p[None, :])[0] * (dt / m)
                if self.strat is not None:
                    mid = 0.5 * (p + nxt)
                    vals = self.dual_values(mid[None, :])[:, 0, :]
                    self.strat[i] += vals @ (nxt - p)
                self.theta_raw[i] += segs
                p = nxt
            self.pos[i] = p
        except ValueError:
            self.pos[i] = pos0
            self.theta_raw[i] = theta0
            self.qv[i] = qv0
            if strat0 is not None:
                self.strat[i] = strat0
            self._retry(i, step_index, dt, depth + 1)

    # -- vectorized step ------------------------------------------------

    def advance(self, dW: np.ndarray, step_index: int) -> None:
        dom = self.domain
        pos = self.pos
        cand = pos + dW
        n = cand.shape[0]
        rejected = np.zeros(n, dtype=bool)
        nxt = cand
        n_viol = np.zeros(n, dtype=np.int8)
        for comp, circle in enumerate(dom.circles()):
            c = circle.center_array
            vx = cand[:, 0] - c[0]
            vy = cand[:, 1] - c[1]
            r2 = vx * vx + vy * vy
            big = circle.radius * circle.radius
            out = (r2 > big) if comp == 0 else (r2 < big)
            idx = np.nonzero(out)[0]
            if idx.size == 0:
                continue
            n_viol[idx] += 1
            r = np.sqrt(r2[idx])
            depth = r - circle.radius if comp == 0 else circle.radius - r
            rejected[idx[depth > 0.25 * circle.radius]] = True
            scale = (2.0 * circle.radius - r) / np.where(r > 0.0, r, 1.0)
            nxt[idx, 0] = c[0] + scale * vx[idx]
            nxt[idx, 1] = c[1] + scale * vy[idx]
        # Unmirrored candidates are inside every circle by construction;
        # only mirror images need the full containment recheck.
        rejected |= n_viol > 1
        touched = np.nonzero(n_viol == 1)[0]
        if touched.size:
            rejected[touched[~dom.contains(nxt[touched])]] = True

        segs = np.empty((n, self.k))
        for m in range(self.k):
            segs[:, m] = tau_segment_integral(pos, nxt, self.anchors[m])
        rejected |= (np.abs(segs) >= WINDING_GUARD).any(axis=1)

        qv_now = self.qv_values(pos)
        if not rejected.any():
            self.qv += qv_now * self.config.dt
            if self.strat is not None:
                vals = self.dual_values(0.5 * (pos + nxt))
                for j in range(self.k):
                    self.strat[:, j] += (vals[j] * (nxt - pos)).sum(axis=1)
            self.theta_raw += segs
            self.pos = nxt
            return

        ok = ~rejected
        self.qv[ok] += qv_now[ok] * self.config.dt
        if self.strat is not None:
            mids = 0.5 * (pos[ok] + nxt[ok])
            vals = self.dual_values(mids)
            delta = nxt[ok] - pos[ok]
            for j in range(self.k):
                self.strat[ok, j] += (vals[j] * delta).sum(axis=1)
        self.theta_raw[ok] += segs[ok]
        self.pos[ok] = nxt[ok]
        self.rejected_steps += int(rejected.sum())
        for i in np.nonzero(rejected)[0]:
            self._retry(int(i), step_index, self.config.dt, 1)


def simulate(domain: PlanarDomain, basis: FormBasis,
             config: SimConfig) -> EnsembleResult:
    """Run the ensemble described by config; see EnsembleResult."""
    config.validate_domain(domain)
    n = config.n_traj
    k = basis.k
    n_steps = config.n_steps
    cp_steps = config.checkpoint_steps()
    engine = _Engine(domain, basis, config)

    gens = [_traj_generator(config.base_seed, i) for i in range(n)]
    if isinstance(config.start, str):
        for i, g in enumerate(gens):
            engine.pos[i] = _uniform_start(domain, g)
    else:
        engine.pos[:] = np.asarray(config.start, dtype=float)
    start_xy = engine.pos.copy()
    phi_start = engine.phi_values(start_xy)
    rec_T = basis.recombination.T

    cp_theta = np.empty((len(cp_steps), n, k))
    cp_index = {s: j for j, s in enumerate(cp_steps)}

    def record(step_index: int) -> None:
        j = cp_index.get(step_index)
        if j is None:
            return
        dphi = engine.phi_values(engine.pos) - phi_start
        cp_theta[j] = (engine.theta_raw + dphi) @ rec_T

    record(0)
    block = 512
    noise = np.empty((n, block, 2))
    sqrt_dt = math.sqrt(config.dt)
    done = 0
    while done < n_steps:
        m = min(block, n_steps - done)
        for i, g in enumerate(gens):
            g.standard_normal(out=noise[i, :m])
        for s in range(m):
            engine.advance(noise[:, s] * sqrt_dt, done + s)
            record(done + s + 1)
        done += m

    total = max(n * n_steps, 1)
    rate = engine.rejected_steps / total
    warnings = []
    if rate > 0.01:
        raise SimulationError(f"step rejection rate {rate:.2%} exceeds 1%")
    if rate > 0.001:
        warnings.append(f"step rejection rate {rate:.2%} exceeds 0.1%")

    qv = np.zeros((n, k, k))
    for c, (i, j) in enumerate(engine.pairs):
        qv[:, i, j] = engine.qv[:, c]
        qv[:, j, i] = engine.qv[:, c]
    theta = cp_theta[cp_index[n_steps]] if n_steps in cp_index else \
        (engine.theta_raw + engine.phi_values(engine.pos) - phi_start) @ rec_T
    return EnsembleResult(
        config=config,
        theta=theta,
        rho=winding_number(theta),
        qv=qv,
        theta_strat=engine.strat.copy() if engine.strat is not None else None,
        checkpoint_times=np.array([s * config.dt for s in cp_steps]),
        checkpoint_theta=cp_theta,
        checkpoint_rho=np.floor(cp_theta).astype(np.int64),
        start_xy=start_xy,
        end_xy=engine.pos.copy(),
        n_rejected=engine.rejected_steps,
        rejection_rate=rate,
        warnings=warnings,
    )
