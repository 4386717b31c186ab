"""Command-line runner for every pipeline in the package.

One TOML config drives all subcommands; artifacts land in an output
directory named by the config hash, so identical configs are written to
identical paths with byte-identical CSVs. Each subcommand records its
numeric checks (value, target, tolerance, provenance) in a JSON run
manifest; exit status 0 means every enabled check passed, 1 means a
numerical check failed, 2 means the config could not be used at all.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .forms import build_basis
from .geometry import BoundaryCondition, discretize
from .heatkernel import (asymptotic_check, asymptotic_profile,
                         base_consistency, build_table, gram_matrix_I)
from .simulate import SimulationError, simulate
from .spectra import assemble, eigenvalue_curve, hessian_check, \
    principal_eigenpair
from .stats import annulus_sigma, clt_covariance, drift_estimate, \
    ergodic_qv_check

SUBCOMMANDS = ("forms", "sigma", "simulate", "verify", "spectrum",
               "hessian", "heatkernel", "all")
HAND_I_ANNULUS = 4.0 * math.log(2.0) / 3.0


def fmt(x) -> str:
    return "%.17g" % float(x)


@dataclass
class Check:
    """One numeric gate: value against target at a stated tolerance."""

    name: str
    value: float
    target: float
    tolerance: float
    mode: str                   # rel | abs | less | greater
    provenance: str
    passed: bool


def evaluate_check(name, value, target, tolerance, mode, provenance) -> Check:
    value = float(value)
    target = float(target)
    if mode == "rel":
        passed = abs(value - target) <= tolerance * abs(target)
    elif mode == "abs":
        passed = abs(value - target) <= tolerance
    elif mode == "less":
        passed = value < target
    elif mode == "greater":
        passed = value > target
    else:
        raise ValueError(f"unknown check mode {mode}")
    return Check(name=name, value=value, target=target, tolerance=tolerance,
                 mode=mode, provenance=provenance, passed=bool(passed))


class Runner:
    """Shared state (grid, basis, artifacts, checks) for one invocation."""

    def __init__(self, cfg: RunConfig, out_dir: str, threads: int,
                 seed_override: int | None):
        self.cfg = cfg
        self.out_dir = out_dir
        self.threads = threads
        self.seed_override = seed_override
        self.checks: list[Check] = []
        self.files: list[dict] = []
        self._domain = None
        self._grid = None
        self._basis = None

    @property
    def domain(self):
        if self._domain is None:
            self._domain = self.cfg.domain()
        return self._domain

    @property
    def grid(self):
        if self._grid is None:
            self._grid = discretize(self.domain, self.cfg.h)
        return self._grid

    @property
    def basis(self):
        if self._basis is None:
            self._basis = build_basis(self.grid)
        return self._basis

    def check(self, *args, **kwargs) -> Check:
        c = evaluate_check(*args, **kwargs)
        self.checks.append(c)
        return c

    def emit(self, name: str, header: list, rows: list) -> str:
        path = os.path.join(self.out_dir, name)
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(v if isinstance(v, str) else fmt(v)
                                  for v in row) + "\n")
        with open(path, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        self.files.append({"name": name, "sha256": digest})
        return path

    def _is_concentric_annulus(self) -> bool:
        d = self.domain
        return (d.k == 1 and tuple(d.holes[0].center) == tuple(d.outer.center)
                and all(c.bc == BoundaryCondition.NEUMANN
                        for c in d.circles()))

    # -- subcommands ------------------------------------------------------

    def run_forms(self) -> None:
        basis = self.basis
        k = basis.k
        period = basis.period_matrix
        rows = [(i + 1, j + 1, period[i, j])
                for i in range(k) for j in range(k)]
        self.emit("period.csv", ["i", "j", "value"], rows)
        dev = float(np.abs(period - np.eye(k)).max())
        self.check("period_matrix_identity", dev, 1e-3, 0.0, "less",
                   "duality int_gamma_i omega_j = delta_ij, computed")
        res = float(np.max(basis.neumann_residuals))
        self.check("neumann_solve_residual", res, 1e-8, 0.0, "less",
                   "relative residual of the potential solves")

    def run_sigma(self) -> None:
        sigma = self.basis.covariance_matrix()
        k = sigma.shape[0]
        rows = [(i + 1, j + 1, sigma[i, j])
                for i in range(k) for j in range(k)]
        self.emit("sigma.csv", ["i", "j", "value"], rows)
        if self._is_concentric_annulus():
            target = annulus_sigma(self.domain.holes[0].radius,
                                   self.domain.outer.radius)
            self.check("sigma_annulus", float(sigma[0, 0]), target, 0.02,
                       "rel", "closed form ln(r2/r1)/(2 pi^2 (r2^2 - r1^2))")
        else:
            min_eig = float(np.linalg.eigvalsh(sigma).min())
            self.check("sigma_positive_definite", min_eig, 0.0, 0.0,
                       "greater", "Sigma is a Gram matrix, computed")

    def _ensemble_rows(self, res) -> tuple:
        k = res.k
        header = (["traj_id", "T"] + [f"theta_{i+1}" for i in range(k)]
                  + [f"rho_{i+1}" for i in range(k)]
                  + [f"qv_{i+1}{j+1}" for i in range(k) for j in range(k)])
        rows = []
        for i in range(res.n_traj):
            rows.append([i, res.config.T, *res.theta[i], *res.rho[i],
                         *res.qv[i].ravel()])
        return header, rows

    def _stats_checks(self, rho, qv, T, prefix: str) -> list:
        sigma = self.basis.covariance_matrix()
        rows = []
        drift = drift_estimate(rho, T)
        # E floor(theta) = E theta - 1/2, so rho/T carries a -1/(2T) bias.
        z = np.abs(drift.mean + 1.0 / (2.0 * T)) / drift.se
        c = self.check(f"{prefix}_drift_z", float(np.nanmax(z)), 3.0, 0.0,
                       "less", "theorem drift limit 0; floor bias corrected")
        rows.append(("drift_z_max", c.value, c.target))
        rep = clt_covariance(rho, T, sigma)
        c = self.check(f"{prefix}_clt_diag_rel", float(rep.diag_rel.max()),
                       0.10, 0.0, "less",
                       "cov(rho/sqrt(T)) vs Sigma from harmonic forms")
        rows.append(("clt_diag_rel_max", c.value, c.target))
        c = self.check(f"{prefix}_clt_p_value", rep.p_value, 0.01, 0.0,
                       "greater",
                       "chi^2 of integer histogram vs floor(N(0, Sigma T))")
        rows.append(("clt_p_value", c.value, c.target))
        if rep.offdiag_abs.size:
            c = self.check(f"{prefix}_clt_offdiag_abs",
                           float(rep.offdiag_abs.max()),
                           float(rep.offdiag_limit.min()), 0.0, "less",
                           "off-diagonal vs 10% of geometric mean diagonal")
            rows.append(("clt_offdiag_abs_max", c.value, c.target))
        ens = type("E", (), {"qv": qv,
                             "config": type("C", (), {"T": T})()})()
        qv_rep = ergodic_qv_check(ens, self.basis)
        c = self.check(f"{prefix}_qv_diag_rel", float(qv_rep.diag_rel.max()),
                       0.05, 0.0, "less",
                       "time-averaged quadratic variation vs Sigma")
        rows.append(("qv_diag_rel_max", c.value, c.target))
        return rows

    def run_simulate(self) -> None:
        sim_cfg = self.cfg.sim_config(self.seed_override)
        res = simulate(self.domain, self.basis, sim_cfg)
        header, rows = self._ensemble_rows(res)
        self.emit("ensemble.csv", header, rows)
        self.check("rejection_rate", res.rejection_rate, 0.01, 0.0, "less",
                   "sub-stepped retries out of all steps")
        srows = self._stats_checks(res.rho.astype(float), res.qv,
                                   sim_cfg.T, "sim")
        self.emit("stats.csv", ["metric", "value", "target"], srows)

    def run_verify(self) -> None:
        path = os.path.join(self.out_dir, "ensemble.csv")
        if not os.path.exists(path):
            raise FileNotFoundError(f"{path} (run `simulate` first)")
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        k = sum(1 for h in header if h.startswith("theta_"))
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        T = float(data[0, 1])
        rho = data[:, 2 + k:2 + 2 * k]
        qv = data[:, 2 + 2 * k:2 + 2 * k + k * k].reshape(-1, k, k)
        srows = self._stats_checks(rho, qv, T, "verify")
        self.emit("verify.csv", ["metric", "value", "target"], srows)

    def run_spectrum(self) -> None:
        if self.basis.k < 1:
            raise ValueError("config error: spectrum needs at least one hole")
        ts = self.cfg.spectrum_ts
        form = self.basis.form(0)
        mus = eigenvalue_curve(self.grid, form, ts)
        self.emit("spectrum.csv", ["t", "mu"], list(zip(ts, mus)))
        curve = dict(zip(ts, mus))

        def close(a, b):
            return abs(a - b) <= 1e-6 * max(abs(a), abs(b), 1e-6)

        even = [(t,) for t in ts if t > 0 and -t in curve]
        if even:
            dev = max(abs(curve[t] - curve[-t]) for (t,) in even)
            self.check("mu_evenness", dev, 1e-6, 0.0, "less",
                       "mu(-t) = mu(t), complex conjugation symmetry")
        periodic = [(t, t - 1.0) for t in ts if (t - 1.0) in curve]
        if periodic:
            ok = all(close(curve[a], curve[b]) for a, b in periodic)
            dev = max(abs(curve[a] - curve[b]) for a, b in periodic)
            self.check("mu_periodicity", dev if not ok else 0.0, 1e-6, 0.0,
                       "less", "mu(t + 1) = mu(t), integer gauge shift")
        ints = [t for t in ts if abs(t - round(t)) < 1e-12]
        fracs = [t for t in ts if abs(t - round(t)) >= 1e-12]
        if ints and fracs:
            self.check("mu_min_at_integers",
                       max(curve[t] for t in ints),
                       min(curve[t] for t in fracs), 0.0, "less",
                       "global minimum of the eigenvalue landscape")
        dirichlet = any(c.bc == BoundaryCondition.DIRICHLET
                        for c in self.domain.circles())
        if dirichlet and ints:
            lam0 = principal_eigenpair(assemble(self.grid, None, 0.0)).mu
            self.check("mu_integer_equals_lambda0",
                       float(curve[ints[0]]), float(lam0), 1e-6, "rel",
                       "twist by an integer is a gauge transformation")

    def run_hessian(self) -> None:
        if self.basis.k < 1:
            raise ValueError("config error: hessian needs at least one hole")
        form = self.basis.form(0)
        res = hessian_check(self.grid, form, ts=tuple(self.cfg.hessian_ts))
        rows = [(t, r) for t, r in zip(self.cfg.hessian_ts, res["ratios"])]
        self.emit("hessian.csv", ["t", "ratio"], rows)
        self.check("hessian_richardson_rel", res["relative_error"], 0.02,
                   0.0, "less",
                   "2(mu_t - lambda0)/t^2 vs I(omega) after Richardson")
        if self._is_concentric_annulus():
            self.check("hessian_hand_value", res["richardson"],
                       HAND_I_ANNULUS, 0.02, "rel",
                       "I = (4/3) ln 2 for the (1, 2) annulus, hand value")

    def run_heatkernel(self) -> None:
        if self.basis.k != 1:
            raise ValueError(
                "config error: heatkernel needs a single-hole domain")
        cfg = self.cfg
        x = self.grid.nearest_node(np.asarray(cfg.kernel_probe))
        table = build_table(self.grid, self.basis.form(0),
                            n_quad=cfg.n_quad, k_eig=cfg.k_eig)
        cons = base_consistency(table, cfg.kernel_t, x, x)
        self.check("base_consistency", float(cons), 1e-7, 0.0, "less",
                   "kernel on M vs character sum of twisted kernels")
        op0 = assemble(self.grid, None, 0.0)
        eig0 = principal_eigenpair(op0)
        neumann = all(c.bc == BoundaryCondition.NEUMANN
                      for c in self.domain.circles())
        gram = None if neumann else gram_matrix_I(self.grid, self.basis)
        profile = asymptotic_profile(self.basis, eig0, op0, x, x, gram=gram)
        rows = asymptotic_check(table, profile, cfg.kernel_times, x, x,
                                cfg.kernel_sheets)
        self.emit("heatkernel.csv",
                  ["t", "n", "hhat", "predicted", "residual"],
                  [(r["t"], r["n"], r["hhat"], r["predicted"], r["diff"])
                   for r in rows])
        t_last = max(cfg.kernel_times)
        last = [r["diff"] for r in rows if r["t"] == t_last]
        self.check("asymptotic_residual", float(np.max(last)),
                   0.05 * profile.c_i, 0.0, "less",
                   "|t^{1/2} e^{lambda0 t} Hhat_n - C_I e^{-2 pi^2 d^2/t}| "
                   "at the largest requested time")
        by_t = {}
        for r in rows:
            by_t.setdefault(r["t"], []).append(r["diff"])
        worst = [max(v) for _, v in sorted(by_t.items())]
        decreasing = all(b < a for a, b in zip(worst[:-1], worst[1:]))
        self.check("asymptotic_trend", 1.0 if decreasing else 0.0, 0.5,
                   0.0, "greater",
                   "worst-sheet residual decreases with time")

    def run_all(self) -> None:
        self.run_forms()
        self.run_sigma()
        self.run_spectrum()
        self.run_hessian()
        if self.basis.k == 1:
            self.run_heatkernel()
        self.run_simulate()
        self.run_verify()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="windcover",
        description="Winding statistics and cover heat kernels on "
                    "multiply connected planar domains.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("config", nargs="?", default=None,
                   help="TOML config path (defaults: annulus acceptance setup)")
    p.add_argument("--config", dest="config_flag", default=None,
                   help="alternative way to pass the config path")
    p.add_argument("--out", default=None,
                   help="output root (default $WINDCOVER_OUT or ./runs)")
    p.add_argument("--threads", type=int, default=1,
                   help="worker cap; results are identical at any value")
    p.add_argument("--seed-override", type=int, default=None,
                   help="replace the config base_seed (recorded in manifest)")
    return p


def main(argv: list | None = None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.time()
    try:
        cfg = load_config(args.config_flag or args.config)
        out_root = args.out or os.environ.get("WINDCOVER_OUT", "runs")
        out_dir = os.path.join(out_root, cfg.config_hash)
        os.makedirs(out_dir, exist_ok=True)
        runner = Runner(cfg, out_dir, args.threads, args.seed_override)
        runner.domain
    except (ValueError, OSError) as exc:
        print(f"windcover: {exc}", file=sys.stderr)
        return 2

    try:
        getattr(runner, f"run_{args.subcommand}")()
    except (ValueError, FileNotFoundError) as exc:
        print(f"windcover: {exc}", file=sys.stderr)
        return 2
    except SimulationError as exc:
        print(f"windcover: FAIL {exc}", file=sys.stderr)
        return 1

    passed = all(c.passed for c in runner.checks)
    seed = args.seed_override if args.seed_override is not None \
        else cfg.base_seed
    manifest = {
        "config_hash": cfg.config_hash,
        "config": cfg.canonical(),
        "subcommand": args.subcommand,
        "versions": {
            "windcover": __version__,
            "numpy": np.__version__,
            "scipy": __import__("scipy").__version__,
            "python": sys.version.split()[0],
        },
        "seed": seed,
        "threads": args.threads,
        "wall_clock_s": round(time.time() - t0, 3),
        "files": runner.files,
        "checks": [asdict(c) for c in runner.checks],
        "passed": passed,
    }
    mpath = os.path.join(out_dir, f"manifest-{args.subcommand}.json")
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for c in runner.checks:
        mark = "PASS" if c.passed else "FAIL"
        print(f"{mark} {c.name}: value={c.value:.6g} target={c.target:.6g} "
              f"({c.mode})")
    if not passed:
        failing = [c.name for c in runner.checks if not c.passed]
        print(f"windcover: failing checks: {', '.join(failing)}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
