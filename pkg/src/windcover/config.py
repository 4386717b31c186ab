"""Run configuration: TOML parsing, acceptance-scale defaults, hashing.

One config file drives every CLI subcommand. Missing keys fall back to
the desk-scale acceptance setup: annulus (1, 2), h = 0.02, dt = 1e-3,
T = 200, n = 5000. The config hash (canonical JSON, sha256) names the
output directory, so identical configs land in identical places.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

try:
    import tomllib
except ModuleNotFoundError:                      # Python 3.10
    import tomli as tomllib

from .geometry import PlanarDomain, build_domain
from .simulate import SimConfig

DEFAULT_SEED = 20260815


@dataclass(frozen=True)
class RunConfig:
    """Flat view of one config file with every default applied."""

    outer_center: tuple = (0.0, 0.0)
    outer_radius: float = 2.0
    outer_bc: str = "neumann"
    holes: tuple = (
        {"center": (0.0, 0.0), "radius": 1.0, "bc": "neumann"},
    )
    h: float = 0.02
    dt: float = 1e-3
    T: float = 200.0
    n_traj: int = 5000
    base_seed: int = DEFAULT_SEED
    start: object = "uniform"
    tracker: str = "angle"
    checkpoints: tuple = ()
    spectrum_ts: tuple = (0.0, -0.1, 0.1, 0.5, 0.9, 1.0)
    hessian_ts: tuple = (0.1, 0.05)
    kernel_t: float = 10.0
    kernel_times: tuple = (10.0, 40.0)
    kernel_sheets: tuple = (0, 1, 2)
    kernel_probe: tuple = (1.5, 0.0)
    n_quad: int = 64
    k_eig: int = 12

    def domain(self) -> PlanarDomain:
        return build_domain(self.outer_center, self.outer_radius,
                            self.outer_bc, list(self.holes))

    def sim_config(self, seed_override: int | None = None) -> SimConfig:
        return SimConfig(dt=self.dt, T=self.T,
                         base_seed=self.base_seed if seed_override is None
                         else seed_override,
                         n_traj=self.n_traj, start=self.start,
                         tracker=self.tracker,
                         checkpoints=tuple(self.checkpoints))

    def canonical(self) -> dict:
        d = asdict(self)
        d["holes"] = [dict(hh) for hh in self.holes]
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True,
                          separators=(",", ":"), default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _pair(value, name: str) -> tuple:
    seq = tuple(float(v) for v in value)
    if len(seq) != 2:
        raise ValueError(f"config error: {name} must have two entries")
    return seq


def parse_config(data: dict) -> RunConfig:
    """Build a RunConfig from a parsed TOML dict, applying defaults."""
    kw = {}
    outer = data.get("outer", {})
    if "center" in outer:
        kw["outer_center"] = _pair(outer["center"], "outer.center")
    if "radius" in outer:
        kw["outer_radius"] = float(outer["radius"])
    if "bc" in outer:
        kw["outer_bc"] = str(outer["bc"])
    if "holes" in data:
        holes = []
        for i, hh in enumerate(data["holes"]):
            holes.append({"center": _pair(hh["center"], f"holes[{i}].center"),
                          "radius": float(hh["radius"]),
                          "bc": str(hh.get("bc", "neumann"))})
        kw["holes"] = tuple(holes)
    grid = data.get("grid", {})
    if "h" in grid:
        kw["h"] = float(grid["h"])
    sim = data.get("simulate", {})
    for key, cast in (("dt", float), ("T", float), ("n_traj", int),
                      ("base_seed", int), ("tracker", str)):
        if key in sim:
            kw[key] = cast(sim[key])
    if "start" in sim:
        kw["start"] = sim["start"] if isinstance(sim["start"], str) \
            else _pair(sim["start"], "simulate.start")
    if "checkpoints" in sim:
        kw["checkpoints"] = tuple(float(c) for c in sim["checkpoints"])
    spect = data.get("spectrum", {})
    if "ts" in spect:
        kw["spectrum_ts"] = tuple(float(t) for t in spect["ts"])
    hess = data.get("hessian", {})
    if "ts" in hess:
        kw["hessian_ts"] = tuple(float(t) for t in hess["ts"])
    kern = data.get("heatkernel", {})
    if "t" in kern:
        kw["kernel_t"] = float(kern["t"])
    if "times" in kern:
        kw["kernel_times"] = tuple(float(t) for t in kern["times"])
    if "sheets" in kern:
        kw["kernel_sheets"] = tuple(int(s) for s in kern["sheets"])
    if "probe" in kern:
        kw["kernel_probe"] = _pair(kern["probe"], "heatkernel.probe")
    if "n_quad" in kern:
        kw["n_quad"] = int(kern["n_quad"])
    if "k_eig" in kern:
        kw["k_eig"] = int(kern["k_eig"])
    try:
        return RunConfig(**kw)
    except TypeError as exc:
        raise ValueError(f"config error: {exc}") from exc


def load_config(path: str | None) -> RunConfig:
    """Parse a TOML config file; None means all defaults."""
    if path is None:
        return RunConfig()
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValueError(f"config error: {path}: {exc}") from exc
    return parse_config(data)
