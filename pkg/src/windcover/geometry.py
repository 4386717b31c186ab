"""Circular planar domains with holes, and masked finite-difference grids.

A domain is an outer circle minus k disjoint open disks (the holes). Each
boundary component carries its own boundary condition. Grids are uniform,
axis-aligned, and classify every lattice node as interior, boundary (with
the component's condition), or exterior; boundary geometry (normals, cell
coverage, face wet fractions) is computed from the exact circles.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

# Node classification labels.
EXTERIOR = 0
INTERIOR = 1
NEUMANN_BOUNDARY = 2
DIRICHLET_BOUNDARY = 3

# Neighbor order used everywhere: +x, -x, +y, -y.
NEIGHBOR_STEPS = ((1, 0), (-1, 0), (0, 1), (0, -1))


class BoundaryCondition(enum.Enum):
    NEUMANN = "neumann"
    DIRICHLET = "dirichlet"


@dataclass(frozen=True)
class Circle:
    """A boundary circle with its boundary condition."""

    center: tuple[float, float]
    radius: float
    bc: BoundaryCondition = BoundaryCondition.NEUMANN

    def __post_init__(self) -> None:
        if not math.isfinite(self.radius) or self.radius <= 0.0:
            raise ValueError(f"circle radius must be positive, got {self.radius}")

    @property
    def center_array(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)


@dataclass(frozen=True)
class PlanarDomain:
    """Outer circle minus k disjoint circular holes."""

    outer: Circle
    holes: tuple[Circle, ...]

    @property
    def k(self) -> int:
        return len(self.holes)

    @property
    def anchors(self) -> np.ndarray:
        """Hole centers, shape (k, 2). Anchor points for the angle forms."""
        if not self.holes:
            return np.zeros((0, 2))
        return np.array([h.center for h in self.holes], dtype=float)

    def volume(self) -> float:
        """Exact area of the domain."""
        return math.pi * (
            self.outer.radius**2 - sum(h.radius**2 for h in self.holes)
        )

    def circles(self) -> tuple[Circle, ...]:
        """All boundary components, outer first."""
        return (self.outer,) + self.holes

    def signed_distances(self, points: np.ndarray) -> np.ndarray:
        """Per-component signed distance into the domain, shape (..., k+1).

        Column 0 is the outer circle (R - |p - c|), column j+1 is hole j
        (|p - c_j| - r_j). All positive means strictly inside.
        """
        p = np.asarray(points, dtype=float)
        out = np.empty(p.shape[:-1] + (self.k + 1,))
        d = np.linalg.norm(p - self.outer.center_array, axis=-1)
        out[..., 0] = self.outer.radius - d
        for j, hole in enumerate(self.holes):
            d = np.linalg.norm(p - hole.center_array, axis=-1)
            out[..., j + 1] = d - hole.radius
        return out

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance to the nearest boundary, positive inside the domain."""
        return self.signed_distances(points).min(axis=-1)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """True for points strictly inside the open domain."""
        return self.signed_distance(points) > 0.0

    def boundary_projection(self, point: np.ndarray,
                            trust: float | None = None
                            ) -> tuple[np.ndarray, np.ndarray, int]:
        """Radial mirror image across the nearest circle, outward unit
        normal at the nearest boundary point, and component index.

        Component index 0 is the outer circle, j >= 1 is hole j-1. The
        normal points out of the domain (into the hole / past the outer
        rim). Excursions deeper than the trust distance (default a quarter
        of the circle's radius) raise: the mirror is only meaningful for
        small overshoots, so a deep point signals a too-large time step.
        """
        p = np.asarray(point, dtype=float)
        s = self.signed_distances(p)
        comp = int(np.argmin(s))
        circle = self.circles()[comp]
        depth = -float(s[comp])
        limit = 0.25 * circle.radius if trust is None else trust
        if depth > limit:
            raise ValueError(
                f"reflection error: point {depth:.3g} beyond component {comp}, "
                f"trust distance {limit:.3g}")
        c = circle.center_array
        v = p - c
        r = float(np.linalg.norm(v))
        if r == 0.0:
            # Center of a circle: projection direction is arbitrary.
            v = np.array([1.0, 0.0])
            r = 1.0
        unit = v / r
        mirrored = c + (2.0 * circle.radius - r) * unit
        normal = unit if comp == 0 else -unit
        return mirrored, normal, comp


def build_domain(
    outer_center: tuple[float, float],
    outer_radius: float,
    outer_bc: str | BoundaryCondition = BoundaryCondition.NEUMANN,
    holes: list[dict] | None = None,
) -> PlanarDomain:
    """Validated domain constructor.

    Holes must lie strictly inside the outer circle and be pairwise
    disjoint (closed disks). Raises ValueError otherwise.
    """
    outer = Circle(tuple(float(v) for v in outer_center), float(outer_radius),
                   BoundaryCondition(outer_bc))
    hole_circles = []
    for hole in holes or []:
        hole_circles.append(
            Circle(
                tuple(float(v) for v in hole["center"]),
                float(hole["radius"]),
                BoundaryCondition(hole.get("bc", "neumann")),
            )
        )
    oc = outer.center_array
    for i, a in enumerate(hole_circles):
        gap = outer.radius - np.linalg.norm(a.center_array - oc) - a.radius
        if gap <= 0.0:
            raise ValueError(f"hole {i} is not strictly inside the outer circle")
        for j in range(i):
            b = hole_circles[j]
            sep = np.linalg.norm(a.center_array - b.center_array) - a.radius - b.radius
            if sep <= 0.0:
                raise ValueError(f"holes {j} and {i} overlap or touch")
    return PlanarDomain(outer=outer, holes=tuple(hole_circles))


def reflect_across_circle(points: np.ndarray, circle: Circle) -> np.ndarray:
    """Radial mirror about a circle: r -> 2R - r at fixed angle."""
    p = np.asarray(points, dtype=float)
    c = circle.center_array
    v = p - c
    r = np.linalg.norm(v, axis=-1, keepdims=True)
    r = np.where(r == 0.0, 1e-300, r)
    return c + v * (2.0 * circle.radius / r - 1.0)


def _segment_wet_fraction(a: np.ndarray, b: np.ndarray, domain: PlanarDomain,
                          nsub: int = 32) -> tuple[float, np.ndarray, np.ndarray]:
    """Portion of segment [a, b] inside the domain.

    Returns (fraction, a_wet, b_wet) where [a_wet, b_wet] is the wet
    sub-segment. Faces are short (length h), so at most one boundary circle
    clips them; the clip parameters come from the exact circle quadratic.
    """
    d = b - a
    lo, hi = 0.0, 1.0
    for comp, circle in enumerate(domain.circles()):
        c = circle.center_array
        f = a - c
        qa = float(d @ d)
        qb = 2.0 * float(f @ d)
        qc = float(f @ f) - circle.radius**2
        disc = qb * qb - 4.0 * qa * qc
        if disc <= 0.0 or qa == 0.0:
            # No crossing: segment entirely on one side of this circle.
            mid_in = qc + 0.5 * qb + 0.25 * qa  # |mid - c|^2 - r^2
            if comp == 0 and mid_in > 0.0:
                return 0.0, a, a
            if comp > 0 and mid_in < 0.0:
                return 0.0, a, a
            continue
        sq = math.sqrt(disc)
        t0 = (-qb - sq) / (2.0 * qa)
        t1 = (-qb + sq) / (2.0 * qa)
        if comp == 0:
            # Inside the outer circle is the interval [t0, t1].
            lo, hi = max(lo, t0), min(hi, t1)
        else:
            # Inside the domain means outside the hole: cut (t0, t1).
            # Keep whichever side of the hole interval remains.
            left = min(hi, t0) - lo
            right = hi - max(lo, t1)
            if left >= right:
                hi = min(hi, t0)
            else:
                lo = max(lo, t1)
        if hi <= lo:
            return 0.0, a, a
    return hi - lo, a + lo * d, a + hi * d


def _cell_coverage(domain: PlanarDomain, xy: np.ndarray, h: float,
                   sub: int = 8) -> np.ndarray:
    """Wet-area fraction of the h x h cells centered at xy, by subsampling."""
    n = xy.shape[0]
    offs = (np.arange(sub) + 0.5) / sub - 0.5
    ox, oy = np.meshgrid(offs, offs, indexing="ij")
    probe = np.stack([ox.ravel(), oy.ravel()], axis=-1) * h  # (sub*sub, 2)
    cover = np.zeros(n)
    # Chunked to bound memory at fine h.
    step = max(1, 2_000_000 // (sub * sub))
    for i0 in range(0, n, step):
        pts = xy[i0:i0 + step, None, :] + probe[None, :, :]
        cover[i0:i0 + step] = domain.contains(pts).mean(axis=1)
    return cover


@dataclass
class Grid:
    """Masked uniform grid over a planar domain.

    Active nodes (interior + boundary) are stored flat; ``index[iy, ix]``
    maps lattice coordinates to the flat index (-1 for exterior). ``nbr``
    holds the four neighbor flat indices in +x, -x, +y, -y order (-1 when
    the neighbor is exterior). ``face_frac`` is the wet fraction of the
    dual face toward each neighbor, ``mass`` the wet area of each node's
    cell; both come from the exact circles and enter every quadrature and
    operator consistently.
    """

    domain: PlanarDomain
    h: float
    origin: tuple[float, float]
    shape: tuple[int, int]            # (ny, nx)
    index: np.ndarray                 # (ny, nx) int32, -1 exterior
    xy: np.ndarray                    # (n, 2) node coordinates
    cls: np.ndarray                   # (n,) int8 classification
    comp: np.ndarray                  # (n,) int16 boundary component, -1 interior
    normal: np.ndarray                # (n, 2) outward normal at boundary nodes
    nbr: np.ndarray                   # (n, 4) int32
    face_frac: np.ndarray             # (n, 4) wet fraction of dual faces
    mass: np.ndarray                  # (n,) wet cell area
    _lattice_ij: np.ndarray = field(repr=False, default=None)  # (n, 2) int32

    @property
    def n_active(self) -> int:
        return self.xy.shape[0]

    @property
    def is_interior(self) -> np.ndarray:
        return self.cls == INTERIOR

    @property
    def is_boundary(self) -> np.ndarray:
        return (self.cls == NEUMANN_BOUNDARY) | (self.cls == DIRICHLET_BOUNDARY)

    @property
    def is_dirichlet(self) -> np.ndarray:
        return self.cls == DIRICHLET_BOUNDARY

    def area(self) -> float:
        """Grid estimate of the domain area (sum of wet cell areas)."""
        return float(self.mass.sum())

    def nearest_node(self, point: np.ndarray) -> int:
        """Flat index of the active node nearest to a point."""
        p = np.asarray(point, dtype=float)
        ix = int(round((p[0] - self.origin[0]) / self.h))
        iy = int(round((p[1] - self.origin[1]) / self.h))
        ny, nx = self.shape
        # Search a small window around the lattice cell for an active node.
        best, best_d2 = -1, np.inf
        for r in range(0, max(ny, nx)):
            x0, x1 = max(ix - r, 0), min(ix + r + 1, nx)
            y0, y1 = max(iy - r, 0), min(iy + r + 1, ny)
            block = self.index[y0:y1, x0:x1]
            act = block[block >= 0]
            if act.size:
                d2 = ((self.xy[act] - p) ** 2).sum(axis=1)
                i = int(np.argmin(d2))
                if d2[i] < best_d2:
                    best, best_d2 = int(act[i]), float(d2[i])
                if best_d2 <= (r * self.h) ** 2 or r > 2:
                    return best
        if best < 0:
            raise ValueError("grid has no active nodes")
        return best


def discretize(domain: PlanarDomain, h: float, coverage_subsample: int = 8) -> Grid:
    """Build the masked grid at spacing h.

    Nodes within h/2 of a boundary circle become boundary nodes carrying
    that component's condition and the exact-circle outward normal; nodes
    deeper inside are interior; the rest are exterior. Grid lines fall on
    integer multiples of h so symmetric domains get symmetric node sets.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    scale = min([hl.radius for hl in domain.holes] + [domain.outer.radius])
    oc = domain.outer.center_array
    for i, a in enumerate(domain.holes):
        scale = min(scale, domain.outer.radius
                    - float(np.linalg.norm(a.center_array - oc)) - a.radius)
        for b in domain.holes[:i]:
            scale = min(scale, float(np.linalg.norm(a.center_array
                                                    - b.center_array))
                        - a.radius - b.radius)
    if h >= scale / 4.0:
        raise ValueError(
            f"resolution error: h = {h} must be below a quarter of the "
            f"smallest hole radius / component gap ({scale / 4.0:.4g})")
    c = domain.outer.center_array
    r = domain.outer.radius
    ix0 = math.floor((c[0] - r) / h) - 1
    iy0 = math.floor((c[1] - r) / h) - 1
    nx = math.ceil((c[0] + r) / h) + 2 - ix0
    ny = math.ceil((c[1] + r) / h) + 2 - iy0
    xs = (ix0 + np.arange(nx)) * h
    ys = (iy0 + np.arange(ny)) * h
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    pts = np.stack([X, Y], axis=-1)          # (ny, nx, 2)

    sd = domain.signed_distances(pts)        # (ny, nx, k+1)
    smin = sd.min(axis=-1)
    nearest = sd.argmin(axis=-1)

    label = np.full((ny, nx), EXTERIOR, dtype=np.int8)
    label[smin > 0.5 * h] = INTERIOR
    on_boundary = np.abs(smin) <= 0.5 * h
    circles = domain.circles()
    bc_code = np.array(
        [NEUMANN_BOUNDARY if circ.bc is BoundaryCondition.NEUMANN
         else DIRICHLET_BOUNDARY for circ in circles], dtype=np.int8)
    label[on_boundary] = bc_code[nearest[on_boundary]]

    active_mask = label != EXTERIOR
    index = np.full((ny, nx), -1, dtype=np.int32)
    index[active_mask] = np.arange(int(active_mask.sum()), dtype=np.int32)

    iy, ix = np.nonzero(active_mask)
    xy = np.stack([X[iy, ix], Y[iy, ix]], axis=-1)
    cls = label[iy, ix].copy()
    comp = np.where(on_boundary[iy, ix], nearest[iy, ix], -1).astype(np.int16)

    # Outward normals at boundary nodes from the exact circles.
    n_act = xy.shape[0]
    normal = np.zeros((n_act, 2))
    for j, circ in enumerate(circles):
        sel = comp == j
        if not np.any(sel):
            continue
        v = xy[sel] - circ.center_array
        nv = np.linalg.norm(v, axis=1, keepdims=True)
        nv[nv == 0.0] = 1.0
        normal[sel] = (v / nv) if j == 0 else (-v / nv)

    # Neighbor table.
    nbr = np.full((n_act, 4), -1, dtype=np.int32)
    for d, (dx, dy) in enumerate(NEIGHBOR_STEPS):
        jx, jy = ix + dx, iy + dy
        ok = (jx >= 0) & (jx < nx) & (jy >= 0) & (jy < ny)
        vals = np.full(n_act, -1, dtype=np.int32)
        vals[ok] = index[jy[ok], jx[ok]]
        nbr[:, d] = vals

    # Every interior node must have four active neighbors (the signed
    # distance is 1-Lipschitz, so this cannot fail for exact circles).
    if np.any((cls == INTERIOR) & np.any(nbr < 0, axis=1)):
        raise AssertionError("interior node with exterior neighbor")

    # Wet fractions of dual faces between active neighbors. Each
    # undirected face is clipped once (in the +x / +y orientation) and
    # mirrored to the partner slot, so the two directed copies are
    # bitwise equal and the operators are exactly symmetric.
    face_frac = np.zeros((n_act, 4))
    sd_act = smin[iy, ix]
    near_boundary = (cls != INTERIOR) | (sd_act <= 1.5 * h)
    for d, d_back in ((0, 1), (2, 3)):
        dx, dy = NEIGHBOR_STEPS[d]
        q = nbr[:, d]
        ok = q >= 0
        qs = np.where(ok, q, 0)
        near_pair = near_boundary | near_boundary[qs]
        full = np.nonzero(ok & ~near_pair)[0]
        face_frac[full, d] = 1.0
        face_frac[q[full], d_back] = 1.0
        part = np.nonzero(ok & near_pair)[0]
        ex = np.array([dx, dy], dtype=float)
        t = np.array([-ex[1], ex[0]])
        for p in part:
            m = 0.5 * (xy[p] + xy[q[p]])
            a = m - 0.5 * h * t
            b = m + 0.5 * h * t
            frac, _, _ = _segment_wet_fraction(a, b, domain)
            face_frac[p, d] = frac
            face_frac[q[p], d_back] = frac

    # Wet cell areas: full cells for deep interior, subsampled near boundary.
    mass = np.full(n_act, h * h)
    near = sd_act <= 1.2 * h
    if np.any(near):
        mass[near] = _cell_coverage(domain, xy[near], h, coverage_subsample) * h * h

    grid = Grid(
        domain=domain, h=h, origin=(xs[0], ys[0]), shape=(ny, nx),
        index=index, xy=xy, cls=cls, comp=comp, normal=normal, nbr=nbr,
        face_frac=face_frac, mass=mass,
        _lattice_ij=np.stack([ix, iy], axis=-1).astype(np.int32),
    )
    _prune_disconnected(grid)
    return grid


def _prune_disconnected(grid: Grid) -> None:
    """Drop active nodes not connected to the main component.

    Stray corner nodes can appear where the staircase pinches off; the
    operators require one connected active set.
    """
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    n = grid.n_active
    rows, cols = [], []
    for d in range(4):
        q = grid.nbr[:, d]
        ok = q >= 0
        rows.append(np.nonzero(ok)[0])
        cols.append(q[ok])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    adj = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    ncomp, labels = connected_components(adj, directed=False)
    if ncomp <= 1:
        return
    sizes = np.bincount(labels, minlength=ncomp)
    keep = labels == int(np.argmax(sizes))
    remap = np.full(n, -1, dtype=np.int32)
    remap[keep] = np.arange(int(keep.sum()), dtype=np.int32)

    grid.xy = grid.xy[keep]
    grid.cls = grid.cls[keep]
    grid.comp = grid.comp[keep]
    grid.normal = grid.normal[keep]
    grid.mass = grid.mass[keep]
    grid.face_frac = grid.face_frac[keep]
    nbr = grid.nbr[keep]
    miss = nbr < 0
    nbr = np.where(miss, -1, remap[np.where(miss, 0, nbr)])
    grid.nbr = nbr
    ij = grid._lattice_ij[keep]
    grid._lattice_ij = ij
    index = np.full(grid.shape, -1, dtype=np.int32)
    index[ij[:, 1], ij[:, 0]] = np.arange(ij.shape[0], dtype=np.int32)
    grid.index = index
