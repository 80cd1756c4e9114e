"""Time evolution of the 2D helical vorticity equation.

The vorticity is transported by u = grad-perp(G w) with grad-perp = (d2, -d1).
Two discretizations share the same elliptic solver:

* ``semi_lagrangian``: cell centres are traced back along RK2 characteristics
  and the vorticity is interpolated linearly from node averages.
* ``contour``: the patch boundary is a closed polygon of markers moved by RK4;
  the cellwise vorticity is the exact area fraction of the polygon in every
  triangle.  Patches stay sharp, so conserved quantities drift far less.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import shapely
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize_scalar

from .disc_fem import DiscMesh, nodal_gradient
from .errors import CFLViolation, PerturbationInfeasible
from .patch_solver import PatchProblem, PatchState, moment_of_inertia

CFL = 0.5
MONITOR_FIELDS = ("t", "E", "I", "mass", "min", "max", "centroid_x", "centroid_y", "orbital_dist")


def rotation_period(params) -> float:
    """Time for one clockwise revolution at angular speed alpha ln(1/eps)."""
    return 2 * math.pi / (params.alpha * params.log_inv_eps)


# -- mesh helpers -------------------------------------------------------------


class MeshTools:
    """Point location, interpolation and adjacency for one mesh (built once)."""

    def __init__(self, mesh: DiscMesh):
        self.mesh = mesh
        tri = mesh.triangles
        self.v = mesh.nodes[tri]
        self.lo = self.v.min(axis=1)
        self.hi = self.v.max(axis=1)
        from .disc_fem import p1_gradients

        self.grad = p1_gradients(mesh)
        n_b = int(mesh.boundary_mask.sum())
        # inradius of the inscribed boundary polygon
        self.r_safe = mesh.R_star * math.cos(math.pi / n_b) * (1 - 1e-9)
        order = np.argsort(tri.ravel(), kind="stable")
        self.node_cells = (order // 3)
        self.node_ptr = np.concatenate([[0], np.cumsum(np.bincount(tri.ravel(), minlength=mesh.n_nodes))])
        self._geoms = None
        self._tree = None

    @property
    def geoms(self):
        if self._geoms is None:
            self._geoms = shapely.polygons(self.v)
            self._tree = shapely.STRtree(self._geoms)
        return self._geoms

    @property
    def tree(self):
        self.geoms
        return self._tree

    def clamp(self, pts):
        """Pull points outside the meshed polygon back onto a safe radius."""
        r = np.linalg.norm(pts, axis=1)
        out = r > self.r_safe
        if np.any(out):
            pts = pts.copy()
            pts[out] *= (self.r_safe / r[out])[:, None]
        return pts

    def barycentric(self, pts):
        pts = self.clamp(np.asarray(pts, float))
        cells = self.mesh.locate(pts)
        if np.any(cells < 0):
            # points on the rim may slip through the locator; nudge inward
            bad = cells < 0
            pts[bad] *= 1 - 1e-7
            cells[bad] = self.mesh.locate(pts[bad])
        lam = np.einsum("pia,pa->pi", self.grad[cells], pts - self.v[cells, 0])
        lam[:, 0] += 1.0
        return cells, lam

    def interpolate(self, nodal, pts):
        """P1 interpolation of a nodal scalar (n,) or vector (n, k) field."""
        cells, lam = self.barycentric(pts)
        vals = nodal[self.mesh.triangles[cells]]
        if vals.ndim == 2:
            return np.einsum("pi,pi->p", lam, vals)
        return np.einsum("pi,pik->pk", lam, vals)

    def cells_of_nodes(self, nodes):
        idx = np.concatenate([self.node_cells[self.node_ptr[i]:self.node_ptr[i + 1]] for i in nodes]) \
            if len(nodes) else np.zeros(0, int)
        return np.unique(idx)

    def nodes_in_box(self, lo, hi):
        p = self.mesh.nodes
        return np.flatnonzero((p[:, 0] >= lo[0]) & (p[:, 0] <= hi[0]) & (p[:, 1] >= lo[1]) & (p[:, 1] <= hi[1]))


def cell_to_nodes(mesh: DiscMesh, omega) -> np.ndarray:
    """Area-weighted nodal average of a cellwise field."""
    w = np.repeat(mesh.cell_area * omega, 3)
    idx = mesh.triangles.ravel()
    return np.bincount(idx, w, minlength=mesh.n_nodes) / np.bincount(
        idx, np.repeat(mesh.cell_area, 3), minlength=mesh.n_nodes)


# -- velocity -----------------------------------------------------------------


def perp(g):
    """(a, b) -> (b, -a)."""
    return np.column_stack([g[:, 1], -g[:, 0]])


def stream_function(problem: PatchProblem, omega) -> np.ndarray:
    b = problem.system.load(np.asarray(omega, float), kind="cellwise")
    return problem.system.solve_load(b, method="direct")


def velocity_of(problem: PatchProblem, omega) -> np.ndarray:
    """Nodal velocity grad-perp(G omega) from averaged P1 gradients, shape (n, 2)."""
    phi = stream_function(problem, omega)
    return perp(nodal_gradient(problem.system, phi))


class GreenColumns:
    """Cache of discrete Green's columns for the source nodes a patch touches.

    The potential of a compactly supported load at a handful of target nodes
    is then a small dense product instead of a full solve.
    """

    def __init__(self, problem: PatchProblem, capacity=4000):
        self.problem = problem
        self.n = problem.mesh.n_nodes
        self.index = {}
        self.rows = np.zeros((64, self.n))
        self.capacity = capacity
        self.boundary = problem.mesh.boundary_mask

    def _ensure(self, sources):
        missing = [s for s in sources if s not in self.index]
        if not missing:
            return
        if len(self.index) + len(missing) > self.capacity:
            self.index.clear()
            missing = list(sources)
        need = len(self.index) + len(missing)
        if need > len(self.rows):
            grown = np.zeros((max(need, 2 * len(self.rows)), self.n))
            grown[:len(self.rows)] = self.rows
            self.rows = grown
        sys = self.problem.system
        lu = sys.factorize()
        interior = sys.interior
        pos = {int(v): i for i, v in enumerate(interior)}
        rhs = np.zeros((len(interior), len(missing)))
        for j, s in enumerate(missing):
            rhs[pos[s], j] = 1.0
        sol = lu.solve(rhs)
        for j, s in enumerate(missing):
            k = len(self.index)
            self.rows[k] = 0.0
            self.rows[k, interior] = sol[:, j]
            self.index[s] = k

    def potential(self, load_nodes, load_vals, targets):
        keep = ~self.boundary[load_nodes]
        load_nodes, load_vals = load_nodes[keep], load_vals[keep]
        self._ensure([int(s) for s in load_nodes])
        idx = np.fromiter((self.index[int(s)] for s in load_nodes), int, len(load_nodes))
        return load_vals @ self.rows[np.ix_(idx, targets)]


# -- polygons -----------------------------------------------------------------


def _shoelace(p):
    x, y = p[:, 0], p[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cr = x * yn - xn * y
    a = 0.5 * cr.sum()
    c = np.array([((x + xn) * cr).sum(), ((y + yn) * cr).sum()]) / (6 * a)
    return a, c


@dataclass
class Contour:
    """Closed counterclockwise polygon bounding a uniform patch."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, float)
        if _shoelace(self.points)[0] < 0:
            self.points = self.points[::-1].copy()

    @property
    def area(self):
        return _shoelace(self.points)[0]

    @property
    def centroid(self):
        return _shoelace(self.points)[1]

    @property
    def spacing(self):
        return np.linalg.norm(np.roll(self.points, -1, axis=0) - self.points, axis=1)

    @property
    def perimeter(self):
        return float(self.spacing.sum())

    def polygon(self):
        return shapely.polygons(self.points)

    def rotated(self, theta):
        """Counterclockwise rotation by ``theta`` about the origin."""
        c, s = math.cos(theta), math.sin(theta)
        return Contour(self.points @ np.array([[c, s], [-s, c]]))

    def resampled(self, ds=None, n=None):
        """Equal arclength markers along a periodic cubic spline through the current ones."""
        p = np.vstack([self.points, self.points[:1]])
        seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
        s = np.concatenate([[0], np.cumsum(seg)])
        spline = CubicSpline(s, p, bc_type="periodic")
        if n is None:
            n = max(16, int(math.ceil(s[-1] / ds)))
        t = np.arange(n) * s[-1] / n
        return Contour(spline(t))

    def scaled_to_area(self, target):
        c = self.centroid
        f = math.sqrt(target / self.area)
        return Contour(c + f * (self.points - c))


def level_set_contour(mesh: DiscMesh, values, level, near=None) -> Contour:
    """Closed piecewise-linear curve {P1 field = level} surrounding ``near``.

    Marching triangles: every straddling triangle contributes one segment
    between crossing points on its edges; segments are chained by shared
    mesh edges into loops and the loop of largest area enclosing ``near`` is
    returned.
    """
    tri = mesh.triangles
    f = values[tri] - level
    above = f > 0
    cnt = above.sum(axis=1)
    cells = np.flatnonzero((cnt == 1) | (cnt == 2))
    link = {}
    for t in cells:
        keys = []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            if above[t, a] != above[t, b]:
                keys.append((min(tri[t, a], tri[t, b]), max(tri[t, a], tri[t, b])))
        k0, k1 = keys
        link.setdefault(k0, []).append(k1)
        link.setdefault(k1, []).append(k0)

    def point(key):
        i, j = key
        fi, fj = values[i] - level, values[j] - level
        s = fi / (fi - fj)
        return mesh.nodes[i] + s * (mesh.nodes[j] - mesh.nodes[i])

    loops, seen = [], set()
    for start in link:
        if start in seen:
            continue
        loop, prev, cur = [start], None, start
        seen.add(start)
        while True:
            nxt = [k for k in link[cur] if k != prev]
            if not nxt or nxt[0] == start:
                break
            prev, cur = cur, nxt[0]
            if cur in seen:
                break
            seen.add(cur)
            loop.append(cur)
        if len(loop) >= 3:
            loops.append(Contour(np.array([point(k) for k in loop])))
    if not loops:
        raise ValueError("level set is empty")
    if near is not None:
        pt = shapely.points(np.asarray(near, float))
        inside = [c for c in loops if c.polygon().contains(pt)]
        loops = inside or loops
    return max(loops, key=lambda c: c.area)


# -- rasterization ------------------------------------------------------------


def clip_areas(poly_pts, tri_v, inside_vertex, pair_edge, pair_cell):
    """Exact areas of polygon-triangle intersections by Green's theorem.

    ``poly_pts`` is a counterclockwise polygon (N, 2), ``tri_v`` counterclockwise
    triangles (m, 3, 2), ``inside_vertex`` (m, 3) flags the triangle vertices
    inside the polygon, and (pair_edge, pair_cell) lists every polygon edge /
    triangle pair that may meet.  The boundary of an intersection consists of
    polygon edges clipped to the triangle and triangle edges inside the
    polygon; a straight piece from a to b contributes (a x b)/2.
    """
    P = poly_pts
    D = np.roll(P, -1, axis=0) - P
    pxd = P[:, 0] * D[:, 1] - P[:, 1] * D[:, 0]
    A = tri_v
    E = np.roll(A, -1, axis=1) - A
    m = len(A)
    p, d = P[pair_edge], D[pair_edge]  # (k, 2)
    a, e = A[pair_cell], E[pair_cell]  # (k, 3, 2)
    # polygon edge clipped by the three inward half-planes of its triangle
    nrm = np.stack([-e[..., 1], e[..., 0]], axis=-1)
    num = np.einsum("kja,ka->kj", nrm, p) - np.einsum("kja,kja->kj", nrm, a)
    den = np.einsum("kja,ka->kj", nrm, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = -num / den
    lo = np.maximum(np.where(den > 0, r, -np.inf).max(axis=1), 0.0)
    hi = np.minimum(np.where(den < 0, r, np.inf).min(axis=1), 1.0)
    blocked = np.any((den == 0) & (num < 0), axis=1)
    frac = np.where(blocked, 0.0, np.clip(hi - lo, 0.0, None))
    part1 = np.bincount(pair_cell, 0.5 * frac * pxd[pair_edge], minlength=m)
    # triangle edges: inside measure = start flag + signed crossings
    rel = p[:, None, :] - a
    denom = e[..., 0] * d[:, None, 1] - e[..., 1] * d[:, None, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[..., 0] * d[:, None, 1] - rel[..., 1] * d[:, None, 0]) / denom
        u = (rel[..., 0] * e[..., 1] - rel[..., 1] * e[..., 0]) / denom
    hit = (denom != 0) & (t > 0) & (t < 1) & (u >= 0) & (u < 1)
    acc = np.where(hit, -np.sign(denom) * (1 - t), 0.0)  # (k, 3)
    measure = inside_vertex.astype(float)
    np.add.at(measure, pair_cell, acc)
    axe = A[..., 0] * E[..., 1] - A[..., 1] * E[..., 0]
    return part1 + 0.5 * (axe * measure).sum(axis=1)


class Rasterizer:
    """Exact area fractions of a polygon in every mesh triangle."""

    def __init__(self, tools: MeshTools):
        self.tools = tools
        self.fallbacks = 0
        tri = tools.mesh.triangles
        # cells sharing a node with each cell, padded with -1
        lists = [np.unique(np.concatenate([tools.node_cells[tools.node_ptr[n]:tools.node_ptr[n + 1]]
                                           for n in t])) for t in tri]
        width = max(len(x) for x in lists)
        self.nbr = np.full((len(tri), width), -1)
        for i, x in enumerate(lists):
            self.nbr[i, :len(x)] = x

    def fractions(self, contour: Contour):
        """(cells, covered area) for all triangles meeting the polygon."""
        t = self.tools
        pts = contour.points
        poly = contour.polygon()
        plo, phi = pts.min(axis=0), pts.max(axis=0)
        cand = np.flatnonzero((t.hi[:, 0] >= plo[0]) & (t.lo[:, 0] <= phi[0])
                              & (t.hi[:, 1] >= plo[1]) & (t.lo[:, 1] <= phi[1]))
        v = t.v[cand]
        inside = shapely.contains_xy(poly, v[..., 0].ravel(), v[..., 1].ravel()).reshape(-1, 3)
        home = t.mesh.locate(pts)
        if np.all(home >= 0):
            n = len(pts)
            near = np.concatenate([self.nbr[home], self.nbr[np.roll(home, -1)]], axis=1)
            edge = np.repeat(np.arange(n), near.shape[1])
            cell = near.ravel()
            ok = cell >= 0
            key = np.unique(edge[ok] * t.mesh.n_cells + cell[ok])
            edge, cell = key // t.mesh.n_cells, key % t.mesh.n_cells
            local = np.full(t.mesh.n_cells, -1)
            local[cand] = np.arange(len(cand))
            # cells outside the bounding box cannot meet the polygon
            ok = local[cell] >= 0
            edge, cell = edge[ok], cell[ok]
            crossing = np.zeros(len(cand), bool)
            crossing[local[cell]] = True
            mixed = inside.any(axis=1) & ~inside.all(axis=1)
            if not np.any(mixed & ~crossing):
                sub = np.flatnonzero(crossing)
                pos = np.full(len(cand), -1)
                pos[sub] = np.arange(len(sub))
                areas = np.where(inside.all(axis=1), t.mesh.cell_area[cand], 0.0)
                areas[sub] = clip_areas(pts, v[sub], inside[sub], edge, pos[local[cell]])
                if abs(areas.sum() - contour.area) <= 1e-10 * contour.area:
                    keep = areas > 0
                    return cand[keep], areas[keep]
        # degenerate configuration: exact set operations instead
        self.fallbacks += 1
        areas = shapely.area(shapely.intersection(t.geoms[cand], poly))
        keep = areas > 0
        return cand[keep], areas[keep]

    def omega(self, contour: Contour, cap: float):
        cells, areas = self.fractions(contour)
        w = np.zeros(self.tools.mesh.n_cells)
        w[cells] = cap * np.minimum(areas / self.tools.mesh.cell_area[cells], 1.0)
        return w


# -- state and monitors -------------------------------------------------------


@dataclass
class EvolutionState:
    omega: np.ndarray
    t: float
    dt: float
    velocity: np.ndarray | None = None
    contour: Contour | None = None
    step_count: int = 0


@dataclass
class Monitors:
    rows: list = field(default_factory=list)

    def append(self, **kw):
        self.rows.append(tuple(float(kw.get(k, float("nan"))) for k in MONITOR_FIELDS))

    def column(self, name):
        i = MONITOR_FIELDS.index(name)
        return np.array([r[i] for r in self.rows])

    def drift(self, name):
        v = self.column(name)
        return float(np.max(np.abs(v - v[0])) / abs(v[0]))

    def angular_speed(self):
        """Least-squares slope of the unwrapped centroid angle (negative = clockwise)."""
        t = self.column("t")
        ang = np.unwrap(np.arctan2(self.column("centroid_y"), self.column("centroid_x")))
        return float(np.polyfit(t, ang, 1)[0])


def cfl_dt(mesh: DiscMesh, umax: float, cfl=CFL) -> float:
    return cfl * mesh.h / umax if umax > 0 else float("inf")


# -- semi-Lagrangian ----------------------------------------------------------


class SemiLagrangian:
    """RK2 backtracking of cell centres with linear interpolation of vorticity."""

    name = "semi_lagrangian"

    def __init__(self, problem: PatchProblem, velocity=None):
        self.problem = problem
        self.mesh = problem.mesh
        self.tools = MeshTools(problem.mesh)
        if velocity is not None and callable(velocity):
            velocity = np.asarray(velocity(self.mesh.nodes), float)
        self.prescribed = velocity

    def init(self, omega, t=0.0) -> EvolutionState:
        omega = np.asarray(omega, float)
        return EvolutionState(omega.copy(), t, 0.0, self._velocity(omega))

    def _velocity(self, omega):
        if self.prescribed is not None:
            return self.prescribed
        return velocity_of(self.problem, omega)

    def umax(self, state):
        return float(np.max(np.linalg.norm(state.velocity, axis=1)))

    def step(self, state: EvolutionState, dt: float) -> EvolutionState:
        bound = cfl_dt(self.mesh, self.umax(state))
        if dt > bound * (1 + 1e-12):
            raise CFLViolation(f"dt={dt:.4g} exceeds CFL bound {bound:.4g}", dt=dt, bound=bound)
        u = state.velocity
        c = self.mesh.centroids
        mid = self.tools.clamp(c - 0.5 * dt * self.tools.interpolate(u, c))
        dep = self.tools.clamp(c - dt * self.tools.interpolate(u, mid))
        nodal = cell_to_nodes(self.mesh, state.omega)
        new = self.tools.interpolate(nodal, dep)
        return EvolutionState(new, state.t + dt, dt, self._velocity(new), None, state.step_count + 1)

    def centroid(self, state):
        first = self.problem.first_moment
        return (state.omega @ first) / (state.omega @ self.mesh.cell_area)


def step(problem: PatchProblem, state: EvolutionState, dt: float, velocity=None) -> EvolutionState:
    """One semi-Lagrangian step; ``velocity`` optionally prescribes a nodal field or callable."""
    scheme = SemiLagrangian(problem, velocity)
    if state.velocity is None or velocity is not None:
        state = EvolutionState(state.omega, state.t, state.dt, scheme._velocity(state.omega),
                               None, state.step_count)
    return scheme.step(state, dt)


# -- contour dynamics ---------------------------------------------------------


class ContourDynamics:
    """Boundary markers moved with the normal flux of the FEM velocity.

    For a continuous P1 stream function the flux of grad-perp(phi) through a
    segment is the jump of phi between its ends, so the flux through edge i
    of the marker polygon is F_i = phi(x_{i+1}) - phi(x_i).  Each marker moves
    along its vertex normal so that the polygon sweeps the average flux of its
    two edges; the fluxes telescope, so the enclosed area (the circulation)
    is conserved up to time-stepping error, and markers do not circulate
    around the patch.  Time stepping is RK4 with the stream function
    extrapolated linearly from the last two solves, one rasterization per
    step.
    """

    name = "contour"

    def __init__(self, problem: PatchProblem, spacing=None, margin=3.0):
        self.problem = problem
        self.mesh = problem.mesh
        self.tools = MeshTools(problem.mesh)
        self.raster = Rasterizer(self.tools)
        self.green = GreenColumns(problem)
        self.cap = problem.cap
        self.spacing = 0.5 * self.mesh.h if spacing is None else spacing
        self.margin = margin * self.mesh.h
        self._prev = None

    def field(self, contour: Contour):
        """Cellwise vorticity, windowed nodal stream function and kinetic energy."""
        mesh, tools = self.mesh, self.tools
        cells, areas = self.raster.fractions(contour)
        vals = self.cap * np.minimum(areas / mesh.cell_area[cells], 1.0)
        omega = np.zeros(mesh.n_cells)
        omega[cells] = vals
        contrib = np.repeat(vals * mesh.cell_area[cells] / 3.0, 3)
        src, inv = np.unique(mesh.triangles[cells].ravel(), return_inverse=True)
        load = np.bincount(inv, contrib, minlength=len(src))
        lo = contour.points.min(axis=0) - self.margin
        hi = contour.points.max(axis=0) + self.margin
        window = np.union1d(tools.nodes_in_box(lo, hi), src)
        phi = np.full(mesh.n_nodes, np.nan)
        phi[window] = self.green.potential(src, load, window)
        kinetic = 0.5 * float(load @ phi[src])
        return omega, phi, kinetic

    def init(self, contour: Contour, t=0.0) -> EvolutionState:
        contour = contour.resampled(self.spacing).scaled_to_area(contour.area)
        omega, phi, kin = self.field(contour)
        self._prev = None
        self._kinetic = kin
        return EvolutionState(omega, t, 0.0, phi, contour, 0)

    def umax(self, state):
        """Largest P1 velocity |grad phi| over the cells inside the window."""
        phi = state.velocity
        tri = self.mesh.triangles
        ok = np.all(np.isfinite(phi[tri]), axis=1)
        g = np.einsum("tia,ti->ta", self.tools.grad[ok], phi[tri[ok]])
        return float(np.sqrt((g**2).sum(axis=1)).max())

    @staticmethod
    def marker_velocity(x, phi_x):
        """Vertex velocities sweeping the mean flux of the two adjacent edges."""
        F = np.roll(phi_x, -1) - phi_x
        e = np.roll(x, -1, axis=0) - x
        n = np.column_stack([e[:, 1], -e[:, 0]])  # outward normal times edge length
        N = 0.5 * (np.roll(n, 1, axis=0) + n)
        flux = 0.5 * (np.roll(F, 1) + F)
        return (flux / np.einsum("ia,ia->i", N, N))[:, None] * N

    def _vel(self, phi0, phi1, x, frac):
        phi = phi0 if phi1 is None or frac == 0 else (1 + frac) * phi0 - frac * phi1
        return self.marker_velocity(x, self.tools.interpolate(phi, x))

    def step(self, state: EvolutionState, dt: float) -> EvolutionState:
        phi0 = state.velocity
        phi1 = self._prev
        if phi1 is not None:
            phi1 = np.where(np.isnan(phi1), phi0, phi1)
        x = state.contour.points
        k1 = self._vel(phi0, phi1, x, 0.0)
        k2 = self._vel(phi0, phi1, x + 0.5 * dt * k1, 0.5)
        k3 = self._vel(phi0, phi1, x + 0.5 * dt * k2, 0.5)
        k4 = self._vel(phi0, phi1, x + dt * k3, 1.0)
        if not np.all(np.isfinite(k4)):
            raise CFLViolation("markers left the stream-function window", dt=dt)
        contour = Contour(self.tools.clamp(x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)))
        sp = contour.spacing
        if sp.max() > 1.5 * self.spacing or sp.min() < 0.3 * self.spacing:
            # remeshing is a reparametrization; keep the enclosed area
            contour = contour.resampled(self.spacing).scaled_to_area(contour.area)
        omega, phi, kin = self.field(contour)
        self._prev = phi0
        self._kinetic = kin
        return EvolutionState(omega, state.t + dt, dt, phi, contour, state.step_count + 1)

    def centroid(self, state):
        return state.contour.centroid


# -- orbital distance ---------------------------------------------------------


def _rotate(points, theta):
    c, s = math.cos(theta), math.sin(theta)
    return points @ np.array([[c, s], [-s, c]])


def orbital_distance(omega, reference, p=2, mesh: DiscMesh | None = None, cap=None,
                     n_theta=720, refine=True, return_angle=False):
    """min over rotations R_theta of ||omega - R_theta reference||_{L^p}.

    For two :class:`Contour` arguments the patches are uniform at level ``cap``
    and the distance is cap * |A sym-diff R_theta B|^(1/p), exact for each
    angle.  For cellwise arrays the reference is resampled at the rotated
    cell centroids and the norm is the cellwise quadrature on ``mesh``.
    A bounded scalar search refines the best grid angle.
    """
    if isinstance(reference, PatchState):
        mesh = reference.problem.mesh if mesh is None else mesh
        reference = reference.omega
    if isinstance(omega, Contour) and isinstance(reference, Contour):
        A = omega.polygon()

        def dist(theta):
            B = shapely.polygons(_rotate(reference.points, theta))
            return cap * shapely.area(shapely.symmetric_difference(A, B)) ** (1.0 / p)

        thetas = 2 * math.pi * np.arange(n_theta) / n_theta
        Bs = shapely.polygons(np.stack([_rotate(reference.points, th) for th in thetas]))
        vals = cap * shapely.area(shapely.symmetric_difference(A, Bs)) ** (1.0 / p)
    else:
        omega = np.asarray(omega, float)
        reference = np.asarray(reference, float)
        c = mesh.centroids
        area = mesh.cell_area
        support = np.flatnonzero((omega != 0) | (reference != 0))
        r_sup = np.linalg.norm(c[support], axis=1).max() + 2 * mesh.h
        # rotations preserve |x|, so both fields vanish outside this disc
        near = np.flatnonzero(np.linalg.norm(c, axis=1) <= r_sup)

        def dist_many(ths):
            ths = np.atleast_1d(ths)
            pts = np.concatenate([_rotate(c[near], -th) for th in ths])
            cells = mesh.locate(pts)
            ref = np.where(cells >= 0, reference[np.maximum(cells, 0)], 0.0).reshape(len(ths), -1)
            err = np.sum(np.abs(omega[near][None] - ref) ** p * area[near][None], axis=1)
            return err ** (1.0 / p)

        def dist(theta):
            return float(dist_many(theta)[0])

        thetas = 2 * math.pi * np.arange(n_theta) / n_theta
        vals = np.concatenate([dist_many(thetas[i:i + 60]) for i in range(0, n_theta, 60)])
    j = int(np.argmin(vals))
    best, ang = float(vals[j]), float(thetas[j])
    if refine and best > 0:
        step = 2 * math.pi / n_theta
        res = minimize_scalar(dist, bounds=(ang - step, ang + step), method="bounded",
                              options={"xatol": 1e-9})
        if res.fun < best:
            best, ang = float(res.fun), float(res.x)
    return (best, ang) if return_angle else best


# -- driver -------------------------------------------------------------------


def make_scheme(problem: PatchProblem, scheme="contour", **kw):
    if scheme == "contour":
        return ContourDynamics(problem, **kw)
    if scheme == "semi_lagrangian":
        return SemiLagrangian(problem, **kw)
    raise ValueError(f"unknown scheme {scheme!r}")


def auto_dt(scheme_obj, state, cfl=CFL):
    return cfl_dt(scheme_obj.mesh, scheme_obj.umax(state), cfl)


def run(problem: PatchProblem, initial, T: float, dt="auto", scheme="contour", reference=None, p=2,
        orbital_every=0, monitor_every=1, progress=None, scheme_kw=None):
    """Evolve ``initial`` to time T and record monitors.

    ``initial`` is a Contour for the contour scheme or a cellwise array for
    the semi-Lagrangian scheme (a Contour is rasterized).  With ``dt='auto'``
    the step is 0.9 of the CFL bound at t=0 and stays fixed.
    """
    eng = make_scheme(problem, scheme, **(scheme_kw or {}))
    if scheme == "semi_lagrangian" and isinstance(initial, Contour):
        initial = Rasterizer(eng.tools).omega(initial, problem.cap)
    state = eng.init(initial)
    if dt == "auto":
        dt = 0.9 * auto_dt(eng, state)
    n_steps = max(1, int(math.ceil(T / dt - 1e-9)))
    dt = T / n_steps
    mon = Monitors()
    coeff = problem.background_coeff
    area = problem.mesh.cell_area

    def record(st):
        if scheme == "contour":
            kin = eng._kinetic
        else:
            b = problem.system.load(st.omega, kind="cellwise")
            kin = 0.5 * float(b @ stream_function(problem, st.omega))
        I = moment_of_inertia(problem, st.omega)
        c = eng.centroid(st)
        od = float("nan")
        if reference is not None and orbital_every and st.step_count % orbital_every == 0:
            od = _orbital(st, reference, problem, p)
        mon.append(t=st.t, E=kin - coeff * I, I=I, mass=float(st.omega @ area), min=st.omega.min(),
                   max=st.omega.max(), centroid_x=c[0], centroid_y=c[1], orbital_dist=od)

    record(state)
    for i in range(n_steps):
        state = eng.step(state, dt)
        if (i + 1) % monitor_every == 0 or i + 1 == n_steps:
            record(state)
        if progress is not None:
            progress(state)
    return state, mon


def _orbital(state, reference, problem, p):
    if isinstance(reference, Contour) and state.contour is not None:
        return orbital_distance(state.contour, reference, p, cap=problem.cap)
    ref = reference if not isinstance(reference, Contour) else Rasterizer(MeshTools(problem.mesh)).omega(
        reference, problem.cap)
    return orbital_distance(state.omega, ref, p, mesh=problem.mesh)


# -- patch initial data -------------------------------------------------------


def contour_from_psi(problem: PatchProblem, psi, near, mass=None) -> Contour:
    """Level set of the nodal field ``psi`` enclosing area mass * eps^2 (level by bisection)."""
    target = (problem.params.d if mass is None else mass) / problem.cap
    lo, hi = float(np.nanmin(psi)), float(np.nanmax(psi))
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        try:
            a = level_set_contour(problem.mesh, psi, mid, near).area
        except ValueError:
            a = 0.0
        if a > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14 * max(1.0, abs(hi)):
            break
    c = level_set_contour(problem.mesh, psi, 0.5 * (lo + hi), near)
    return c.scaled_to_area(target)


def contour_from_state(state: PatchState) -> Contour:
    """Boundary of the patch: level set of its stream deviation with the exact area."""
    pb = state.problem
    X = (state.omega @ pb.first_moment) / state.mass
    return contour_from_psi(pb, state.psi, X)


def equilibrate_contour(problem: PatchProblem, contour: Contour, iters=30, tol=1e-12, engine=None):
    """Contour analogue of the bathtub iteration.

    Replaces the contour by the level set of its own stream deviation that
    encloses the prescribed area, until the symmetric difference stalls.  A
    fixed point has phi - alpha ln(1/eps)|x|^2/2 constant along the contour, so
    the flux-form evolution turns it rigidly at the predicted rate.
    """
    eng = ContourDynamics(problem) if engine is None else engine
    coeff = problem.background_coeff
    r2 = problem.r2_nodes
    target = contour.area
    history = []
    for _ in range(iters):
        _, phi, _ = eng.field(contour)
        psi = phi - 0.5 * coeff * r2
        new = contour_from_psi(problem, psi, contour.centroid, mass=target * problem.cap)
        new = new.resampled(eng.spacing).scaled_to_area(target)
        change = shapely.area(shapely.symmetric_difference(new.polygon(), contour.polygon())) / target
        history.append(change)
        contour = new
        if change < tol:
            break
    return contour, history


def perturb_contour(contour: Contour, delta: float, rng: np.random.Generator, modes=range(2, 9),
                    R_star=None) -> Contour:
    """Roughen the boundary: r(theta) -> r(theta)(1 + delta xi(theta)), then restore the area.

    xi is a random combination of the given Fourier modes normalized to
    max|xi| = 1, so ``delta`` is the relative amplitude.
    """
    if delta == 0:
        return Contour(contour.points.copy())
    if not 0 < delta < 0.5:
        raise PerturbationInfeasible("relative amplitude must lie in (0, 0.5)", delta=delta)
    c = contour.centroid
    rel = contour.points - c
    th = np.arctan2(rel[:, 1], rel[:, 0])
    modes = list(modes)
    a = rng.standard_normal(len(modes))
    b = rng.standard_normal(len(modes))
    grid = np.linspace(0, 2 * math.pi, 2048, endpoint=False)
    xi_grid = sum(a[i] * np.cos(m * grid) + b[i] * np.sin(m * grid) for i, m in enumerate(modes))
    scale = np.abs(xi_grid).max()
    xi = sum(a[i] * np.cos(m * th) + b[i] * np.sin(m * th) for i, m in enumerate(modes)) / scale
    new = Contour(c + rel * (1 + delta * xi)[:, None]).scaled_to_area(contour.area)
    poly = new.polygon()
    if not poly.is_valid:
        raise PerturbationInfeasible("perturbed boundary self-intersects", delta=delta)
    if R_star is not None and np.linalg.norm(new.points, axis=1).max() >= R_star:
        raise PerturbationInfeasible("perturbed patch leaves the disc", delta=delta)
    return new


@dataclass
class StabilityReport:
    delta: float
    p: float
    seed: int
    periods: float
    initial_distance: float
    max_distance: float
    monitors: Monitors = field(repr=False)

    @property
    def ratio(self):
        return self.max_distance / self.initial_distance if self.initial_distance > 0 else float("inf")

    def as_dict(self):
        return {"delta": self.delta, "p": self.p, "seed": self.seed, "periods": self.periods,
                "initial_distance": self.initial_distance, "max_distance": self.max_distance,
                "ratio": self.ratio}


def stability_experiment(reference: PatchState, delta: float, p=2, periods=3.0, seed=0, T=None,
                         orbital_every=50, scheme="contour", dt="auto", contour=None,
                         progress=None) -> StabilityReport:
    """Perturb the maximizer, evolve it and track its distance to the rotation orbit."""
    pb = reference.problem
    ref_contour = contour_from_state(reference) if contour is None else contour
    rng = np.random.default_rng(seed)
    init = perturb_contour(ref_contour, delta, rng, R_star=pb.params.R_star)
    if T is None:
        T = periods * rotation_period(pb.params)
    if scheme == "contour":
        ref = ref_contour.resampled(0.5 * pb.mesh.h)
    else:
        ref = Rasterizer(MeshTools(pb.mesh)).omega(ref_contour, pb.cap)
    state, mon = run(pb, init, T, dt=dt, scheme=scheme, reference=ref, p=p,
                     orbital_every=orbital_every, progress=progress)
    od = mon.column("orbital_dist")
    od = od[np.isfinite(od)]
    return StabilityReport(delta, p, seed, T / rotation_period(pb.params), float(od[0]), float(od.max()), mon)
