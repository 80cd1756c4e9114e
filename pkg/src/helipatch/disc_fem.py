"""P1 finite elements on a concentric-ring triangulation of the disc.

The Dirichlet problem ``-div(K grad u) = f`` in B_R(0), ``u = 0`` on the
circle, is discretized with linear triangles.  K is sampled at the three edge
midpoints of every triangle, boundary degrees of freedom are eliminated, and
the interior system is solved by Jacobi-preconditioned conjugate gradients or
by a cached sparse LU factorization for repeated solves.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidResolution, NonSPDCoefficient, SolverDivergence

_mesh_ids = itertools.count()


@dataclass(eq=False)
class DiscMesh:
    R_star: float
    nodes: np.ndarray  # (n, 2)
    triangles: np.ndarray  # (m, 3), counterclockwise
    boundary_mask: np.ndarray  # (n,) bool
    cell_area: np.ndarray  # (m,)
    h: float
    n_rings: int
    uid: int = field(default_factory=lambda: next(_mesh_ids))

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_cells(self):
        return len(self.triangles)

    @property
    def interior(self):
        return np.flatnonzero(~self.boundary_mask)

    @property
    def centroids(self):
        return self.nodes[self.triangles].mean(axis=1)

    @property
    def area(self):
        return float(self.cell_area.sum())

    def nearest_node(self, point, interior_only=True):
        cand = self.interior if interior_only else np.arange(self.n_nodes)
        dist = np.linalg.norm(self.nodes[cand] - np.asarray(point, float), axis=1)
        return int(cand[np.argmin(dist)])

    def cell_moments(self):
        """Exact integrals of x and of |x|^2 over every triangle."""
        v = self.nodes[self.triangles]
        first = self.cell_area[:, None] * v.mean(axis=1)
        sq = np.einsum("tij,tij->t", v, v)
        cross = (np.einsum("ti,ti->t", v[:, 0], v[:, 1]) + np.einsum("ti,ti->t", v[:, 1], v[:, 2])
                 + np.einsum("ti,ti->t", v[:, 2], v[:, 0]))
        second = self.cell_area * (sq + cross) / 6.0
        return first, second

    def trifinder(self):
        """Cached matplotlib point locator for this mesh."""
        if getattr(self, "_finder", None) is None:
            import matplotlib.tri as mtri

            self._tri = mtri.Triangulation(self.nodes[:, 0], self.nodes[:, 1], self.triangles)
            self._finder = self._tri.get_trifinder()
        return self._finder

    def locate(self, points):
        """Index of the triangle containing each point (-1 outside)."""
        pts = np.asarray(points, float)
        return np.asarray(self.trifinder()(pts[..., 0], pts[..., 1]), dtype=np.int64)

    def write_csv(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "nodes.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "x", "y", "boundary"])
            for i, (p, b) in enumerate(zip(self.nodes, self.boundary_mask)):
                w.writerow([i, repr(float(p[0])), repr(float(p[1])), int(b)])
        with open(directory / "tris.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "n0", "n1", "n2", "area"])
            for i, (t, a) in enumerate(zip(self.triangles, self.cell_area)):
                w.writerow([i, int(t[0]), int(t[1]), int(t[2]), repr(float(a))])


def read_mesh_csv(directory, R_star) -> DiscMesh:
    directory = Path(directory)
    nodes = np.loadtxt(directory / "nodes.csv", delimiter=",", skiprows=1)
    tris = np.loadtxt(directory / "tris.csv", delimiter=",", skiprows=1)
    nodes = np.atleast_2d(nodes)
    tris = np.atleast_2d(tris)
    triangles = tris[:, 1:4].astype(np.int64)
    xy = nodes[:, 1:3]
    return _finish_mesh(R_star, xy, triangles, nodes[:, 3].astype(bool), n_rings=-1)


def _signed_area(xy, tris):
    a, b, c = xy[tris[:, 0]], xy[tris[:, 1]], xy[tris[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def _finish_mesh(R_star, xy, triangles, boundary, n_rings):
    area = _signed_area(xy, triangles)
    flip = area < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    area = np.abs(area)
    edges = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    h = float(np.linalg.norm(xy[edges[:, 0]] - xy[edges[:, 1]], axis=1).max())
    return DiscMesh(R_star, xy, triangles, boundary, area, h, n_rings)


def build_disc_mesh(R_star: float, h_target: float) -> DiscMesh:
    """Concentric-ring triangulation of B_R(0) with spacing about ``h_target``.

    Ring ``i`` (radius ``i R/n``) carries ``6 i`` equally spaced nodes, so all
    triangles have comparable size.
    """
    if not (0 < h_target < R_star / 4):
        raise InvalidResolution("need 0 < h_target < R_star/4", h_target=h_target, R_star=R_star)
    n = int(math.ceil(R_star / h_target))
    rings = [np.array([0])]
    pts = [np.zeros((1, 2))]
    count = 1
    for i in range(1, n + 1):
        m = 6 * i
        theta = 2 * math.pi * np.arange(m) / m
        r = R_star if i == n else R_star * i / n
        ring = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
        if i == n:
            # place boundary nodes exactly on the circle
            ring *= R_star / np.linalg.norm(ring, axis=1)[:, None]
        pts.append(ring)
        rings.append(count + np.arange(m))
        count += m
    xy = np.concatenate(pts)

    tris = []
    outer = rings[1]
    for j in range(len(outer)):
        tris.append((0, outer[j], outer[(j + 1) % len(outer)]))
    for i in range(2, n + 1):
        tris.extend(_stitch(rings[i - 1], rings[i], xy))
    triangles = np.array(tris, dtype=np.int64)
    boundary = np.zeros(len(xy), dtype=bool)
    boundary[rings[n]] = True
    return _finish_mesh(R_star, xy, triangles, boundary, n)


def _stitch(inner, outer, xy):
    """Triangulate the annulus strip between two node rings.

    Both walks start at angle 0; each step closes the triangle whose new
    diagonal is shorter.
    """
    p = q = 0
    ni, no = len(inner), len(outer)
    out = []
    while p < ni or q < no:
        if p >= ni:
            adv_inner = False
        elif q >= no:
            adv_inner = True
        else:
            d_in = np.linalg.norm(xy[inner[(p + 1) % ni]] - xy[outer[q % no]])
            d_out = np.linalg.norm(xy[inner[p % ni]] - xy[outer[(q + 1) % no]])
            adv_inner = d_in < d_out - 1e-12 * d_out
        if adv_inner:
            out.append((inner[p % ni], inner[(p + 1) % ni], outer[q % no]))
            p += 1
        else:
            out.append((inner[p % ni], outer[(q + 1) % no], outer[q % no]))
            q += 1
    return out


@dataclass
class ScalarField:
    mesh: DiscMesh
    values: np.ndarray
    kind: str = "nodal"  # or "cellwise"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = self.mesh.n_nodes if self.kind == "nodal" else self.mesh.n_cells
        if self.kind not in ("nodal", "cellwise") or self.values.shape != (expected,):
            raise ValueError(f"{self.kind} field needs {expected} values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite entries")

    def integral(self):
        if self.kind == "cellwise":
            return float(self.values @ self.mesh.cell_area)
        return float(self.values[self.mesh.triangles].mean(axis=1) @ self.mesh.cell_area)

    def cell_average(self) -> np.ndarray:
        if self.kind == "cellwise":
            return self.values
        return self.values[self.mesh.triangles].mean(axis=1)


def p1_gradients(mesh: DiscMesh) -> np.ndarray:
    """Gradients of the three barycentric hat functions on every triangle, (m, 3, 2)."""
    v = mesh.nodes[mesh.triangles]
    two_area = 2.0 * mesh.cell_area
    g = np.empty((mesh.n_cells, 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        g[:, i, 0] = (v[:, j, 1] - v[:, k, 1]) / two_area
        g[:, i, 1] = (v[:, k, 0] - v[:, j, 0]) / two_area
    return g


class StiffnessSystem:
    """Assembled stiffness/mass matrices with Dirichlet elimination.

    ``A_full`` keeps every node (for operator identities), ``A`` is the SPD
    interior block actually solved.
    """

    def __init__(self, mesh: DiscMesh, K, A_full, M_full):
        self.mesh = mesh
        self.K = K
        self.A_full = A_full
        self.M_full = M_full
        self.interior = mesh.interior
        self.A = A_full[self.interior][:, self.interior].tocsr()
        self.lumped_mass = np.asarray(M_full.sum(axis=1)).ravel()
        self.grad = p1_gradients(mesh)
        self._lu = None
        self.last_iterations = 0
        self.last_residual = 0.0

    @property
    def ndof(self):
        return len(self.interior)

    # -- loads -----------------------------------------------------------
    def load(self, f: ScalarField | np.ndarray, kind=None) -> np.ndarray:
        """Full-length load vector b_i = integral of f phi_i."""
        if isinstance(f, ScalarField):
            kind, vals = f.kind, f.values
        else:
            vals = np.asarray(f, float)
            if kind is None:
                kind = "cellwise" if vals.shape == (self.mesh.n_cells,) else "nodal"
        if kind == "cellwise":
            # exact for piecewise constant f: each vertex gets area/3
            contrib = np.repeat(vals * self.mesh.cell_area / 3.0, 3)
            return np.bincount(self.mesh.triangles.ravel(), contrib, minlength=self.mesh.n_nodes)
        return self.M_full @ vals

    # -- solves ----------------------------------------------------------
    def factorize(self):
        if self._lu is None:
            self._lu = spla.splu(self.A.tocsc(), permc_spec="MMD_AT_PLUS_A")
        return self._lu

    def solve_load(self, b_full, method="cg", x0=None, rtol=1e-10) -> np.ndarray:
        b = b_full[self.interior]
        u = np.zeros(self.mesh.n_nodes)
        if not np.any(b):
            self.last_iterations, self.last_residual = 0, 0.0
            return u
        if method == "direct":
            x = self.factorize().solve(b)
            self.last_iterations = 0
        elif method == "cg":
            x0i = None if x0 is None else x0[self.interior]
            x, it = pcg(self.A, b, x0=x0i, rtol=rtol, maxiter=int(50 * math.sqrt(self.ndof)) + 10)
            self.last_iterations = it
        else:
            raise ValueError(f"unknown method {method!r}")
        bnorm = np.linalg.norm(b)  # underflows to 0 for subnormal loads
        self.last_residual = float(np.linalg.norm(self.A @ x - b) / bnorm) if bnorm > 0 else 0.0
        u[self.interior] = x
        return u


def pcg(A, b, x0=None, rtol=1e-10, maxiter=None):
    """Jacobi-preconditioned conjugate gradients; returns (x, iterations).

    Raises SolverDivergence with the final relative residual when the
    iteration cap is hit.
    """
    n = len(b)
    maxiter = maxiter or 10 * n
    dinv = 1.0 / A.diagonal()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(n), 0
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = A @ p
        step = rz / (p @ Ap)
        x += step * p
        r -= step * Ap
        if np.linalg.norm(r) <= rtol * bnorm:
            # confirm with a true residual; the recursive one drifts
            if np.linalg.norm(b - A @ x) <= rtol * bnorm:
                return x, it
            r = b - A @ x
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = float(np.linalg.norm(b - A @ x) / bnorm)
    raise SolverDivergence("CG did not reach tolerance", iterations=maxiter, residual=res)


def assemble(mesh: DiscMesh, K) -> StiffnessSystem:
    """Stiffness (K at edge midpoints) and consistent mass matrices."""
    v = mesh.nodes[mesh.triangles]
    mids = 0.5 * (v + v[:, [1, 2, 0]])  # (m, 3, 2)
    Kq = K.eval(mids)  # (m, 3, 2, 2)
    sym = np.abs(Kq[..., 0, 1] - Kq[..., 1, 0])
    det = Kq[..., 0, 0] * Kq[..., 1, 1] - Kq[..., 0, 1] * Kq[..., 1, 0]
    if np.any(Kq[..., 0, 0] <= 0) or np.any(det <= 0) or np.any(sym > 1e-12 * np.abs(Kq).max()):
        raise NonSPDCoefficient("coefficient is not SPD at a quadrature point")
    Kbar = Kq.mean(axis=1)
    g = p1_gradients(mesh)
    local = mesh.cell_area[:, None, None] * np.einsum("tia,tab,tjb->tij", g, Kbar, g)
    local = 0.5 * (local + local.transpose(0, 2, 1))
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_nodes
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    mloc = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]], float) / 12.0
    mvals = mesh.cell_area[:, None, None] * mloc[None]
    M = sp.coo_matrix((mvals.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return StiffnessSystem(mesh, K, A, M)


def solve_dirichlet(sys: StiffnessSystem, f, method="cg") -> ScalarField:
    """Nodal solution of -div(K grad u) = f with u = 0 on the circle."""
    b = sys.load(f)
    return ScalarField(sys.mesh, sys.solve_load(b, method=method), "nodal")


def apply_operator(sys: StiffnessSystem, u) -> ScalarField:
    """Mass-lumped discrete operator (A u)_i / m_i; zero on boundary nodes."""
    vals = u.values if isinstance(u, ScalarField) else np.asarray(u, float)
    out = np.zeros(sys.mesh.n_nodes)
    i = sys.interior
    out[i] = (sys.A_full @ vals)[i] / sys.lumped_mass[i]
    return ScalarField(sys.mesh, out, "nodal")


def nodal_gradient(sys: StiffnessSystem, u: np.ndarray) -> np.ndarray:
    """Area-weighted average of the P1 cell gradients at every node, (n, 2)."""
    mesh = sys.mesh
    gcell = np.einsum("tia,ti->ta", sys.grad, u[mesh.triangles])
    w = np.repeat(mesh.cell_area, 3)
    idx = mesh.triangles.ravel()
    gx = np.bincount(idx, np.repeat(gcell[:, 0], 3) * w, minlength=mesh.n_nodes)
    gy = np.bincount(idx, np.repeat(gcell[:, 1], 3) * w, minlength=mesh.n_nodes)
    wsum = np.bincount(idx, w, minlength=mesh.n_nodes)
    return np.column_stack([gx / wsum, gy / wsum])


def cell_gradient(sys: StiffnessSystem, u: np.ndarray) -> np.ndarray:
    return np.einsum("tia,ti->ta", sys.grad, u[sys.mesh.triangles])
