"""Anisotropic Green's function: leading logarithm plus bounded regular part.

The discrete Green's column for a source node is the Dirichlet solve with a
single-node load; subtracting the closed-form leading part leaves the regular
part S_K, sampled away from the diagonal.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .disc_fem import DiscMesh, ScalarField, StiffnessSystem
from .errors import BoundarySource, CoincidentPoints, TooClose
from .helical_coeff import factor_T

EXCLUSION = 3.0  # in units of the mesh spacing h


def gamma(z):
    """Fundamental solution of -Laplace in the plane, -(1/2pi) ln|z|."""
    z = np.asarray(z, float)
    return -np.log(np.linalg.norm(z, axis=-1)) / (2 * math.pi)


def leading_part(x, y, K) -> float:
    """Symmetrized anisotropic logarithm G0(x, y) for a coefficient field K.

    Both the prefactor and the argument are averages over the endpoints, so
    swapping x and y gives a bit-identical result.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if np.linalg.norm(x - y) < 1e-14:
        raise CoincidentPoints("x and y coincide", x=x.tolist(), y=y.tolist())
    Kx, Ky = K(x), K(y)
    Tx, Ty = factor_T(Kx), factor_T(Ky)
    dx = np.sqrt(Kx[0, 0] * Kx[1, 1] - Kx[0, 1] * Kx[1, 0])
    dy = np.sqrt(Ky[0, 0] * Ky[1, 1] - Ky[0, 1] * Ky[1, 0])
    pref = (1.0 / dx + 1.0 / dy) / 2
    z = ((Tx + Ty) / 2) @ (x - y)
    return float(pref * gamma(z))


def image_regular_part(x, y, R_star=1.0) -> float:
    """Regular part for K = Id on the disc of radius R_star (method of images).

    G = Gamma(x - y) + S with S = (1/2pi) ln(|y| |x - y*| / R), y* = R^2 y/|y|^2;
    at y = 0 this reduces to (1/2pi) ln R.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    ny = np.linalg.norm(y)
    if ny == 0:
        return math.log(R_star) / (2 * math.pi)
    ystar = R_star**2 * y / ny**2
    return math.log(ny * np.linalg.norm(x - ystar) / R_star) / (2 * math.pi)


@dataclass(frozen=True)
class GreenSample:
    """One evaluation of G(x, y); ``g`` is stored as ``g0 + s``."""

    x: tuple
    y: tuple
    g0: float
    s: float

    @property
    def g(self) -> float:
        return self.g0 + self.s

    def row(self):
        return (self.x[0], self.x[1], self.y[0], self.y[1], self.g0, self.s, self.g)


def greens_column(mesh: DiscMesh, sys: StiffnessSystem, y: int) -> ScalarField:
    """Discrete G(., y) for an interior source node, cached on ``sys``.

    The source is the nodal delta e_y / m_y (unit lumped mass), whose load
    vector is exactly e_y.
    """
    y = int(y)
    if mesh.boundary_mask[y]:
        raise BoundarySource("source node lies on the boundary", node=y)
    cache = sys.__dict__.setdefault("_green_cache", {})
    key = (mesh.uid, y)
    if key not in cache:
        b = np.zeros(mesh.n_nodes)
        b[y] = 1.0
        u = sys.solve_load(b, method="direct")
        u.setflags(write=False)
        cache[key] = u
    return ScalarField(mesh, cache[key], "nodal")


def regular_part(mesh: DiscMesh, sys: StiffnessSystem, K, x: int, y: int) -> float:
    """Numerical S_K(x, y) = G_h(x, y) - G0(x, y) for interior nodes at distance >= 3h."""
    px, py = mesh.nodes[int(x)], mesh.nodes[int(y)]
    dist = float(np.linalg.norm(px - py))
    if dist < EXCLUSION * mesh.h:
        raise TooClose(f"|x-y| = {dist:.3g} < {EXCLUSION}h", h=mesh.h)
    G = greens_column(mesh, sys, y).values[int(x)]
    return float(G - leading_part(px, py, K))


def sample(mesh: DiscMesh, sys: StiffnessSystem, K, x: int, y: int) -> GreenSample:
    px, py = mesh.nodes[int(x)], mesh.nodes[int(y)]
    s = regular_part(mesh, sys, K, x, y)
    return GreenSample(tuple(map(float, px)), tuple(map(float, py)), leading_part(px, py, K), s)


def sample_pairs(mesh: DiscMesh, n: int, rng: np.random.Generator, max_radius=0.8,
                 min_radius=0.0):
    """``n`` random interior node pairs with |x|,|y| in [min_radius, max_radius]*R and |x-y| >= 3h."""
    R = mesh.R_star
    r = np.linalg.norm(mesh.nodes, axis=1)
    pool = np.flatnonzero(~mesh.boundary_mask & (r <= max_radius * R) & (r >= min_radius * R))
    pairs = []
    while len(pairs) < n:
        i, j = rng.choice(pool, 2, replace=False)
        if np.linalg.norm(mesh.nodes[i] - mesh.nodes[j]) >= EXCLUSION * mesh.h:
            pairs.append((int(i), int(j)))
    return pairs


def node_at(mesh: DiscMesh, point) -> int:
    """Interior node nearest to ``point``."""
    return int(mesh.nearest_node(point))


def symmetry_defects(mesh, sys, K, pairs) -> np.ndarray:
    """|S(x, y) - S(y, x)| for each pair (solves both columns)."""
    return np.array([abs(regular_part(mesh, sys, K, i, j) - regular_part(mesh, sys, K, j, i))
                     for i, j in pairs])


def segment_profile(mesh, sys, K, y: int, direction, radii):
    """G and S along a ray of targets from source y; used for the smoothness check."""
    p0 = mesh.nodes[int(y)]
    u = np.asarray(direction, float) / np.linalg.norm(direction)
    G = greens_column(mesh, sys, y).values
    out = []
    for rad in radii:
        x = node_at(mesh, p0 + rad * u)
        d = np.linalg.norm(mesh.nodes[x] - p0)
        g0 = leading_part(mesh.nodes[x], p0, K)
        out.append((d, G[x], g0, G[x] - g0))
    return np.array(out)


def write_samples_csv(samples, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["xi", "yi", "xj", "yj", "g0", "s", "g"])
        for smp in samples:
            w.writerow([repr(float(v)) for v in smp.row()])


def read_samples_csv(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [GreenSample((float(r["xi"]), float(r["yi"])), (float(r["xj"]), float(r["yj"])),
                        float(r["g0"]), float(r["s"])) for r in rows]
