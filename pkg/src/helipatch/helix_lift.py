"""Helical filament geometry and the lift of a planar patch to a helical tube.

The filament is the traveling-rotating helix of pitch k through (r_*, 0, 0);
the planar vorticity is carried into 3D along the screw motion H_rho.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import mpmath
import numpy as np

from .errors import EmptySupport
from .helical_coeff import HelixParams


@dataclass(frozen=True)
class HelixCurve:
    """Left-handed helix (k > 0) moving by the binormal law."""

    params: HelixParams

    @property
    def sigma(self) -> float:
        p = self.params
        return math.sqrt(p.k**2 + p.r_star**2)

    def __call__(self, s, tau=0.0):
        return helix_point(s, tau, self.params)

    @property
    def curvature(self) -> float:
        p = self.params
        return p.r_star / (p.k**2 + p.r_star**2)

    @property
    def torsion(self) -> float:
        p = self.params
        return p.k / (p.k**2 + p.r_star**2)


def helix_point(s, tau, params: HelixParams) -> np.ndarray:
    """Point(s) of the filament at arclength ``s`` and rescaled time ``tau``."""
    s = np.asarray(s, float)
    tau = np.asarray(tau, float)
    sig = math.sqrt(params.k**2 + params.r_star**2)
    phase = (-s - params.a1 * tau) / sig
    r = params.r_star
    return np.stack(np.broadcast_arrays(r * np.cos(phase), r * np.sin(phase),
                                        (params.k * s - params.b1 * tau) / sig), axis=-1)


def _derivatives(params, s, tau, step):
    g = lambda ds, dt: helix_point(s + ds, tau + dt, params)  # noqa: E731
    gs = (g(step, 0) - g(-step, 0)) / (2 * step)
    gss = (g(step, 0) - 2 * g(0, 0) + g(-step, 0)) / step**2
    gt = (g(0, step) - g(0, -step)) / (2 * step)
    return gs, gss, gt


def binormal_residual(params: HelixParams, s_grid, tau_grid, step: float = 1e-4) -> float:
    """max |d_tau gamma - (d/4pi) d_s gamma x d_ss gamma| over the grid, by central differences."""
    S, Tau = np.meshgrid(np.asarray(s_grid, float), np.asarray(tau_grid, float), indexing="ij")
    gs, gss, gt = _derivatives(params, S.ravel(), Tau.ravel(), step)
    rhs = params.d / (4 * math.pi) * np.cross(gs, gss)
    return float(np.max(np.linalg.norm(gt - rhs, axis=-1)))


def arclength_speed(params: HelixParams, s_grid, step: float = 1e-4) -> np.ndarray:
    """|d_s gamma| by central differences (should be 1)."""
    gs, _, _ = _derivatives(params, np.asarray(s_grid, float), 0.0, step)
    return np.linalg.norm(gs, axis=-1)


def filament_speed(params: HelixParams, s: float = 0.0, step: float = 1e-4) -> float:
    """|d_tau gamma| by central differences."""
    _, _, gt = _derivatives(params, np.asarray([s], float), 0.0, step)
    return float(np.linalg.norm(gt))


def curvature_torsion(params: HelixParams, s: float = 0.0, step: float = 1e-4, dps: int = 40):
    """Curvature and torsion from finite differences of the parametrization.

    The third derivative at step 1e-4 loses about 12 digits to cancellation,
    so the stencils are evaluated in mpmath at ``dps`` digits.  Torsion uses
    the convention dB/ds = +torsion * N, under which the left-handed helix
    (k > 0) has positive torsion k/(k^2 + r_*^2).
    """
    with mpmath.workdps(dps):
        k, r = mpmath.mpf(params.k), mpmath.mpf(params.r_star)
        sig = mpmath.sqrt(k * k + r * r)
        h = mpmath.mpf(step)
        s0 = mpmath.mpf(s)

        def g(t):
            ph = -t / sig
            return mpmath.matrix([r * mpmath.cos(ph), r * mpmath.sin(ph), k * t / sig])

        pts = {j: g(s0 + j * h) for j in (-2, -1, 0, 1, 2)}
        d1 = (pts[1] - pts[-1]) / (2 * h)
        d2 = (pts[1] - 2 * pts[0] + pts[-1]) / h**2
        d3 = (pts[2] - 2 * pts[1] + 2 * pts[-1] - pts[-2]) / (2 * h**3)
        c = _cross(d1, d2)
        nc = mpmath.norm(c)
        kappa = nc / mpmath.norm(d1) ** 3
        torsion = -(c[0] * d3[0] + c[1] * d3[1] + c[2] * d3[2]) / nc**2
        return float(kappa), float(torsion)


def _cross(a, b):
    return mpmath.matrix([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
                          a[0] * b[1] - a[1] * b[0]])


def rotation_consistency(params: HelixParams):
    """(alpha', alpha): rotation rate of the helix trace in the plane vs the planar coefficient."""
    sig = math.sqrt(params.k**2 + params.r_star**2)
    alpha_prime = (params.a1 + params.b1 / params.k) / sig
    return alpha_prime, params.alpha


def helical_map(points, rho, k: float) -> np.ndarray:
    """Apply H_rho: rotate clockwise by rho about the axis and lift by k*rho."""
    p = np.asarray(points, float)
    c, s = math.cos(rho), math.sin(rho)
    out = np.empty(p.shape[:-1] + (3,))
    out[..., 0] = p[..., 0] * c + p[..., 1] * s
    out[..., 1] = -p[..., 0] * s + p[..., 1] * c
    out[..., 2] = (p[..., 2] if p.shape[-1] == 3 else 0.0) + k * rho
    return out


def zeta_field(points, k: float) -> np.ndarray:
    p = np.asarray(points, float)
    return np.stack([p[..., 1], -p[..., 0], np.full(p.shape[:-1], float(k))], axis=-1)


def distance_to_helix(points, params: HelixParams, tau: float = 0.0, n_grid: int = 64) -> np.ndarray:
    """Euclidean distance from 3D points to the filament at time ``tau``.

    The search runs over one turn around the point's own height: a coarse
    grid followed by Newton steps on the squared distance.
    """
    p = np.atleast_2d(np.asarray(points, float))
    sig = math.sqrt(params.k**2 + params.r_star**2)
    # s with the same height as the point
    s_mid = (p[:, 2] + params.b1 * tau / sig) * sig / params.k
    span = 2 * math.pi * sig
    offs = np.linspace(-span / 2, span / 2, n_grid)
    S = s_mid[:, None] + offs[None, :]
    d2 = np.sum((helix_point(S, tau, params) - p[:, None, :]) ** 2, axis=-1)
    s = S[np.arange(len(p)), np.argmin(d2, axis=1)]
    step = span / (n_grid - 1)
    for _ in range(30):
        # derivatives of the unit-speed curve: |g'| = 1
        ph = (-s - params.a1 * tau) / sig
        r = params.r_star
        diff = helix_point(s, tau, params) - p
        g1 = np.stack([r * np.sin(ph) / sig, -r * np.cos(ph) / sig, np.full_like(s, params.k / sig)], -1)
        g2 = np.stack([-r * np.cos(ph) / sig**2, -r * np.sin(ph) / sig**2, np.zeros_like(s)], -1)
        f1 = np.sum(diff * g1, -1)
        f2 = 1.0 + np.sum(diff * g2, -1)
        ds = np.where(f2 > 0, -f1 / np.where(f2 > 0, f2, 1.0), -np.sign(f1) * step / 4)
        ds = np.clip(ds, -step, step)
        s = s + ds
        if np.max(np.abs(ds)) < 1e-15 * max(1.0, span):
            break
    return np.linalg.norm(helix_point(s, tau, params) - p, axis=-1)


@dataclass
class HelicalTube:
    """Point-cloud sample of the helical vorticity tube."""

    params: HelixParams
    points: np.ndarray  # (n, 3)
    w: np.ndarray
    vectors: np.ndarray  # (n, 3), (w/k) zeta
    dist: np.ndarray
    level: np.ndarray  # index of rho for each sample
    rhos: np.ndarray
    weights: np.ndarray  # w * planar cell area
    level_circulation: np.ndarray = field(default=None)
    level_mean_dist: np.ndarray = field(default=None)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["x1", "x2", "x3", "w", "v1", "v2", "v3", "dist_to_helix"])
            for pt, w, v, d in zip(self.points, self.w, self.vectors, self.dist):
                out.writerow([repr(float(x)) for x in (*pt, w, *v, d)])

    def summary(self) -> dict:
        return {
            "n_samples": int(len(self.w)),
            "n_levels": int(len(self.rhos)),
            "circulation_min": float(self.level_circulation.min()),
            "circulation_max": float(self.level_circulation.max()),
            "mean_dist_to_helix": float(self.level_mean_dist.mean()),
        }


def lift_patch(state, rho_samples: int = 64, levels=None) -> HelicalTube:
    """Sample the helical tube generated by the active cells of ``state``.

    ``levels`` are the screw parameters rho; the default spreads
    ``rho_samples`` values over one turn.  Each level is an isometric copy of
    the planar cross-section, so the circulation of every level equals the
    planar mass and distances to the helix are level independent.
    """
    params = state.problem.params
    mesh = state.problem.mesh
    omega = np.asarray(state.omega, float)
    active = np.flatnonzero(omega > 0)
    if len(active) == 0:
        raise EmptySupport("patch has no active cells")
    rhos = (np.linspace(0.0, 2 * math.pi, int(rho_samples), endpoint=False)
            if levels is None else np.asarray(list(levels), float))
    base = np.column_stack([mesh.centroids[active], np.zeros(len(active))])
    w = omega[active]
    mass = w * mesh.cell_area[active]
    pts, lev = [], []
    for i, rho in enumerate(rhos):
        pts.append(helical_map(base, rho, params.k))
        lev.append(np.full(len(active), i))
    points = np.concatenate(pts)
    level = np.concatenate(lev)
    ww = np.tile(w, len(rhos))
    vec = (ww / params.k)[:, None] * zeta_field(points, params.k)
    dist = distance_to_helix(points, params)
    weights = np.tile(mass, len(rhos))
    circ = np.bincount(level, weights, minlength=len(rhos))
    mean_d = np.bincount(level, weights * dist, minlength=len(rhos)) / circ
    return HelicalTube(params, points, ww, vec, dist, level, rhos, weights, circ, mean_d)


def tube_vorticity(state, points) -> np.ndarray:
    """Helical extension of the planar field: w(x) = omega(H_{-x3/k} x) at height zero."""
    p = np.atleast_2d(np.asarray(points, float))
    k = state.problem.params.k
    mesh = state.problem.mesh
    out = np.zeros(len(p))
    for i, x in enumerate(p):
        q = helical_map(x, -x[2] / k, k)
        cell = mesh.locate(q[None, :2])[0]
        if cell >= 0:
            out[i] = state.omega[cell]
    return out
