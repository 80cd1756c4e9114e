"""Rotating vortex patches as constrained energy maximizers.

The admissible class is the set of cellwise vorticities with total mass ``d``
and values in ``[0, 1/eps^2]``.  The energy

    E(w) = 1/2 <w, G w> - (alpha/2) ln(1/eps) <|x|^2, w>

is increased monotonically by the bathtub iteration: each step fills the
cells with the largest values of the first variation up to the mass budget.
Because the first variation is used exactly (P1 potential averaged per cell,
|x|^2 integrated per cell) and the quadratic part is positive, no step can
lower the energy.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .disc_fem import DiscMesh, ScalarField, StiffnessSystem, assemble, build_disc_mesh
from .errors import EmptySupport, InfeasibleMass, UnderResolved
from .helical_coeff import HelixParams, eval_KH, helical_field

# minimum number of triangles the patch support must cover
MIN_CELLS_PER_PATCH = 20
# mean triangle area of the ring mesh is about (pi/6) h^2
RING_CELL_AREA = math.pi / 6


class PatchProblem:
    """Mesh, assembled helical operator and per-cell geometry for one (params, h)."""

    def __init__(self, params: HelixParams, mesh: DiscMesh, system: StiffnessSystem | None = None):
        if params.eps is None:
            raise ValueError("params.eps is required")
        self.params = params
        self.mesh = mesh
        self.system = system if system is not None else assemble(mesh, helical_field(params.k, params.R_star))
        self.first_moment, self.second_moment = mesh.cell_moments()
        self.centroids = mesh.centroids
        self.r2_nodes = np.sum(mesh.nodes**2, axis=1)
        self.r2_cell_avg = self.second_moment / mesh.cell_area
        self.r2_vertex_avg = self.r2_nodes[mesh.triangles].mean(axis=1)
        self.cap = 1.0 / params.eps**2
        if params.d * params.eps**2 >= mesh.area:
            raise InfeasibleMass("d eps^2 exceeds the mesh area", d=params.d, eps=params.eps, area=mesh.area)

    @classmethod
    def build(cls, params: HelixParams, h: float | None = None):
        h = resolution_h(params) if h is None else h
        return cls(params, build_disc_mesh(params.R_star, h))

    @property
    def background_coeff(self):
        """alpha ln(1/eps), the rotation rate of the patch."""
        return self.params.alpha * self.params.log_inv_eps

    def with_params(self, params: HelixParams) -> "PatchProblem":
        if params.k != self.params.k or params.R_star != self.params.R_star:
            raise ValueError("k and R_star fix the operator; build a new problem")
        return PatchProblem(params, self.mesh, self.system)

    def check_resolution(self, min_cells=MIN_CELLS_PER_PATCH):
        support = self.params.d * self.params.eps**2
        cells = support / float(np.mean(self.mesh.cell_area))
        if cells < min_cells:
            raise UnderResolved(
                f"patch support covers ~{cells:.1f} cells (< {min_cells}); refine h",
                eps=self.params.eps, h=self.mesh.h)
        return cells


def resolution_h(params: HelixParams, cells_per_patch=60, h_max=1 / 16):
    """Mesh spacing giving about ``cells_per_patch`` triangles inside the support.

    Scaling h with eps keeps the relative discretization error of the patch
    fixed across an eps sweep.
    """
    support = params.d * params.eps**2
    h = math.sqrt(support / (cells_per_patch * RING_CELL_AREA))
    return min(h, h_max, params.R_star / 4.001)


# -- functionals --------------------------------------------------------------


def potential(problem: PatchProblem, omega) -> np.ndarray:
    """Nodal G_{K_H} omega (direct solve)."""
    b = problem.system.load(np.asarray(omega, float), kind="cellwise")
    return problem.system.solve_load(b, method="direct")


def kinetic_energy(problem: PatchProblem, omega, phi=None) -> float:
    omega = np.asarray(omega, float)
    if phi is None:
        phi = potential(problem, omega)
    b = problem.system.load(omega, kind="cellwise")
    return 0.5 * float(b @ phi)


def moment_of_inertia(problem: PatchProblem, omega) -> float:
    return 0.5 * float(np.asarray(omega, float) @ problem.second_moment)


def energy(problem: PatchProblem, omega, phi=None) -> float:
    """Kinetic energy minus alpha ln(1/eps) times the moment of inertia."""
    return kinetic_energy(problem, omega, phi) - problem.background_coeff * moment_of_inertia(problem, omega)


def stream_deviation(problem: PatchProblem, omega, phi=None) -> ScalarField:
    """Nodal G omega - (alpha |x|^2 / 2) ln(1/eps); the multiplier is not subtracted."""
    if phi is None:
        phi = potential(problem, omega)
    return ScalarField(problem.mesh, phi - 0.5 * problem.background_coeff * problem.r2_nodes, "nodal")


def cell_values(problem: PatchProblem, psi: ScalarField) -> np.ndarray:
    """Exact per-cell average of the stream deviation (first variation of E)."""
    avg = psi.values[problem.mesh.triangles].mean(axis=1)
    # vertex mean is exact for the P1 part; swap in the exact |x|^2 average
    return avg + 0.5 * problem.background_coeff * (problem.r2_vertex_avg - problem.r2_cell_avg)


# -- bathtub -------------------------------------------------------------------


def bathtub_fill(weights, areas, mass, cap):
    """Maximize sum(w_T a_T omega_T) subject to sum(a_T omega_T) = mass, 0 <= omega <= cap.

    Cells are taken in order of decreasing weight (ties: lower index first);
    the last cell taken is filled fractionally so the mass is exact.  Returns
    ``(omega, mu, last)`` where ``mu`` is the weight of the last filled cell.
    """
    weights = np.asarray(weights, float)
    areas = np.asarray(areas, float)
    if mass > cap * areas.sum() * (1 + 1e-15):
        raise InfeasibleMass("mass budget exceeds cap * area", mass=mass, capacity=cap * areas.sum())
    order = np.lexsort((np.arange(len(weights)), -weights))
    cum = np.cumsum(areas[order] * cap)
    n_full = int(np.searchsorted(cum, mass, side="right"))
    omega = np.zeros_like(weights)
    omega[order[:n_full]] = cap
    filled = cum[n_full - 1] if n_full else 0.0
    rest = mass - filled
    if n_full < len(order) and rest > 0:
        last = order[n_full]
        omega[last] = rest / areas[last]
    else:
        last = order[n_full - 1]
    return omega, float(weights[last]), int(last)


def bathtub_step(problem: PatchProblem, omega, phi=None):
    """One monotone ascent step; returns (omega', mu, cell weights used)."""
    psi = stream_deviation(problem, omega, phi)
    w = cell_values(problem, psi)
    new, mu, _ = bathtub_fill(w, problem.mesh.cell_area, problem.params.d, problem.cap)
    return new, mu, w


def seed_patch(problem: PatchProblem, seed_point) -> np.ndarray:
    """Uniform patch of the right area around ``seed_point``, mass exact."""
    dist = np.linalg.norm(problem.centroids - np.asarray(seed_point, float), axis=1)
    omega, _, _ = bathtub_fill(-dist, problem.mesh.cell_area, problem.params.d, problem.cap)
    return omega


# -- results -------------------------------------------------------------------


@dataclass
class PatchState:
    problem: PatchProblem
    omega: np.ndarray
    mu: float
    energy: float
    psi: np.ndarray

    @property
    def params(self):
        return self.problem.params

    @property
    def mass(self):
        return float(self.omega @ self.problem.mesh.cell_area)

    def field(self) -> ScalarField:
        return ScalarField(self.problem.mesh, self.omega, "cellwise")


@dataclass
class PatchDiagnostics:
    centroid: np.ndarray
    support_radius: float
    diameter: float
    second_moment: np.ndarray
    energy: float
    moment_I: float
    mu: float
    n_active: int

    def eig(self):
        return np.linalg.eigvalsh(self.second_moment)

    def as_dict(self):
        ev = self.eig()
        return {
            "centroid": [float(c) for c in self.centroid],
            "support_radius": self.support_radius,
            "diameter": self.diameter,
            "second_moment": self.second_moment.tolist(),
            "second_moment_eigenvalues": ev.tolist(),
            "energy": self.energy,
            "moment_I": self.moment_I,
            "mu": self.mu,
            "n_active": self.n_active,
        }


@dataclass
class PatchResult:
    state: PatchState
    diagnostics: PatchDiagnostics
    energy_trace: list
    mu_trace: list
    converged: bool
    iterations: int
    seconds: float = 0.0
    flags: list = field(default_factory=list)


def _pairwise_max(points):
    if len(points) < 2:
        return 0.0
    from scipy.spatial import ConvexHull
    from scipy.spatial.distance import pdist

    if len(points) > 3:
        try:
            points = points[ConvexHull(points).vertices]
        except Exception:  # collinear sets
            pass
    return float(pdist(points).max())


def diagnostics(state: PatchState) -> PatchDiagnostics:
    """Centroid, diameter, covariance and moments of a converged patch."""
    pb = state.problem
    mesh = pb.mesh
    omega = state.omega
    active = np.flatnonzero(omega > 0)
    if len(active) == 0:
        raise EmptySupport("no active cell")
    mass = float(omega @ mesh.cell_area)
    X = (omega @ pb.first_moment) / mass
    # covariance from exact per-cell second moments about X
    v = mesh.nodes[mesh.triangles[active]] - X
    a = mesh.cell_area[active]
    # integral of (x-X)(x-X)^t over a triangle with vertices v_i
    s = v.sum(axis=1)
    outer = np.einsum("tia,tib->tab", v, v) + np.einsum("ta,tb->tab", s, s)
    cov_cells = a[:, None, None] * outer / 12.0
    cov = np.einsum("t,tab->ab", omega[active], cov_cells) / mass
    diam = _pairwise_max(pb.centroids[active])
    if len(active) == 1:
        tri = mesh.nodes[mesh.triangles[active[0]]]
        diam = _pairwise_max(tri)
    return PatchDiagnostics(
        centroid=X,
        support_radius=float(np.linalg.norm(X)),
        diameter=diam,
        second_moment=cov,
        energy=state.energy,
        moment_I=moment_of_inertia(pb, omega),
        mu=state.mu,
        n_active=len(active),
    )


def solve_patch(problem: PatchProblem, seed_point=None, tol=1e-10, max_iter=500,
                omega0=None, callback=None) -> PatchResult:
    """Bathtub fixed-point iteration from a seed disc.

    Stops when the relative energy change is below ``tol`` and the support
    changes by less than one cell area.  On hitting ``max_iter`` the last
    (highest-energy) iterate is returned with ``converged=False``.
    """
    t0 = time.perf_counter()
    mesh = problem.mesh
    R = problem.params.R_star
    if seed_point is None:
        seed_point = (0.9 * R, 0.0)
    omega = seed_patch(problem, seed_point) if omega0 is None else np.array(omega0, float)
    phi = potential(problem, omega)
    E = energy(problem, omega, phi)
    energies, mus = [E], []
    converged = False
    cell_tol = mesh.cell_area.max()
    it = 0
    mu = float("nan")
    for it in range(1, max_iter + 1):
        new, mu, _ = bathtub_step(problem, omega, phi)
        new_phi = potential(problem, new)
        E_new = energy(problem, new, new_phi)
        changed = float(mesh.cell_area[(new > 0) != (omega > 0)].sum())
        energies.append(E_new)
        mus.append(mu)
        omega, phi = new, new_phi
        if callback is not None:
            callback(it, omega, E_new)
        if abs(E_new - E) < tol * abs(E) and changed < cell_tol:
            converged = True
            E = E_new
            break
        E = E_new
    # multiplier consistent with the returned iterate
    psi = stream_deviation(problem, omega, phi)
    _, mu, _ = bathtub_fill(cell_values(problem, psi), mesh.cell_area, problem.params.d, problem.cap)
    state = PatchState(problem, omega, mu, E, psi.values)
    flags = [] if converged else ["MaxIterExceeded"]
    return PatchResult(state, diagnostics(state), energies, mus, converged, it,
                       time.perf_counter() - t0, flags)


def radial_seeds(R_star, angle=0.0, n=10):
    """Seeds on the ray at ``angle``: radii 0, R/n, ..., (n-1)R/n."""
    r = np.arange(n) * R_star / n
    return [(float(x * math.cos(angle)), float(x * math.sin(angle))) for x in r]


def maximize_patch(problem: PatchProblem, seeds, tol=1e-10, max_iter=500) -> PatchResult:
    """Run :func:`solve_patch` from each seed and keep the highest energy.

    A bathtub step moves the support by less than a cell once the drift of
    the background potential is weak, so single runs stall at mesh-pinned
    fixed points.  Restarting along a ray covers the rotation orbit.
    """
    best = None
    for seed in seeds:
        res = solve_patch(problem, seed, tol=tol, max_iter=max_iter)
        if best is None or res.diagnostics.energy > best.diagnostics.energy:
            best = res
    return best


def ellipse_prediction(params: HelixParams, X) -> np.ndarray:
    """Covariance of the limiting elliptical cross-section centred at X.

    The support tends to X + eps T_X^{-1} B_{c*}, whose uniform covariance is
    eps^2 (c*^2 / 4) K_H(X).
    """
    return params.eps**2 * params.c_star**2 / 4.0 * eval_KH(np.asarray(X, float), params.k)


# -- sweep ---------------------------------------------------------------------


@dataclass
class SweepRow:
    eps: float
    h: float
    energy: float
    mu: float
    support_radius: float
    diameter: float
    moment_I: float
    eig_min: float
    eig_max: float
    converged: bool
    iterations: int
    n_active: int
    error: str = ""

    def as_dict(self):
        return dict(self.__dict__)


@dataclass
class SweepTable:
    rows: list
    energy_slope: float
    mu_slope: float
    diameter_slope: float
    results: list = field(default_factory=list, repr=False)


def _fit_slope(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 2:
        return float("nan")
    return float(np.polyfit(x, y, 1)[0])


def epsilon_sweep(params_base: HelixParams, eps_list, seed_point=None, h_rule=resolution_h,
                  tol=1e-10, max_iter=500, log=None, multistart=True) -> SweepTable:
    """Solve for each eps and fit E, mu against ln(1/eps) and ln(diam) against ln(eps).

    With ``multistart`` the seeds are the radial ladder through ``seed_point``
    and the best energy is kept; otherwise a single run from ``seed_point``.
    """
    rows, results = [], []
    eps_list = list(eps_list)
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    for eps in eps_list:
        params = params_base.with_eps(eps)
        h = h_rule(params)
        try:
            problem = PatchProblem.build(params, h)
            problem.check_resolution()
            if multistart:
                sp = seed_point if seed_point is not None else (1.0, 0.0)
                seeds = radial_seeds(params.R_star, math.atan2(sp[1], sp[0]))
                res = maximize_patch(problem, seeds, tol=tol, max_iter=max_iter)
            else:
                res = solve_patch(problem, seed_point, tol=tol, max_iter=max_iter)
            dg = res.diagnostics
            ev = dg.eig()
            rows.append(SweepRow(eps, problem.mesh.h, dg.energy, dg.mu, dg.support_radius, dg.diameter,
                                 dg.moment_I, float(ev[0]), float(ev[1]), res.converged,
                                 res.iterations, dg.n_active))
            results.append(res)
        except Exception as exc:  # keep sweeping; the row records the failure
            rows.append(SweepRow(eps, h, *([float("nan")] * 7), False, 0, 0, error=repr(exc)))
            results.append(None)
        if log is not None:
            log(rows[-1])
    ok = [r for r in rows if not r.error]
    L = [-math.log(r.eps) for r in ok]
    return SweepTable(
        rows,
        _fit_slope(L, [r.energy for r in ok]),
        _fit_slope(L, [r.mu for r in ok]),
        _fit_slope([math.log(r.eps) for r in ok], [math.log(r.diameter) for r in ok]),
        results,
    )
