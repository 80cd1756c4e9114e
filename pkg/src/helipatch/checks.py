"""Built-in invariant checks shared by ``helipatch verify`` and the test suite.

Each check returns a :class:`Check` with the measured value, the threshold
and a pass flag; nothing here raises on a failed comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .disc_fem import apply_operator, assemble, build_disc_mesh, solve_dirichlet
from .green_struct import image_regular_part, regular_part, sample_pairs
from .helical_coeff import HelixParams, helical_field, identity_field
from .helix_lift import binormal_residual, curvature_torsion, HelixCurve, rotation_consistency


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: value={self.value:.6g} threshold={self.threshold:.6g}"

    def as_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "value": self.value,
                "threshold": self.threshold, "details": self.details}


def _order(hs, errs):
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])


def poisson_errors(hs=(1 / 16, 1 / 32, 1 / 64)):
    """Nodal max error and energy-norm error of the f=1 Poisson problem on the unit disc."""
    out = []
    for h in hs:
        mesh = build_disc_mesh(1.0, h)
        sys = assemble(mesh, identity_field())
        u = solve_dirichlet(sys, np.ones(mesh.n_nodes)).values
        e = u - (1 - np.sum(mesh.nodes**2, axis=1)) / 4
        out.append((mesh.h, float(np.abs(e).max()), float(np.sqrt(e @ (sys.A_full @ e)))))
    return np.array(out)


def check_poisson(hs=(1 / 16, 1 / 32, 1 / 64), tol=5e-3, min_order=1.8):
    data = poisson_errors(hs)
    i32 = int(np.argmin(np.abs(np.asarray(hs) - 1 / 32)))
    order_energy = _order(data[:, 0], data[:, 2])
    order_nodal = _order(data[:, 0], data[:, 1])
    ok = data[i32, 1] < tol and order_energy >= min_order and np.all(np.diff(data[:, 2]) < 0)
    return Check("poisson", bool(ok), float(data[i32, 1]), tol,
                 {"order_energy": order_energy, "order_nodal": order_nodal, "table": data.tolist()})


def operator_identity_error(h, k=1.0):
    """Relative L2 error of the discrete L_{K_H}|x|^2 against -4k^4/(k^2+|x|^2)^2."""
    mesh = build_disc_mesh(1.0, h)
    sys = assemble(mesh, helical_field(k, 1.0))
    r2 = np.sum(mesh.nodes**2, axis=1)
    Lu = apply_operator(sys, r2).values
    exact = -4 * k**4 / (k * k + r2) ** 2
    i = sys.interior
    m = sys.lumped_mass[i]
    err = math.sqrt(np.sum(m * (Lu[i] - exact[i]) ** 2) / np.sum(m * exact[i] ** 2))
    return err, Lu, mesh


def check_operator_identity(hs=(1 / 32, 1 / 64), tol=0.02):
    errs = [operator_identity_error(h)[0] for h in hs]
    ok = errs[-1] < tol and all(b <= a for a, b in zip(errs, errs[1:]))
    return Check("operator_identity", bool(ok), errs[-1], tol, {"errors": errs})


def check_green(h=1 / 64, n_pairs=50, seed=0, tol=5e-3):
    """Image-method oracle for K = Id and the symmetry defect for K = K_H."""
    rng = np.random.default_rng(seed)
    mesh = build_disc_mesh(1.0, h)
    sys_id = assemble(mesh, identity_field())
    K = identity_field()
    pairs = sample_pairs(mesh, n_pairs, rng)
    err = max(abs(regular_part(mesh, sys_id, K, i, j) - image_regular_part(mesh.nodes[i], mesh.nodes[j]))
              for i, j in pairs)
    KH = helical_field(1.0, 1.0)
    sys_h = assemble(mesh, KH)
    sym = max(abs(regular_part(mesh, sys_h, KH, i, j) - regular_part(mesh, sys_h, KH, j, i))
              for i, j in pairs)
    return Check("green_structure", bool(err < tol and sym < tol), max(err, sym), tol,
                 {"image_error": err, "symmetry_defect": sym})


def interior_pairs(n=20, radius=0.6, min_sep=0.25, seed=0):
    """Fixed physical point pairs inside |x| <= radius, reused across meshes."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        x, y = rng.uniform(-radius, radius, (2, 2))
        if max(np.linalg.norm(x), np.linalg.norm(y)) <= radius and np.linalg.norm(x - y) > min_sep:
            out.append((x, y))
    return out


def check_green_bound(hs=(1 / 32, 1 / 64), k=1.0, tol=0.10):
    """Interior max of S_{K_H} over fixed pairs, compared between h and h/2."""
    K = helical_field(k, 1.0)
    pairs = interior_pairs()
    bounds = []
    for h in hs:
        mesh = build_disc_mesh(1.0, h)
        sys = assemble(mesh, K)
        bounds.append(max(regular_part(mesh, sys, K, mesh.nearest_node(x), mesh.nearest_node(y))
                          for x, y in pairs))
    change = abs(bounds[-1] - bounds[-2]) / abs(bounds[-2])
    return Check("green_interior_bound", bool(change <= tol), change, tol, {"bounds": bounds})


def check_bathtub(eps=0.2, h=1 / 16, seeds=((0.9, 0.0), (0.3, 0.2)), slack=1e-12):
    from .patch_solver import PatchProblem, solve_patch

    params = HelixParams(1.0, 1.0, 0.5, 1.0, eps)
    problem = PatchProblem.build(params, h)
    worst_drop, worst_mass, worst_box = 0.0, 0.0, 0.0
    mu_margin = float("inf")
    for seed in seeds:
        masses, boxes = [], []

        def cb(it, omega, E):
            masses.append(abs(omega @ problem.mesh.cell_area - params.d))
            boxes.append(max(-omega.min(), omega.max() - problem.cap, 0.0))

        res = solve_patch(problem, seed, callback=cb)
        tr = np.asarray(res.energy_trace)
        worst_drop = max(worst_drop, float(np.max(tr[:-1] - tr[1:], initial=0.0)))
        worst_mass = max(worst_mass, max(masses, default=0.0))
        worst_box = max(worst_box, max(boxes, default=0.0))
        bound = -params.alpha * params.R_star**2 * params.log_inv_eps / 2
        mu_margin = min(mu_margin, res.state.mu - bound)
    ok = worst_drop <= slack and worst_mass < 1e-12 and worst_box == 0.0 and mu_margin >= 0
    return Check("bathtub", bool(ok), worst_drop, slack,
                 {"mass_error": worst_mass, "box_violation": worst_box, "mu_margin": mu_margin})


def check_helix(params=None, step=1e-4, tol=1e-6):
    params = params or HelixParams(1.0, 1.0, 1.0, 2.0)
    s = np.linspace(0, 2 * math.pi, 9)
    tau = np.linspace(0, 3, 4)
    res = binormal_residual(params, s, tau, step)
    ap, a = rotation_consistency(params)
    kappa, torsion = curvature_torsion(params, 0.7, step)
    curve = HelixCurve(params)
    geo = max(abs(kappa - curve.curvature), abs(torsion - curve.torsion))
    ok = res < tol and abs(ap - a) <= 1e-14 and geo < tol
    return Check("helix_geometry", bool(ok), max(res, geo), tol,
                 {"binormal_residual": res, "alpha_prime": ap, "alpha": a,
                  "curvature": kappa, "torsion": torsion})


def quick_suite():
    """Fast versions of the invariant checks (coarser meshes)."""
    return [
        check_poisson(),
        check_operator_identity((1 / 16, 1 / 32), tol=0.02),
        check_green(h=1 / 32, n_pairs=10),
        check_green_bound((1 / 16, 1 / 32)),
        check_bathtub(),
        check_helix(),
    ]
