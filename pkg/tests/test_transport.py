import math

import numpy as np
import pytest
import shapely
from hypothesis import given, strategies as st

from helipatch.errors import CFLViolation, PerturbationInfeasible
from helipatch.helical_coeff import HelixParams
from helipatch.patch_solver import PatchProblem, seed_patch
from helipatch.transport import (Contour, MeshTools, Rasterizer, SemiLagrangian, equilibrate_contour,
                                 contour_from_state, level_set_contour, orbital_distance, perturb_contour,
                                 rotation_period, run, velocity_of)
from helipatch.patch_solver import maximize_patch, radial_seeds

P02 = HelixParams(1.0, 1.0, 0.5, 1.0, 0.2)


def circle(c, r, n=256):
    t = np.linspace(0, 2 * math.pi, n, endpoint=False)
    return Contour(np.column_stack([c[0] + r * np.cos(t), c[1] + r * np.sin(t)]))


@pytest.fixture(scope="module")
def pb32():
    return PatchProblem.build(P02, 1 / 32)


@pytest.fixture(scope="module")
def tools32(pb32):
    return MeshTools(pb32.mesh)


def test_velocity_zero(pb32):
    assert np.all(velocity_of(pb32, np.zeros(pb32.mesh.n_cells)) == 0)


def test_velocity_centred_patch_is_swirl(pb32):
    # K_H maps radial gradients to radial fluxes, so a centred disc gives a purely azimuthal flow
    om = Rasterizer(MeshTools(pb32.mesh)).omega(circle((0, 0), 0.3), 1.0)
    u = velocity_of(pb32, om)
    x = pb32.mesh.nodes
    r = np.linalg.norm(x, axis=1)
    inner = (r > 0.1) & (r < 0.8)
    radial = np.abs(np.sum(u * x, axis=1))[inner] / r[inner]
    assert radial.max() < 0.05 * np.linalg.norm(u, axis=1).max()
    # counterclockwise self-induced swirl for positive vorticity under grad-perp = (d2, -d1)
    assert np.all(x[inner, 0] * u[inner, 1] - x[inner, 1] * u[inner, 0] > 0)


def test_velocity_tangent_at_boundary():
    pb = PatchProblem.build(P02, 1 / 64)
    om = seed_patch(pb, (0.3, 0.2))
    u = velocity_of(pb, om)
    b = pb.mesh.boundary_mask
    n = pb.mesh.nodes[b] / np.linalg.norm(pb.mesh.nodes[b], axis=1)[:, None]
    assert np.abs(np.sum(u[b] * n, axis=1)).max() < 0.02 * np.linalg.norm(u, axis=1).max()


def test_semi_lagrangian_zero_field(pb32):
    eng = SemiLagrangian(pb32)
    st0 = eng.init(np.zeros(pb32.mesh.n_cells))
    st1 = eng.step(st0, 0.01)
    assert np.all(st1.omega == 0) and st1.t == 0.01


def test_semi_lagrangian_rigid_rotation(pb32):
    omega_rate = 2.0
    eng = SemiLagrangian(pb32, velocity=lambda x: omega_rate * np.column_stack([-x[:, 1], x[:, 0]]))
    om = seed_patch(pb32, (0.5, 0.0))
    state = eng.init(om)
    c0 = eng.centroid(state)
    dt = 0.9 * 0.5 * pb32.mesh.h / omega_rate
    T = 0.5
    n = int(math.ceil(T / dt))
    for _ in range(n):
        state = eng.step(state, T / n)
    ang = omega_rate * T
    expect = np.array([c0[0] * math.cos(ang) - c0[1] * math.sin(ang), c0[0] * math.sin(ang) + c0[1] * math.cos(ang)])
    assert np.linalg.norm(eng.centroid(state) - expect) < 2 * pb32.mesh.h
    assert state.omega @ pb32.mesh.cell_area == pytest.approx(1.0, rel=0.05)


def test_cfl_violation(pb32):
    eng = SemiLagrangian(pb32, velocity=lambda x: np.column_stack([-x[:, 1], x[:, 0]]))
    st0 = eng.init(seed_patch(pb32, (0.5, 0.0)))
    with pytest.raises(CFLViolation):
        eng.step(st0, 10 * pb32.mesh.h)


def test_orbital_distance_contours():
    c = circle((0.4, 0.1), 0.1)
    assert orbital_distance(c, c, cap=25.0) == pytest.approx(0.0, abs=1e-6)
    assert orbital_distance(c.rotated(math.pi / 7), c, cap=25.0) < 1e-3
    far = circle((0.0, 0.0), 0.1)
    # disjoint for every rotation: ||a - b||_2 = sqrt(2) ||a||_2
    norm = 25.0 * math.sqrt(c.area)
    assert orbital_distance(c, far, cap=25.0) == pytest.approx(math.sqrt(2) * norm, rel=0.05)


def test_orbital_distance_cellwise(pb32):
    om = seed_patch(pb32, (0.5, 0.0))
    assert orbital_distance(om, om, mesh=pb32.mesh) == 0.0
    d, ang = orbital_distance(om, om * 0, mesh=pb32.mesh, return_angle=True)
    assert d == pytest.approx(math.sqrt(np.sum(om**2 * pb32.mesh.cell_area)), rel=1e-12)


def test_perturb_contour_rules():
    c = circle((0.3, 0.0), 0.12)
    rng = np.random.default_rng(0)
    with pytest.raises(PerturbationInfeasible):
        perturb_contour(c, 0.6, rng)
    with pytest.raises(PerturbationInfeasible):
        perturb_contour(circle((0.9, 0.0), 0.09), 0.2, np.random.default_rng(0), R_star=1.0)
    same = perturb_contour(c, 0.0, rng)
    assert np.array_equal(same.points, c.points)
    p = perturb_contour(c, 0.1, np.random.default_rng(3))
    assert p.area == pytest.approx(c.area, rel=1e-12)
    assert p.polygon().is_valid


def _perturb_distances(d):
    c = circle((0.3, 0.0), 0.12, 512)
    return orbital_distance(perturb_contour(c, d, np.random.default_rng(5)), c, cap=1.0)


def test_perturbation_distance_scales_like_sqrt_delta():
    ratio = _perturb_distances(0.04) / _perturb_distances(0.02)
    assert ratio == pytest.approx(math.sqrt(2), rel=0.05)


@pytest.mark.xfail(strict=True, reason="the L2 distance of a boundary perturbation scales like sqrt(delta)")
def test_halving_delta_halves_distance():
    ratio = _perturb_distances(0.04) / _perturb_distances(0.02)
    assert ratio == pytest.approx(2.0, rel=0.1)


@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0.02, 0.3), st.floats(0.3, 1.0),
       st.floats(0, math.pi))
def test_rasterizer_matches_shapely(tools32, cx, cy, a, aspect, theta):
    t = np.linspace(0, 2 * math.pi, 200, endpoint=False)
    pts = np.column_stack([a * np.cos(t), a * aspect * np.sin(t)])
    c, s = math.cos(theta), math.sin(theta)
    con = Contour(pts @ np.array([[c, s], [-s, c]]) + [cx, cy])
    cells, areas = Rasterizer(tools32).fractions(con)
    ref = shapely.area(shapely.intersection(tools32.geoms, con.polygon()))
    full = np.zeros(len(ref))
    full[cells] = areas
    assert np.abs(full - ref).max() < 1e-12
    assert full.sum() == pytest.approx(con.area, rel=1e-10)


def test_contour_geometry():
    c = circle((0.1, -0.2), 0.3, 400)
    assert c.area == pytest.approx(math.pi * 0.09, rel=1e-3)
    assert np.allclose(c.centroid, [0.1, -0.2], atol=1e-12)
    cw = Contour(c.points[::-1])
    assert cw.area > 0
    r = c.resampled(n=100)
    assert len(r.points) == 100
    assert r.spacing.max() / r.spacing.min() < 1.01
    assert c.scaled_to_area(0.5).area == pytest.approx(0.5, rel=1e-12)


def test_level_set_contour_circle(pb32):
    r2 = np.sum(pb32.mesh.nodes**2, axis=1)
    c = level_set_contour(pb32.mesh, -r2, -0.25, near=(0, 0))
    assert c.area == pytest.approx(math.pi / 4, rel=5e-3)


def test_rotation_period():
    assert rotation_period(P02) == pytest.approx(2 * math.pi / (P02.alpha * math.log(5)))


@pytest.fixture(scope="module")
def equilibrium(pb32):
    best = maximize_patch(pb32, radial_seeds(1.0))
    con, hist = equilibrate_contour(pb32, contour_from_state(best.state), iters=40)
    return best, con, hist


def test_equilibration_converges(equilibrium, pb32):
    _, con, hist = equilibrium
    assert hist[-1] < hist[0]
    assert con.area * pb32.cap == pytest.approx(1.0, rel=1e-12)


def test_contour_run_conserves(equilibrium, pb32):
    _, con, _ = equilibrium
    T = 0.25 * rotation_period(P02)
    _, mon = run(pb32, con, T, scheme="contour")
    assert mon.drift("mass") < 1e-3
    assert mon.drift("I") < 1e-2
    assert mon.drift("E") < 1e-2
    assert mon.column("max").max() <= pb32.cap * (1 + 1e-12)
    assert mon.column("min").min() >= 0
