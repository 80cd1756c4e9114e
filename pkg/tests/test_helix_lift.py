import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helipatch.errors import EmptySupport
from helipatch.helical_coeff import HelixParams
from helipatch.helix_lift import (HelixCurve, arclength_speed, binormal_residual, curvature_torsion,
                                  distance_to_helix, filament_speed, helical_map, helix_point, lift_patch,
                                  rotation_consistency, tube_vorticity, zeta_field)
from helipatch.patch_solver import PatchProblem, PatchState, maximize_patch, radial_seeds, seed_patch, solve_patch

P111 = HelixParams(1.0, 1.0, 1.0, 2.0)
S = np.linspace(0, 2 * math.pi, 13)
TAU = np.linspace(0, 4, 5)


def test_helix_point_origin_and_coefficients():
    assert np.allclose(helix_point(0.0, 0.0, P111), [1.0, 0.0, 0.0], atol=0)
    assert P111.a1 == pytest.approx(1 / (8 * math.pi), rel=1e-15)
    assert P111.b1 == pytest.approx(1 / (8 * math.pi), rel=1e-15)
    assert P111.a1 == pytest.approx(0.039789, abs=1e-6)


def test_arclength_parametrization():
    assert np.abs(arclength_speed(P111, S) - 1).max() < 1e-8


def test_binormal_flow_law():
    assert binormal_residual(P111, S, TAU, 1e-4) < 1e-6


def test_binormal_residual_second_order():
    r1 = binormal_residual(P111, S, TAU, 1e-2)
    r2 = binormal_residual(P111, S, TAU, 5e-3)
    assert r1 / r2 == pytest.approx(4.0, rel=0.05)


def test_circle_limit_speed():
    p = HelixParams(1e-6, 1.0, 0.5, 1.0)
    assert filament_speed(p) == pytest.approx(1.0 / (4 * math.pi * 0.5), rel=1e-6)


@pytest.mark.parametrize("k,d,r", [(1.0, 1.0, 0.5), (3.0, 2.0, 0.7), (0.4, 1.5, 0.9)])
def test_rotation_consistency(k, d, r):
    ap, a = rotation_consistency(HelixParams(k, d, r, 1.0))
    assert abs(ap - a) <= 1e-14 * max(1.0, a)


def test_rotation_consistency_value_and_linearity():
    ap, _ = rotation_consistency(HelixParams(1.0, 1.0, 0.5, 1.0))
    assert ap == pytest.approx(1 / (4 * math.pi * math.sqrt(1.25)), rel=1e-14)
    ap2, _ = rotation_consistency(HelixParams(1.0, 2.0, 0.5, 1.0))
    assert ap2 == pytest.approx(2 * ap, rel=1e-15)


@given(st.floats(0.2, 3.0), st.floats(0.1, 0.9), st.floats(0, 6.0))
def test_curvature_torsion_from_parametrization(k, r, s):
    p = HelixParams(k, 1.0, r, 1.0)
    kappa, tors = curvature_torsion(p, s, 1e-4)
    curve = HelixCurve(p)
    assert abs(kappa - curve.curvature) < 1e-6
    assert abs(tors - curve.torsion) < 1e-6
    assert curve.torsion > 0


def test_distance_to_helix_on_curve():
    pts = helix_point(np.linspace(-3, 3, 7), 0.0, P111)
    assert distance_to_helix(pts, P111).max() < 1e-10
    # a point on the axis is r_* away from every point of the helix
    assert distance_to_helix([[0.0, 0.0, 0.3]], P111)[0] == pytest.approx(1.0, rel=1e-12)


@pytest.fixture(scope="module")
def seeded():
    p = HelixParams(1.0, 1.0, 0.5, 1.0, 0.2)
    pb = PatchProblem.build(p, 1 / 32)
    res = solve_patch(pb, (0.5, 0.0), max_iter=0)
    return res.state


def _state_from(pb, omega):
    from helipatch.patch_solver import stream_deviation
    return PatchState(pb, omega, 0.0, 0.0, stream_deviation(pb, omega).values)


@pytest.fixture(scope="module")
def tube(seeded):
    pb = seeded.problem
    return lift_patch(_state_from(pb, seed_patch(pb, (0.5, 0.0))), rho_samples=16)


def test_lift_parallel_to_zeta(tube):
    z = zeta_field(tube.points, tube.params.k)
    cross = np.cross(tube.vectors, z)
    assert np.abs(cross).max() < 1e-12
    assert np.allclose(tube.vectors, (tube.w / tube.params.k)[:, None] * z, rtol=1e-15)


def test_lift_circulation_per_level(tube):
    assert np.abs(tube.level_circulation - tube.params.d).max() < 1e-12


def test_lift_concentrates_near_helix(tube, seeded):
    from helipatch.patch_solver import diagnostics
    pb = seeded.problem
    diam = diagnostics(_state_from(pb, seed_patch(pb, (0.5, 0.0)))).diameter
    assert tube.level_mean_dist.max() < 2 * diam
    # every cross-section is an isometric copy, so the per-level mean distance is constant
    assert np.ptp(tube.level_mean_dist) < 1e-9


@given(st.floats(-10, 10))
def test_helical_invariance(seeded, rho):
    pb = seeded.problem
    state = _state_from(pb, seed_patch(pb, (0.5, 0.0)))
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.uniform(-0.7, 0.7, (40, 2)), rng.uniform(-3, 3, 40)])
    x = x[np.linalg.norm(x[:, :2], axis=1) < 0.9]
    assert np.array_equal(tube_vorticity(state, helical_map(x, rho, pb.params.k)), tube_vorticity(state, x))


def test_helical_map_group_law():
    x = np.array([[0.3, -0.2, 0.5]])
    a = helical_map(helical_map(x, 0.4, 1.3), 0.9, 1.3)
    assert np.allclose(a, helical_map(x, 1.3, 1.3), atol=1e-15)


def test_lift_empty_support(seeded):
    pb = seeded.problem
    with pytest.raises(EmptySupport):
        lift_patch(_state_from(pb, np.zeros(pb.mesh.n_cells)))


def test_tube_csv_columns(tube, tmp_path):
    path = tmp_path / "tube.csv"
    tube.write_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x1", "x2", "x3", "w", "v1", "v2", "v3", "dist_to_helix"]
    assert len(rows) == 1 + len(tube.w)
    assert float(rows[1][7]) == tube.dist[0]


@pytest.mark.xfail(strict=True, reason="the energy maximizer sits at the origin for feasible eps; see decisions ledger")
def test_patch_centre_near_target_radius(seeded):
    best = maximize_patch(seeded.problem, radial_seeds(1.0))
    X = np.asarray(best.diagnostics.centroid)
    assert abs(np.linalg.norm(X) - seeded.problem.params.r_star) < 0.05
