import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helipatch.disc_fem import (ScalarField, apply_operator, assemble, build_disc_mesh, pcg, read_mesh_csv,
                                solve_dirichlet)
from helipatch.errors import InvalidResolution, NonSPDCoefficient, SolverDivergence
from helipatch.helical_coeff import CoefficientField, helical_field, identity_field
from oracle import p1_laplacian


@pytest.fixture(scope="module")
def sys_id(unit_disc_32):
    return assemble(unit_disc_32, identity_field())


@pytest.fixture(scope="module")
def sys_h(unit_disc_32):
    return assemble(unit_disc_32, helical_field(1.0, 1.0))


def test_mesh_area_and_boundary():
    m = build_disc_mesh(1.0, 0.05)
    assert abs(m.cell_area.sum() - math.pi) < 0.02
    assert m.cell_area.sum() <= math.pi
    r = np.linalg.norm(m.nodes[m.boundary_mask], axis=1)
    assert np.abs(r - 1).max() < 1e-12
    assert m.h <= 1.5 * 0.05
    assert m.cell_area.min() > 1e-3 * m.h**2


def test_mesh_triangles_ccw():
    m = build_disc_mesh(2.0, 0.2)
    v = m.nodes[m.triangles]
    cross = (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1]) - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0])
    assert np.all(cross > 0)


def test_mesh_refinement_scaling():
    a, b = build_disc_mesh(1.0, 1 / 16), build_disc_mesh(1.0, 1 / 32)
    assert 0.8 * 4 <= b.n_nodes / a.n_nodes <= 1.2 * 4


def test_mesh_deterministic_and_invalid():
    a, b = build_disc_mesh(1.0, 0.1), build_disc_mesh(1.0, 0.1)
    assert np.array_equal(a.nodes, b.nodes) and np.array_equal(a.triangles, b.triangles)
    for h in (0.0, 0.25, -1.0):
        with pytest.raises(InvalidResolution):
            build_disc_mesh(1.0, h)


def test_mesh_csv_roundtrip(tmp_path):
    m = build_disc_mesh(1.0, 0.1)
    m.write_csv(tmp_path)
    r = read_mesh_csv(tmp_path, 1.0)
    assert np.array_equal(r.nodes, m.nodes)
    assert np.array_equal(r.triangles, m.triangles)
    assert np.array_equal(r.boundary_mask, m.boundary_mask)


def test_assemble_identity_is_p1_laplacian():
    m = build_disc_mesh(1.0, 0.125)
    sys = assemble(m, identity_field())
    assert np.abs(sys.A_full.toarray() - p1_laplacian(m.nodes, m.triangles)).max() < 1e-13


def test_assemble_rowsums_and_symmetry(sys_h):
    A = sys_h.A_full
    assert np.abs(np.asarray(A.sum(axis=1))).max() < 1e-12
    assert abs(A - A.T).max() < 1e-13


def test_assemble_rejects_non_spd():
    m = build_disc_mesh(1.0, 0.2)
    bad = CoefficientField(lambda x: np.broadcast_to(np.array([[1.0, 0.0], [0.0, -1.0]]), x.shape[:-1] + (2, 2)))
    with pytest.raises(NonSPDCoefficient):
        assemble(m, bad)


def test_solve_zero(sys_h):
    u = solve_dirichlet(sys_h, np.zeros(sys_h.mesh.n_nodes))
    assert not np.any(u.values)


def test_poisson_oracle(sys_id):
    m = sys_id.mesh
    u = solve_dirichlet(sys_id, np.ones(m.n_nodes))
    assert np.all(u.values[m.boundary_mask] == 0)
    assert np.abs(u.values - (1 - np.sum(m.nodes**2, axis=1)) / 4).max() < 5e-3
    assert sys_id.last_residual <= 1e-10


def test_pcg_cap_raises(sys_h):
    b = np.ones(sys_h.ndof)
    with pytest.raises(SolverDivergence) as exc:
        pcg(sys_h.A, b, rtol=1e-14, maxiter=2)
    assert exc.value.details["residual"] > 0


def test_roundtrip_operator_after_solve():
    errs = []
    for h in (1 / 16, 1 / 32, 1 / 64):
        m = build_disc_mesh(1.0, h)
        sys = assemble(m, helical_field(1.0, 1.0))
        f = np.cos(2 * m.nodes[:, 0]) + m.nodes[:, 1] ** 2
        u = solve_dirichlet(sys, f, method="direct")
        Lu = apply_operator(sys, u).values
        i = sys.interior
        # compare in the interior, away from the boundary layer of the lumped operator
        inner = i[np.linalg.norm(m.nodes[i], axis=1) < 0.8]
        errs.append(np.linalg.norm(Lu[inner] - f[inner]) / np.linalg.norm(f[inner]))
    assert errs[0] > errs[1] > errs[2]


def test_apply_operator_examples():
    m = build_disc_mesh(1.0, 1 / 64)
    sys = assemble(m, helical_field(1.0, 1.0))
    assert np.abs(apply_operator(sys, np.full(m.n_nodes, 3.0)).values).max() < 1e-10
    r2 = np.sum(m.nodes**2, axis=1)
    Lu = apply_operator(sys, r2).values
    centre = m.nearest_node([0.0, 0.0])
    assert Lu[centre] == pytest.approx(-4.0, rel=0.02)
    i = sys.interior
    edge = i[np.argmax(np.linalg.norm(m.nodes[i], axis=1))]
    exact = -4 / (1 + r2[edge]) ** 2
    assert Lu[edge] == pytest.approx(exact, rel=0.05)
    assert exact == pytest.approx(-1.0, rel=0.1)


@given(st.integers(0, 10_000))
def test_maximum_principle(seed):
    m = _mesh16()
    sys = _sys16()
    f = np.random.default_rng(seed).uniform(0, 1, m.n_nodes)
    u = solve_dirichlet(sys, f).values
    assert u.min() >= -1e-10 * np.abs(u).max()


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
def test_linearity(a, b, seed):
    m = _mesh16()
    sys = _sys16()
    rng = np.random.default_rng(seed)
    f, g = rng.standard_normal(m.n_nodes), rng.standard_normal(m.n_nodes)
    lhs = solve_dirichlet(sys, a * f + b * g, method="direct").values
    rhs = a * solve_dirichlet(sys, f, method="direct").values + b * solve_dirichlet(sys, g, method="direct").values
    assert np.abs(lhs - rhs).max() <= 1e-9 * max(1.0, np.abs(lhs).max())


_cache = {}


def _mesh16():
    if "m" not in _cache:
        _cache["m"] = build_disc_mesh(1.0, 1 / 16)
    return _cache["m"]


def _sys16():
    if "s" not in _cache:
        _cache["s"] = assemble(_mesh16(), helical_field(1.0, 1.0))
    return _cache["s"]


def test_scalar_field_checks():
    m = _mesh16()
    with pytest.raises(ValueError):
        ScalarField(m, np.ones(3), "nodal")
    with pytest.raises(ValueError):
        ScalarField(m, np.full(m.n_nodes, np.nan), "nodal")
    assert ScalarField(m, np.ones(m.n_cells), "cellwise").integral() == pytest.approx(m.cell_area.sum())
