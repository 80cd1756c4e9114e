import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helipatch.disc_fem import assemble, build_disc_mesh, solve_dirichlet
from helipatch.errors import BoundarySource, CoincidentPoints, TooClose
from helipatch.green_struct import (GreenSample, gamma, greens_column, leading_part, node_at, read_samples_csv,
                                    regular_part, sample, sample_pairs, segment_profile, symmetry_defects,
                                    write_samples_csv)
from helipatch.helical_coeff import helical_field, identity_field
from oracle import image_S

KH = helical_field(1.0, 1.0)
ID = identity_field()


@pytest.fixture(scope="module")
def mesh64():
    return build_disc_mesh(1.0, 1 / 64)


@pytest.fixture(scope="module")
def sys64_id(mesh64):
    return assemble(mesh64, ID)


@pytest.fixture(scope="module")
def sys32_h(unit_disc_32):
    return assemble(unit_disc_32, KH)


def test_leading_part_identity_value():
    assert leading_part((0.5, 0.0), (0.0, 0.0), ID) == pytest.approx(math.log(2) / (2 * math.pi), rel=1e-14)
    assert leading_part((0.5, 0.0), (0.0, 0.0), ID) == pytest.approx(0.110318, abs=1e-6)


@given(st.tuples(*[st.floats(-0.7, 0.7)] * 4))
def test_leading_part_symmetric(c):
    x, y = np.array(c[:2]), np.array(c[2:])
    if np.linalg.norm(x - y) < 1e-6:
        return
    assert leading_part(x, y, KH) == leading_part(y, x, KH)


def test_leading_part_near_origin():
    x, y = np.array([4e-4, -2e-4]), np.array([-3e-4, 5e-4])
    assert leading_part(x, y, KH) == pytest.approx(float(gamma(x - y)), rel=1e-3)


def test_leading_part_coincident():
    with pytest.raises(CoincidentPoints):
        leading_part((0.1, 0.1), (0.1, 0.1), KH)


def test_green_column_properties(unit_disc_32, sys32_h):
    m = unit_disc_32
    y = node_at(m, (0.3, -0.2))
    g = greens_column(m, sys32_h, y).values
    assert np.all(g[m.boundary_mask] == 0)
    assert np.all(g[m.interior] > 0)
    # reciprocity: <G delta_y, f> = u_f(y)
    f = np.exp(m.nodes[:, 0]) * np.cos(m.nodes[:, 1])
    u = solve_dirichlet(sys32_h, f, method="direct").values
    assert g @ (sys32_h.M_full @ f) == pytest.approx(u[y], abs=1e-6)
    # cached and read-only
    assert greens_column(m, sys32_h, y).values is g
    assert not g.flags.writeable


def test_green_column_boundary_source(unit_disc_32, sys32_h):
    with pytest.raises(BoundarySource):
        greens_column(unit_disc_32, sys32_h, int(np.flatnonzero(unit_disc_32.boundary_mask)[0]))


def test_regular_part_centre_source(mesh64, sys64_id):
    y = node_at(mesh64, (0.0, 0.0))
    r = np.linalg.norm(mesh64.nodes, axis=1)
    xs = np.flatnonzero(~mesh64.boundary_mask & (r <= 0.7) & (r >= 3 * mesh64.h))[::37]
    assert max(abs(regular_part(mesh64, sys64_id, ID, x, y)) for x in xs) < 5e-3


def test_regular_part_image_value(mesh64, sys64_id):
    x, y = node_at(mesh64, (0.5, 0.0)), node_at(mesh64, (0.25, 0.0))
    exact = math.log(0.875) / (2 * math.pi)
    assert exact == pytest.approx(-0.021254, abs=1e-5)  # quoted value is rounded
    assert image_S(mesh64.nodes[x], mesh64.nodes[y]) == pytest.approx(exact, abs=1e-3)
    assert regular_part(mesh64, sys64_id, ID, x, y) == pytest.approx(
        image_S(mesh64.nodes[x], mesh64.nodes[y]), abs=5e-3)


def test_regular_part_too_close(unit_disc_32, sys32_h):
    y = node_at(unit_disc_32, (0.0, 0.0))
    x = node_at(unit_disc_32, (1.5 * unit_disc_32.h, 0.0))
    with pytest.raises(TooClose):
        regular_part(unit_disc_32, sys32_h, KH, x, y)


def test_symmetry_defect_small(unit_disc_32, sys32_h):
    pairs = sample_pairs(unit_disc_32, 20, np.random.default_rng(3))
    assert symmetry_defects(unit_disc_32, sys32_h, KH, pairs).max() < 5e-3


def test_smoothness_proxy(unit_disc_32, sys32_h):
    m = unit_disc_32
    y = node_at(m, (0.2, 0.1))
    prof = segment_profile(m, sys32_h, KH, y, (1.0, 0.3), np.linspace(0.1, 0.5, 9))
    dist, G, g0, S = prof.T
    # the singular part carries almost all the variation of G
    assert np.ptp(S) < 0.2 * np.ptp(G)
    assert np.abs(np.diff(S, 2)).max() < 5e-3
    close = segment_profile(m, sys32_h, KH, y, (1.0, 0.3), [3 * m.h, 0.5])
    assert close[0, 1] - close[1, 1] > 0.1


def test_boundary_blowup(unit_disc_32, sys32_h):
    m = unit_disc_32
    r = np.linalg.norm(m.nodes, axis=1)
    y = int(np.flatnonzero(~m.boundary_mask & (r > 1 - 2 * m.h))[0])
    xs = np.flatnonzero(~m.boundary_mask)
    d = np.linalg.norm(m.nodes[xs] - m.nodes[y], axis=1)
    x = int(xs[np.argmin(np.where(d >= 3 * m.h, d, np.inf))])
    assert regular_part(m, sys32_h, KH, x, y) < -0.2


def test_samples_csv_roundtrip(tmp_path, unit_disc_32, sys32_h):
    pairs = sample_pairs(unit_disc_32, 5, np.random.default_rng(0))
    smp = [sample(unit_disc_32, sys32_h, KH, i, j) for i, j in pairs]
    path = tmp_path / "g.csv"
    write_samples_csv(smp, path)
    assert path.read_text().splitlines()[0] == "xi,yi,xj,yj,g0,s,g"
    back = read_samples_csv(path)
    assert back == smp
    for s in back:
        assert s.g == s.g0 + s.s


def test_green_sample_exact_sum():
    s = GreenSample((0.0, 0.1), (0.2, 0.3), 0.1, 0.2)
    assert s.row()[-1] == 0.1 + 0.2
