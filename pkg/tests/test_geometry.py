import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inrsbm.errors import (EmptyMeshError, MeshFormatError, MeshReadError, NotWatertightError,
                           ParameterError, SamplingError)
from inrsbm.geometry import (MeshSource, box_soup, brute_force_distance,
                             closest_points_on_triangles, exact_signed_distance, hybrid_samples,
                             icosphere, load_triangle_soup, make_soup, rescale_to_domain,
                             sample_narrowband, sample_surface, sample_uniform)


def write_ascii_stl(path, soup):
    lines = ["solid cube"]
    for tri, n in zip(soup.corners, soup.normals):
        lines.append(f"facet normal {n[0]} {n[1]} {n[2]}")
        lines.append("outer loop")
        lines += [f"vertex {v[0]} {v[1]} {v[2]}" for v in tri]
        lines += ["endloop", "endfacet"]
    lines.append("endsolid cube")
    path.write_text("\n".join(lines))


def write_binary_stl(path, soup, truncate=0):
    out = bytearray(b"\0" * 80) + struct.pack("<I", len(soup.triangles))
    for tri, n in zip(soup.corners, soup.normals):
        out += struct.pack("<12fH", *n, *tri.ravel(), 0)
    path.write_bytes(bytes(out[:len(out) - truncate]))


def test_ascii_stl_cube(tmp_path):
    p = tmp_path / "cube.stl"
    write_ascii_stl(p, box_soup())
    soup = load_triangle_soup(p)
    assert len(soup.triangles) == 12
    lo, hi = soup.bbox
    np.testing.assert_allclose(lo, [-0.5] * 3)
    np.testing.assert_allclose(hi, [0.5] * 3)
    assert soup.is_watertight
    np.testing.assert_allclose(np.linalg.norm(soup.normals, axis=1), 1.0, atol=1e-12)


def test_binary_stl_roundtrip_and_truncation(tmp_path):
    p = tmp_path / "cube.stl"
    write_binary_stl(p, box_soup())
    assert len(load_triangle_soup(p).triangles) == 12
    write_binary_stl(p, box_soup(), truncate=7)
    with pytest.raises(MeshFormatError):
        load_triangle_soup(p)


def test_obj_drops_zero_area(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nf 1 2 3\nf 1 2 4\n")
    soup = load_triangle_soup(p)
    assert len(soup.triangles) == 1
    assert soup.dropped == 1


def test_read_errors(tmp_path):
    with pytest.raises(MeshReadError) as e:
        load_triangle_soup(tmp_path / "missing.obj")
    assert "missing.obj" in str(e.value)
    bad = tmp_path / "bad.obj"
    bad.write_text("v 0 0 zero\n")
    with pytest.raises(MeshFormatError):
        load_triangle_soup(bad)
    empty = tmp_path / "empty.obj"
    empty.write_text("v 0 0 0\n")
    with pytest.raises(EmptyMeshError):
        load_triangle_soup(empty)


def test_rescale():
    cube = box_soup((0, 0, 0), (2, 2, 2))
    r = rescale_to_domain(cube)
    lo, hi = r.bbox
    np.testing.assert_allclose(lo, [-0.5] * 3, atol=1e-14)
    np.testing.assert_allclose(hi, [0.5] * 3, atol=1e-14)
    same = rescale_to_domain(box_soup())
    np.testing.assert_allclose(same.vertices, box_soup().vertices, atol=1e-15)
    with pytest.raises(ParameterError):
        # a zero-extent soup cannot be built through make_soup, so bypass it
        from inrsbm.geometry import TriangleSoup
        flat = TriangleSoup(np.zeros((3, 3)), [[0, 1, 2]], normals=np.zeros((1, 3)))
        rescale_to_domain(flat)


def test_surface_samples_on_triangle():
    soup = make_soup([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    p, n = sample_surface(soup, 100, 3)
    assert np.all(p[:, 2] == 0)
    assert np.all(p[:, 0] >= 0) and np.all(p[:, 1] >= 0)
    assert np.all(p[:, 0] + p[:, 1] <= 1 + 1e-15)
    np.testing.assert_array_equal(n, np.tile([0, 0, 1.0], (100, 1)))
    p2, _ = sample_surface(soup, 100, 3)
    assert np.array_equal(p, p2)


def test_cube_surface_samples_have_zero_distance():
    cube = box_soup()
    p, _ = sample_surface(cube, 1000, 0)
    s, _ = exact_signed_distance(cube, p)
    assert np.max(np.abs(s)) < 1e-12


def test_narrowband_bounds():
    sphere = icosphere(2, 0.5)
    x, s, _ = sample_narrowband(sphere, 500, 0.01, 1)
    assert len(x) == 500 and np.all(np.abs(s) <= 0.01)
    x0, s0, _ = sample_narrowband(sphere, 50, 0.0, 1)
    assert np.max(np.abs(s0)) < 1e-12


def test_narrowband_rejection_error():
    # a thin slab: offsets of 10 bbox diagonals almost always leave the band
    slab = box_soup((-0.5, -0.5, -0.01), (0.5, 0.5, 0.01))
    with pytest.raises(SamplingError):
        sample_narrowband(slab, 200, 10 * slab.bbox_diag, 0)


def test_uniform_samples():
    assert sample_uniform(((-1, -1), (1, 1)), 0, 0).shape == (0, 2)
    x = sample_uniform(((-1, -1), (1, 1)), 100000, 5)
    assert np.all(np.abs(x.mean(axis=0)) < 0.02)
    assert np.array_equal(x, sample_uniform(((-1, -1), (1, 1)), 100000, 5))
    with pytest.raises(ParameterError):
        sample_uniform(((0, 0), (0, 1)), 10, 0)


def test_oracle_cube_examples():
    cube = box_soup()
    assert exact_signed_distance(cube, np.zeros(3))[0] == pytest.approx(-0.5)
    assert exact_signed_distance(cube, np.array([1.0, 0, 0]))[0] == pytest.approx(0.5)


def test_oracle_icosphere_within_chordal_bound():
    ico = icosphere(3, 1.0)
    # the plane of a triangle is at least sqrt(1 - R^2) from the centre, R its circumradius
    a, b, c = np.moveaxis(ico.corners, 1, 0)
    la, lb, lc = (np.linalg.norm(v, axis=1) for v in (b - c, c - a, a - b))
    R = la * lb * lc / (4.0 * ico.areas)
    s, _ = exact_signed_distance(ico, np.array([2.0, 0, 0]))
    assert 1.0 <= s <= 2.0 - np.sqrt(1.0 - R.max() ** 2)


def test_watertight_detection():
    assert box_soup().is_watertight
    open_box = box_soup(drop_face=True)
    assert not open_box.is_watertight
    with pytest.raises(NotWatertightError) as e:
        exact_signed_distance(open_box, np.zeros((2, 3)))
    assert e.value.unsigned is not None


def test_oracle_foot_and_brute_force_agree():
    ico = icosphere(1, 0.7)
    x = np.random.default_rng(4).uniform(-1, 1, (100, 3))
    s, foot = exact_signed_distance(ico, x)
    np.testing.assert_allclose(np.abs(s), brute_force_distance(ico, x), atol=1e-12)
    s_foot, _ = exact_signed_distance(ico, foot)
    assert np.max(np.abs(s_foot)) <= 1e-9 * ico.bbox_diag


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-2, 2, allow_nan=False), min_size=3, max_size=3))
def test_closest_point_is_closest_on_triangle(p):
    a, b, c = np.array([0.0, 0, 0]), np.array([1.0, 0.2, 0]), np.array([0.3, 1.0, 0.4])
    p = np.asarray(p)
    q = closest_points_on_triangles(p, a, b, c)
    # compare with a dense barycentric scan of the triangle
    u = np.linspace(0, 1, 81)
    U, V = np.meshgrid(u, u)
    m = U + V <= 1
    pts = a + U[m][:, None] * (b - a) + V[m][:, None] * (c - a)
    assert np.linalg.norm(p - q) <= np.min(np.linalg.norm(pts - p, axis=1)) + 1e-12


def test_hybrid_samples_deterministic(tmp_path):
    src = MeshSource(icosphere(2, 0.5))
    dom = ((-1, -1, -1), (1, 1, 1))
    a = hybrid_samples(src, dom, 20, 30, 40, 0.01, 9)
    b = hybrid_samples(src, dom, 20, 30, 40, 0.01, 9)
    for k in ("surface", "narrowband", "uniform", "uniform_s"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
    assert np.all(np.abs(a.narrowband_s) <= 0.01)
    assert np.all(np.abs(a.uniform) <= 1)
    a.write_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "x,y,z,s,nx,ny,nz,set" and len(lines) == 91
