import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inrsbm.errors import BoundaryError, ParameterError
from inrsbm.octree import RefineSpec, build_incomplete, uniform_tree
from inrsbm.surrogate import (EXTERIOR, FALSE_INTERCEPTED, INTERIOR, MARKER_NAMES,
                              NEIGHBORS_FI, TRUE_INTERCEPTED, boundary_gauss_distance_vectors,
                              classify_elements, extract_surrogate_boundary, geometric_boundary)
from inrsbm.sdf import Box, Circle, Constant, CountingField, Ring, Sphere

from oracles import interface_measure

SQ = ((-1.0, -1.0), (1.0, 1.0))


def one_leaf(field, lam=0.5):
    return classify_elements(uniform_tree(2, SQ, 0), field, lam)


def test_single_leaf_markers():
    assert one_leaf(Constant(-1.0, 2)).marker[0] == INTERIOR
    assert one_leaf(Constant(1.0, 2)).marker[0] == EXTERIOR
    # left half solid: two of four Gauss points negative
    half = Box((-5, -5), (0, 5))
    m = one_leaf(half)
    assert m.count[0] == 2 and m.marker[0] == FALSE_INTERCEPTED
    assert one_leaf(half, 0.75).marker[0] == TRUE_INTERCEPTED
    assert MARKER_NAMES[NEIGHBORS_FI] == "NeighborsFalseIntercepted"


def test_classification_parameter_errors():
    t = uniform_tree(2, SQ, 1)
    with pytest.raises(ParameterError):
        classify_elements(t, Circle(0.5), 0.0)
    with pytest.raises(ParameterError):
        classify_elements(t, Circle(0.5), 0.5, gp_order=1)


def test_sixteen_cell_circle_fixture():
    t = uniform_tree(2, SQ, 2)
    m = classify_elements(t, Circle(0.55))
    # the four central cells hold three of four Gauss points inside the circle
    central = np.all(np.abs(t.centers()) < 0.5, axis=1)
    assert np.all(m.count[central] == 3) and np.all(m.marker[central] == FALSE_INTERCEPTED)
    assert np.all(m.marker[~central] == EXTERIOR)
    b, m2 = extract_surrogate_boundary(t, m)
    assert len(b) == 8
    lo, hi = b.geometry()
    mid = 0.5 * (lo + hi)
    # the surrogate is the square [-1/2, 1/2]^2 with normals pointing into it
    assert np.allclose(np.abs(mid).max(axis=1), 0.5)
    assert np.allclose(np.sum(b.normals * mid, axis=1), -0.5)
    assert np.all(m2.marker[~central] == NEIGHBORS_FI)


def test_all_fluid_has_no_boundary():
    t = uniform_tree(2, SQ, 3)
    b, m = extract_surrogate_boundary(t, classify_elements(t, Constant(1.0, 2)))
    assert len(b) == 0 and np.all(m.marker == EXTERIOR)


def test_isolated_false_intercepted_leaf_has_four_faces():
    t = uniform_tree(2, SQ, 2)
    m = classify_elements(t, Constant(1.0, 2))
    inner = int(np.flatnonzero(np.all(np.isclose(t.centers(), [-0.25, 0.25]), axis=1))[0])
    m.marker[inner] = FALSE_INTERCEPTED
    b = geometric_boundary(t, m.assembled)
    assert len(b) == 4
    assert sorted(map(tuple, b.normals.astype(int))) == [(-1, 0), (0, -1), (0, 1), (1, 0)]


def test_marker_mismatch_rejected():
    t = uniform_tree(2, SQ, 2)
    m = classify_elements(uniform_tree(2, SQ, 1), Circle(0.5))
    with pytest.raises(BoundaryError):
        extract_surrogate_boundary(t, m)


def ring_setup(level=5):
    ring = Ring(0.3, 0.62)
    t = build_incomplete(ring, SQ, RefineSpec(level - 1, boundary_level=level))
    b, m = extract_surrogate_boundary(t, classify_elements(t, ring))
    return ring, t, b, m


def test_faces_pair_with_non_assembled_cells():
    ring, t, b, m = ring_setup()
    lo, hi = b.geometry()
    mid = 0.5 * (lo + hi)
    h = t.leaf_h(b.leaf).min(axis=1)
    # stepping off each face along its normal leaves the assembled region
    inside_pt = mid - 0.25 * h[:, None] * b.normals
    outside_pt = mid + 0.25 * h[:, None] * b.normals
    lattice = lambda x: np.floor((x - t.lo) / t.scale).astype(np.int64)
    ins = t.locate(lattice(inside_pt))
    outs = t.locate(lattice(outside_pt))
    assert np.all(ins == b.leaf)
    assert np.all((outs < 0) | ~m.assembled[np.maximum(outs, 0)])


def test_surrogate_measure_matches_raster():
    for level in (4, 5):
        _, t, b, m = ring_setup(level)
        lo, hi = b.geometry()
        meas = np.prod(np.where(np.eye(2)[b.axis] > 0, 1.0, hi - lo), axis=1)
        assert meas.sum() == pytest.approx(interface_measure(t, m.assembled), rel=1e-12)


def test_foot_points_land_on_the_surface():
    ring, t, b, _ = ring_setup()
    d = boundary_gauss_distance_vectors(b, ring, 2)
    pts, _ = b.gauss_points(2)
    h = t.leaf_h(b.leaf).min()
    foot = (pts + d).reshape(-1, 2)
    assert np.max(np.abs(ring(foot))) <= 1e-3 * h


def test_distance_vector_cache():
    circle = CountingField(Circle(0.4))
    t = build_incomplete(circle, SQ, RefineSpec(4))
    b, _ = extract_surrogate_boundary(t, classify_elements(t, circle))
    d1 = boundary_gauss_distance_vectors(b, circle, 2)
    before = circle.count
    d2 = boundary_gauss_distance_vectors(b, circle, 2)
    assert circle.count == before
    assert np.array_equal(d1, d2)


def test_distance_vector_example():
    from inrsbm.sdf import distance_vector
    np.testing.assert_allclose(distance_vector(Circle(0.5), np.array([[0.55, 0.0]]), 1e-4),
                               [[-0.05, 0.0]], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 0.8), st.floats(-0.2, 0.2), st.floats(0.05, 0.5), st.floats(0.5, 1.0))
def test_lambda_monotone(r, cx, lam1, lam2):
    lam1, lam2 = sorted((lam1, lam2))
    t = build_incomplete(Constant(1.0, 2), SQ, RefineSpec(4))
    c = Circle(r, (cx, 0.0))
    fi1 = classify_elements(t, c, lam1).marker == FALSE_INTERCEPTED
    fi2 = classify_elements(t, c, lam2).marker == FALSE_INTERCEPTED
    assert np.all(fi1 | ~fi2)


def test_sphere_boundary_3d():
    s = Sphere(0.45)
    t = build_incomplete(s, ((-1,) * 3, (1,) * 3), RefineSpec(3, boundary_level=4))
    b, m = extract_surrogate_boundary(t, classify_elements(t, s))
    lo, hi = b.geometry()
    meas = np.prod(np.where(np.eye(3)[b.axis] > 0, 1.0, hi - lo), axis=1)
    assert meas.sum() == pytest.approx(interface_measure(t, m.assembled), rel=1e-12)
    pts, _ = b.gauss_points(2)
    assert pts.shape == (len(b), 4, 3)
