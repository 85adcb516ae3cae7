"""Element marking by Gauss-point sign counts and surrogate boundary extraction."""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundaryError, ClassificationError, DegenerateGradientError, ParameterError
from .octree import ROOT, Octree, corner_offsets, face_directions
from .quadrature import gauss_tensor
from .sdf import GRADIENT_FLOOR, ImplicitField, distance_vector

log = logging.getLogger(__name__)

INTERIOR, EXTERIOR, TRUE_INTERCEPTED, FALSE_INTERCEPTED, NEIGHBORS_FI = range(5)
MARKER_NAMES = ("Interior", "Exterior", "TrueIntercepted", "FalseIntercepted",
                "NeighborsFalseIntercepted")


@dataclass
class ElementMarkers:
    marker: np.ndarray
    count: np.ndarray
    num_gp: int
    lambda_criteria: float
    node_in: np.ndarray
    fi_node: np.ndarray = None
    passes: int = 0

    @property
    def assembled(self):
        """Leaves carrying fluid unknowns."""
        return (self.marker != FALSE_INTERCEPTED) & (self.marker != INTERIOR)

    def copy(self):
        return ElementMarkers(self.marker.copy(), self.count.copy(), self.num_gp,
                              self.lambda_criteria, self.node_in.copy(),
                              None if self.fi_node is None else self.fi_node.copy(), self.passes)


def leaf_gauss_points(tree: Octree, order, idx=slice(None)):
    """Physical Gauss points (n, order**dim, dim) and weights (n, order**dim)."""
    ref, w = gauss_tensor(order, tree.dim)
    lo, hi = tree.leaf_bounds(idx)
    h = hi - lo
    pts = lo[:, None, :] + ref[None] * h[:, None, :]
    return pts, w[None] * np.prod(h, axis=1)[:, None]


def classify_elements(tree: Octree, field: ImplicitField, lambda_criteria=0.5,
                      gp_order=2) -> ElementMarkers:
    """Count Gauss points with f < 0 and mark every leaf.

    Exterior (count 0) and Interior (all) are tested before the lambda
    threshold so that fully solid leaves can be recognised.
    """
    if gp_order < 2:
        raise ParameterError("gp_order must be at least 2")
    if not 0 < lambda_criteria <= 1:
        raise ParameterError("lambda_criteria must lie in (0, 1]")
    pts, _ = leaf_gauss_points(tree, gp_order)
    f = field(pts.reshape(-1, tree.dim)).reshape(pts.shape[:2])
    bad = ~np.all(np.isfinite(f), axis=1)
    if bad.any():
        leaf = int(np.flatnonzero(bad)[0])
        raise ClassificationError(f"non-finite field value at a Gauss point of leaf {leaf} "
                                  f"(level {tree.levels[leaf]}, anchor {tree.anchors[leaf].tolist()})")
    num_gp = pts.shape[1]
    count = np.sum(f < 0.0, axis=1)
    frac = count / num_gp
    marker = np.full(len(tree), TRUE_INTERCEPTED, dtype=np.int64)
    marker[frac >= lambda_criteria] = FALSE_INTERCEPTED
    marker[count == num_gp] = INTERIOR
    marker[count == 0] = EXTERIOR
    node_in = field(tree.node_points()) < 0.0
    return ElementMarkers(marker, count, num_gp, float(lambda_criteria), node_in)


def face_corner_ids(dim):
    """Corner indices of face (axis, side) in face_directions order."""
    off = corner_offsets(dim)
    out = []
    for d in face_directions(dim):
        axis = int(np.flatnonzero(d)[0])
        side = 1 if d[axis] > 0 else 0
        out.append(np.flatnonzero(off[:, axis] == side))
    return out


@dataclass
class SurrogateBoundary:
    """Axis-aligned faces of Gamma-tilde with normals pointing out of the fluid."""

    tree: Octree
    leaf: np.ndarray
    axis: np.ndarray
    sign: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    algorithm_faces: list = field(default_factory=list)
    cache: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.leaf)

    @property
    def face_id(self):
        return 2 * self.axis + (self.sign > 0)

    @property
    def normals(self):
        n = np.zeros((len(self), self.tree.dim))
        n[np.arange(len(self)), self.axis] = self.sign
        return n

    def face_keys(self):
        return {(int(l), int(a), int(s), *map(int, lo), *map(int, hi))
                for l, a, s, lo, hi in zip(self.leaf, self.axis, self.sign, self.lo, self.hi)}

    def geometry(self):
        """Physical (lo, hi) corners of each face."""
        return self.tree.to_physical(self.lo), self.tree.to_physical(self.hi)

    def gauss_points(self, order):
        """Face Gauss points (n, order**(dim-1), dim) and weights."""
        dim = self.tree.dim
        ref, w = gauss_tensor(order, dim - 1)
        lo, hi = self.geometry()
        pts = np.repeat(lo[:, None, :], len(w), axis=1)
        meas = np.ones(len(self))
        for f in range(len(self)):
            tang = [i for i in range(dim) if i != self.axis[f]]
            ext = hi[f, tang] - lo[f, tang]
            pts[f][:, tang] = lo[f, tang] + ref * ext
            meas[f] = np.prod(ext)
        return pts, w[None] * meas[:, None]

    def write_csv(self, path, order=2):
        pts, _ = self.gauss_points(order)
        d = boundary_gauss_distance_vectors(self, None, order)
        dim = self.tree.dim
        names = ["leaf", "face"] + [f"q{c}" for c in "xyz"[:dim]] + [f"d{c}" for c in "xyz"[:dim]]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for f in range(len(self)):
                for q, dv in zip(pts[f], d[f]):
                    w.writerow([int(self.leaf[f]), int(self.face_id[f])]
                               + [repr(float(v)) for v in q] + [repr(float(v)) for v in dv])


def _mark_neighbors(tree: Octree, markers: ElementMarkers):
    _, conn = tree.nodes()
    fi = markers.marker == FALSE_INTERCEPTED
    fi_node = np.zeros(len(markers.node_in), dtype=bool)
    fi_node[conn[fi].ravel()] = True
    markers.fi_node = fi_node
    touch = fi_node[conn].any(axis=1)
    candidates = touch & ~fi & (markers.marker != INTERIOR)
    markers.marker[candidates] = NEIGHBORS_FI


def extract_surrogate_boundary(tree: Octree, markers: ElementMarkers, max_passes=100):
    """Surrogate faces and updated markers.

    The face-flag rules (intercepted faces with all nodes In; neighbour faces
    with all nodes In or FalseInterceptedNode) are evaluated with the cycle
    rule: a leaf with two opposite flagged faces becomes FalseIntercepted and
    the marking is redone. The returned faces are the geometric interface
    between assembled leaves and non-assembled leaves or holes, split where
    the neighbours are finer; the rule-based face list is kept for comparison.
    """
    coords, conn = tree.nodes()
    if len(markers.node_in) != len(coords) or len(markers.marker) != len(tree):
        raise BoundaryError("marker arrays do not match the tree's leaf/node tables")
    m = markers.copy()
    m.marker[m.marker == NEIGHBORS_FI] = TRUE_INTERCEPTED
    faces_c = face_corner_ids(tree.dim)
    n_faces = len(faces_c)
    for p in range(max_passes):
        base = m.marker.copy()
        _mark_neighbors(tree, m)
        bits = np.zeros((len(tree), n_faces), dtype=bool)
        inter = m.marker == TRUE_INTERCEPTED
        nbr = m.marker == NEIGHBORS_FI
        for k, fc in enumerate(faces_c):
            nodes = conn[:, fc]
            all_in = m.node_in[nodes].all(axis=1)
            in_or_fi = (m.node_in[nodes] | m.fi_node[nodes]).all(axis=1)
            bits[:, k] = (inter & all_in) | (nbr & in_or_fi)
        cyc = np.zeros(len(tree), dtype=bool)
        for a in range(tree.dim):
            cyc |= bits[:, 2 * a] & bits[:, 2 * a + 1]
        if not cyc.any():
            break
        # reset neighbour marks before re-deriving them from the grown FI set
        m.marker = base
        m.marker[cyc] = FALSE_INTERCEPTED
        m.marker[m.marker == NEIGHBORS_FI] = TRUE_INTERCEPTED
    else:
        raise BoundaryError(f"surrogate extraction did not settle in {max_passes} passes")
    m.passes = p + 1
    algo = [(int(e), int(k)) for e, k in zip(*np.nonzero(bits))]
    b = geometric_boundary(tree, m.assembled)
    b.algorithm_faces = algo
    return b, m


def _append_faces(leaf, axis, sign, lo, hi, e, a, s, flo, fhi):
    leaf.append(np.asarray(e, np.int64))
    axis.append(np.full(len(e), a, np.int64))
    sign.append(np.full(len(e), s, np.int64))
    lo.append(flo)
    hi.append(fhi)


def geometric_boundary(tree: Octree, assembled) -> SurrogateBoundary:
    """Faces between assembled leaves and non-assembled leaves/holes (outer box excluded)."""
    dim = tree.dim
    leaf, axis, sign, lo, hi = [], [], [], [], []
    ids = np.flatnonzero(assembled)
    for d in face_directions(dim):
        a = int(np.flatnonzero(d)[0])
        s = d[a]
        anc = tree.anchors[ids]
        sz = tree.sizes[ids]
        # faces on the outer box never enter the surrogate boundary
        onbox = (anc[:, a] == 0) if s < 0 else (anc[:, a] + sz == ROOT)
        cand = ids[~onbox]
        if not len(cand):
            continue
        nb = tree.locate(tree.across_points(d, cand))
        same_or_coarser = np.zeros(len(cand), dtype=bool)
        ok = nb >= 0
        same_or_coarser[ok] = tree.levels[nb[ok]] <= tree.levels[cand[ok]]
        whole = (nb < 0) | same_or_coarser
        whole_bnd = whole & ((nb < 0) | ~assembled[np.where(nb >= 0, nb, 0)])
        e = cand[whole_bnd]
        flo = tree.anchors[e].copy()
        fhi = tree.anchors[e] + tree.sizes[e][:, None]
        if s > 0:
            flo[:, a] = fhi[:, a]
        else:
            fhi[:, a] = flo[:, a]
        _append_faces(leaf, axis, sign, lo, hi, e, a, s, flo, fhi)
        # finer neighbours: the face is split into 2**(dim-1) sub-faces
        e = cand[~whole]
        if not len(e):
            continue
        half = tree.sizes[e] // 2
        base = tree.anchors[e]
        tang = [i for i in range(dim) if i != a]
        offs = np.array(list(itertools.product((0, 1), repeat=dim - 1)), dtype=np.int64)
        # (face, sub-face) ordering, sub-faces in product order
        E = np.repeat(e, len(offs))
        H = np.repeat(half, len(offs))
        p = np.repeat(base, len(offs), axis=0)
        for j, i in enumerate(tang):
            p[:, i] += np.tile(offs[:, j], len(e)) * H
        face_pos = p[:, a] + (np.repeat(tree.sizes[e], len(offs)) if s > 0 else 0)
        p[:, a] = face_pos if s > 0 else p[:, a] - 1
        n2 = tree.locate(p)
        keep = ~((n2 >= 0) & assembled[np.where(n2 >= 0, n2, 0)])
        flo = p[keep].copy()
        flo[:, a] = face_pos[keep]
        fhi = flo.copy()
        for i in tang:
            fhi[:, i] += H[keep]
        _append_faces(leaf, axis, sign, lo, hi, E[keep], a, s, flo, fhi)
    leaf, axis, sign = (np.concatenate(v) if v else np.zeros(0, np.int64)
                        for v in (leaf, axis, sign))
    lo, hi = (np.concatenate(v) if v else np.zeros((0, dim), np.int64) for v in (lo, hi))
    n = len(leaf)
    order = np.lexsort((sign, axis, leaf)) if n else np.array([], int)
    arr = lambda v, shape: np.asarray(v, dtype=np.int64).reshape(shape)[order]
    return SurrogateBoundary(tree, arr(leaf, (n,)), arr(axis, (n,)), arr(sign, (n,)),
                             arr(lo, (n, dim)), arr(hi, (n, dim)))


def boundary_gauss_distance_vectors(boundary: SurrogateBoundary, field: ImplicitField,
                                    gp_order=2, h=None, floor=GRADIENT_FLOOR):
    """Distance vectors d = -f grad f / |grad f| at every face Gauss point.

    Results are memoised per point in ``boundary.cache``; a repeated query
    performs no field evaluations.
    """
    pts, _ = boundary.gauss_points(gp_order)
    dim = boundary.tree.dim
    flat = pts.reshape(-1, dim)
    keys = [p.tobytes() for p in flat]
    cache = boundary.cache
    missing = [i for i, k in enumerate(keys) if k not in cache]
    if missing:
        if field is None:
            raise BoundaryError("distance vectors requested before they were computed")
        if h is None:
            h = 1e-4 * float(np.max(boundary.tree.hi - boundary.tree.lo))
        q = flat[missing]
        try:
            d = distance_vector(field, q, h, floor=floor)
        except DegenerateGradientError as exc:
            raise DegenerateGradientError(
                f"degenerate gradient at surrogate Gauss point Q={exc.points[0].tolist()}",
                points=exc.points) from exc
        for i, dv in zip(missing, d):
            cache[keys[i]] = dv
    return np.array([cache[k] for k in keys]).reshape(pts.shape)
