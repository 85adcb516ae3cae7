"""Incomplete, 2:1 balanced quadtrees/octrees built from implicit-field queries.

Octants live on an integer lattice of 2**MAX_LEVEL cells per axis. An octant
at level l has edge 2**(MAX_LEVEL - l) lattice units and its anchor is its
lower corner. The tree is stored as the list of retained leaves only; holes
(octants entirely inside the solid) are simply absent.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import OctreeError, UnbalancedTreeError
from .sdf import ImplicitField

MAX_LEVEL = 21
ROOT = 1 << MAX_LEVEL


def size_of(level):
    return np.left_shift(np.int64(1), MAX_LEVEL - np.asarray(level, dtype=np.int64))


_SPREAD = {
    2: [(16, 0x0000FFFF0000FFFF), (8, 0x00FF00FF00FF00FF), (4, 0x0F0F0F0F0F0F0F0F),
        (2, 0x3333333333333333), (1, 0x5555555555555555)],
    3: [(32, 0x001F00000000FFFF), (16, 0x001F0000FF0000FF), (8, 0x100F00F00F00F00F),
        (4, 0x10C30C30C30C30C3), (2, 0x1249249249249249)],
}


def _spread(v, dim):
    v = v & np.uint64((1 << MAX_LEVEL) - 1)
    for shift, mask in _SPREAD[dim]:
        v = (v | (v << np.uint64(shift))) & np.uint64(mask)
    return v


def morton(anchors):
    """Bit-interleaved key of lattice anchors (n, dim) in [0, 2**MAX_LEVEL) -> uint64."""
    a = np.asarray(anchors, dtype=np.uint64)
    dim = a.shape[1]
    key = np.zeros(len(a), dtype=np.uint64)
    if dim in _SPREAD:
        for i in range(dim):
            key |= _spread(a[:, i], dim) << np.uint64(i)
        return key
    for bit in range(MAX_LEVEL):
        for i in range(dim):
            b = (a[:, i] >> np.uint64(bit)) & np.uint64(1)
            key |= b << np.uint64(bit * dim + i)
    return key


def point_key(coords):
    """Injective uint64 key for lattice points with coordinates in [0, 2**MAX_LEVEL]."""
    c = np.asarray(coords, dtype=np.uint64)
    base = np.uint64(ROOT + 1)
    key = np.zeros(len(c), dtype=np.uint64)
    for i in range(c.shape[1] - 1, -1, -1):
        key = key * base + c[:, i]
    return key


def corner_offsets(dim):
    """Corner i has offset bit j of i along axis j (lexicographic, x fastest)."""
    return np.array([[(i >> j) & 1 for j in range(dim)] for i in range(1 << dim)], dtype=np.int64)


def face_directions(dim):
    dirs = []
    for i in range(dim):
        for s in (-1, 1):
            d = [0] * dim
            d[i] = s
            dirs.append(tuple(d))
    return dirs


def balance_directions(dim):
    """Face directions, plus edge directions in 3D."""
    dirs = face_directions(dim)
    if dim == 3:
        for d in itertools.product((-1, 0, 1), repeat=3):
            if sum(abs(v) for v in d) == 2:
                dirs.append(d)
    return dirs


@dataclass
class Region:
    """Refine every octant meeting {shape <= 0} to ``level``."""

    shape: ImplicitField
    level: int


@dataclass
class RefineSpec:
    base_level: int
    boundary_level: int = None
    boundary_factor: float = 1.0
    regions: list = dc_field(default_factory=list)

    def __post_init__(self):
        if self.base_level < 1:
            raise OctreeError(f"base level must be >= 1, got {self.base_level}")
        top = self.max_level
        if top > MAX_LEVEL:
            raise OctreeError(f"refinement level {top} exceeds the lattice limit {MAX_LEVEL}")
        if self.boundary_level is not None and self.boundary_level < self.base_level:
            raise OctreeError("boundary level must not be below the base level")

    @property
    def max_level(self):
        levels = [self.base_level] + [r.level for r in self.regions]
        if self.boundary_level is not None:
            levels.append(self.boundary_level)
        return max(levels)

    def target(self, level, centers, diag, fc):
        t = np.full(len(centers), self.base_level)
        if self.boundary_level is not None:
            near = np.abs(fc) < self.boundary_factor * diag
            t = np.where(near, np.maximum(t, self.boundary_level), t)
        for r in self.regions:
            hit = r.shape(centers) < 0.5 * diag
            t = np.where(hit, np.maximum(t, r.level), t)
        return t


@dataclass(eq=False)
class Octree:
    dim: int
    lo: np.ndarray
    hi: np.ndarray
    levels: np.ndarray
    anchors: np.ndarray
    field: ImplicitField = None
    _cache: dict = dc_field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.levels = np.asarray(self.levels, dtype=np.int64)
        self.anchors = np.asarray(self.anchors, dtype=np.int64).reshape(-1, self.dim)
        order = np.argsort(morton(self.anchors), kind="stable")
        self.levels = self.levels[order]
        self.anchors = self.anchors[order]

    # ------------------------------------------------------------ geometry

    def __len__(self):
        return len(self.levels)

    @property
    def scale(self):
        """Physical length of one lattice unit per axis."""
        return (self.hi - self.lo) / ROOT

    def to_physical(self, lattice):
        return self.lo + np.asarray(lattice, dtype=np.float64) * self.scale

    @property
    def sizes(self):
        return size_of(self.levels)

    def leaf_h(self, idx=slice(None)):
        """Physical edge lengths (n, dim)."""
        return self.sizes[idx, None] * self.scale

    def leaf_bounds(self, idx=slice(None)):
        a = self.anchors[idx]
        return self.to_physical(a), self.to_physical(a + self.sizes[idx, None])

    def centers(self, idx=slice(None)):
        lo, hi = self.leaf_bounds(idx)
        return 0.5 * (lo + hi)

    def measure(self, idx=slice(None)):
        return np.prod(self.leaf_h(idx), axis=1)

    # ------------------------------------------------------------- lookup

    def _level_tables(self):
        if "levels" not in self._cache:
            tables = {}
            for l in np.unique(self.levels):
                ids = np.flatnonzero(self.levels == l)
                keys = morton(self.anchors[ids])
                o = np.argsort(keys)
                tables[int(l)] = (keys[o], ids[o])
            self._cache["levels"] = tables
        return self._cache["levels"]

    def locate(self, pts):
        """Leaf containing each lattice point (half-open cells), -1 if none."""
        pts = np.asarray(pts, dtype=np.int64).reshape(-1, self.dim)
        out = np.full(len(pts), -1, dtype=np.int64)
        inside = np.all((pts >= 0) & (pts < ROOT), axis=1)
        for l, (keys, ids) in self._level_tables().items():
            todo = np.flatnonzero(inside & (out < 0))
            if not len(todo):
                break
            mask = ~(size_of(l) - 1)
            k = morton(pts[todo] & mask)
            pos = np.searchsorted(keys, k)
            pos = np.minimum(pos, len(keys) - 1)
            hit = keys[pos] == k
            out[todo[hit]] = ids[pos[hit]]
        return out

    def across_points(self, direction, idx=slice(None)):
        """A lattice point just across each leaf's face/edge in ``direction``."""
        a = self.anchors[idx]
        s = self.sizes[idx]
        p = a + (s // 2)[:, None]
        for i, d in enumerate(direction):
            if d > 0:
                p[:, i] = a[:, i] + s
            elif d < 0:
                p[:, i] = a[:, i] - 1
        return p

    def neighbor(self, leaves, direction):
        """Same-or-coarser leaf sharing the whole face/edge, else -1."""
        leaves = np.atleast_1d(np.asarray(leaves, dtype=np.int64))
        cand = self.locate(self.across_points(direction, leaves))
        ok = cand >= 0
        ok[ok] = self.levels[cand[ok]] <= self.levels[leaves[ok]]
        return np.where(ok, cand, -1)

    def face_neighbors(self, leaf, direction):
        """All leaves across a face: the coarser/same neighbor or the finer ones."""
        leaf = int(leaf)
        n = self.neighbor([leaf], direction)[0]
        if n >= 0:
            return [int(n)]
        axis = int(np.flatnonzero(direction)[0])
        sign = direction[axis]
        l = self.levels[leaf]
        a = self.anchors[leaf]
        s = int(size_of(l))
        if s < 2:
            return []
        half = s // 2
        pts = []
        for offs in itertools.product((0, 1), repeat=self.dim - 1):
            p = a.copy()
            it = iter(offs)
            for i in range(self.dim):
                if i == axis:
                    p[i] = a[i] + s if sign > 0 else a[i] - 1
                else:
                    p[i] = a[i] + next(it) * half
            pts.append(p)
        found = self.locate(np.array(pts))
        return sorted({int(f) for f in found if f >= 0})

    # -------------------------------------------------------------- nodes

    def nodes(self):
        """(node lattice coords, elem_nodes (n_leaves, 2**dim)) over all leaves."""
        if "nodes" not in self._cache:
            off = corner_offsets(self.dim)
            corners = self.anchors[:, None, :] + off[None] * self.sizes[:, None, None]
            flat = corners.reshape(-1, self.dim)
            keys = point_key(flat)
            uk, first, inv = np.unique(keys, return_index=True, return_inverse=True)
            self._cache["nodes"] = (flat[first], inv.reshape(len(self), -1), uk)
        coords, conn, _ = self._cache["nodes"]
        return coords, conn

    def node_keys(self):
        self.nodes()
        return self._cache["nodes"][2]

    def node_points(self):
        return self.to_physical(self.nodes()[0])

    def node_index(self, coords):
        """Node ids for lattice points, -1 where absent."""
        keys = self.node_keys()
        k = point_key(np.asarray(coords).reshape(-1, self.dim))
        pos = np.minimum(np.searchsorted(keys, k), len(keys) - 1)
        return np.where(keys[pos] == k, pos, -1)

    def retention_points(self, idx=slice(None)):
        """Corners and centre of each leaf, physical, shape (n, 2**dim + 1, dim)."""
        lo, hi = self.leaf_bounds(idx)
        off = corner_offsets(self.dim).astype(np.float64)
        corners = lo[:, None] + off[None] * (hi - lo)[:, None]
        return np.concatenate([corners, 0.5 * (lo + hi)[:, None]], axis=1)

    def write_csv(self, path):
        names = ["level"] + [f"anchor_{c}" for c in "xyz"[: self.dim]]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for l, a in zip(self.levels, self.anchors):
                w.writerow([int(l)] + [int(v) for v in a])

    def leaf_set(self):
        return {(int(l), *map(int, a)) for l, a in zip(self.levels, self.anchors)}


# ------------------------------------------------------------------ building

def _children(anchors, level):
    half = int(size_of(level + 1))
    dim = anchors.shape[1]
    off = corner_offsets(dim) * half
    return (anchors[:, None, :] + off[None]).reshape(-1, dim)


def _parents(anchors, level):
    """Anchors of the level-(level-1) parents of level-``level`` octants."""
    mask = ~(size_of(level - 1) - 1)
    return anchors & mask


def _unique_rows(a, dim):
    if not len(a):
        return a.reshape(0, dim)
    _, first = np.unique(morton(a), return_index=True)
    return a[np.sort(first)]


def _close_splits(split, dim):
    """Smallest superset of split nodes that yields a 2:1 balanced tree.

    ``split`` maps level -> anchors of split octants. For every split node P at
    level l the same-level neighbours of P must have split parents; one sweep
    from the finest level down suffices because additions only go coarser.
    """
    dirs = np.array(balance_directions(dim), dtype=np.int64)
    levels = sorted(split)
    if not levels:
        return split
    out = {l: _unique_rows(np.asarray(split[l], dtype=np.int64).reshape(-1, dim), dim)
           for l in range(0, max(levels) + 1) if l in split}
    for l in range(max(levels), 0, -1):
        P = out.get(l, np.empty((0, dim), dtype=np.int64))
        if not len(P):
            continue
        s = int(size_of(l))
        nb = (P[:, None, :] + dirs[None] * s).reshape(-1, dim)
        nb = nb[np.all((nb >= 0) & (nb < ROOT), axis=1)]
        add = np.concatenate([_parents(P, l), _parents(nb, l)])
        prev = out.get(l - 1, np.empty((0, dim), dtype=np.int64))
        out[l - 1] = _unique_rows(np.concatenate([prev, add]), dim)
    return out


def _leaves_from_splits(split, dim):
    """Children of split octants that are not split themselves."""
    levels, anchors = [], []
    if 0 not in split or not len(split[0]):
        return np.zeros(1, dtype=np.int64), np.zeros((1, dim), dtype=np.int64)
    for l in sorted(split):
        S = split[l]
        if not len(S):
            continue
        ch = _children(S, l)
        nxt = split.get(l + 1)
        if nxt is not None and len(nxt):
            ch = ch[~np.isin(morton(ch), morton(nxt))]
        levels.append(np.full(len(ch), l + 1))
        anchors.append(ch)
    return np.concatenate(levels), np.concatenate(anchors)


def _retained(field, tree_like: Octree, idx=None):
    pts = tree_like.retention_points(slice(None) if idx is None else idx)
    f = field(pts.reshape(-1, tree_like.dim)).reshape(pts.shape[:2])
    return np.any(f >= 0.0, axis=1)


def _check_domain(domain, dim):
    lo, hi = (np.asarray(d, dtype=np.float64).reshape(-1) for d in domain)
    if lo.size != dim or hi.size != dim:
        raise OctreeError(f"domain must be a {dim}-D box")
    if np.any(hi <= lo):
        raise OctreeError("domain box must have positive extent")
    return lo, hi


def build_incomplete(field: ImplicitField, domain, refine: RefineSpec, balance=True) -> Octree:
    """Refine top-down by ``refine``, balance, then keep octants touching {f >= 0}."""
    dim = field.dim
    lo, hi = _check_domain(domain, dim)
    probe = Octree(dim, lo, hi, [0], np.zeros((1, dim)))
    split = {}
    active = np.zeros((1, dim), dtype=np.int64)
    for l in range(refine.max_level):
        if not len(active):
            break
        s = int(size_of(l))
        centers = probe.to_physical(active + s / 2.0)
        diag = float(np.linalg.norm(s * probe.scale))
        fc = field(centers)
        t = refine.target(l, centers, diag, fc)
        # a 1-Lipschitz field below -diag cannot reach f >= 0 anywhere in the octant
        do = (t > l) & ~(fc < -diag)
        split[l] = active[do]
        active = _children(active[do], l)
    if balance:
        split = _close_splits(split, dim)
    levels, anchors = _leaves_from_splits(split, dim)
    tree = Octree(dim, lo, hi, levels, anchors, field=field)
    keep = _retained(field, tree)
    return Octree(dim, lo, hi, tree.levels[keep], tree.anchors[keep], field=field)


def uniform_tree(dim, domain, level, field=None) -> Octree:
    """Complete uniform tree at ``level`` (optionally with the retention test)."""
    if field is None:
        lo, hi = _check_domain(domain, dim)
        n = 1 << level
        idx = np.stack(np.meshgrid(*[np.arange(n)] * dim, indexing="ij"), -1).reshape(-1, dim)
        return Octree(dim, lo, hi, np.full(len(idx), level), idx * int(size_of(level)))
    return build_incomplete(field, domain, RefineSpec(level))


def _ancestor_splits(tree: Octree):
    split = {}
    for l in range(int(tree.levels.max()) if len(tree) else 0):
        deeper = tree.levels > l
        if deeper.any():
            split[l] = _unique_rows(tree.anchors[deeper] & ~(size_of(l) - 1), tree.dim)
    return split


def balance_2to1(tree: Octree, field: ImplicitField = None) -> Octree:
    """Minimal refinement restoring 2:1 balance across faces (and edges in 3D).

    Leaves created by splitting an existing leaf are kept if they pass the
    retention test (all of them when no field is known); regions that held no
    leaf before stay empty.
    """
    field = field if field is not None else tree.field
    if not len(tree):
        return tree
    split = _close_splits(_ancestor_splits(tree), tree.dim)
    levels, anchors = _leaves_from_splits(split, tree.dim)
    old = {}
    for l in np.unique(tree.levels):
        old[int(l)] = np.sort(morton(tree.anchors[tree.levels == l]))
    keep = np.zeros(len(levels), dtype=bool)
    new = np.zeros(len(levels), dtype=bool)
    for l, keys in old.items():
        at = levels == l
        keep[at] = np.isin(morton(anchors[at]), keys)
        deeper = np.flatnonzero(levels > l)
        if len(deeper):
            anc = anchors[deeper] & ~(size_of(l) - 1)
            new[deeper[np.isin(morton(anc), keys)]] = True
    cand = Octree(tree.dim, tree.lo, tree.hi, levels, anchors)
    # Octree sorts on construction; recompute flags in its order
    order = np.argsort(morton(anchors), kind="stable")
    keep, new = keep[order], new[order]
    if field is not None and new.any():
        ids = np.flatnonzero(new)
        new[ids] = _retained(field, cand, ids)
    sel = keep | new
    return Octree(tree.dim, tree.lo, tree.hi, cand.levels[sel], cand.anchors[sel], field=field)


def is_balanced(tree: Octree, mask=None) -> bool:
    return len(unbalanced_pairs(tree, mask)) == 0


def unbalanced_pairs(tree: Octree, mask=None):
    """(fine leaf, coarse leaf) pairs adjacent across a face/edge with level gap > 1."""
    ids = np.arange(len(tree)) if mask is None else np.flatnonzero(mask)
    member = np.zeros(len(tree), dtype=bool)
    member[ids] = True
    bad = []
    for d in balance_directions(tree.dim):
        other = tree.locate(tree.across_points(d, ids))
        ok = other >= 0
        ok[ok] = member[other[ok]]
        gap = np.zeros(len(ids), dtype=np.int64)
        gap[ok] = tree.levels[ids[ok]] - tree.levels[other[ok]]
        for i in np.flatnonzero(gap > 1):
            bad.append((int(ids[i]), int(other[i])))
    return bad


# --------------------------------------------------------------- constraints

def _edge_pairs(dim):
    """Corner index pairs of the cell edges."""
    pairs = []
    for a in range(1 << dim):
        for j in range(dim):
            if not (a >> j) & 1:
                pairs.append((a, a | (1 << j)))
    return pairs


def _faces(dim):
    """Corner index quadruples of the cell faces (3D only)."""
    faces = []
    if dim == 3:
        for axis in range(3):
            for side in (0, 1):
                faces.append([c for c in range(8) if ((c >> axis) & 1) == side])
    return faces


def build_constraints(tree: Octree, mask=None, check=True):
    """Hanging node id -> [(master id, weight)] over the leaves selected by ``mask``.

    A node of the selected leaves that sits on the midpoint of a selected
    leaf's edge (weights 1/2) or the centre of a face (weights 1/4) is hanging.
    """
    ids = np.arange(len(tree)) if mask is None else np.flatnonzero(mask)
    if check:
        bad = unbalanced_pairs(tree, mask)
        if bad:
            raise UnbalancedTreeError(f"tree is not 2:1 balanced ({len(bad)} offending pairs, "
                                      f"first {bad[0]})")
    coords, conn = tree.nodes()
    active = np.zeros(len(coords), dtype=bool)
    active[conn[ids].ravel()] = True
    cons = {}
    big = ids[tree.sizes[ids] >= 2]
    if not len(big):
        return cons
    cn = conn[big]
    groups = [(pair, 0.5) for pair in _edge_pairs(tree.dim)]
    groups += [(face, 0.25) for face in _faces(tree.dim)]
    for corners, w in groups:
        masters = cn[:, corners]
        mid = coords[masters].sum(axis=1) // len(corners)
        node = tree.node_index(mid)
        hit = node >= 0
        hit[hit] = active[node[hit]]
        for n, m in zip(node[hit], masters[hit]):
            n = int(n)
            if n not in cons:
                cons[n] = [(int(k), w) for k in m]
    return cons
