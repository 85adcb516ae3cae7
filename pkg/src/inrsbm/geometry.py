"""Triangle soups: reading, rescaling, hybrid point sampling, exact signed distance.

The exact oracle is a brute-force scan over every triangle. It is the ground
truth for training targets and metrics, and it is deliberately linear in the
triangle count (the bench-geometry command measures exactly that).
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (EmptyMeshError, MeshFormatError, MeshReadError, NotWatertightError,
                     ParameterError, SamplingError)

log = logging.getLogger(__name__)

DEFAULT_DOMAIN = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
# Entries per query-chunk x triangle block in the vectorised oracle.
_BLOCK = 1 << 18
_RAY_DIRECTIONS = np.array([
    [0.5377, 0.2891, 0.7917],
    [-0.3187, 0.8391, 0.4407],
    [0.7071, -0.5003, 0.4997],
    [-0.1234, -0.4567, -0.8808],
    [0.9311, 0.1113, -0.3473],
])


@dataclass
class TriangleSoup:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray = None
    dropped: int = 0

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) == 0:
            raise EmptyMeshError("mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise MeshFormatError("triangle index out of range")
        if self.normals is None:
            self.normals = _unit_normals(self.corners)

    @property
    def corners(self):
        return self.vertices[self.triangles]

    @cached_property
    def areas(self):
        a, b, c = np.moveaxis(self.corners, 1, 0)
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    @property
    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def bbox_diag(self):
        lo, hi = self.bbox
        return float(np.linalg.norm(hi - lo))

    @cached_property
    def is_watertight(self):
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]],
                            self.triangles[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def signed_volume(self):
        a, b, c = np.moveaxis(self.corners, 1, 0)
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def _unit_normals(corners):
    a, b, c = np.moveaxis(corners, 1, 0)
    n = np.cross(b - a, c - a)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def make_soup(vertices, triangles, merge=False) -> TriangleSoup:
    """Build a soup, dropping slivers and orienting normals outward (closed meshes)."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(triangles) == 0 or len(vertices) == 0:
        raise EmptyMeshError("mesh has no triangles")
    if merge:
        vertices, inverse = np.unique(vertices, axis=0, return_inverse=True)
        triangles = inverse.reshape(-1)[triangles]
    diag = np.linalg.norm(vertices.max(axis=0) - vertices.min(axis=0))
    c = vertices[triangles]
    area = 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=-1)
    keep = area >= 1e-14 * diag ** 2
    dropped = int((~keep).sum())
    if dropped:
        log.warning("dropped %d degenerate triangle(s)", dropped)
    triangles = triangles[keep]
    if len(triangles) == 0:
        raise EmptyMeshError("every triangle is degenerate")
    soup = TriangleSoup(vertices, triangles, dropped=dropped)
    if soup.is_watertight and soup.signed_volume() < 0:
        soup = TriangleSoup(vertices, triangles[:, ::-1].copy(), dropped=dropped)
    return soup


def load_triangle_soup(path) -> TriangleSoup:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise MeshReadError(f"cannot read mesh file {path}: {exc}") from exc
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _read_obj(data.decode("utf-8", errors="replace"), path)
    if suffix == ".stl":
        return _read_stl(data, path)
    raise MeshFormatError(f"unsupported mesh format '{suffix}' ({path})")


def _read_stl(data: bytes, path) -> TriangleSoup:
    if len(data) >= 84:
        (n,) = struct.unpack_from("<I", data, 80)
        if len(data) == 84 + 50 * n:
            if n == 0:
                raise EmptyMeshError(f"{path}: empty STL")
            rec = np.frombuffer(data, dtype=np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)),
                                                       ("attr", "<u2")]), count=n, offset=84)
            verts = rec["v"].astype(np.float64).reshape(-1, 3)
            return make_soup(verts, np.arange(3 * n).reshape(-1, 3), merge=True)
    head = data[:512].lstrip().lower()
    if head.startswith(b"solid") and b"facet" in data[:4096].lower():
        verts = []
        for lineno, line in enumerate(data.decode("ascii", errors="replace").splitlines(), 1):
            tok = line.split()
            if tok and tok[0] == "vertex":
                try:
                    verts.append([float(t) for t in tok[1:4]])
                except ValueError as exc:
                    raise MeshFormatError(f"{path}:{lineno}: malformed vertex record") from exc
                if len(tok) != 4:
                    raise MeshFormatError(f"{path}:{lineno}: malformed vertex record")
        if not verts:
            raise EmptyMeshError(f"{path}: no facets")
        if len(verts) % 3:
            raise MeshFormatError(f"{path}: vertex count not a multiple of 3")
        verts = np.array(verts)
        return make_soup(verts, np.arange(len(verts)).reshape(-1, 3), merge=True)
    if len(data) < 84:
        raise MeshFormatError(f"{path}: truncated STL")
    raise MeshFormatError(f"{path}: binary STL size does not match its facet count (truncated?)")


def _read_obj(text: str, path) -> TriangleSoup:
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        tok = line.split()
        if not tok:
            continue
        try:
            if tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
                if len(tok) < 4:
                    raise ValueError
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                if len(idx) < 3:
                    raise ValueError
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        except ValueError as exc:
            raise MeshFormatError(f"{path}:{lineno}: malformed '{tok[0]}' record") from exc
    if not faces:
        raise EmptyMeshError(f"{path}: no faces")
    return make_soup(np.array(verts), np.array(faces))


def rescale_to_domain(soup: TriangleSoup, domain=DEFAULT_DOMAIN, fraction=0.5) -> TriangleSoup:
    """Centre the soup in the domain and scale its longest bbox axis to ``fraction`` of the edge."""
    lo, hi = soup.bbox
    extent = float((hi - lo).max())
    if extent <= 0:
        raise ParameterError("cannot rescale a soup with zero extent")
    dlo, dhi = np.asarray(domain[0], float), np.asarray(domain[1], float)
    scale = fraction * float((dhi - dlo).min()) / extent
    v = (soup.vertices - _centroid(soup)) * scale + 0.5 * (dlo + dhi)
    return TriangleSoup(v, soup.triangles.copy(), soup.normals.copy(), soup.dropped)


def _centroid(soup: TriangleSoup):
    if soup.is_watertight:
        a, b, c = np.moveaxis(soup.corners, 1, 0)
        vol = np.einsum("ij,ij->i", a, np.cross(b, c))
        if abs(vol.sum()) > 1e-14 * soup.bbox_diag ** 3:
            return ((a + b + c) * vol[:, None]).sum(axis=0) / (4.0 * vol.sum())
    w = soup.areas
    return (soup.corners.mean(axis=1) * w[:, None]).sum(axis=0) / w.sum()


# ---------------------------------------------------------------- exact oracle

def closest_points_on_triangles(p, a, b, c):
    """Closest point on triangle (a, b, c) to p; all arguments broadcast over leading axes."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    out = a + v_in[..., None] * ab + w_in[..., None] * ac
    # Voronoi regions, applied from lowest to highest precedence.
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    out = np.where(m[..., None], b + t_bc[..., None] * (c - b), out)
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out = np.where(m[..., None], a + t_ac[..., None] * ac, out)
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out = np.where(m[..., None], a + t_ab[..., None] * ab, out)
    out = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, out)
    return out


def _ray_parity(x, corners, direction):
    """Crossing parity of rays x + t*direction (t > 0); None where a ray grazes."""
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    e1, e2 = b - a, c - a
    pvec = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    scale = np.linalg.norm(e1, axis=-1) * np.linalg.norm(e2, axis=-1)
    flat = np.abs(det) < 1e-12 * scale
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(flat, 0.0, 1.0 / det)
    tvec = x[:, None, :] - a[None]
    u = np.einsum("qti,ti->qt", tvec, pvec) * inv
    qvec = np.cross(tvec, e1[None])
    v = np.einsum("i,qti->qt", direction, qvec) * inv
    t = np.einsum("ti,qti->qt", e2, qvec) * inv
    eps = 1e-9
    inside = (u > eps) & (v > eps) & (u + v < 1 - eps) & (t > eps)
    near = (u > -eps) & (v > -eps) & (u + v < 1 + eps) & (t > -eps)
    graze = (near & ~inside) | (near & flat[None])
    parity = inside.sum(axis=1) % 2
    return parity, graze.any(axis=1)


def exact_signed_distance(soup: TriangleSoup, x, require_sign=True):
    """Brute-force signed distance and closest point (foot) for query point(s) ``x``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    q = x.reshape(-1, 3)
    corners = soup.corners
    nt = len(corners)
    dist = np.empty(len(q))
    foot = np.empty_like(q)
    chunk = max(1, _BLOCK // nt)
    for s in range(0, len(q), chunk):
        p = q[s:s + chunk]
        cp = closest_points_on_triangles(p[:, None, :], corners[None, :, 0], corners[None, :, 1],
                                         corners[None, :, 2])
        d2 = np.einsum("qti,qti->qt", p[:, None, :] - cp, p[:, None, :] - cp)
        k = np.argmin(d2, axis=1)
        rows = np.arange(len(p))
        dist[s:s + chunk] = np.sqrt(d2[rows, k])
        foot[s:s + chunk] = cp[rows, k]
    if not soup.is_watertight:
        if require_sign:
            raise NotWatertightError("mesh is not watertight: sign unavailable",
                                     unsigned=dist.reshape(x.shape[:-1]), foot=foot.reshape(x.shape))
        return dist.reshape(x.shape[:-1]), foot.reshape(x.shape)
    sign = np.ones(len(q))
    for s in range(0, len(q), chunk):
        p = q[s:s + chunk]
        todo = np.arange(len(p))
        par = np.zeros(len(p), dtype=np.int64)
        for direction in _RAY_DIRECTIONS:
            d = direction / np.linalg.norm(direction)
            pp, graze = _ray_parity(p[todo], corners, d)
            par[todo] = pp
            todo = todo[graze]
            if len(todo) == 0:
                break
        sign[s:s + chunk] = np.where(par == 1, -1.0, 1.0)
    s_val = sign * dist
    if single:
        return float(s_val[0]), foot[0]
    return s_val.reshape(x.shape[:-1]), foot.reshape(x.shape)


def brute_force_distance(soup: TriangleSoup, x):
    """Unsigned distance by an explicit per-triangle loop (test oracle)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    best = np.full(len(x), np.inf)
    for tri in soup.corners[::-1]:
        cp = closest_points_on_triangles(x, tri[0], tri[1], tri[2])
        best = np.minimum(best, np.linalg.norm(x - cp, axis=-1))
    return best


# ------------------------------------------------------------------ sampling

def sample_surface(soup: TriangleSoup, n: int, seed):
    if n <= 0:
        raise ParameterError("surface sample count must be positive")
    rng = np.random.default_rng(seed)
    return _surface_points(soup, n, rng)


def _surface_points(soup, n, rng):
    w = soup.areas / soup.areas.sum()
    tri = rng.choice(len(w), size=n, p=w)
    r1, r2 = rng.random(n), rng.random(n)
    s1 = np.sqrt(r1)
    u, v, wgt = 1.0 - s1, s1 * (1.0 - r2), s1 * r2
    c = soup.corners[tri]
    pts = u[:, None] * c[:, 0] + v[:, None] * c[:, 1] + wgt[:, None] * c[:, 2]
    return pts, soup.normals[tri].copy()


def _in_box(p, domain):
    lo, hi = np.asarray(domain[0]), np.asarray(domain[1])
    return np.all((p >= lo) & (p <= hi), axis=-1)


class MeshSource:
    """Training source backed by a watertight soup and the exact oracle."""

    dim = 3

    def __init__(self, soup: TriangleSoup):
        self.soup = soup

    def surface(self, n, rng):
        return _surface_points(self.soup, n, rng)

    def signed_distance(self, x):
        s, foot = exact_signed_distance(self.soup, x)
        return np.atleast_1d(s), _normals_from_foot(x, s, foot)


def _normals_from_foot(x, s, foot):
    x = np.atleast_2d(x)
    s = np.atleast_1d(s)
    foot = np.atleast_2d(foot)
    v = x - foot
    nv = np.linalg.norm(v, axis=-1)
    out = np.full_like(x, np.nan)
    ok = nv > 1e-12
    out[ok] = np.sign(s[ok])[:, None] * v[ok] / nv[ok, None]
    return out


class FieldSource:
    """Training source backed by an analytic field (surface found by projection)."""

    def __init__(self, field, domain, h=None):
        self.field = field
        self.dim = field.dim
        self.domain = domain
        edge = float(np.max(np.asarray(domain[1]) - np.asarray(domain[0])))
        self.h = h or 1e-6 * edge
        self.edge = edge

    def _normals(self, x):
        from .sdf import sdf_gradient
        g = sdf_gradient(self.field, x, self.h)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def surface(self, n, rng):
        out = []
        band = 0.02 * self.edge
        got = 0
        while got < n:
            p = sample_box(self.domain, max(4 * n, 1024), rng)
            f = self.field(p)
            p = p[np.abs(f) < band]
            for _ in range(3):
                nrm = self._normals(p)
                p = p - self.field(p)[:, None] * nrm
            out.append(p)
            got += len(p)
        p = np.concatenate(out)[:n]
        return p, self._normals(p)

    def signed_distance(self, x):
        return self.field(x), self._normals(x)


def sample_box(domain, n, rng):
    lo, hi = np.asarray(domain[0], float), np.asarray(domain[1], float)
    return lo + (hi - lo) * rng.random((n, len(lo)))


def sample_uniform(domain, n: int, seed):
    lo, hi = np.asarray(domain[0], float), np.asarray(domain[1], float)
    if lo.shape != hi.shape or np.any(hi <= lo):
        raise ParameterError("degenerate sampling box")
    if n == 0:
        return np.empty((0, len(lo)))
    return sample_box(domain, n, np.random.default_rng(seed))


def sample_narrowband(source, n: int, delta: float, seed, domain=DEFAULT_DOMAIN,
                      max_reject=0.9):
    """Offsets of surface samples along their normals; returns points, s, normals.

    A candidate is rejected if it leaves the domain, if its exact distance
    exceeds delta, or if the offset crossed the surface (sign flip).
    """
    if isinstance(source, TriangleSoup):
        source = MeshSource(source)
    if delta < 0:
        raise ParameterError("narrowband width must be nonnegative")
    rng = np.random.default_rng(seed)
    if n == 0:
        dim = source.dim
        return np.empty((0, dim)), np.empty(0), np.empty((0, dim))
    pts, ss, nn = [], [], []
    tried = kept = 0
    while kept < n:
        m = max(2 * (n - kept), 64)
        base, normal = source.surface(m, rng)
        t = rng.uniform(-delta, delta, size=m)
        p = base + t[:, None] * normal
        tried += m
        inside = _in_box(p, domain)
        s = np.full(m, np.inf)
        nrm = np.full_like(p, np.nan)
        if inside.any():
            s_in, n_in = source.signed_distance(p[inside])
            s[inside] = s_in
            nrm[inside] = n_in
        flipped = (np.abs(t) > 1e-12) & (np.sign(s) != np.sign(t)) & (np.abs(s) > 1e-12)
        ok = inside & (np.abs(s) <= delta) & ~flipped
        nrm[ok] = np.where(np.isnan(nrm[ok]), normal[ok], nrm[ok])
        pts.append(p[ok])
        ss.append(s[ok])
        nn.append(nrm[ok])
        kept += int(ok.sum())
        if tried >= 2 * n and 1.0 - kept / tried > max_reject:
            raise SamplingError(f"narrowband rejection rate {1 - kept / tried:.1%} exceeds "
                                f"{max_reject:.0%}; delta={delta} is too large for this geometry")
    return np.concatenate(pts)[:n], np.concatenate(ss)[:n], np.concatenate(nn)[:n]


@dataclass
class SampleSet:
    surface: np.ndarray
    surface_normals: np.ndarray
    narrowband: np.ndarray
    narrowband_s: np.ndarray
    narrowband_normals: np.ndarray
    uniform: np.ndarray
    uniform_s: np.ndarray
    uniform_normals: np.ndarray
    delta: float
    seed: int
    meta: dict = field(default_factory=dict)

    def concatenated(self):
        x = np.concatenate([self.surface, self.narrowband, self.uniform])
        s = np.concatenate([np.zeros(len(self.surface)), self.narrowband_s, self.uniform_s])
        n = np.concatenate([self.surface_normals, self.narrowband_normals, self.uniform_normals])
        return x, s, n

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "z", "s", "nx", "ny", "nz", "set"])
            for name, x, s, n in (("surface", self.surface, np.zeros(len(self.surface)),
                                   self.surface_normals),
                                  ("narrowband", self.narrowband, self.narrowband_s,
                                   self.narrowband_normals),
                                  ("uniform", self.uniform, self.uniform_s, self.uniform_normals)):
                for xi, si, ni in zip(_pad3(x), s, _pad3(n)):
                    w.writerow([repr(float(v)) for v in xi] + [repr(float(si))]
                               + [repr(float(v)) for v in ni] + [name])


def _pad3(a):
    a = np.asarray(a)
    if a.shape[1] == 3:
        return a
    return np.column_stack([a, np.zeros((len(a), 3 - a.shape[1]))])


def hybrid_samples(source, domain, n_surface, n_narrowband, n_uniform, delta, seed) -> SampleSet:
    """P_S, P_NB and P_U drawn from independent streams spawned from one seed."""
    if isinstance(source, TriangleSoup):
        source = MeshSource(source)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_surf, s_nb, s_uni = ss.spawn(3)
    dim = source.dim
    if n_surface:
        ps, ns = source.surface(n_surface, np.random.default_rng(s_surf))
    else:
        ps, ns = np.empty((0, dim)), np.empty((0, dim))
    pnb, snb, nnb = sample_narrowband(source, n_narrowband, delta, s_nb, domain=domain)
    pu = sample_box(domain, n_uniform, np.random.default_rng(s_uni)) if n_uniform else np.empty((0, dim))
    if len(pu):
        su, nu = source.signed_distance(pu)
    else:
        su, nu = np.empty(0), np.empty((0, dim))
    return SampleSet(ps, ns, pnb, snb, nnb, pu, np.asarray(su, float), nu, delta, seed)


def icosphere(subdivisions: int, radius: float = 1.0) -> TriangleSoup:
    """Subdivided icosahedron projected onto a sphere (20 * 4**k triangles)."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    verts = [tuple(p) for p in v]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = (np.asarray(verts[i]) + np.asarray(verts[j])) / 2.0
                verts.append(tuple(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = np.array(nf)
    return make_soup(np.array(verts) * radius, f)


def box_soup(lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5), drop_face=False) -> TriangleSoup:
    """Axis-aligned box as 12 outward-oriented triangles."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for q in quads[: 5 if drop_face else 6]:
        tris += [[q[0], q[1], q[2]], [q[0], q[2], q[3]]]
    return make_soup(v, np.array(tris))
