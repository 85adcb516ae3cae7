"""VMS-stabilised incompressible Navier-Stokes on the surrogate domain.

Equal-order Q1 velocity/pressure on the assembled leaves of an incomplete
tree. The immersed boundary enters through shifted-boundary (Nitsche-type)
face terms on the surrogate faces; the outer box carries strong Dirichlet
data. Time integration is BDF2 (backward Euler for the first step) with a
Newton solve per step on the constraint-condensed system.

Unknowns are node-major: dof = node * (dim + 1) + c, c = dim is pressure.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (AssemblyError, LinearSolverError, NewtonNonConvergence, ParameterError)
from .linalg import ConstraintOperator, as_csr, constraint_operator, solve_krylov
from .octree import ROOT, Octree, build_constraints, corner_offsets
from .quadrature import gauss_tensor
from .surrogate import (ElementMarkers, SurrogateBoundary, boundary_gauss_distance_vectors)

log = logging.getLogger(__name__)

BDF2 = (1.5, -2.0, 0.5)
BACKWARD_EULER = (1.0, -1.0, 0.0)


@dataclass
class SolverParams:
    Re: float = 100.0
    gamma: float = 200.0
    C_M: float = 36.0
    gp_order: int = 2
    newton_tol: float = 1e-8
    newton_abs: float = 1e-12
    newton_maxit: int = 15
    linear_method: str = "bicgstab"
    preconditioner: str = "ilu0"
    linear_rtol: float = 1e-10
    linear_maxit: int = 2000
    reynolds_stress_jacobian: bool = False

    def __post_init__(self):
        if not self.Re > 0:
            raise ParameterError("Re must be positive")
        if not self.gamma > 0:
            raise ParameterError("gamma must be positive")
        if self.gp_order < 2:
            raise ParameterError("gp_order must be at least 2")


def compute_tau(dt, u, G, g, Re, C_M=36.0):
    """tau_M = (4/dt^2 + u.Gu + C_M/Re^2 G:G)^(-1/2), tau_C = 1/(tau_M g.g).

    ``dt`` may be inf (steady); ``Re`` may be inf (inviscid limit).
    """
    u = np.asarray(u, float)
    G = np.asarray(G, float)
    g = np.asarray(g, float)
    uGu = np.einsum("...i,...ij,...j->...", u, G, u)
    GG = np.einsum("...ij,...ij->...", G, G)
    t = (4.0 / dt ** 2 if np.isfinite(dt) else 0.0) + uGu
    if np.isfinite(Re):
        t = t + C_M / Re ** 2 * GG
    tau_m = t ** -0.5
    tau_c = 1.0 / (tau_m * np.einsum("...i,...i->...", g, g))
    return tau_m, tau_c


def element_metrics(h):
    """G (diagonal entries) and g for axis-aligned cells mapped from [-1, 1]^dim."""
    inv = 2.0 / np.asarray(h, float)
    return inv ** 2, inv


# ----------------------------------------------------------------- basis

def shape_functions(xi):
    """Q1 values (n, nb) and reference gradients (n, nb, dim) at xi in [0,1]^dim."""
    xi = np.atleast_2d(xi)
    n, dim = xi.shape
    off = corner_offsets(dim)
    fac = np.where(off[None].astype(bool), xi[:, None, :], 1.0 - xi[:, None, :])
    dfac = np.where(off[None].astype(bool), 1.0, -1.0) * np.ones((n, 1, 1))
    N = np.prod(fac, axis=2)
    dN = np.empty((n, len(off), dim))
    for j in range(dim):
        other = np.prod(np.delete(fac, j, axis=2), axis=2)
        dN[:, :, j] = dfac[:, :, j] * other
    return N, dN


# ----------------------------------------------------------- boundary data

@dataclass
class BoundaryConditions:
    """Strong Dirichlet data on the outer box plus the immersed-boundary datum.

    ``wall`` maps node coordinates (n, dim) and the box to (mask (n, dim),
    values (n, dim)) for the nodes on the box; ``u_d`` is the velocity on the
    immersed boundary (zero by default); ``pin_pressure`` fixes p = 0 at one
    node for enclosed flows.
    """

    name: str
    wall: object
    pin_pressure: bool = True
    u_d: object = None
    forcing: object = None

    def strong(self, x, lo, hi):
        return self.wall(x, lo, hi)

    @classmethod
    def ldc2d(cls, lid_speed=1.0, leaky=False):
        def wall(x, lo, hi):
            tol = 1e-12 * np.max(hi - lo)
            on = np.any((x <= lo + tol) | (x >= hi - tol), axis=1)
            mask = np.repeat(on[:, None], 2, axis=1)
            val = np.zeros_like(x)
            top = x[:, 1] >= hi[1] - tol
            if not leaky:
                side = (x[:, 0] <= lo[0] + tol) | (x[:, 0] >= hi[0] - tol)
                top &= ~side
            val[top, 0] = lid_speed
            return mask, val
        return cls("ldc2d", wall, True)

    @classmethod
    def ldc3d(cls, lid_speed=1.0, leaky=False):
        def wall(x, lo, hi):
            tol = 1e-12 * np.max(hi - lo)
            on = np.any((x <= lo + tol) | (x >= hi - tol), axis=1)
            mask = np.repeat(on[:, None], 3, axis=1)
            val = np.zeros_like(x)
            top = x[:, 2] >= hi[2] - tol
            if not leaky:
                side = np.any((x[:, :2] <= lo[:2] + tol) | (x[:, :2] >= hi[:2] - tol), axis=1)
                top &= ~side
            val[top, 0] = lid_speed
            return mask, val
        return cls("ldc3d", wall, True)

    @classmethod
    def channel(cls, u_max=1.0):
        """Parabolic inflow at x = lo, no-slip walls in y, outflow at x = hi with v = 0."""
        def wall(x, lo, hi):
            tol = 1e-12 * np.max(hi - lo)
            inlet = x[:, 0] <= lo[0] + tol
            outlet = x[:, 0] >= hi[0] - tol
            walls = np.zeros(len(x), dtype=bool)
            for a in range(1, x.shape[1]):
                walls |= (x[:, a] <= lo[a] + tol) | (x[:, a] >= hi[a] - tol)
            mask = np.zeros_like(x, dtype=bool)
            mask[inlet | walls] = True
            mask[outlet, 1:] = True
            val = np.zeros_like(x)
            prof = np.ones(len(x))
            for a in range(1, x.shape[1]):
                s = (x[:, a] - lo[a]) / (hi[a] - lo[a])
                prof *= 4.0 * s * (1.0 - s)
            sel = inlet & ~walls
            val[sel, 0] = u_max * prof[sel]
            return mask, val
        return cls("channel", wall, False)

    @classmethod
    def pipe(cls, u_max=1.0):
        bc = cls.channel(u_max)
        bc.name = "pipe"
        return bc

    @classmethod
    def preset(cls, name, **kw):
        try:
            return {"ldc2d": cls.ldc2d, "ldc3d": cls.ldc3d, "channel": cls.channel,
                    "pipe": cls.pipe}[name](**kw)
        except KeyError:
            raise ParameterError(f"unknown boundary preset '{name}'") from None


def poiseuille(y, lo, hi, u_max=1.0):
    s = (np.asarray(y) - lo) / (hi - lo)
    return 4.0 * u_max * s * (1.0 - s)


# ------------------------------------------------------------------ state

@dataclass
class FlowState:
    u: np.ndarray
    p: np.ndarray
    u_prev: np.ndarray = None
    t: float = 0.0
    dt: float = None
    step: int = 0

    def vector(self):
        return np.column_stack([self.u, self.p]).ravel()

    @classmethod
    def from_vector(cls, X, dim, **kw):
        a = X.reshape(-1, dim + 1)
        return cls(a[:, :dim].copy(), a[:, dim].copy(), **kw)


# ---------------------------------------------------------------- problem

@dataclass
class LinearStats:
    newton_iterations: int = 0
    linear_iterations: list = field(default_factory=list)
    fallbacks: int = 0


class FlowProblem:
    """Mesh, constraints and quadrature data for one surrogate domain."""

    def __init__(self, tree: Octree, markers: ElementMarkers, boundary: SurrogateBoundary,
                 field, params: SolverParams, bc: BoundaryConditions):
        self.tree = tree
        self.dim = dim = tree.dim
        self.params = params
        self.bc = bc
        self.field = field
        self.markers = markers
        self.boundary = boundary
        self.assembled = np.asarray(markers.assembled, dtype=bool)
        self.elements = np.flatnonzero(self.assembled)
        if not len(self.elements):
            raise AssemblyError("no assembled elements: the surrogate fluid domain is empty")
        coords, conn = tree.nodes()
        self.node_lattice = coords
        self.node_x = tree.to_physical(coords)
        self.conn = conn
        self.n_nodes = len(coords)
        self.ndof = self.n_nodes * (dim + 1)
        self.active = np.zeros(self.n_nodes, dtype=bool)
        self.active[conn[self.elements].ravel()] = True
        self._volume_data()
        self._face_data()
        self._constraints()
        self.stats = LinearStats()

    # ---------------------------------------------------------- setup

    def _volume_data(self):
        ref, w = gauss_tensor(self.params.gp_order, self.dim)
        N, dN = shape_functions(ref)
        self.N = N
        h = self.tree.leaf_h(self.elements)
        self.h = h
        self.B = dN[None] / h[:, None, None, :]
        self.w = w[None] * np.prod(h, axis=1)[:, None]
        lo, _ = self.tree.leaf_bounds(self.elements)
        self.xq = lo[:, None, :] + ref[None] * h[:, None, :]
        self.Gd, self.gv = element_metrics(h)

    def _face_data(self):
        b = self.boundary
        dim = self.dim
        self.n_faces = 0 if b is None else len(b)
        if not self.n_faces:
            return
        pos = np.full(len(self.tree), -1)
        pos[self.elements] = np.arange(len(self.elements))
        owner = pos[b.leaf]
        if np.any(owner < 0):
            raise AssemblyError("surrogate face owned by a non-assembled leaf")
        pts, wf = b.gauss_points(self.params.gp_order)
        d = boundary_gauss_distance_vectors(b, self.field, self.params.gp_order)
        if not np.all(np.isfinite(d)):
            raise AssemblyError("missing distance vector at a surrogate Gauss point")
        lo, hi = self.tree.leaf_bounds(b.leaf)
        hf = hi - lo
        xi = (pts - lo[:, None]) / hf[:, None]
        F, Qf = pts.shape[:2]
        N, dN = shape_functions(xi.reshape(-1, dim))
        self.fN = N.reshape(F, Qf, -1)
        self.fB = dN.reshape(F, Qf, -1, dim) / hf[:, None, None, :]
        self.fw = wf
        self.fd = d
        self.fn = b.normals
        self.fh = hf[np.arange(F), b.axis]
        self.fowner = owner
        ud = np.zeros_like(pts)
        if self.bc.u_d is not None:
            ud = np.asarray(self.bc.u_d((pts + d).reshape(-1, dim)), float).reshape(pts.shape)
        self.fud = ud
        self.fx = pts

    def _constraints(self):
        dim = self.dim
        k = dim + 1
        hang = build_constraints(self.tree, self.assembled)
        self.hanging = hang
        cons = {}
        for n, masters in hang.items():
            for c in range(k):
                cons[n * k + c] = [(m * k + c, w) for m, w in masters]
        dirichlet = {}
        for n in np.flatnonzero(~self.active):
            for c in range(k):
                dirichlet[int(n) * k + c] = 0.0
        act = np.flatnonzero(self.active)
        lo, hi = self.tree.lo, self.tree.hi
        onbox = np.any((self.node_lattice[act] == 0) | (self.node_lattice[act] == ROOT), axis=1)
        bn = act[onbox]
        mask, val = self.bc.strong(self.node_x[bn], lo, hi)
        for n, m, v in zip(bn, mask, val):
            for c in range(dim):
                if m[c]:
                    dirichlet[int(n) * k + c] = float(v[c])
        self.pin = None
        if self.bc.pin_pressure:
            free = [n for n in act if int(n) not in hang]
            # node closest to the lower box corner
            n0 = min(free, key=lambda n: tuple(self.node_lattice[n][::-1]))
            dirichlet[int(n0) * k + dim] = 0.0
            self.pin = int(n0)
        self.dirichlet = dirichlet
        self.op: ConstraintOperator = constraint_operator(self.ndof, cons, dirichlet)

    # -------------------------------------------------------- assembly

    def initial_state(self):
        X = self.op.recover(np.zeros(len(self.op.free)))
        return FlowState.from_vector(X, self.dim, t=0.0)

    def _local(self, X, elems):
        k = self.dim + 1
        A = X.reshape(-1, k)
        loc = A[self.conn[elems]]
        return loc[..., :self.dim], loc[..., self.dim]

    def residual_jacobian(self, X, hist=None, c=0.0, dt=math.inf, jacobian=True,
                          reynolds_stress=True, reynolds_stress_jacobian=None):
        """Global residual and Jacobian (csr) at the full vector X.

        ``hist`` is the nodal array (n_nodes, dim) of alpha_1 u^n + alpha_2 u^(n-1),
        ``c`` = alpha_0 / dt, so u_t = c u + hist/dt at quadrature points.
        """
        p = self.params
        rs_jac = p.reynolds_stress_jacobian if reynolds_stress_jacobian is None \
            else reynolds_stress_jacobian
        dim, nb = self.dim, self.N.shape[1]
        k = dim + 1
        ndl = nb * k
        R = np.zeros(self.ndof)
        rows, cols, vals = [], [], []
        if hist is None:
            hist = np.zeros((self.n_nodes, dim))
        chunk = max(1, 2_000_000 // (self.N.shape[0] * ndl * ndl))
        for s0 in range(0, len(self.elements), chunk):
            sl = slice(s0, s0 + chunk)
            el = self.elements[sl]
            Rl, Jl = self._volume_terms(X, hist, c, dt, sl, el, jacobian, reynolds_stress,
                                        rs_jac)
            self._scatter(R, rows, cols, vals, el, Rl, Jl)
        if self.n_faces:
            Rl, Jl = self._face_terms(X, jacobian)
            self._scatter(R, rows, cols, vals, self.elements[self.fowner], Rl, Jl)
        if not jacobian:
            return R, None
        J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.ndof, self.ndof))
        J.sum_duplicates()
        return R, J

    def _dofs(self, el):
        k = self.dim + 1
        return (self.conn[el][:, :, None] * k + np.arange(k)[None, None]).reshape(len(el), -1)

    def _scatter(self, R, rows, cols, vals, el, Rl, Jl):
        dofs = self._dofs(el)
        np.add.at(R, dofs.ravel(), Rl.reshape(-1))
        if Jl is not None:
            n = dofs.shape[1]
            rows.append(np.repeat(dofs, n, axis=1).ravel())
            cols.append(np.tile(dofs, (1, n)).ravel())
            vals.append(Jl.reshape(-1))

    @staticmethod
    def _pack(Ruu, Rp, Juu, Jup, Jpu, Jpp):
        """Interleave velocity/pressure blocks into node-major local ordering."""
        E, nb, dim = Ruu.shape
        k = dim + 1
        Rl = np.concatenate([Ruu, Rp[..., None]], axis=2).reshape(E, nb * k)
        if Juu is None:
            return Rl, None
        J = np.zeros((E, nb, k, nb, k))
        J[:, :, :dim, :, :dim] = Juu
        J[:, :, :dim, :, dim] = Jup
        J[:, :, dim, :, :dim] = Jpu
        J[:, :, dim, :, dim] = Jpp
        return Rl, J.reshape(E, nb * k, nb * k)

    def _volume_terms(self, X, hist_nodal, c, dt, sl, el, jacobian, reynolds_stress, rs_jac):
        p = self.params
        Re, dim = p.Re, self.dim
        U, P = self._local(X, el)
        Hn = hist_nodal[self.conn[el]]
        N = self.N
        B = self.B[sl]
        w = self.w[sl]
        Gd, gv = self.Gd[sl], self.gv[sl]
        u = np.einsum("qb,ebk->eqk", N, U)
        L = np.einsum("ebk,eqbj->eqkj", U, B)
        pr = np.einsum("qb,eb->eq", N, P)
        gp = np.einsum("eb,eqbj->eqj", P, B)
        hist = np.einsum("qb,ebk->eqk", N, Hn)
        ut = c * u + (hist / dt if np.isfinite(dt) else 0.0)
        conv = np.einsum("eqj,eqij->eqi", u, L)
        f = 0.0
        if self.bc.forcing is not None:
            f = np.asarray(self.bc.forcing(self.xq[sl].reshape(-1, dim)), float).reshape(u.shape)
        rM = ut + conv + gp - f
        rC = np.trace(L, axis1=2, axis2=3)
        Gu = Gd[:, None, :] * u
        uGu = np.einsum("eqi,eqi->eq", u, Gu)
        GG = np.sum(Gd ** 2, axis=1)[:, None]
        gg = np.sum(gv ** 2, axis=1)[:, None]
        tM = ((4.0 / dt ** 2 if np.isfinite(dt) else 0.0) + uGu + p.C_M / Re ** 2 * GG) ** -0.5
        tC = 1.0 / (tM * gg)
        uB = np.einsum("eqj,eqbj->eqb", u, B)
        Lr = np.einsum("eqij,eqj->eqi", L, rM)
        Br = np.einsum("eqaj,eqj->eqa", B, rM)
        eps2 = L + np.swapaxes(L, 2, 3)

        Rm = (np.einsum("qa,eqi->eqai", N, ut + conv - f)
              + np.einsum("eqij,eqaj->eqai", eps2, B) / Re
              - pr[:, :, None, None] * B
              + (uB * tM[..., None])[..., None] * rM[:, :, None, :]
              - np.einsum("qa,eqi->eqai", N, tM[..., None] * Lr)
              + (tC * rC)[:, :, None, None] * B)
        if reynolds_stress:
            Rm = Rm - (tM[..., None] ** 2 * Br)[..., None] * rM[:, :, None, :]
        Rc = N[None] * rC[..., None] + tM[..., None] * Br
        Rm = np.einsum("eq,eqai->eai", w, Rm)
        Rc = np.einsum("eq,eqa->ea", w, Rc)
        if not jacobian:
            return self._pack(Rm, Rc, None, None, None, None)

        eye = np.eye(dim)
        cNuB = c * N[None] + uB
        # D[e,q,i,k,b] = d rM_i / d U_bk
        D = (eye[None, None, :, :, None] * cNuB[:, :, None, None, :]
             + L[..., None] * N[None, :, None, None, :])
        T = -(tM ** 3)[..., None, None] * N[None, :, :, None] * Gu[:, :, None, :]
        dtC = -(tC / tM)[..., None, None] * T
        BB = np.einsum("eqaj,eqbj->eqab", B, B)
        Ww = w[..., None, None, None, None]

        Juu = np.einsum("qa,eqikb->eqaibk", N, D)
        Juu += (eye[None, None, None, :, None, :] * BB[:, :, :, None, :, None]
                + np.einsum("eqak,eqbi->eqaibk", B, B)) / Re
        Juu += np.einsum("qb,eqak,eqi->eqaibk", N, B, tM[..., None] * rM)
        Juu += np.einsum("eqa,eqbk,eqi->eqaibk", uB, T, rM)
        Juu += np.einsum("eqa,eqikb->eqaibk", uB * tM[..., None], D)
        Juu -= np.einsum("qa,eqbk,eqi->eqaibk", N, T, Lr)
        Juu -= np.einsum("qa,eqij,eqjkb->eqaibk", N, L * tM[..., None, None], D)
        Juu -= (eye[None, None, None, :, None, :]
                * np.einsum("qa,eqb->eqab", N, tM[..., None] * np.einsum("eqj,eqbj->eqb", rM, B))
                [:, :, :, None, :, None])
        Juu += np.einsum("eqai,eqbk->eqaibk", B, dtC * rC[..., None, None])
        Juu += np.einsum("eqai,eqbk->eqaibk", B * tC[..., None, None], B)

        Jup = (-np.einsum("qb,eqai->eqaib", N, B)
               + np.einsum("eqa,eqbi->eqaib", uB * tM[..., None], B)
               - np.einsum("qa,eqij,eqbj->eqaib", N, L * tM[..., None, None], B))
        Jpu = (np.einsum("qa,eqbk->eqabk", N, B)
               + np.einsum("eqbk,eqa->eqabk", T, Br)
               + np.einsum("eqaj,eqjkb->eqabk", B * tM[..., None, None], D))
        Jpp = tM[..., None, None] * BB
        if reynolds_stress and rs_jac:
            t2 = tM[..., None] ** 2
            Juu -= 2.0 * np.einsum("eqbk,eqa,eqi->eqaibk", T * tM[..., None, None], Br, rM)
            Juu -= np.einsum("eqaj,eqjkb,eqi->eqaibk", B * t2[..., None], D, rM)
            Juu -= np.einsum("eqa,eqikb->eqaibk", Br * t2, D)
            Jup -= (np.einsum("eqab,eqi->eqaib", BB * t2[..., None], rM)
                    + np.einsum("eqa,eqbi->eqaib", Br * t2, B))
        Juu = np.einsum("eq,eqaibk->eaibk", w, Juu)
        Jup = np.einsum("eq,eqaib->eaib", w, Jup)
        Jpu = np.einsum("eq,eqabk->eabk", w, Jpu)
        Jpp = np.einsum("eq,eqab->eab", w, Jpp)
        return self._pack(Rm, Rc, Juu, Jup, Jpu, Jpp)

    def _face_terms(self, X, jacobian):
        p = self.params
        Re, gam, dim = p.Re, p.gamma, self.dim
        el = self.elements[self.fowner]
        U, P = self._local(X, el)
        N, B, w, d, n = self.fN, self.fB, self.fw, self.fd, self.fn
        u = np.einsum("fqb,fbk->fqk", N, U)
        L = np.einsum("fbk,fqbj->fqkj", U, B)
        pr = np.einsum("fqb,fb->fq", N, P)
        e = u + np.einsum("fqij,fqj->fqi", L, d) - self.fud
        S = N + np.einsum("fqbj,fqj->fqb", B, d)
        Bn = np.einsum("fqaj,fj->fqa", B, n)
        Be = np.einsum("fqaj,fqj->fqa", B, e)
        eps2n = np.einsum("fqij,fj->fqi", L + np.swapaxes(L, 2, 3), n)
        ne = np.einsum("fqi,fi->fq", e, n)
        pen = (gam / (Re * self.fh))[:, None]
        traction = eps2n / Re - pr[..., None] * n[:, None, :]
        Rm = (-N[..., None] * traction[:, :, None, :]
              - (Bn[..., None] * e[:, :, None, :] + n[:, None, None, :] * Be[..., None]) / Re
              + (pen[..., None] * S)[..., None] * e[:, :, None, :])
        Rc = -N * ne[..., None] / Re
        Rm = np.einsum("fq,fqai->fai", w, Rm)
        Rc = np.einsum("fq,fqa->fa", w, Rc)
        if not jacobian:
            return self._pack(Rm, Rc, None, None, None, None)
        eye = np.eye(dim)
        Juu = -(np.einsum("fqa,fqb,ik->fqaibk", N, Bn, eye)
                + np.einsum("fqa,fqbi,fk->fqaibk", N, B, n)) / Re
        Juu -= (np.einsum("fqa,fqb,ik->fqaibk", Bn, S, eye)
                + np.einsum("fi,fqak,fqb->fqaibk", n, B, S)) / Re
        Juu += np.einsum("fqa,fqb,ik->fqaibk", pen[..., None] * S, S, eye)
        Jup = np.einsum("fqa,fqb,fi->fqaib", N, N, n)
        Jpu = -np.einsum("fqa,fk,fqb->fqabk", N, n, S) / Re
        Juu = np.einsum("fq,fqaibk->faibk", w, Juu)
        Jup = np.einsum("fq,fqaib->faib", w, Jup)
        Jpu = np.einsum("fq,fqabk->fabk", w, Jpu)
        Jpp = np.zeros(Jpu.shape[:3])
        return self._pack(Rm, Rc, Juu, Jup, Jpu, Jpp)

    # ---------------------------------------------------------- solvers

    def solve_linear(self, A, b):
        p = self.params
        attempts = [(p.linear_method, p.preconditioner)]
        if p.linear_method != "gmres":
            attempts.append(("gmres", p.preconditioner))
        last = None
        for method, pre in attempts:
            try:
                x, st = solve_krylov(A, b, method=method, preconditioner=pre, rtol=p.linear_rtol,
                                     maxit=p.linear_maxit)
                self.stats.linear_iterations.append(st.iterations)
                return x
            except LinearSolverError as exc:
                last = exc
                self.stats.fallbacks += 1
                log.info("linear solve with %s/%s failed: %s", method, pre, exc)
        # last resort for small or badly conditioned systems
        x = spla.spsolve(as_csr(A).tocsc(), b)
        if not np.all(np.isfinite(x)):
            raise last
        self.stats.linear_iterations.append(-1)
        return x

    def newton(self, X0, hist, c, dt):
        p = self.params
        op = self.op
        y = X0[op.free].copy()
        X = op.recover(y)
        history = []
        for it in range(p.newton_maxit + 1):
            R, J = self.residual_jacobian(X, hist, c, dt, jacobian=True)
            r = op.reduce_vector(R)
            nr = float(np.linalg.norm(r))
            history.append(nr)
            if nr <= max(p.newton_tol * history[0], p.newton_abs):
                self.stats.newton_iterations += it
                return X, history
            if it == p.newton_maxit:
                break
            Jr = op.reduce_matrix(J)
            dy = self.solve_linear(Jr, -r)
            y += dy
            X = op.recover(y)
        if history[-1] > 0.1 * history[0]:
            raise NewtonNonConvergence(
                f"Newton stagnated: residual {history[0]:.3e} -> {history[-1]:.3e} in "
                f"{p.newton_maxit} iterations", history)
        log.warning("Newton stopped at %.3e (initial %.3e) after %d iterations", history[-1],
                    history[0], p.newton_maxit)
        self.stats.newton_iterations += p.newton_maxit
        return X, history

    def steady_residual(self, X):
        return self.op.reduce_vector(self.residual_jacobian(X, jacobian=False)[0])


def bdf2_step(problem: FlowProblem, state: FlowState, dt: float) -> tuple:
    """Advance one step; backward Euler when no second history level exists."""
    if not dt > 0:
        raise ParameterError("dt must be positive")
    dim = problem.dim
    if state.u_prev is None:
        a0, a1, a2 = BACKWARD_EULER
        prev = state.u
    else:
        a0, a1, a2 = BDF2
        prev = state.u_prev
    hist = a1 * state.u + a2 * prev
    X, history = problem.newton(state.vector(), hist, a0 / dt, dt)
    new = FlowState.from_vector(X, dim, u_prev=state.u.copy(), t=state.t + dt, dt=dt,
                                step=state.step + 1)
    return new, history


def run_to_steady(problem: FlowProblem, dt, steady_tol=1e-6, max_steps=500, state=None,
                  callback=None):
    """March until max|u^(n+1) - u^n| / dt < steady_tol."""
    state = state or problem.initial_state()
    log_rows = []
    for _ in range(max_steps):
        new, hist = bdf2_step(problem, state, dt)
        change = float(np.max(np.abs(new.u - state.u))) / dt
        log_rows.append(dict(step=new.step, t=new.t, change=change, newton_its=len(hist) - 1,
                             residual0=hist[0], residual=hist[-1]))
        state = new
        if callback:
            callback(state, log_rows[-1])
        if change < steady_tol:
            break
    return state, log_rows


def divergence_norm(problem: FlowProblem, state: FlowState) -> float:
    """(integral of (div u_h)^2 over the assembled leaves)^(1/2)."""
    U = state.u[problem.conn[problem.elements]]
    div = np.einsum("ebk,eqbk->eq", U, problem.B)
    return float(np.sqrt(np.sum(problem.w * div ** 2)))


def interpolate(problem: FlowProblem, state: FlowState, x):
    """Velocity and pressure at physical points; NaN outside the assembled domain."""
    tree = problem.tree
    x = np.atleast_2d(np.asarray(x, float))
    lat = np.floor((x - tree.lo) / tree.scale).astype(np.int64)
    lat = np.minimum(lat, ROOT - 1)
    leaf = tree.locate(lat)
    u = np.full((len(x), problem.dim), np.nan)
    pr = np.full(len(x), np.nan)
    ok = leaf >= 0
    ok[ok] = problem.assembled[leaf[ok]]
    if ok.any():
        lf = leaf[ok]
        lo, hi = tree.leaf_bounds(lf)
        N, _ = shape_functions((x[ok] - lo) / (hi - lo))
        nodes = problem.conn[lf]
        u[ok] = np.einsum("nb,nbk->nk", N, state.u[nodes])
        pr[ok] = np.einsum("nb,nb->n", N, state.p[nodes])
    return u, pr
