"""Signed-distance fields, numerical gradients and distance vectors.

Sign convention: negative inside the solid (Omega-), positive in the fluid
(Omega+), zero on the boundary. Every field is callable on point arrays of
shape ``(..., dim)`` and returns values of shape ``(...)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGradientError, DomainError, ParameterError

GRADIENT_FLOOR = 0.1
DEFAULT_REL_STEP = 1e-4


class ImplicitField:
    """Base class: subclasses implement ``_eval`` on a validated ``(n, dim)`` array."""

    dim: int = 3

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DomainError(f"expected points of dimension {self.dim}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DomainError("non-finite query point")
        flat = x.reshape(-1, self.dim)
        return self._eval(flat).reshape(x.shape[:-1])

    def _eval(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _as_vec(v, dim=None):
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if dim is not None and a.size != dim:
        raise ParameterError(f"expected a {dim}-vector, got {a.size} entries")
    return a


@dataclass(frozen=True, eq=False)
class Circle(ImplicitField):
    radius: float
    center: tuple = (0.0, 0.0)
    dim: int = field(default=2, init=False)

    def __post_init__(self):
        if not self.radius > 0:
            raise ParameterError("circle radius must be positive")
        object.__setattr__(self, "center", tuple(_as_vec(self.center, 2)))

    def _eval(self, x):
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True, eq=False)
class Sphere(ImplicitField):
    radius: float
    center: tuple = (0.0, 0.0, 0.0)
    dim: int = field(default=3, init=False)

    def __post_init__(self):
        if not self.radius > 0:
            raise ParameterError("sphere radius must be positive")
        object.__setattr__(self, "center", tuple(_as_vec(self.center, 3)))

    def _eval(self, x):
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius


@dataclass(frozen=True, eq=False)
class Ring(ImplicitField):
    """Annulus r1 <= |x| <= r2 is the solid; piecewise form with a kink at (r1+r2)/2."""

    r1: float
    r2: float
    center: tuple = (0.0, 0.0)
    dim: int = 2

    def __post_init__(self):
        if not 0 < self.r1 < self.r2:
            raise ParameterError("ring requires 0 < r1 < r2")
        object.__setattr__(self, "center", tuple(_as_vec(self.center, self.dim)))

    def _eval(self, x):
        r = np.linalg.norm(x - np.asarray(self.center), axis=-1)
        band = -np.minimum(r - self.r1, self.r2 - r)
        return np.where(r < self.r1, self.r1 - r, np.where(r > self.r2, r - self.r2, band))


@dataclass(frozen=True, eq=False)
class Box(ImplicitField):
    lo: tuple
    hi: tuple
    dim: int = field(init=False)

    def __post_init__(self):
        lo, hi = _as_vec(self.lo), _as_vec(self.hi)
        if lo.size != hi.size or lo.size not in (2, 3) or np.any(hi <= lo):
            raise ParameterError("box needs lo < hi in 2 or 3 dimensions")
        object.__setattr__(self, "lo", tuple(lo))
        object.__setattr__(self, "hi", tuple(hi))
        object.__setattr__(self, "dim", lo.size)

    def _eval(self, x):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        c, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        q = np.abs(x - c) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True, eq=False)
class Cylinder(ImplicitField):
    """Capped cylinder of radius r and total height h, centred on ``center``."""

    axis: tuple
    radius: float
    height: float
    center: tuple = (0.0, 0.0, 0.0)
    dim: int = field(default=3, init=False)

    def __post_init__(self):
        if not (self.radius > 0 and self.height > 0):
            raise ParameterError("cylinder radius and height must be positive")
        a = _as_vec(self.axis, 3)
        n = np.linalg.norm(a)
        if n == 0:
            raise ParameterError("cylinder axis must be nonzero")
        object.__setattr__(self, "axis", tuple(a / n))
        object.__setattr__(self, "center", tuple(_as_vec(self.center, 3)))

    def _eval(self, x):
        q = x - np.asarray(self.center)
        a = q @ np.asarray(self.axis)
        rho = np.linalg.norm(q - a[:, None] * np.asarray(self.axis), axis=-1)
        d = np.stack([rho - self.radius, np.abs(a) - 0.5 * self.height], axis=-1)
        return np.minimum(d.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)


@dataclass(frozen=True, eq=False)
class Cone(ImplicitField):
    """Infinite solid cone opening from ``apex`` along ``axis``."""

    apex: tuple
    axis: tuple
    half_angle: float
    dim: int = field(default=3, init=False)

    def __post_init__(self):
        if not 0 < self.half_angle < np.pi / 2:
            raise ParameterError("cone half-angle must lie in (0, pi/2)")
        a = _as_vec(self.axis, 3)
        if np.linalg.norm(a) == 0:
            raise ParameterError("cone axis must be nonzero")
        object.__setattr__(self, "axis", tuple(a / np.linalg.norm(a)))
        object.__setattr__(self, "apex", tuple(_as_vec(self.apex, 3)))

    def _eval(self, x):
        q = x - np.asarray(self.apex)
        a = q @ np.asarray(self.axis)
        rho = np.linalg.norm(q - a[:, None] * np.asarray(self.axis), axis=-1)
        s, c = np.sin(self.half_angle), np.cos(self.half_angle)
        # 2D (rho, a) half-plane picture: lateral line through the apex at angle half_angle
        along = rho * s + a * c
        lateral = rho * c - a * s
        return np.where(along >= 0.0, lateral, np.hypot(rho, a))


@dataclass(frozen=True, eq=False)
class Gyroid(ImplicitField):
    """Approximate distance to a gyroid sheet of given thickness.

    The implicit gyroid function is divided by its gradient norm at the query
    point; accurate only within a fraction of a period of the sheet.
    """

    period: float
    thickness: float
    dim: int = field(default=3, init=False)

    def __post_init__(self):
        if not (self.period > 0 and self.thickness > 0):
            raise ParameterError("gyroid period and thickness must be positive")

    def _eval(self, x):
        k = 2.0 * np.pi / self.period
        X, Y, Z = (k * x[:, i] for i in range(3))
        sx, cx, sy, cy, sz, cz = np.sin(X), np.cos(X), np.sin(Y), np.cos(Y), np.sin(Z), np.cos(Z)
        g = sx * cy + sy * cz + sz * cx
        grad = k * np.stack([cx * cy - sz * sx, -sx * sy + cy * cz, -sy * sz + cz * cx], axis=-1)
        gn = np.maximum(np.linalg.norm(grad, axis=-1), 1e-12)
        return (0.5 * self.thickness - np.abs(g)) / gn


@dataclass(frozen=True, eq=False)
class Slice(ImplicitField):
    """2D view f(x, y) = F(x, y, z0) of a 3D field."""

    base: ImplicitField
    z: float = 0.0
    dim: int = field(default=2, init=False)

    def __post_init__(self):
        if self.base.dim != 3:
            raise ParameterError("slice needs a 3D base field")

    def _eval(self, x):
        return self.base._eval(np.column_stack([x, np.full(len(x), self.z)]))


@dataclass(frozen=True, eq=False)
class Constant(ImplicitField):
    """Field with no geometry: f = value everywhere (value > 0 is all fluid)."""

    value: float
    dim: int = 2

    def _eval(self, x):
        return np.full(len(x), float(self.value))


class CountingField(ImplicitField):
    """Wraps a field and counts point evaluations."""

    def __init__(self, base: ImplicitField):
        self.base = base
        self.dim = base.dim
        self.count = 0

    def _eval(self, x):
        self.count += len(x)
        return self.base._eval(x)


def eval_sdf(field: ImplicitField, x) -> np.ndarray:
    return field(x)


def default_step(length_scale: float) -> float:
    return DEFAULT_REL_STEP * length_scale


def sdf_gradient(field: ImplicitField, x, h: float) -> np.ndarray:
    """Central-difference gradient, one stencil pair per axis."""
    if not h > 0:
        raise ParameterError("gradient step h must be positive")
    x = np.asarray(x, dtype=np.float64)
    dim = field.dim
    pts = x.reshape(-1, dim)
    n = len(pts)
    stencil = np.repeat(pts[None], 2 * dim, axis=0)
    for i in range(dim):
        stencil[2 * i, :, i] += h
        stencil[2 * i + 1, :, i] -= h
    vals = field(stencil.reshape(-1, dim)).reshape(2 * dim, n)
    grad = (vals[0::2] - vals[1::2]).T / (2.0 * h)
    return grad.reshape(x.shape)


def distance_vector(field: ImplicitField, x, h: float, floor: float = GRADIENT_FLOOR,
                    values=None) -> np.ndarray:
    """d = -f grad f / |grad f|: the vector from x to its closest boundary point."""
    x = np.asarray(x, dtype=np.float64)
    g = sdf_gradient(field, x, h).reshape(-1, field.dim)
    f = field(x).reshape(-1) if values is None else np.asarray(values).reshape(-1)
    norm = np.linalg.norm(g, axis=-1)
    bad = norm < floor
    if np.any(bad):
        pts = x.reshape(-1, field.dim)[bad]
        raise DegenerateGradientError(
            f"degenerate gradient (medial axis?) at {len(pts)} point(s), first {pts[0].tolist()}",
            points=pts)
    d = -(f / norm)[:, None] * g
    return d.reshape(x.shape)


class Transformed(ImplicitField):
    """f(x) = scale * base((x - offset) / scale): a field moved and uniformly scaled.

    Uniform scaling keeps distances exact, so a network trained on the
    canonical box can serve any placement of the same shape.
    """

    def __init__(self, base: ImplicitField, offset, scale: float):
        if not scale > 0:
            raise ParameterError("scale must be positive")
        self.base = base
        self.dim = base.dim
        self.offset = _as_vec(offset, base.dim)
        self.scale = float(scale)

    def _eval(self, x):
        return self.scale * self.base._eval((x - self.offset) / self.scale)
