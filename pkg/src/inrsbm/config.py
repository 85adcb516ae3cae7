"""JSON case configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .octree import RefineSpec, Region
from . import sdf as sdf_mod

SHAPES = {
    "circle": sdf_mod.Circle,
    "sphere": sdf_mod.Sphere,
    "ring": sdf_mod.Ring,
    "box": sdf_mod.Box,
    "cylinder": sdf_mod.Cylinder,
    "cone": sdf_mod.Cone,
    "gyroid": sdf_mod.Gyroid,
}


@dataclass
class GeometryConfig:
    kind: str = "analytic"          # analytic | soup | model | none
    shape: str = None
    params: dict = field(default_factory=dict)
    path: str = None
    offset: list = None             # model/soup placement: x = offset + scale * x_canonical
    scale: float = 1.0
    fraction: float = 0.5           # soup rescaling fraction of the domain edge
    dim: int = None


@dataclass
class RefineConfig:
    base_level: int = 5
    boundary_level: int = None
    boundary_factor: float = 1.0
    regions: list = field(default_factory=list)


@dataclass
class EvalConfig:
    level: int = 8
    base_level: int = 3
    grid_res: int = 256
    delta: float = 2.0 ** -10
    name: str = "geometry"
    reference: GeometryConfig = None


@dataclass
class BenchConfig:
    subdivisions: list = field(default_factory=lambda: [2, 3, 4])
    queries: int = 2000
    repeats: int = 3
    model: str = None
    widths: list = field(default_factory=lambda: [64, 64, 64, 64])


@dataclass
class CaseConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    domain: list = None
    refine: RefineConfig = field(default_factory=RefineConfig)
    lambda_criteria: float = 0.5
    Re: float = 100.0
    dt: float = 0.5
    steady_tol: float = 1e-6
    t_final: float = None
    max_steps: int = 500
    bc: str = "ldc2d"
    gamma: float = 200.0
    gp_order: int = 2
    output_dir: str = None
    seed: int = 0
    vtk_every: int = 0
    probe_points: int = 129
    train: dict = field(default_factory=dict)
    train_domain: list = None
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self):
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if not self.Re > 0:
            raise ConfigError(f"Re must be positive, got {self.Re}")
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if not 0 < self.lambda_criteria <= 1:
            raise ConfigError("lambda_criteria must lie in (0, 1]")
        if self.gp_order < 2:
            raise ConfigError("gp_order must be at least 2")
        if self.bc not in ("ldc2d", "ldc3d", "channel", "pipe"):
            raise ConfigError(f"unknown bc preset '{self.bc}'")
        if self.geometry.kind not in ("analytic", "soup", "model", "none"):
            raise ConfigError(f"unknown geometry kind '{self.geometry.kind}'")
        if self.domain is not None:
            lo, hi = (np.asarray(v, float) for v in self.domain)
            if lo.shape != hi.shape or np.any(hi <= lo):
                raise ConfigError("domain must be [[lo...], [hi...]] with lo < hi")
        return self

    @property
    def dim(self):
        if self.domain is not None:
            return len(self.domain[0])
        return 3 if self.bc in ("ldc3d", "pipe") else 2

    def box(self):
        if self.domain is not None:
            return tuple(tuple(float(v) for v in d) for d in self.domain)
        return ((0.0,) * self.dim, (1.0,) * self.dim)


_NESTED = {"geometry": GeometryConfig, "refine": RefineConfig, "eval": EvalConfig,
           "bench": BenchConfig, "reference": GeometryConfig}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kw = {}
    for k, v in data.items():
        if k in _NESTED and v is not None:
            v = _build(_NESTED[k], v, f"{where}.{k}")
        kw[k] = v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def parse_config(data: dict) -> CaseConfig:
    return _build(CaseConfig, data, "config").validate()


def load_config(path) -> CaseConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise InputError(f"cannot read config file {p}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return parse_config(data)


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


# ---------------------------------------------------------------- geometry

def analytic_field(shape: str, params: dict):
    try:
        cls = SHAPES[shape]
    except KeyError:
        raise ConfigError(f"unknown analytic shape '{shape}'") from None
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {shape}: {exc}") from exc


def make_field(geo: GeometryConfig, dim: int, domain=None):
    """ImplicitField for a geometry block (analytic, trained model, or none)."""
    from .inr import Mlp, NeuralField
    if geo.kind == "none":
        return sdf_mod.Constant(1.0, dim)
    if geo.kind == "analytic":
        f = analytic_field(geo.shape, geo.params)
    elif geo.kind == "model":
        if not geo.path:
            raise ConfigError("geometry.kind = model needs geometry.path")
        f = NeuralField(Mlp.load(geo.path))
    elif geo.kind == "soup":
        raise ConfigError("triangle soups are training sources; train a model first")
    else:
        raise ConfigError(f"unknown geometry kind '{geo.kind}'")
    if geo.offset is not None or geo.scale != 1.0:
        f = sdf_mod.Transformed(f, geo.offset if geo.offset is not None else [0.0] * f.dim,
                                geo.scale)
    if f.dim != dim:
        raise ConfigError(f"geometry is {f.dim}-D but the case is {dim}-D")
    return f


def refine_spec(rc: RefineConfig) -> RefineSpec:
    regions = []
    for r in rc.regions:
        r = dict(r)
        level = r.pop("level")
        shape = r.pop("shape")
        regions.append(Region(analytic_field(shape, r), int(level)))
    return RefineSpec(rc.base_level, rc.boundary_level, rc.boundary_factor, regions)
