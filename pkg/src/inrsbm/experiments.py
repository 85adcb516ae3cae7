"""Experiment pipelines shared by scripts/ and the acceptance suite."""

from __future__ import annotations

import time

import numpy as np

from .fem import (BoundaryConditions, FlowProblem, SolverParams, divergence_norm, interpolate,
                  poiseuille, run_to_steady)
from .inr import Mlp, NeuralField
from .io import probe_profiles, probe_rows
from .octree import RefineSpec, build_incomplete
from .sdf import Circle, Constant, Sphere, Transformed
from .surrogate import classify_elements, extract_surrogate_boundary
from .training import (TrainConfig, distance_vector_similarity, domain_edge, nmse, train)

SPHERE = Sphere(0.5)
CUBE = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
SQUARE = ((-1.0, -1.0), (1.0, 1.0))
UNIT_SQUARE = ((0.0, 0.0), (1.0, 1.0))
# cavity obstacle: diameter one third of the unit cavity, centred
OBSTACLE_CENTER = (0.5, 0.5)
OBSTACLE_RADIUS = 1.0 / 6.0

# surface / narrowband / uniform shares of a hybrid budget
HYBRID_MIX = (28, 32, 90)
ABLATION_MIXES = {"hybrid": HYBRID_MIX, "uniform": (0, 0, 150), "surface": (150, 0, 0)}
# desk training recipe for the 4x64 sphere: a wider clamp band and lighter
# eikonal/normal weights let the data term drive the fit near the surface
DESK_SPHERE = dict(delta=0.05, lambda_g=0.01, tau=0.01)


def surrogate_gauss_points(field, domain, level, base_level=3, lambda_criteria=0.5, order=2):
    tree = build_incomplete(field, domain, RefineSpec(base_level, boundary_level=level))
    markers = classify_elements(tree, field, lambda_criteria, order)
    boundary, _ = extract_surrogate_boundary(tree, markers)
    pts, _ = boundary.gauss_points(order)
    return pts.reshape(-1, field.dim)


def fidelity(model, oracle, domain, level=8, delta=2.0 ** -10, grid_res=256):
    """NMSE in the delta band on a grid and cosine similarity at surrogate Gauss points."""
    pts = surrogate_gauss_points(oracle, domain, level)
    edge = domain_edge(domain)
    rep = distance_vector_similarity(model, oracle, pts, 1e-4 * edge / (1 << level), edge)
    return dict(nmse=nmse(model, oracle, delta, grid_res, domain), cos_mean=rep.mean,
                cos_sd=rep.sd, nmse_gp=rep.nmse_gp, n_points=len(pts))


def sphere_fidelity(steps=14000, seed=0, level=8, grid_res=256, **train_kw):
    cfg = TrainConfig(steps=steps, seed=seed, **{**DESK_SPHERE, **train_kw})
    t0 = time.perf_counter()
    res = train(SPHERE, CUBE, cfg)
    out = fidelity(NeuralField(res.mlp), SPHERE, CUBE, level, grid_res=grid_res)
    out.update(train_seconds=time.perf_counter() - t0, best_step=res.best_step)
    return out, res


def split_budget(n_total, mix):
    total = sum(mix)
    return tuple(n_total * m // total for m in mix)


def sampling_ablation(n_total=150000, steps=1500, seeds=(0, 1, 2), grid_res=128, **train_kw):
    """Sphere NMSE per sampling mix at an equal total sample budget (default loss)."""
    rows = []
    for seed in seeds:
        for name, mix in ABLATION_MIXES.items():
            ns, nb, nu = split_budget(n_total, mix)
            cfg = TrainConfig(steps=steps, seed=seed, n_surface=ns, n_narrowband=nb,
                              n_uniform=nu, **train_kw)
            res = train(SPHERE, CUBE, cfg)
            rows.append(dict(seed=seed, mix=name,
                             nmse=nmse(NeuralField(res.mlp), SPHERE, 2.0 ** -10, grid_res, CUBE)))
    return rows


# ----------------------------------------------------------------- cavity

def train_circle_model(steps=3000, seed=0, **train_kw):
    """Circle of radius 1/3 in [-1, 1]^2; placed in the cavity by ``cavity_field``."""
    kw = dict(delta=0.01, narrowband_width=0.01)
    kw.update(train_kw)
    return train(Circle(1.0 / 3.0), SQUARE, TrainConfig(steps=steps, seed=seed, **kw))


def cavity_field(mlp: Mlp = None):
    """Obstacle field on the unit cavity: analytic if ``mlp`` is None, else the network."""
    if mlp is None:
        return Circle(OBSTACLE_RADIUS, OBSTACLE_CENTER)
    return Transformed(NeuralField(mlp), OBSTACLE_CENTER, 0.5)


def flow_problem(field, level, Re, bc=None, domain=UNIT_SQUARE, lambda_criteria=0.5):
    tree = build_incomplete(field, domain, RefineSpec(level))
    markers = classify_elements(tree, field, lambda_criteria)
    boundary, markers = extract_surrogate_boundary(tree, markers)
    bc = bc or BoundaryConditions.ldc2d()
    return FlowProblem(tree, markers, boundary, field, SolverParams(Re=Re), bc)


def cavity_run(field, level=6, Re=100.0, dt=0.5, max_steps=400, steady_tol=1e-6, n_probe=129):
    problem = flow_problem(field, level, Re)
    state, log_rows = run_to_steady(problem, dt, steady_tol, max_steps)
    _, rows = probe_rows(problem, state, n_probe)
    return dict(problem=problem, state=state, log=log_rows, profiles=probe_profiles(rows, 2),
                divergence=divergence_norm(problem, state),
                steady=bool(log_rows and log_rows[-1]["change"] < steady_tol))


def profile_discrepancy(ref, other):
    """Relative L2 of u on the vertical and v on the horizontal centreline."""
    out = {}
    for line, col in (("vertical", 3), ("horizontal", 4)):
        a, b = ref[line][:, col], other[line][:, col]
        ok = np.isfinite(a) & np.isfinite(b)
        out[line] = float(np.linalg.norm(a[ok] - b[ok]) / np.linalg.norm(a[ok]))
    return out


def oracle_equivalence(mlp: Mlp, Re=100.0, level=6, dt=0.5, max_steps=400):
    ref = cavity_run(cavity_field(None), level, Re, dt, max_steps)
    inr = cavity_run(cavity_field(mlp), level, Re, dt, max_steps)
    return profile_discrepancy(ref["profiles"], inr["profiles"]), ref, inr


def plain_cavity_divergence(levels=(5, 6), Re=100.0, dt=0.5, max_steps=400):
    out = {}
    for level in levels:
        r = cavity_run(Constant(1.0, 2), level, Re, dt, max_steps)
        out[level] = r["divergence"]
    return out


def channel_profile_error(level=5, Re=10.0, dt=1.0, max_steps=100, n=41):
    problem = flow_problem(Constant(1.0, 2), level, Re, BoundaryConditions.channel())
    state, _ = run_to_steady(problem, dt, 1e-6, max_steps)
    y = np.linspace(0.0, 1.0, n)
    u, _ = interpolate(problem, state, np.column_stack([np.full(n, 0.5), y]))
    exact = poiseuille(y, 0.0, 1.0)
    return float(np.linalg.norm(u[:, 0] - exact) / np.linalg.norm(exact))
