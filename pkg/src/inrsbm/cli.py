"""Command-line entry point: train, eval-inr, mesh, simulate, bench-geometry."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as vio
from .config import CaseConfig, load_config, make_field, refine_spec
from .errors import ConfigError, InputError, NumericalError
from .octree import RefineSpec, build_incomplete
from .surrogate import (MARKER_NAMES, boundary_gauss_distance_vectors, classify_elements,
                        extract_surrogate_boundary)

log = logging.getLogger("inrsbm")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3


# ------------------------------------------------------------------ pipeline

def build_mesh(cfg: CaseConfig, field=None):
    """field -> tree -> markers -> surrogate boundary."""
    dim = cfg.dim
    if field is None:
        field = make_field(cfg.geometry, dim)
    tree = build_incomplete(field, cfg.box(), refine_spec(cfg.refine))
    markers = classify_elements(tree, field, cfg.lambda_criteria, cfg.gp_order)
    boundary, markers = extract_surrogate_boundary(tree, markers)
    return field, tree, markers, boundary


def train_config(cfg: CaseConfig):
    from .training import TrainConfig
    opts = dict(cfg.train)
    opts.setdefault("seed", cfg.seed)
    try:
        return TrainConfig(**opts)
    except TypeError as exc:
        raise ConfigError(f"invalid train block: {exc}") from exc


def training_source(cfg: CaseConfig):
    from .geometry import load_triangle_soup, rescale_to_domain
    geo = cfg.geometry
    domain = cfg.train_domain or [list(v) for v in cfg.box()]
    if geo.kind == "soup":
        if not geo.path:
            raise ConfigError("geometry.kind = soup needs geometry.path")
        soup = load_triangle_soup(geo.path)
        return rescale_to_domain(soup, domain, geo.fraction), domain
    if geo.kind != "analytic":
        raise ConfigError("train needs an analytic or soup geometry")
    return make_field(geo, len(domain[0])), domain


def cmd_train(cfg: CaseConfig, out: Path):
    from .training import train
    source, domain = training_source(cfg)
    tc = train_config(cfg)
    res = train(source, domain, tc,
                progress=lambda r: log.info("step %d loss %.3e val %.3e", r["step"], r["loss"],
                                            r["val_nmse"]))
    res.mlp.save(out / "model.inr")
    res.write_log(out / "train_log.csv")
    log.info("best validation NMSE %.3e at step %d", res.best_val_nmse, res.best_step)
    return res


def cmd_eval_inr(cfg: CaseConfig, out: Path):
    """One metrics row for the trained field against the reference geometry."""
    from .training import distance_vector_similarity, domain_edge, nmse, write_metrics_csv
    ev = cfg.eval
    if ev.reference is None:
        raise ConfigError("eval.reference geometry is required")
    domain = cfg.train_domain or [list(v) for v in cfg.box()]
    dim = len(domain[0])
    model = make_field(cfg.geometry, dim)
    ref = make_field(ev.reference, dim)
    tree = build_incomplete(ref, domain, RefineSpec(ev.base_level, boundary_level=ev.level))
    markers = classify_elements(tree, ref, cfg.lambda_criteria, cfg.gp_order)
    boundary, _ = extract_surrogate_boundary(tree, markers)
    pts, _ = boundary.gauss_points(cfg.gp_order)
    pts = pts.reshape(-1, dim)
    edge = domain_edge(domain)
    rep = distance_vector_similarity(model, ref, pts, 1e-4 * edge / (1 << ev.level), edge)
    err = nmse(model, ref, ev.delta, ev.grid_res, domain)
    header = ["geometry", "level", "n_gauss_points", "nmse", "nmse_gp", "cos_mean", "cos_sd"]
    row = [ev.name, ev.level, len(pts), err, rep.nmse_gp, rep.mean, rep.sd]
    vio.write_table(out / "metrics.csv", header, [row])
    write_metrics_csv(out / "points.csv", pts, rep)
    return dict(zip(header, row))


def _mesh_arrays(tree):
    coords, conn = tree.nodes()
    return tree.to_physical(coords), conn


def cmd_mesh(cfg: CaseConfig, out: Path):
    field, tree, markers, boundary = build_mesh(cfg)
    x, conn = _mesh_arrays(tree)
    vio.write_vtk(out / "mesh.vtk", x, conn, cell_data={"marker": markers.marker})
    tree.write_csv(out / "tree.csv")
    boundary_gauss_distance_vectors(boundary, field, cfg.gp_order)
    boundary.write_csv(out / "boundary.csv", cfg.gp_order)
    counts = {MARKER_NAMES[k]: int(np.sum(markers.marker == k)) for k in range(len(MARKER_NAMES))}
    summary = dict(leaves=len(tree), faces=len(boundary), **counts)
    (out / "mesh_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _snapshot(problem, state, path):
    x, conn = _mesh_arrays(problem.tree)
    vio.write_vtk(path, x, conn, point_data={"velocity": state.u, "pressure": state.p},
                  cell_data={"marker": problem.markers.marker})


def make_problem(cfg: CaseConfig, field=None):
    from .fem import BoundaryConditions, FlowProblem, SolverParams
    field, tree, markers, boundary = build_mesh(cfg, field)
    params = SolverParams(Re=cfg.Re, gamma=cfg.gamma, gp_order=cfg.gp_order)
    return FlowProblem(tree, markers, boundary, field, params, BoundaryConditions.preset(cfg.bc))


def cmd_simulate(cfg: CaseConfig, out: Path, field=None):
    from .fem import bdf2_step, divergence_norm
    problem = make_problem(cfg, field)
    state = problem.initial_state()
    hist_path = out / "history.csv"
    header = ["step", "t", "change", "newton_its", "residual0", "residual", "divergence"]
    rows = []
    steps = cfg.max_steps
    if cfg.t_final is not None:
        steps = min(steps, int(np.ceil(cfg.t_final / cfg.dt - 1e-9)))
    converged = False
    for _ in range(steps):
        try:
            new, h = bdf2_step(problem, state, cfg.dt)
        except NumericalError as exc:
            vio.write_table(hist_path, header, rows)
            raise NumericalError(f"{exc} (residual log: {hist_path})") from exc
        change = float(np.max(np.abs(new.u - state.u))) / cfg.dt
        state = new
        rows.append([state.step, state.t, change, len(h) - 1, h[0], h[-1],
                     divergence_norm(problem, state)])
        log.info("step %d t %.4g change %.3e", state.step, state.t, change)
        if cfg.vtk_every and state.step % cfg.vtk_every == 0:
            _snapshot(problem, state, out / f"flow_{state.step:05d}.vtk")
        if cfg.t_final is None and change < cfg.steady_tol:
            converged = True
            break
    vio.write_table(hist_path, header, rows)
    _snapshot(problem, state, out / "flow_final.vtk")
    ph, pr = vio.probe_rows(problem, state, cfg.probe_points)
    vio.write_table(out / "probes.csv", ph, pr)
    div = divergence_norm(problem, state)
    summary = dict(steps=state.step, t=state.t, steady=converged, divergence_norm=div,
                   n_elements=int(len(problem.elements)), n_faces=int(problem.n_faces))
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return problem, state, summary


def cmd_bench_geometry(cfg: CaseConfig, out: Path):
    from .bench import HEADER, bench_geometry
    from .inr import Mlp
    b = cfg.bench
    mlp = Mlp.load(b.model) if b.model else Mlp.geometric_init(3, tuple(b.widths),
                                                                  seed=cfg.seed)
    rows = bench_geometry(b.subdivisions, b.queries, b.repeats, mlp, cfg.seed)
    vio.write_table(out / "bench.csv", HEADER, rows)
    return rows


COMMANDS = {
    "train": cmd_train,
    "eval-inr": cmd_eval_inr,
    "mesh": cmd_mesh,
    "simulate": cmd_simulate,
    "bench-geometry": cmd_bench_geometry,
}


def make_parser():
    p = argparse.ArgumentParser(prog="inrsbm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON case file")
        s.add_argument("--out", required=True, help="output directory")
    return p


def run(command, config_path, out_dir):
    cfg = load_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n")
    return COMMANDS[command](cfg, out)


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        run(args.command, args.config, args.out)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
