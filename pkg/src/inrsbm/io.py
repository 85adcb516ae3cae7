"""Output writers: legacy ASCII VTK, probe lines and run histories."""

from __future__ import annotations

import csv

import numpy as np

VTK_QUAD = 9
VTK_HEXAHEDRON = 12
# lexicographic corner index (x fastest) -> VTK winding
_VTK_ORDER = {2: [0, 1, 3, 2], 3: [0, 1, 3, 2, 4, 5, 7, 6]}


def _fmt(v):
    return repr(float(v))


def write_vtk(path, points, cells, point_data=None, cell_data=None, title="inrsbm"):
    """Unstructured grid of quads/hexes. ``cells`` hold lexicographic corner ids."""
    points = np.asarray(points, float)
    cells = np.asarray(cells, dtype=np.int64)
    dim = points.shape[1]
    pts3 = np.column_stack([points, np.zeros((len(points), 3 - dim))]) if dim < 3 else points
    order = _VTK_ORDER[dim]
    ctype = VTK_QUAD if dim == 2 else VTK_HEXAHEDRON
    nc = cells.shape[1]
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {len(pts3)} double"]
    lines += [" ".join(_fmt(v) for v in p) for p in pts3]
    lines.append(f"CELLS {len(cells)} {len(cells) * (nc + 1)}")
    lines += [f"{nc} " + " ".join(str(int(c[i])) for i in order) for c in cells]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += [str(ctype)] * len(cells)
    if cell_data:
        lines.append(f"CELL_DATA {len(cells)}")
        for name, vals in cell_data.items():
            lines += [f"SCALARS {name} int 1", "LOOKUP_TABLE default"]
            lines += [str(int(v)) for v in vals]
    if point_data:
        lines.append(f"POINT_DATA {len(pts3)}")
        for name, vals in point_data.items():
            vals = np.asarray(vals, float)
            if vals.ndim == 2:
                v3 = np.column_stack([vals, np.zeros((len(vals), 3 - vals.shape[1]))])
                lines.append(f"VECTORS {name} double")
                lines += [" ".join(_fmt(x) for x in row) for row in v3]
            else:
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                lines += [_fmt(x) for x in vals]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vtk_summary(path):
    """Section headers and counts of a legacy VTK file (structural validation)."""
    out = {"sections": []}
    with open(path) as fh:
        for line in fh:
            head = line.split()
            if not head:
                continue
            if head[0] in ("POINTS", "CELLS", "CELL_TYPES", "CELL_DATA", "POINT_DATA"):
                out["sections"].append(head[0])
                out[head[0]] = int(head[1])
            elif head[0] in ("SCALARS", "VECTORS"):
                out.setdefault("fields", []).append(head[1])
    return out


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def centerline_points(lo, hi, n):
    """Probe lines of the cavity: vertical and horizontal centrelines and the diagonal."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    dim = len(lo)
    mid = 0.5 * (lo + hi)
    s = np.linspace(0.0, 1.0, n)
    lines = {}
    v = np.tile(mid, (n, 1))
    v[:, dim - 1] = lo[dim - 1] + s * (hi[dim - 1] - lo[dim - 1])
    lines["vertical"] = v
    hz = np.tile(mid, (n, 1))
    hz[:, 0] = lo[0] + s * (hi[0] - lo[0])
    lines["horizontal"] = hz
    lines["diagonal"] = lo + s[:, None] * (hi - lo)
    return s, lines


def probe_rows(problem, state, n):
    from .fem import interpolate
    s, lines = centerline_points(problem.tree.lo, problem.tree.hi, n)
    rows = []
    for name, pts in lines.items():
        u, p = interpolate(problem, state, pts)
        for si, x, ui, pi in zip(s, pts, u, p):
            rows.append([name, float(si), *map(float, x), *map(float, ui), float(pi)])
    dim = problem.dim
    header = ["line", "s"] + list("xyz"[:dim]) + ["u", "v", "w"][:dim] + ["p"]
    return header, rows


def probe_profiles(rows, dim):
    """{line: (s, u, v, ...)} arrays from probe rows."""
    out = {}
    for r in rows:
        out.setdefault(r[0], []).append(r[1:])
    return {k: np.array(v, float) for k, v in out.items()}
