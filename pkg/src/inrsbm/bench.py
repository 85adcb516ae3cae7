"""Per-query cost of the brute-force distance oracle versus network inference."""

from __future__ import annotations

import time

import numpy as np

from .geometry import exact_signed_distance, icosphere
from .inr import Mlp, NeuralField

HEADER = ["subdivisions", "triangles", "queries", "oracle_ns_per_query", "inference_ns_per_query"]


def _best_time(fn, repeats):
    best = np.inf
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_geometry(subdivisions=(2, 3, 4), queries=2000, repeats=3, mlp: Mlp = None, seed=0):
    """Rows of HEADER; the minimum over ``repeats`` runs is reported."""
    if mlp is None:
        mlp = Mlp.geometric_init(3, (64, 64, 64, 64), seed=seed)
    net = NeuralField(mlp)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, (queries, 3))
    rows = []
    if queries == 0:
        return rows
    t_o = []
    for k in subdivisions:
        soup = icosphere(int(k), 0.5)
        t_o.append((int(k), len(soup.triangles),
                    _best_time(lambda: exact_signed_distance(soup, x), repeats)))
    # inference takes milliseconds: many rounds, interleaved across rows so a
    # burst of machine noise cannot land on a single row
    t_n = np.full(len(t_o), np.inf)
    for _ in range(10 * max(1, repeats)):
        for i in range(len(t_o)):
            t_n[i] = min(t_n[i], _best_time(lambda: net(x), 1))
    for (k, tri, t), tn in zip(t_o, t_n):
        rows.append([k, tri, queries, 1e9 * t / queries, 1e9 * tn / queries])
    return rows
