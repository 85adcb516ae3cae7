"""Tensor-product Gauss-Legendre rules on the unit cell."""

from functools import lru_cache
import itertools

import numpy as np


@lru_cache(maxsize=None)
def gauss_1d(order):
    """Points and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def gauss_tensor(order, dim):
    """(points (order**dim, dim), weights) on [0,1]^dim, x varying fastest."""
    if dim == 0:
        return np.zeros((1, 0)), np.ones(1)
    x, w = gauss_1d(order)
    pts, wts = [], []
    for idx in itertools.product(range(order), repeat=dim):
        idx = idx[::-1]
        pts.append([x[i] for i in idx])
        wts.append(np.prod([w[i] for i in idx]))
    return np.array(pts), np.array(wts)
