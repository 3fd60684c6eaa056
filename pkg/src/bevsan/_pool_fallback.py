"""Numpy implementation of the pooling kernels.

Used when the compiled extension is unavailable (or ``BEVSAN_PURE_PYTHON``
is set).  ``np.bincount`` with weights accumulates sequentially in index
order, which reproduces the compiled kernels' summation order exactly.
"""
from __future__ import annotations

import numpy as np

BACKEND = "python"


def _cells(xyz, grid):
    x_min, x_max, y_min, y_max, cell_x, cell_y, He, We, _ = grid
    x, y = xyz[:, 0], xyz[:, 1]
    inside = (x >= x_min) & (x < x_max) & (y >= y_min) & (y < y_max)
    # a point just below the top edge can round onto it
    ix = np.minimum(np.floor((x - x_min) / cell_x), We - 1)
    iy = np.minimum(np.floor((y - y_min) / cell_y), He - 1)
    flat = np.where(inside, iy * We + ix, -1).astype(np.int64)
    return flat


def _in_slice(z, lo, hi, closed):
    return (z >= lo) & ((z <= hi) if closed else (z < hi))


def _concat(values, coords, C):
    if not coords:
        return np.zeros((C, 0)), np.zeros((0, 3))
    return np.concatenate(values, axis=1), np.concatenate(coords, axis=0)


def _scatter(v, flat, keep, C, ncell):
    out = np.zeros((C, ncell))
    idx = flat[keep]
    for c in range(C):
        out[c] = np.bincount(idx, weights=v[c, keep], minlength=ncell)
    return out


def pool_reference(values, coords, grid, lo, hi, closed):
    C, ncell = grid[8], grid[6] * grid[7]
    v, xyz = _concat(values, coords, C)
    flat = _cells(xyz, grid)
    keep = (flat >= 0) & _in_slice(xyz[:, 2], lo, hi, closed)
    return _scatter(v, flat, keep, C, ncell)


def pool_fused(values, coords, grid, los, his, closed):
    C, ncell = grid[8], grid[6] * grid[7]
    v, xyz = _concat(values, coords, C)
    flat = _cells(xyz, grid)
    valid = flat >= 0
    z = xyz[:, 2]
    out = np.zeros((len(los), C, ncell))
    for s in range(len(los)):
        out[s] = _scatter(v, flat, valid & _in_slice(z, los[s], his[s], closed[s]), C, ncell)
    return out


def pool_backward(grad, coords, grid, los, his, closed):
    C = grid[8]
    result = []
    for xyz in coords:
        flat = _cells(xyz, grid)
        valid = flat >= 0
        g = np.zeros((C, xyz.shape[0]))
        for s in range(len(los)):
            keep = valid & _in_slice(xyz[:, 2], los[s], his[s], closed[s])
            g[:, keep] = g[:, keep] + grad[s][:, flat[keep]]
        result.append(g)
    return result
