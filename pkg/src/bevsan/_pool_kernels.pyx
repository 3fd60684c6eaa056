# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scatter/gather kernels for height-sliced BEV pooling.

All kernels share one loop structure per camera: an index pass computing
each frustum cell's BEV cell (and slice membership), then a channel-outer
pass streaming ``values[c, :]``.  For any single output element the
contributions therefore arrive camera by camera, in row-major (d, i, j)
order, whichever kernel runs.  Do not build with -ffast-math: it would
license reassociation of those sums.
"""
import numpy as np

from libc.math cimport floor
from libc.stdint cimport int32_t, uint32_t
from libc.stdlib cimport malloc, free

cdef extern from *:
    int __builtin_ctz(unsigned int) nogil

BACKEND = "compiled"
MAX_SLICES = 32


cdef inline bint _in_slice(double z, double lo, double hi, bint closed) noexcept nogil:
    if z < lo:
        return False
    if closed:
        return z <= hi
    return z < hi


cdef inline int32_t _cell(double x, double y, double x_min, double x_max,
                          double y_min, double y_max, double cell_x, double cell_y,
                          Py_ssize_t He, Py_ssize_t We) noexcept nogil:
    cdef Py_ssize_t ix, iy
    if not (x >= x_min and x < x_max and y >= y_min and y < y_max):
        return -1
    ix = <Py_ssize_t>floor((x - x_min) / cell_x)
    iy = <Py_ssize_t>floor((y - y_min) / cell_y)
    # a point just below the top edge can round onto it
    if ix >= We:
        ix = We - 1
    if iy >= He:
        iy = He - 1
    return <int32_t>(iy * We + ix)


cdef void _index_pass(const double[:, ::1] xyz, const double[::1] los, const double[::1] his,
                      const unsigned char[::1] closed,
                      double x_min, double x_max, double y_min, double y_max,
                      double cell_x, double cell_y, Py_ssize_t He, Py_ssize_t We,
                      int32_t *cells, uint32_t *masks) noexcept nogil:
    cdef Py_ssize_t n, s, S = los.shape[0], N = xyz.shape[0]
    cdef uint32_t m
    cdef double z
    for n in range(N):
        z = xyz[n, 2]
        m = 0
        for s in range(S):
            if _in_slice(z, los[s], his[s], closed[s]):
                m |= (<uint32_t>1) << s
        if m:
            cells[n] = _cell(xyz[n, 0], xyz[n, 1], x_min, x_max, y_min, y_max, cell_x, cell_y, He, We)
            if cells[n] < 0:
                m = 0
        else:
            cells[n] = -1
        masks[n] = m


def pool_reference(list values, list coords, tuple grid, double lo, double hi, bint closed):
    """Scatter-sum of one height slice: returns ``(C, He*We)``."""
    cdef double x_min, x_max, y_min, y_max, cell_x, cell_y
    cdef Py_ssize_t He, We, C, N, n, c, cam
    cdef int32_t cell
    cdef const double[:, ::1] v
    cdef const double[:, ::1] xyz
    cdef double[:, ::1] o
    cdef const double *vc
    cdef double *oc
    cdef int32_t *cells
    x_min, x_max, y_min, y_max, cell_x, cell_y, He, We, C = grid
    out = np.zeros((C, He * We))
    o = out
    for cam in range(len(values)):
        v = values[cam]
        xyz = coords[cam]
        N = xyz.shape[0]
        cells = <int32_t *>malloc((N + 1) * sizeof(int32_t))
        try:
            with nogil:
                # a full repetition: geometry for every cell, then the height filter
                for n in range(N):
                    cells[n] = _cell(xyz[n, 0], xyz[n, 1], x_min, x_max, y_min, y_max,
                                     cell_x, cell_y, He, We)
                    if not _in_slice(xyz[n, 2], lo, hi, closed):
                        cells[n] = -1
                for c in range(C):
                    vc = &v[c, 0]
                    oc = &o[c, 0]
                    for n in range(N):
                        cell = cells[n]
                        if cell >= 0:
                            oc[cell] += vc[n]
        finally:
            free(cells)
    return out


def pool_fused(list values, list coords, tuple grid, const double[::1] los, const double[::1] his,
               const unsigned char[::1] closed):
    """Single traversal scattering each cell into every slice that holds it.

    Returns ``(S, C, He*We)``.
    """
    cdef double x_min, x_max, y_min, y_max, cell_x, cell_y, val
    cdef Py_ssize_t He, We, C, N, n, c, cam, s
    cdef Py_ssize_t S = los.shape[0]
    cdef uint32_t m
    cdef const double[:, ::1] v
    cdef const double[:, ::1] xyz
    cdef double[:, ::1] o
    cdef double *row
    cdef const double *vc
    cdef double *oc
    cdef int32_t *cells
    cdef uint32_t *masks
    if S > MAX_SLICES:
        raise ValueError(f"at most {MAX_SLICES} slices per fused call")
    x_min, x_max, y_min, y_max, cell_x, cell_y, He, We, C = grid
    # slices interleaved per cell so one cell's writes share cache lines
    work = np.zeros((C, He * We * S))
    o = work
    for cam in range(len(values)):
        v = values[cam]
        xyz = coords[cam]
        N = xyz.shape[0]
        cells = <int32_t *>malloc((N + 1) * sizeof(int32_t))
        masks = <uint32_t *>malloc((N + 1) * sizeof(uint32_t))
        try:
            with nogil:
                _index_pass(xyz, los, his, closed, x_min, x_max, y_min, y_max,
                            cell_x, cell_y, He, We, cells, masks)
                if S == 1:
                    # one slice: every member has exactly one target
                    for c in range(C):
                        vc = &v[c, 0]
                        oc = &o[c, 0]
                        for n in range(N):
                            if cells[n] >= 0:
                                oc[cells[n]] += vc[n]
                    continue
                for n in range(N):
                    if masks[n]:
                        cells[n] = cells[n] * <int32_t>S
                for c in range(C):
                    vc = &v[c, 0]
                    oc = &o[c, 0]
                    for n in range(N):
                        m = masks[n]
                        if m == 0:
                            continue
                        val = vc[n]
                        row = oc + cells[n]
                        while m:
                            row[__builtin_ctz(m)] += val
                            m &= m - 1
        finally:
            free(cells)
            free(masks)
    return np.ascontiguousarray(work.reshape(C, He * We, S).transpose(2, 0, 1))


def pool_backward(const double[:, :, ::1] grad, list coords, tuple grid, const double[::1] los,
                  const double[::1] his, const unsigned char[::1] closed):
    """Gather of ``grad (S, C, He*We)`` back to each camera's ``(C, N)``."""
    cdef double x_min, x_max, y_min, y_max, cell_x, cell_y, acc
    cdef Py_ssize_t He, We, C, N, n, c, cam, s
    cdef Py_ssize_t S = los.shape[0]
    cdef uint32_t m
    cdef const double[:, ::1] xyz
    cdef double[:, ::1] gv
    cdef int32_t *cells
    cdef uint32_t *masks
    if S > MAX_SLICES:
        raise ValueError(f"at most {MAX_SLICES} slices per fused call")
    x_min, x_max, y_min, y_max, cell_x, cell_y, He, We, C = grid
    result = []
    for cam in range(len(coords)):
        xyz = coords[cam]
        N = xyz.shape[0]
        g_cam = np.zeros((C, N))
        gv = g_cam
        cells = <int32_t *>malloc((N + 1) * sizeof(int32_t))
        masks = <uint32_t *>malloc((N + 1) * sizeof(uint32_t))
        try:
            with nogil:
                _index_pass(xyz, los, his, closed, x_min, x_max, y_min, y_max,
                            cell_x, cell_y, He, We, cells, masks)
                for c in range(C):
                    for n in range(N):
                        m = masks[n]
                        if m == 0:
                            continue
                        acc = 0.0
                        while m:
                            acc = acc + grad[__builtin_ctz(m), c, cells[n]]
                            m &= m - 1
                        gv[c, n] = acc
        finally:
            free(cells)
            free(masks)
        result.append(g_cam)
    return result
