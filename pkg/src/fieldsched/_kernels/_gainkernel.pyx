# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled gain-integrand kernel.

Semantics match _reference.gain_sums exactly; see that module for the
contract. This version fuses masking, the most-relevant minimum and the
per-candidate accumulation into one pass per cell.
"""

from libc.math cimport exp, log1p, sqrt, INFINITY

DEF MAX_NODES = 16


def gain_sums(double x0, double y0, double cell, Py_ssize_t nx, Py_ssize_t ny,
              double[::1] node_x, double[::1] node_y, double[::1] m_off,
              double two_lam_d, double d_floor, double box_r, double[::1] out):
    cdef Py_ssize_t nn = node_x.shape[0]
    cdef Py_ssize_t i, j, k, c
    cdef double x, y, dx, dy, d, m, mstar, log_den, g
    cdef double dist[MAX_NODES]
    cdef Py_ssize_t n_cells = 0
    cdef bint inside

    if nn > MAX_NODES:
        raise ValueError("kernel supports at most %d nodes" % MAX_NODES)
    for c in range(nn):
        out[c] = 0.0

    for j in range(ny):
        y = y0 + (j + 0.5) * cell
        for i in range(nx):
            x = x0 + (i + 0.5) * cell
            inside = False
            for k in range(nn):
                dx = x - node_x[k]
                dy = y - node_y[k]
                if dx <= box_r and -dx <= box_r and dy <= box_r and -dy <= box_r:
                    inside = True
                d = sqrt(dx * dx + dy * dy)
                dist[k] = d if d > d_floor else d_floor
            if not inside:
                continue
            n_cells += 1
            mstar = INFINITY
            for k in range(nn):
                m = two_lam_d * dist[k] + m_off[k]
                if m < mstar:
                    mstar = m
            log_den = log1p(-exp(-mstar))
            for c in range(nn):
                g = 0.5 * (log_den - log1p(-exp(-two_lam_d * dist[c])))
                if g > 0.0:
                    out[c] += g
    return n_cells
