"""Pure-numpy fallback for the gain-integrand kernel.

Mirrors _gainkernel.pyx cell for cell; tests/test_kernels.py keeps the two
backends in agreement. Rows are processed in fixed-size blocks to bound the
temporary arrays, and reduction order is deterministic.
"""

from __future__ import annotations

import numpy as np

_BLOCK_ROWS = 256


def gain_sums(x0, y0, cell, nx, ny, node_x, node_y, m_off,
              two_lam_d, d_floor, box_r, out):
    """Accumulate the positive gain integrand per candidate over a midpoint grid.

    Cell centers are x0 + (i+0.5)*cell, y0 + (j+0.5)*cell. Cells outside the
    union of Chebyshev boxes of half-width box_r around the nodes are skipped.
    m_off[k] is the temporal exponent offset 2*lambda_t*age_k*dt (inf when the
    node is expired). Spatial distances are floored at d_floor (> 0) so the
    log singularities at node positions stay finite. Writes the per-candidate
    unscaled sums into ``out`` and returns the number of cells inside the mask.
    """
    node_x = np.asarray(node_x, dtype=np.float64)
    node_y = np.asarray(node_y, dtype=np.float64)
    m_off = np.asarray(m_off, dtype=np.float64)
    nn = node_x.shape[0]
    xs = x0 + (np.arange(nx) + 0.5) * cell
    acc = np.zeros(nn)
    n_cells = 0
    for j_lo in range(0, ny, _BLOCK_ROWS):
        ys = y0 + (np.arange(j_lo, min(j_lo + _BLOCK_ROWS, ny)) + 0.5) * cell
        dx = xs[None, None, :] - node_x[:, None, None]
        dy = ys[None, :, None] - node_y[:, None, None]
        mask = ((np.abs(dx) <= box_r) & (np.abs(dy) <= box_r)).any(axis=0)
        n_cells += int(mask.sum())
        dist = np.maximum(np.sqrt(dx * dx + dy * dy), d_floor)
        m = two_lam_d * dist + m_off[:, None, None]
        # exp(-inf) == 0, so an all-expired state yields log_den == 0 (unit prior).
        log_den = np.log1p(-np.exp(-np.min(m, axis=0)))
        for c in range(nn):
            g = 0.5 * (log_den - np.log1p(-np.exp(-two_lam_d * dist[c])))
            acc[c] += g[(g > 0.0) & mask].sum()
    out[:nn] = acc
    return n_cells
