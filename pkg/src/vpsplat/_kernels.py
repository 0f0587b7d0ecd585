"""Numba kernels for tile-based splatting.

Tiles are independent: the forward pass writes disjoint pixels and the
backward pass writes disjoint per-entry gradient slots, so parallel results
are bit-identical to a single-threaded run.
"""

import numpy as np
from numba import njit, prange

TILE = 16


@njit(cache=True, parallel=True)
def forward_kernel(h, w, tile_starts, entries,
                   mean2d, conic, opac, comp, canon, lam, resid, depth,
                   alpha_min, t_min,
                   out_color, out_canon, out_alpha, out_depth, out_lam, out_resid):
    tiles_x = (w + TILE - 1) // TILE
    n_tiles = tile_starts.shape[0] - 1
    for tid in prange(n_tiles):
        ty = tid // tiles_x
        tx = tid % tiles_x
        y0 = ty * TILE
        x0 = tx * TILE
        y1 = min(y0 + TILE, h)
        x1 = min(x0 + TILE, w)
        s = tile_starts[tid]
        e = tile_starts[tid + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                t_acc = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                k0 = 0.0
                k1 = 0.0
                k2 = 0.0
                r0 = 0.0
                r1 = 0.0
                r2 = 0.0
                aa = 0.0
                dd = 0.0
                ll = 0.0
                for ei in range(s, e):
                    if t_acc < t_min:
                        break
                    g = entries[ei]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    q = (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                         + conic[g, 2] * dy * dy)
                    if q < 0.0:
                        continue
                    a = opac[g] * np.exp(-0.5 * q)
                    if a < alpha_min:
                        continue
                    at = a * t_acc
                    c0 += comp[g, 0] * at
                    c1 += comp[g, 1] * at
                    c2 += comp[g, 2] * at
                    k0 += canon[g, 0] * at
                    k1 += canon[g, 1] * at
                    k2 += canon[g, 2] * at
                    r0 += resid[g, 0] * at
                    r1 += resid[g, 1] * at
                    r2 += resid[g, 2] * at
                    aa += at
                    dd += depth[g] * at
                    ll += lam[g] * at
                    t_acc *= 1.0 - a
                out_color[py, px, 0] = c0
                out_color[py, px, 1] = c1
                out_color[py, px, 2] = c2
                out_canon[py, px, 0] = k0
                out_canon[py, px, 1] = k1
                out_canon[py, px, 2] = k2
                out_resid[py, px, 0] = r0
                out_resid[py, px, 1] = r1
                out_resid[py, px, 2] = r2
                out_alpha[py, px] = aa
                out_depth[py, px] = dd
                out_lam[py, px] = ll


@njit(cache=True, parallel=True)
def backward_kernel(h, w, tile_starts, entries,
                    mean2d, conic, opac, comp, canon,
                    alpha_min, t_min,
                    grad_color, grad_alpha, grad_canon,
                    g_color, g_mean2d, g_conic, g_opac, g_canon):
    """Per-entry gradients of a loss fed through the color, alpha, and
    canonical buffers.

    Recomputes the forward compositing per pixel, then walks the
    contribution stack back-to-front maintaining suffix sums, which avoids
    dividing by (1 - alpha) when recovering transmittances.
    """
    tiles_x = (w + TILE - 1) // TILE
    n_tiles = tile_starts.shape[0] - 1
    for tid in prange(n_tiles):
        ty = tid // tiles_x
        tx = tid % tiles_x
        y0 = ty * TILE
        x0 = tx * TILE
        y1 = min(y0 + TILE, h)
        x1 = min(x0 + TILE, w)
        s = tile_starts[tid]
        e = tile_starts[tid + 1]
        n_local = e - s
        if n_local == 0:
            continue
        slot = np.empty(n_local, dtype=np.int64)
        a_arr = np.empty(n_local, dtype=np.float64)
        t_arr = np.empty(n_local, dtype=np.float64)
        w_arr = np.empty(n_local, dtype=np.float64)
        for py in range(y0, y1):
            for px in range(x0, x1):
                t_acc = 1.0
                cnt = 0
                for ei in range(s, e):
                    if t_acc < t_min:
                        break
                    g = entries[ei]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    q = (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                         + conic[g, 2] * dy * dy)
                    if q < 0.0:
                        continue
                    wgt = np.exp(-0.5 * q)
                    a = opac[g] * wgt
                    if a < alpha_min:
                        continue
                    slot[cnt] = ei
                    a_arr[cnt] = a
                    t_arr[cnt] = t_acc
                    w_arr[cnt] = wgt
                    cnt += 1
                    t_acc *= 1.0 - a
                if cnt == 0:
                    continue
                gc0 = grad_color[py, px, 0]
                gc1 = grad_color[py, px, 1]
                gc2 = grad_color[py, px, 2]
                gk0 = grad_canon[py, px, 0]
                gk1 = grad_canon[py, px, 1]
                gk2 = grad_canon[py, px, 2]
                ga = grad_alpha[py, px]
                s_c0 = 0.0
                s_c1 = 0.0
                s_c2 = 0.0
                s_k0 = 0.0
                s_k1 = 0.0
                s_k2 = 0.0
                s_a = 0.0
                for i in range(cnt - 1, -1, -1):
                    ei = slot[i]
                    g = entries[ei]
                    a = a_arr[i]
                    t_i = t_arr[i]
                    wgt = w_arr[i]
                    at = a * t_i
                    g_color[ei, 0] += gc0 * at
                    g_color[ei, 1] += gc1 * at
                    g_color[ei, 2] += gc2 * at
                    g_canon[ei, 0] += gk0 * at
                    g_canon[ei, 1] += gk1 * at
                    g_canon[ei, 2] += gk2 * at
                    inv_om = 1.0 / (1.0 - a)
                    dalpha = (gc0 * (comp[g, 0] * t_i - s_c0 * inv_om)
                              + gc1 * (comp[g, 1] * t_i - s_c1 * inv_om)
                              + gc2 * (comp[g, 2] * t_i - s_c2 * inv_om)
                              + gk0 * (canon[g, 0] * t_i - s_k0 * inv_om)
                              + gk1 * (canon[g, 1] * t_i - s_k1 * inv_om)
                              + gk2 * (canon[g, 2] * t_i - s_k2 * inv_om)
                              + ga * (t_i - s_a * inv_om))
                    s_c0 += comp[g, 0] * at
                    s_c1 += comp[g, 1] * at
                    s_c2 += comp[g, 2] * at
                    s_k0 += canon[g, 0] * at
                    s_k1 += canon[g, 1] * at
                    s_k2 += canon[g, 2] * at
                    s_a += at
                    g_opac[ei] += dalpha * wgt
                    dq = dalpha * opac[g] * wgt * (-0.5)
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    g_conic[ei, 0] += dq * dx * dx
                    g_conic[ei, 1] += dq * 2.0 * dx * dy
                    g_conic[ei, 2] += dq * dy * dy
                    gx = dq * (2.0 * conic[g, 0] * dx + 2.0 * conic[g, 1] * dy)
                    gy = dq * (2.0 * conic[g, 1] * dx + 2.0 * conic[g, 2] * dy)
                    g_mean2d[ei, 0] -= gx
                    g_mean2d[ei, 1] -= gy
