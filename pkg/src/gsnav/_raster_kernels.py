"""Compiled inner loops for the tile rasterizer.

Determinism contract: every per-pixel decision (bounding-box test, Mahalanobis
cutoff, alpha floor, early exit) depends only on the globally depth-sorted
primitive list, never on the tile layout.  Tiles merely group pixels, so the
rendered image is bit-identical for any tile size and thread count.  Parallel
loops write to disjoint pixels or disjoint per-tile slots; the only cross-tile
combine is `reduce_partials`, which runs single-threaded in slot order.
"""

import math

import numpy as np
from numba import njit, prange

# Contributions below this alpha are dropped to keep denormals out of the
# compositing chain.  Small enough that finite-difference probes never see
# the jump.
ALPHA_FLOOR = 1e-12


@njit(cache=True)
def bin_tiles(bbox, tile_size, n_tiles_x, n_tiles_y):
    """CSR lists of depth-sorted primitive indices per tile.

    bbox rows are (x0, x1, y0, y1) inclusive pixel bounds already clipped to
    the image.  Iterating primitives in sorted order keeps each tile's list
    sorted for free.
    """
    n = bbox.shape[0]
    n_tiles = n_tiles_x * n_tiles_y
    counts = np.zeros(n_tiles, np.int64)
    for g in range(n):
        tx0 = bbox[g, 0] // tile_size
        tx1 = bbox[g, 1] // tile_size
        ty0 = bbox[g, 2] // tile_size
        ty1 = bbox[g, 3] // tile_size
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * n_tiles_x + tx] += 1
    ptr = np.zeros(n_tiles + 1, np.int64)
    for i in range(n_tiles):
        ptr[i + 1] = ptr[i] + counts[i]
    items = np.empty(ptr[n_tiles], np.int64)
    cursor = ptr[:-1].copy()
    for g in range(n):
        tx0 = bbox[g, 0] // tile_size
        tx1 = bbox[g, 1] // tile_size
        ty0 = bbox[g, 2] // tile_size
        ty1 = bbox[g, 3] // tile_size
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * n_tiles_x + tx
                items[cursor[t]] = g
                cursor[t] += 1
    return ptr, items


@njit(cache=True, parallel=True, nogil=True)
def forward(mu, ia, ib, ic, alpha, color, depth, bbox, tile_ptr, tile_items,
            width, height, tile_size, n_tiles_x, bright_a, bright_b,
            early_exit, q_max, alpha_clamp, out_color, out_tacc, out_count,
            out_depth):
    n_tiles = tile_ptr.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // n_tiles_x
        tx = t - ty * n_tiles_x
        x0 = tx * tile_size
        y0 = ty * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        lo = tile_ptr[t]
        hi = tile_ptr[t + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dsum = 0.0
                cnt = 0
                for k in range(lo, hi):
                    g = tile_items[k]
                    if (px < bbox[g, 0] or px > bbox[g, 1]
                            or py < bbox[g, 2] or py > bbox[g, 3]):
                        continue
                    dx = px - mu[g, 0]
                    dy = py - mu[g, 1]
                    q = ia[g] * dx * dx + 2.0 * ib[g] * dx * dy + ic[g] * dy * dy
                    if q > q_max:
                        continue
                    ap = alpha[g] * math.exp(-0.5 * q)
                    if ap > alpha_clamp:
                        ap = alpha_clamp
                    if ap < ALPHA_FLOOR:
                        continue
                    w = ap * trans
                    c0 += w * color[g, 0]
                    c1 += w * color[g, 1]
                    c2 += w * color[g, 2]
                    dsum += w * depth[g]
                    cnt += 1
                    trans *= 1.0 - ap
                    if trans < early_exit:
                        break
                out_color[py, px, 0] = bright_a * c0 + bright_b
                out_color[py, px, 1] = bright_a * c1 + bright_b
                out_color[py, px, 2] = bright_a * c2 + bright_b
                out_tacc[py, px] = 1.0 - trans
                out_count[py, px] = cnt
                out_depth[py, px] = dsum


@njit(cache=True, parallel=True, nogil=True)
def backward(mu, ia, ib, ic, alpha, color, depth, bbox, tile_ptr, tile_items,
             width, height, tile_size, n_tiles_x, bright_a, bright_b,
             early_exit, q_max, alpha_clamp, target, mask, inv3m,
             part, bright_part):
    """Per-slot partial gradients of the masked photometric loss.

    part has one row per (tile, candidate) slot, aligned with tile_items:
    columns 0-1 d/d mu_I, 2-4 d/d (s00, s01, s11) of the dilated screen
    covariance, 5 d/d alpha, 6-8 d/d color, 9 contributing-pixel count.
    bright_part holds per-tile (dL/da, dL/db).  Each tile touches only its
    own slots, so the parallel loop is race-free and deterministic.
    """
    n_tiles = tile_ptr.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // n_tiles_x
        tx = t - ty * n_tiles_x
        x0 = tx * tile_size
        y0 = ty * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        lo = tile_ptr[t]
        hi = tile_ptr[t + 1]
        cap = hi - lo
        if cap == 0:
            continue
        slot = np.empty(cap, np.int64)
        s_ap = np.empty(cap)
        s_tr = np.empty(cap)
        s_dx = np.empty(cap)
        s_dy = np.empty(cap)
        s_cl = np.empty(cap, np.uint8)
        g_a = 0.0
        g_b = 0.0
        for py in range(y0, y1):
            for px in range(x0, x1):
                if not mask[py, px]:
                    continue
                m = 0
                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                for k in range(lo, hi):
                    g = tile_items[k]
                    if (px < bbox[g, 0] or px > bbox[g, 1]
                            or py < bbox[g, 2] or py > bbox[g, 3]):
                        continue
                    dx = px - mu[g, 0]
                    dy = py - mu[g, 1]
                    q = ia[g] * dx * dx + 2.0 * ib[g] * dx * dy + ic[g] * dy * dy
                    if q > q_max:
                        continue
                    ap = alpha[g] * math.exp(-0.5 * q)
                    clamped = np.uint8(0)
                    if ap > alpha_clamp:
                        ap = alpha_clamp
                        clamped = np.uint8(1)
                    if ap < ALPHA_FLOOR:
                        continue
                    slot[m] = k
                    s_ap[m] = ap
                    s_tr[m] = trans
                    s_dx[m] = dx
                    s_dy[m] = dy
                    s_cl[m] = clamped
                    w = ap * trans
                    c0 += w * color[g, 0]
                    c1 += w * color[g, 1]
                    c2 += w * color[g, 2]
                    m += 1
                    trans *= 1.0 - ap
                    if trans < early_exit:
                        break
                tfin = trans
                tacc = 1.0 - tfin
                d0 = bright_a * c0 + bright_b - target[py, px, 0]
                d1 = bright_a * c1 + bright_b - target[py, px, 1]
                d2 = bright_a * c2 + bright_b - target[py, px, 2]
                s0 = (d0 > 0.0) * 1.0 - (d0 < 0.0) * 1.0
                s1 = (d1 > 0.0) * 1.0 - (d1 < 0.0) * 1.0
                s2 = (d2 > 0.0) * 1.0 - (d2 < 0.0) * 1.0
                scale = tacc * inv3m
                dldc0 = scale * s0 * bright_a
                dldc1 = scale * s1 * bright_a
                dldc2 = scale * s2 * bright_a
                # T_acc multiplies the per-pixel term, so T_fin = 1 - T_acc
                # carries its own gradient path through every alpha.
                dldtfin = -(abs(d0) + abs(d1) + abs(d2)) * inv3m
                g_a += scale * (s0 * c0 + s1 * c1 + s2 * c2)
                g_b += scale * (s0 + s1 + s2)
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                for j in range(m - 1, -1, -1):
                    k = slot[j]
                    g = tile_items[k]
                    ap = s_ap[j]
                    tr = s_tr[j]
                    w = ap * tr
                    part[k, 6] += dldc0 * w
                    part[k, 7] += dldc1 * w
                    part[k, 8] += dldc2 * w
                    part[k, 9] += 1.0
                    om = 1.0 - ap
                    gap = (dldc0 * (tr * color[g, 0] - acc0 / om)
                           + dldc1 * (tr * color[g, 1] - acc1 / om)
                           + dldc2 * (tr * color[g, 2] - acc2 / om)
                           - dldtfin * tfin / om)
                    acc0 += w * color[g, 0]
                    acc1 += w * color[g, 1]
                    acc2 += w * color[g, 2]
                    if s_cl[j]:
                        continue
                    part[k, 5] += gap * ap / alpha[g]
                    gq = -0.5 * ap * gap
                    m0 = ia[g] * s_dx[j] + ib[g] * s_dy[j]
                    m1 = ib[g] * s_dx[j] + ic[g] * s_dy[j]
                    part[k, 0] += -2.0 * gq * m0
                    part[k, 1] += -2.0 * gq * m1
                    part[k, 2] += -gq * m0 * m0
                    part[k, 3] += -2.0 * gq * m0 * m1
                    part[k, 4] += -gq * m1 * m1
        bright_part[t, 0] = g_a
        bright_part[t, 1] = g_b


@njit(cache=True)
def reduce_partials(tile_items, part, n_gauss):
    """Slot-order reduction of backward partials onto primitives."""
    out = np.zeros((n_gauss, 10))
    for k in range(tile_items.shape[0]):
        g = tile_items[k]
        for c in range(10):
            out[g, c] += part[k, c]
    return out


@njit(cache=True, parallel=True, nogil=True)
def masked_loss(mu, ia, ib, ic, alpha, color, bbox, tile_ptr, tile_items,
                width, height, tile_size, n_tiles_x, bright_a, bright_b,
                early_exit, q_max, alpha_clamp, target, mask, tacc_thresh,
                out):
    """Photometric loss terms over masked pixels only, one row per tile.

    out columns: sum of t_acc * mean-channel |C - target|, and the count of
    masked pixels whose t_acc exceeds tacc_thresh (view-degeneracy check).
    Summed per tile then reduced in tile order by the caller.
    """
    n_tiles = tile_ptr.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // n_tiles_x
        tx = t - ty * n_tiles_x
        x0 = tx * tile_size
        y0 = ty * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        lo = tile_ptr[t]
        hi = tile_ptr[t + 1]
        loss_sum = 0.0
        n_valid = 0.0
        for py in range(y0, y1):
            for px in range(x0, x1):
                if not mask[py, px]:
                    continue
                trans = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                for k in range(lo, hi):
                    g = tile_items[k]
                    if (px < bbox[g, 0] or px > bbox[g, 1]
                            or py < bbox[g, 2] or py > bbox[g, 3]):
                        continue
                    dx = px - mu[g, 0]
                    dy = py - mu[g, 1]
                    q = ia[g] * dx * dx + 2.0 * ib[g] * dx * dy + ic[g] * dy * dy
                    if q > q_max:
                        continue
                    ap = alpha[g] * math.exp(-0.5 * q)
                    if ap > alpha_clamp:
                        ap = alpha_clamp
                    if ap < ALPHA_FLOOR:
                        continue
                    w = ap * trans
                    c0 += w * color[g, 0]
                    c1 += w * color[g, 1]
                    c2 += w * color[g, 2]
                    trans *= 1.0 - ap
                    if trans < early_exit:
                        break
                tacc = 1.0 - trans
                d0 = abs(bright_a * c0 + bright_b - target[py, px, 0])
                d1 = abs(bright_a * c1 + bright_b - target[py, px, 1])
                d2 = abs(bright_a * c2 + bright_b - target[py, px, 2])
                loss_sum += tacc * (d0 + d1 + d2) / 3.0
                if tacc > tacc_thresh:
                    n_valid += 1.0
        out[t, 0] = loss_sum
        out[t, 1] = n_valid


@njit(cache=True)
def pixel_pose_rows(mu, ia, ib, ic, alpha, color, bbox, tile_ptr, tile_items,
                    tile_size, n_tiles_x, px_list, py_list, early_exit, q_max,
                    alpha_clamp, p_mu, p_s, out_c, out_t, j_c, j_t):
    """Composited raw color, final transmittance, and their pose-twist
    Jacobians at a selected pixel subset.

    p_mu (n, 2, 6) and p_s (n, 3, 6) are the per-primitive screen-mean and
    screen-covariance twist chains.  Rows of the outputs align with px_list.
    Compositing arithmetic matches forward() exactly; clamped contributions
    carry zero derivative, mirroring backward().
    """
    n_pix = px_list.shape[0]
    for i in range(n_pix):
        px = px_list[i]
        py = py_list[i]
        t = (py // tile_size) * n_tiles_x + (px // tile_size)
        lo = tile_ptr[t]
        hi = tile_ptr[t + 1]
        cap = hi - lo
        slot = np.empty(cap, np.int64)
        s_ap = np.empty(cap)
        s_tr = np.empty(cap)
        s_dx = np.empty(cap)
        s_dy = np.empty(cap)
        s_cl = np.empty(cap, np.uint8)
        m = 0
        trans = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for k in range(lo, hi):
            g = tile_items[k]
            if (px < bbox[g, 0] or px > bbox[g, 1]
                    or py < bbox[g, 2] or py > bbox[g, 3]):
                continue
            dx = px - mu[g, 0]
            dy = py - mu[g, 1]
            q = ia[g] * dx * dx + 2.0 * ib[g] * dx * dy + ic[g] * dy * dy
            if q > q_max:
                continue
            ap = alpha[g] * math.exp(-0.5 * q)
            clamped = np.uint8(0)
            if ap > alpha_clamp:
                ap = alpha_clamp
                clamped = np.uint8(1)
            if ap < ALPHA_FLOOR:
                continue
            slot[m] = g
            s_ap[m] = ap
            s_tr[m] = trans
            s_dx[m] = dx
            s_dy[m] = dy
            s_cl[m] = clamped
            w = ap * trans
            c0 += w * color[g, 0]
            c1 += w * color[g, 1]
            c2 += w * color[g, 2]
            m += 1
            trans *= 1.0 - ap
            if trans < early_exit:
                break
        tfin = trans
        out_c[i, 0] = c0
        out_c[i, 1] = c1
        out_c[i, 2] = c2
        out_t[i] = tfin
        acc0 = 0.0
        acc1 = 0.0
        acc2 = 0.0
        for j in range(m - 1, -1, -1):
            g = slot[j]
            ap = s_ap[j]
            tr = s_tr[j]
            om = 1.0 - ap
            gap0 = tr * color[g, 0] - acc0 / om
            gap1 = tr * color[g, 1] - acc1 / om
            gap2 = tr * color[g, 2] - acc2 / om
            w = ap * tr
            acc0 += w * color[g, 0]
            acc1 += w * color[g, 1]
            acc2 += w * color[g, 2]
            if s_cl[j]:
                continue
            m0 = ia[g] * s_dx[j] + ib[g] * s_dy[j]
            m1 = ib[g] * s_dx[j] + ic[g] * s_dy[j]
            tf_om = tfin / om
            for d in range(6):
                dq = (-2.0 * m0 * p_mu[g, 0, d] - 2.0 * m1 * p_mu[g, 1, d]
                      - m0 * m0 * p_s[g, 0, d] - 2.0 * m0 * m1 * p_s[g, 1, d]
                      - m1 * m1 * p_s[g, 2, d])
                dap = -0.5 * ap * dq
                j_c[i, 0, d] += gap0 * dap
                j_c[i, 1, d] += gap1 * dap
                j_c[i, 2, d] += gap2 * dap
                j_t[i, d] -= tf_om * dap
    return


@njit(cache=True)
def count_ray_contribs(mu, ia, ib, ic, alpha, bbox, width, height,
                       early_exit, q_max, alpha_clamp, counts):
    """Contributions per pixel ray, identical gating to forward()."""
    n = mu.shape[0]
    for py in range(height):
        for px in range(width):
            trans = 1.0
            cnt = 0
            for g in range(n):
                if (px < bbox[g, 0] or px > bbox[g, 1]
                        or py < bbox[g, 2] or py > bbox[g, 3]):
                    continue
                dx = px - mu[g, 0]
                dy = py - mu[g, 1]
                q = ia[g] * dx * dx + 2.0 * ib[g] * dx * dy + ic[g] * dy * dy
                if q > q_max:
                    continue
                ap = alpha[g] * math.exp(-0.5 * q)
                if ap > alpha_clamp:
                    ap = alpha_clamp
                if ap < ALPHA_FLOOR:
                    continue
                cnt += 1
                trans *= 1.0 - ap
                if trans < early_exit:
                    break
            counts[py * width + px] = cnt


@njit(cache=True)
def fill_ray_contribs(mu, ia, ib, ic, alpha, bbox, src, width, height,
                      early_exit, q_max, alpha_clamp, ray_ptr, ids, alphas):
    """Second pass: store (source id, composited alpha) per ray in depth order."""
    n = mu.shape[0]
    for py in range(height):
        for px in range(width):
            cursor = ray_ptr[py * width + px]
            trans = 1.0
            for g in range(n):
                if (px < bbox[g, 0] or px > bbox[g, 1]
                        or py < bbox[g, 2] or py > bbox[g, 3]):
                    continue
                dx = px - mu[g, 0]
                dy = py - mu[g, 1]
                q = ia[g] * dx * dx + 2.0 * ib[g] * dx * dy + ic[g] * dy * dy
                if q > q_max:
                    continue
                ap = alpha[g] * math.exp(-0.5 * q)
                if ap > alpha_clamp:
                    ap = alpha_clamp
                if ap < ALPHA_FLOOR:
                    continue
                ids[cursor] = src[g]
                alphas[cursor] = ap
                cursor += 1
                trans *= 1.0 - ap
                if trans < early_exit:
                    break
