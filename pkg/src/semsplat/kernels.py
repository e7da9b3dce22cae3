"""Numba kernels: per-pixel splat lists and front-to-back alpha compositing.

Splats arrive sorted by camera depth.  ``build_pixel_csr`` scatters them into
per-pixel candidate lists with a counting sort, which keeps the depth order
within every pixel and is fully deterministic.  The backward kernel re-runs
the per-pixel forward pass instead of storing per-pixel state.
"""

import numba
import numpy as np

ALPHA_CLAMP = 0.99
T_CUTOFF = 1e-4


@numba.njit(cache=True)
def build_pixel_csr(x0, x1, y0, y1, height, width):
    """Counting-sort splats (given inclusive pixel bounds) into pixel bins.

    Counting uses per-row run deltas (+1 at x0, -1 past x1) followed by a
    prefix sum, so the count pass costs two writes per splat-row.
    """
    n_px = height * width
    delta = np.zeros(n_px + 2, dtype=np.int64)
    m = x0.shape[0]
    for s in range(m):
        xa = x0[s]
        xb = x1[s]
        if xb < xa:
            continue
        for yy in range(y0[s], y1[s] + 1):
            base = yy * width
            delta[base + xa + 1] += 1
            delta[base + xb + 2] -= 1
    offsets = np.empty(n_px + 1, dtype=np.int64)
    run = 0
    acc = 0
    offsets[0] = 0
    for p in range(n_px):
        run += delta[p + 1]
        acc += run
        offsets[p + 1] = acc
    items = np.empty(acc, dtype=np.int64)
    cursor = offsets[:-1].copy()
    for s in range(m):
        xa = x0[s]
        xb = x1[s]
        if xb < xa:
            continue
        for yy in range(y0[s], y1[s] + 1):
            base = yy * width
            for xx in range(xa, xb + 1):
                p = base + xx
                items[cursor[p]] = s
                cursor[p] += 1
    return offsets, items


@numba.njit(cache=True)
def composite_forward(offsets, items, live, mean2d, conic, alpha, color,
                      depthc, feat, background, height, width,
                      out_color, out_depth, out_alpha, out_feat, pair_a):
    """Per-pixel front-to-back blend.  ``pair_a`` (pre-zeroed, one slot per
    candidate pair) records each processed splat's clamped contribution so the
    backward pass can skip the replay; masked / truncated pairs stay 0."""
    d = feat.shape[1]
    store = pair_a.shape[0] > 0
    for r in range(height):
        for c in range(width):
            p = r * width + c
            T = 1.0
            acc0 = 0.0
            acc1 = 0.0
            acc2 = 0.0
            accz = 0.0
            for k in range(offsets[p], offsets[p + 1]):
                if T < T_CUTOFF:
                    break
                g = items[k]
                if not live[g]:
                    continue
                dx = c - mean2d[g, 0]
                dy = r - mean2d[g, 1]
                power = -0.5 * (conic[g, 0] * dx * dx
                                + 2.0 * conic[g, 1] * dx * dy
                                + conic[g, 2] * dy * dy)
                a = alpha[g] * np.exp(power)
                if a > ALPHA_CLAMP:
                    a = ALPHA_CLAMP
                if a <= 0.0:
                    continue
                if store:
                    pair_a[k] = a
                w = a * T
                acc0 += w * color[g, 0]
                acc1 += w * color[g, 1]
                acc2 += w * color[g, 2]
                accz += w * depthc[g]
                for j in range(d):
                    out_feat[r, c, j] += w * feat[g, j]
                T *= 1.0 - a
            out_color[r, c, 0] = acc0 + background[0] * T
            out_color[r, c, 1] = acc1 + background[1] * T
            out_color[r, c, 2] = acc2 + background[2] * T
            out_depth[r, c] = accz
            out_alpha[r, c] = 1.0 - T


@numba.njit(cache=True)
def composite_backward(offsets, items, live, mean2d, conic, alpha, color,
                       depthc, feat, background, height, width,
                       g_color, g_depth, g_alpha_img, g_feat,
                       gr_mean2d, gr_conic, gr_alpha, gr_color, gr_depthc,
                       gr_feat):
    d = feat.shape[1]
    n_px = height * width
    max_len = 0
    for p in range(n_px):
        ln = offsets[p + 1] - offsets[p]
        if ln > max_len:
            max_len = ln
    a_buf = np.empty(max_len, dtype=mean2d.dtype)
    for r in range(height):
        for c in range(width):
            p = r * width + c
            lo = offsets[p]
            hi = offsets[p + 1]
            if hi == lo:
                continue
            gc0 = g_color[r, c, 0]
            gc1 = g_color[r, c, 1]
            gc2 = g_color[r, c, 2]
            gz = g_depth[r, c]
            ga = g_alpha_img[r, c]
            # replay the forward pass to recover per-splat contributions
            T = 1.0
            stop = hi
            for k in range(lo, hi):
                if T < T_CUTOFF:
                    stop = k
                    break
                g = items[k]
                if not live[g]:
                    a_buf[k - lo] = 0.0
                    continue
                dx = c - mean2d[g, 0]
                dy = r - mean2d[g, 1]
                power = -0.5 * (conic[g, 0] * dx * dx
                                + 2.0 * conic[g, 1] * dx * dy
                                + conic[g, 2] * dy * dy)
                a = alpha[g] * np.exp(power)
                if a > ALPHA_CLAMP:
                    a = ALPHA_CLAMP
                if a < 0.0:
                    a = 0.0
                a_buf[k - lo] = a
                T *= 1.0 - a
            T_final = T
            # dL/dT_final: background compositing plus the coverage output
            g_tf = gc0 * background[0] + gc1 * background[1] \
                + gc2 * background[2] - ga
            suffix = g_tf * T_final
            T_run = T_final
            for k in range(stop - 1, lo - 1, -1):
                a = a_buf[k - lo]
                if a <= 0.0:
                    continue
                g = items[k]
                T_run = T_run / (1.0 - a)     # transmittance before splat k
                w = a * T_run
                dot = gc0 * color[g, 0] + gc1 * color[g, 1] \
                    + gc2 * color[g, 2] + gz * depthc[g]
                for j in range(d):
                    gf = g_feat[r, c, j]
                    dot += gf * feat[g, j]
                    gr_feat[g, j] += gf * w
                gr_color[g, 0] += gc0 * w
                gr_color[g, 1] += gc1 * w
                gr_color[g, 2] += gc2 * w
                gr_depthc[g] += gz * w
                g_a = T_run * dot - suffix / (1.0 - a)
                suffix += dot * w
                # a = clamp(alpha * exp(power)); the clamp stops the gradient
                if a < ALPHA_CLAMP:
                    dx = c - mean2d[g, 0]
                    dy = r - mean2d[g, 1]
                    expp = a / alpha[g]       # recover exp(power) without exp()
                    gr_alpha[g] += g_a * expp
                    g_power = g_a * a
                    gr_mean2d[g, 0] += g_power * (conic[g, 0] * dx + conic[g, 1] * dy)
                    gr_mean2d[g, 1] += g_power * (conic[g, 1] * dx + conic[g, 2] * dy)
                    gr_conic[g, 0] += g_power * (-0.5 * dx * dx)
                    gr_conic[g, 1] += g_power * (-dx * dy)
                    gr_conic[g, 2] += g_power * (-0.5 * dy * dy)


@numba.njit(cache=True)
def composite_backward_cached(offsets, items, pair_a, mean2d, conic, alpha,
                              color, depthc, feat, background, height, width,
                              g_color, g_depth, g_alpha_img, g_feat,
                              gr_mean2d, gr_conic, gr_alpha, gr_color,
                              gr_depthc, gr_feat):
    """Backward using the forward's recorded pair contributions: no replay,
    no exp.  A zero slot means the pair was masked, truncated, or dead."""
    d = feat.shape[1]
    for r in range(height):
        for c in range(width):
            p = r * width + c
            lo = offsets[p]
            hi = offsets[p + 1]
            if hi == lo:
                continue
            gc0 = g_color[r, c, 0]
            gc1 = g_color[r, c, 1]
            gc2 = g_color[r, c, 2]
            gz = g_depth[r, c]
            ga = g_alpha_img[r, c]
            T_final = 1.0
            for k in range(lo, hi):
                a = pair_a[k]
                if a > 0.0:
                    T_final *= 1.0 - a
            g_tf = gc0 * background[0] + gc1 * background[1] \
                + gc2 * background[2] - ga
            suffix = g_tf * T_final
            T_run = T_final
            for k in range(hi - 1, lo - 1, -1):
                a = pair_a[k]
                if a <= 0.0:
                    continue
                g = items[k]
                T_run = T_run / (1.0 - a)
                w = a * T_run
                dot = gc0 * color[g, 0] + gc1 * color[g, 1] \
                    + gc2 * color[g, 2] + gz * depthc[g]
                for j in range(d):
                    gf = g_feat[r, c, j]
                    dot += gf * feat[g, j]
                    gr_feat[g, j] += gf * w
                gr_color[g, 0] += gc0 * w
                gr_color[g, 1] += gc1 * w
                gr_color[g, 2] += gc2 * w
                gr_depthc[g] += gz * w
                g_a = T_run * dot - suffix / (1.0 - a)
                suffix += dot * w
                if a < ALPHA_CLAMP:
                    dx = c - mean2d[g, 0]
                    dy = r - mean2d[g, 1]
                    expp = a / alpha[g]
                    gr_alpha[g] += g_a * expp
                    g_power = g_a * a
                    gr_mean2d[g, 0] += g_power * (conic[g, 0] * dx + conic[g, 1] * dy)
                    gr_mean2d[g, 1] += g_power * (conic[g, 1] * dx + conic[g, 2] * dy)
                    gr_conic[g, 0] += g_power * (-0.5 * dx * dx)
                    gr_conic[g, 1] += g_power * (-dx * dy)
                    gr_conic[g, 2] += g_power * (-0.5 * dy * dy)
