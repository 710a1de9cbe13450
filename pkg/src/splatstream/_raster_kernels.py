"""Per-pixel compositing loops (numba).  All arrays are float64.

``t_stop`` > 0 ends a pixel once transmittance falls below it (fast
path, error per channel at most t_stop times the largest colour);
``t_stop`` = 0 gives the exact sum.  Contributions below
``alpha_min`` are skipped (1/255 normally, 0 for smooth gradient checks).
``log_cut[g]`` sits just below log(alpha_min / opacity[g]); an exponent
under it is skipped without evaluating exp (same result, fewer exps).
"""

import numba
import numpy as np

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0


@numba.njit(cache=True)
def bin_tiles(order, xmin, xmax, ymin, ymax, tile, n_tx, n_ty):
    """Per-tile lists of primitive ids, preserving the order of ``order``."""
    n_tiles = n_tx * n_ty
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for g in order:
        tx0 = xmin[g] // tile
        tx1 = xmax[g] // tile
        ty0 = ymin[g] // tile
        ty1 = ymax[g] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * n_tx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for g in order:
        tx0 = xmin[g] // tile
        tx1 = xmax[g] // tile
        ty0 = ymin[g] // tile
        ty1 = ymax[g] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * n_tx + tx
                ids[fill[t]] = g
                fill[t] += 1
    return offsets, ids


def log_cutoffs(opacity, alpha_min):
    """Exponent below which opacity * exp(power) < alpha_min, minus a safety margin."""
    if alpha_min <= 0:
        return np.full(opacity.shape[0], -np.inf)
    with np.errstate(divide="ignore"):
        return np.log(alpha_min) - np.log(opacity) - 1e-6


@numba.njit(cache=True)
def composite_forward(width, height, tile, n_tx, offsets, ids, mean2d, conic, opacity, log_cut, color, background, t_stop, alpha_min):
    rgb = np.zeros((height, width, 3))
    t_final = np.ones((height, width))
    n_used = np.zeros((height, width), dtype=np.int64)
    for py in range(height):
        for px in range(width):
            t = (py // tile) * n_tx + (px // tile)
            fx = px + 0.5
            fy = py + 0.5
            T = 1.0
            r = 0.0
            gg = 0.0
            b = 0.0
            used = 0
            for j in range(offsets[t], offsets[t + 1]):
                g = ids[j]
                dx = fx - mean2d[g, 0]
                dy = fy - mean2d[g, 1]
                power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                if power < log_cut[g]:
                    continue
                a = opacity[g] * np.exp(power)
                if a > ALPHA_MAX:
                    a = ALPHA_MAX
                if a < alpha_min:
                    continue
                w = a * T
                r += color[g, 0] * w
                gg += color[g, 1] * w
                b += color[g, 2] * w
                T *= 1.0 - a
                used += 1
                if T < t_stop:
                    break
            rgb[py, px, 0] = r + T * background[0]
            rgb[py, px, 1] = gg + T * background[1]
            rgb[py, px, 2] = b + T * background[2]
            t_final[py, px] = T
            n_used[py, px] = used
    return rgb, t_final, n_used


@numba.njit(cache=True)
def composite_backward(
    width, height, tile, n_tx, offsets, ids, mean2d, conic, opacity, log_cut, color, background,
    t_final, n_used, grad_rgb, grad_alpha, t_stop, alpha_min,
):
    n = mean2d.shape[0]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_color = np.zeros((n, 3))
    max_len = 0
    for t in range(offsets.shape[0] - 1):
        max_len = max(max_len, offsets[t + 1] - offsets[t])
    buf_g = np.empty(max_len, dtype=np.int64)
    buf_a = np.empty(max_len)
    buf_T = np.empty(max_len)
    buf_clamped = np.empty(max_len, dtype=np.bool_)
    buf_dx = np.empty(max_len)
    buf_dy = np.empty(max_len)
    for py in range(height):
        for px in range(width):
            if n_used[py, px] == 0:
                continue
            t = (py // tile) * n_tx + (px // tile)
            fx = px + 0.5
            fy = py + 0.5
            T = 1.0
            k = 0
            for j in range(offsets[t], offsets[t + 1]):
                g = ids[j]
                dx = fx - mean2d[g, 0]
                dy = fy - mean2d[g, 1]
                power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                if power < log_cut[g]:
                    continue
                a = opacity[g] * np.exp(power)
                clamped = False
                if a > ALPHA_MAX:
                    a = ALPHA_MAX
                    clamped = True
                if a < alpha_min:
                    continue
                buf_g[k] = g
                buf_a[k] = a
                buf_T[k] = T
                buf_clamped[k] = clamped
                buf_dx[k] = dx
                buf_dy[k] = dy
                T *= 1.0 - a
                k += 1
                if T < t_stop:
                    break
            Tf = t_final[py, px]
            G0 = grad_rgb[py, px, 0]
            G1 = grad_rgb[py, px, 1]
            G2 = grad_rgb[py, px, 2]
            gA = grad_alpha[py, px]
            # S: colour accumulated behind the current primitive, background included
            S0 = Tf * background[0]
            S1 = Tf * background[1]
            S2 = Tf * background[2]
            for i in range(k - 1, -1, -1):
                g = buf_g[i]
                a = buf_a[i]
                Ti = buf_T[i]
                w = a * Ti
                g_color[g, 0] += w * G0
                g_color[g, 1] += w * G1
                g_color[g, 2] += w * G2
                cG = color[g, 0] * G0 + color[g, 1] * G1 + color[g, 2] * G2
                SG = S0 * G0 + S1 * G1 + S2 * G2
                inv = 1.0 / (1.0 - a)
                d_a = Ti * cG - SG * inv + gA * Tf * inv
                S0 += color[g, 0] * w
                S1 += color[g, 1] * w
                S2 += color[g, 2] * w
                if buf_clamped[i]:
                    continue
                dx = buf_dx[i]
                dy = buf_dy[i]
                gauss = a / opacity[g]
                g_opac[g] += d_a * gauss
                d_p = d_a * a
                g_mean[g, 0] += d_p * (conic[g, 0] * dx + conic[g, 1] * dy)
                g_mean[g, 1] += d_p * (conic[g, 1] * dx + conic[g, 2] * dy)
                g_conic[g, 0] += -0.5 * dx * dx * d_p
                g_conic[g, 1] += -dx * dy * d_p
                g_conic[g, 2] += -0.5 * dy * dy * d_p
    return g_mean, g_conic, g_opac, g_color
