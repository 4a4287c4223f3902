"""Scalar numba kernels for front-to-back alpha compositing and its adjoint.

Two equivalent traversal layouts: a CSR per-pixel splat list (built from
per-splat bounding boxes) and a brute-force loop over every splat per pixel.
Both apply exactly the same arithmetic in the same depth order, so their
outputs are bit-identical; the CSR path only skips (splat, pixel) pairs that
the Mahalanobis cutoff would reject anyway.

Splat arrays arrive pre-sorted by ascending camera depth. All accumulation is
sequential scalar code: results are deterministic for a fixed input order.
"""
import numpy as np
from numba import njit

__all__ = [
    "build_pixel_lists", "forward_csr", "backward_csr",
    "forward_brute", "backward_brute",
]


@njit(cache=True)
def build_pixel_lists(i0, i1, j0, j1, H, W):
    """CSR layout of per-pixel splat lists from clipped integer bboxes.

    Splats must already be depth-sorted; each pixel's list then inherits
    that order. Returns (offsets: (H*W+1,) int64, idx: (total,) int32).
    """
    n = i0.shape[0]
    offsets = np.zeros(H * W + 1, np.int64)
    for s in range(n):
        for i in range(i0[s], i1[s]):
            base = i * W
            for j in range(j0[s], j1[s]):
                offsets[base + j + 1] += 1
    for k in range(H * W):
        offsets[k + 1] += offsets[k]
    idx = np.empty(offsets[H * W], np.int32)
    cursor = offsets[:H * W].copy()
    for s in range(n):
        for i in range(i0[s], i1[s]):
            base = i * W
            for j in range(j0[s], j1[s]):
                idx[cursor[base + j]] = s
                cursor[base + j] += 1
    return offsets, idx


@njit(cache=True)
def forward_csr(offsets, idx, mx, my, ca, cb, cc, alpha, col,
                H, W, q_max, w_max, rgb, accum):
    for i in range(H):
        py = i + 0.5
        for j in range(W):
            px = j + 0.5
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            for k in range(offsets[i * W + j], offsets[i * W + j + 1]):
                s = idx[k]
                dx = px - mx[s]
                dy = py - my[s]
                q = ca[s] * dx * dx + 2.0 * cb[s] * dx * dy + cc[s] * dy * dy
                if q > q_max:
                    continue
                w = alpha[s] * np.exp(-0.5 * q)
                if w > w_max:
                    w = w_max
                r += T * w * col[s, 0]
                g += T * w * col[s, 1]
                b += T * w * col[s, 2]
                T *= 1.0 - w
            rgb[i, j, 0] = r
            rgb[i, j, 1] = g
            rgb[i, j, 2] = b
            accum[i, j] = 1.0 - T


@njit(cache=True)
def forward_brute(mx, my, ca, cb, cc, alpha, col, H, W, q_max, w_max, rgb, accum):
    n = mx.shape[0]
    for i in range(H):
        py = i + 0.5
        for j in range(W):
            px = j + 0.5
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            for s in range(n):
                dx = px - mx[s]
                dy = py - my[s]
                q = ca[s] * dx * dx + 2.0 * cb[s] * dx * dy + cc[s] * dy * dy
                if q > q_max:
                    continue
                w = alpha[s] * np.exp(-0.5 * q)
                if w > w_max:
                    w = w_max
                r += T * w * col[s, 0]
                g += T * w * col[s, 1]
                b += T * w * col[s, 2]
                T *= 1.0 - w
            rgb[i, j, 0] = r
            rgb[i, j, 1] = g
            rgb[i, j, 2] = b
            accum[i, j] = 1.0 - T


@njit(cache=True, inline="always")
def _pixel_backward_span(k0, k1, idx, mx, my, ca, cb, cc, alpha, col,
                         px, py, q_max, w_max, gr, gg, gb, ga,
                         d_mx, d_my, d_ca, d_cb, d_cc, d_alpha, d_col):
    """Adjoint of one pixel's compositing over the splat ids idx[k0:k1].

    First replays the forward pass to obtain final transmittance, then walks
    back-to-front maintaining the suffix sum of downstream contributions.
    """
    T = 1.0
    for k in range(k0, k1):
        s = idx[k]
        dx = px - mx[s]
        dy = py - my[s]
        q = ca[s] * dx * dx + 2.0 * cb[s] * dx * dy + cc[s] * dy * dy
        if q > q_max:
            continue
        w = alpha[s] * np.exp(-0.5 * q)
        if w > w_max:
            w = w_max
        T *= 1.0 - w
    t_final = T

    suffix = 0.0
    t_cur = t_final
    for k in range(k1 - 1, k0 - 1, -1):
        s = idx[k]
        dx = px - mx[s]
        dy = py - my[s]
        q = ca[s] * dx * dx + 2.0 * cb[s] * dx * dy + cc[s] * dy * dy
        if q > q_max:
            continue
        G = np.exp(-0.5 * q)
        w = alpha[s] * G
        clamped = w > w_max
        if clamped:
            w = w_max
        t_i = t_cur / (1.0 - w)
        gdotc = gr * col[s, 0] + gg * col[s, 1] + gb * col[s, 2]
        tw = t_i * w
        d_col[s, 0] += gr * tw
        d_col[s, 1] += gg * tw
        d_col[s, 2] += gb * tw
        dldw = gdotc * t_i - (suffix - ga * t_final) / (1.0 - w)
        suffix += gdotc * w * t_i
        if not clamped:
            d_alpha[s] += dldw * G
            gq = -0.5 * dldw * alpha[s] * G
            d_ca[s] += gq * dx * dx
            d_cb[s] += gq * 2.0 * dx * dy
            d_cc[s] += gq * dy * dy
            d_mx[s] -= gq * (2.0 * ca[s] * dx + 2.0 * cb[s] * dy)
            d_my[s] -= gq * (2.0 * cb[s] * dx + 2.0 * cc[s] * dy)
        t_cur = t_i


@njit(cache=True)
def backward_csr(offsets, idx, mx, my, ca, cb, cc, alpha, col, H, W,
                 q_max, w_max, g_rgb, g_accum,
                 d_mx, d_my, d_ca, d_cb, d_cc, d_alpha, d_col):
    for i in range(H):
        py = i + 0.5
        for j in range(W):
            px = j + 0.5
            _pixel_backward_span(offsets[i * W + j], offsets[i * W + j + 1], idx,
                                 mx, my, ca, cb, cc, alpha, col, px, py,
                                 q_max, w_max,
                                 g_rgb[i, j, 0], g_rgb[i, j, 1], g_rgb[i, j, 2],
                                 g_accum[i, j],
                                 d_mx, d_my, d_ca, d_cb, d_cc, d_alpha, d_col)


@njit(cache=True)
def backward_brute(mx, my, ca, cb, cc, alpha, col, H, W, q_max, w_max,
                   g_rgb, g_accum,
                   d_mx, d_my, d_ca, d_cb, d_cc, d_alpha, d_col):
    n = mx.shape[0]
    idx = np.arange(n, dtype=np.int32)
    for i in range(H):
        py = i + 0.5
        for j in range(W):
            px = j + 0.5
            _pixel_backward_span(0, n, idx, mx, my, ca, cb, cc, alpha, col,
                                 px, py, q_max, w_max,
                                 g_rgb[i, j, 0], g_rgb[i, j, 1], g_rgb[i, j, 2],
                                 g_accum[i, j],
                                 d_mx, d_my, d_ca, d_cb, d_cc, d_alpha, d_col)
