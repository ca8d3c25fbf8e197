# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled compositing kernel.

Two passes over tiles: the first counts contributions per pixel and writes the
image, the second fills the flat contribution table at prefix-sum offsets.
Each pixel is owned by exactly one tile, so the parallel loop has no shared
writes and the output is independent of the thread count.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp

cnp.import_array()


cdef void _run(const double[:, ::1] means, const double[:, ::1] conics,
               const double[::1] opac, const double[:, ::1] rgb,
               const int[:, ::1] bbox, const long long[::1] offsets,
               const int[::1] tile_prims, int H, int W, int tile, int tiles_x,
               int max_contribs, int threads, double alpha_max, double t_min,
               bint write, const long long[::1] pix_off,
               long long[::1] out_prim, double[::1] out_w,
               double[:, :, ::1] image, double[:, ::1] trans,
               long long[:, ::1] counts) noexcept nogil:
    cdef Py_ssize_t n_tiles = offsets.shape[0] - 1
    cdef Py_ssize_t t, j, base
    cdef int r, c, p, ty, tx, cnt
    cdef double T, dx, dy, power, alpha, w, cr, cg, cb
    for t in prange(n_tiles, num_threads=threads, schedule="static"):
        ty = <int>(t // tiles_x)
        tx = <int>(t % tiles_x)
        for r in range(ty * tile, min((ty + 1) * tile, H)):
            for c in range(tx * tile, min((tx + 1) * tile, W)):
                T = 1.0
                cnt = 0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                base = 0
                if write:
                    base = pix_off[r * W + c]
                for j in range(offsets[t], offsets[t + 1]):
                    p = tile_prims[j]
                    if c < bbox[p, 0] or c > bbox[p, 1] or r < bbox[p, 2] or r > bbox[p, 3]:
                        continue
                    dx = c + 0.5 - means[p, 0]
                    dy = r + 0.5 - means[p, 1]
                    power = -0.5 * (conics[p, 0] * dx * dx + 2.0 * conics[p, 1] * dx * dy
                                    + conics[p, 2] * dy * dy)
                    alpha = opac[p] * exp(power)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha <= 0.0:
                        continue
                    w = alpha * T
                    if write:
                        out_prim[base + cnt] = p
                        out_w[base + cnt] = w
                    cr = cr + w * rgb[p, 0]
                    cg = cg + w * rgb[p, 1]
                    cb = cb + w * rgb[p, 2]
                    T = T * (1.0 - alpha)
                    cnt = cnt + 1
                    if T < t_min or cnt >= max_contribs:
                        break
                counts[r, c] = cnt
                trans[r, c] = T
                image[r, c, 0] = cr
                image[r, c, 1] = cg
                image[r, c, 2] = cb


def composite_tiles(means, conics, opac, rgb, bbox, offsets, tile_prims, int H, int W,
                    int tile, int tiles_x, int max_contribs, int threads,
                    double alpha_max, double t_min):
    means = np.ascontiguousarray(means, dtype=np.float64)
    conics = np.ascontiguousarray(conics, dtype=np.float64)
    opac = np.ascontiguousarray(opac, dtype=np.float64)
    rgb = np.ascontiguousarray(rgb, dtype=np.float64)
    bbox = np.ascontiguousarray(bbox, dtype=np.int32)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    tile_prims = np.ascontiguousarray(tile_prims, dtype=np.int32)
    image = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    counts = np.zeros((H, W), dtype=np.int64)
    dummy_i = np.zeros(1, dtype=np.int64)
    dummy_w = np.zeros(1)
    if len(means) == 0:
        return image, trans, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    _run(means, conics, opac, rgb, bbox, offsets, tile_prims, H, W, tile, tiles_x,
         max_contribs, threads, alpha_max, t_min, False, dummy_i, dummy_i, dummy_w,
         image, trans, counts)
    flat = counts.reshape(-1)
    pix_off = np.zeros(H * W, dtype=np.int64)
    np.cumsum(flat[:-1], out=pix_off[1:])
    total = int(flat.sum())
    out_prim = np.zeros(max(total, 1), dtype=np.int64)
    out_w = np.zeros(max(total, 1))
    _run(means, conics, opac, rgb, bbox, offsets, tile_prims, H, W, tile, tiles_x,
         max_contribs, threads, alpha_max, t_min, True, pix_off, out_prim, out_w,
         image, trans, counts)
    pix = np.repeat(np.arange(H * W, dtype=np.int64), flat)
    return image, trans, pix, out_prim[:total], out_w[:total]
