"""NumPy compositing kernel: per tile, primitives in blend order, pixels vectorized.

Mirrors ``_composite_ext.pyx`` operation for operation so both backends agree.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np


def _tile(t, means, conics, opac, rgb, bbox, offsets, tile_prims, H, W, tile, tiles_x,
          max_contribs, alpha_max, t_min):
    ty, tx = divmod(t, tiles_x)
    rr, cc = np.meshgrid(np.arange(ty * tile, min((ty + 1) * tile, H)),
                         np.arange(tx * tile, min((tx + 1) * tile, W)), indexing="ij")
    rows, cols = rr.ravel(), cc.ravel()
    n = len(rows)
    T = np.ones(n)
    cnt = np.zeros(n, np.int64)
    color = np.zeros((n, 3))
    active = np.ones(n, bool)
    rec_pix, rec_prim, rec_w, rec_ord = [], [], [], []
    for j in range(offsets[t], offsets[t + 1]):
        p = tile_prims[j]
        c0, c1, r0, r1 = bbox[p]
        hit = active & (cols >= c0) & (cols <= c1) & (rows >= r0) & (rows <= r1)
        idx = np.flatnonzero(hit)
        if len(idx) == 0:
            continue
        dx = cols[idx] + 0.5 - means[p, 0]
        dy = rows[idx] + 0.5 - means[p, 1]
        power = -0.5 * (conics[p, 0] * dx * dx + 2.0 * conics[p, 1] * dx * dy
                        + conics[p, 2] * dy * dy)
        alpha = np.minimum(opac[p] * np.exp(power), alpha_max)
        pos = alpha > 0
        idx, alpha = idx[pos], alpha[pos]
        if len(idx) == 0:
            continue
        w = alpha * T[idx]
        rec_pix.append(rows[idx] * W + cols[idx])
        rec_prim.append(np.full(len(idx), p, np.int32))
        rec_w.append(w)
        rec_ord.append(cnt[idx].copy())
        color[idx] += w[:, None] * rgb[p]
        T[idx] = T[idx] * (1.0 - alpha)
        cnt[idx] += 1
        active[idx] = (T[idx] >= t_min) & (cnt[idx] < max_contribs)
    return rows, cols, color, T, rec_pix, rec_prim, rec_w, rec_ord


def composite_tiles(means, conics, opac, rgb, bbox, offsets, tile_prims, H, W, tile,
                    tiles_x, max_contribs, threads, alpha_max, t_min):
    n_tiles = len(offsets) - 1
    image = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    args = (means, conics, opac, rgb, bbox, offsets, tile_prims, H, W, tile, tiles_x,
            max_contribs, alpha_max, t_min)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda t: _tile(t, *args), range(n_tiles)))
    else:
        results = [_tile(t, *args) for t in range(n_tiles)]
    pix, prim, w, ordr = [], [], [], []
    for rows, cols, color, T, rp, rq, rw, ro in results:
        image[rows, cols] = color
        trans[rows, cols] = T
        pix += rp
        prim += rq
        w += rw
        ordr += ro
    if not pix:
        return image, trans, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    pix = np.concatenate(pix).astype(np.int64)
    prim = np.concatenate(prim).astype(np.int64)
    w = np.concatenate(w)
    ordr = np.concatenate(ordr)
    srt = np.lexsort((ordr, pix))
    return image, trans, pix[srt], prim[srt], w[srt]
