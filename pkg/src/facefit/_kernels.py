"""Numba kernels for z-buffered triangle scan conversion.

Coordinates are in raster space: x = column, y = row, sample centres at
(j + 0.5, i + 0.5). Work is split over rows; every row visits its triangles in
ascending index order, so output does not depend on the thread count.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _edge(ax, ay, bx, by, px, py):
    # evaluate with endpoints in a canonical order so that edge(a, b) == -edge(b, a) bit-exactly
    if ax < bx or (ax == bx and ay < by):
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    return -((ax - bx) * (py - by) - (ay - by) * (px - bx))


@njit(cache=True, inline="always")
def _owns_edge(ax, ay, bx, by):
    # antisymmetric tie rule for samples exactly on an edge: one of the two
    # triangles sharing an edge (traversed in opposite directions) takes it
    dx = bx - ax
    dy = by - ay
    return dy < 0.0 or (dy == 0.0 and dx > 0.0)


@njit(cache=True)
def _row_buckets(xs, ys, tris, active, height):
    T = tris.shape[0]
    r0 = np.empty(T, np.int64)
    r1 = np.empty(T, np.int64)
    counts = np.zeros(height + 1, np.int64)
    for t in range(T):
        r0[t] = 0
        r1[t] = -1
        if not active[t]:
            continue
        a, b, c = tris[t, 0], tris[t, 1], tris[t, 2]
        ymin = min(ys[a], min(ys[b], ys[c]))
        ymax = max(ys[a], max(ys[b], ys[c]))
        lo = max(0, int(np.ceil(ymin - 0.5)))
        hi = min(height - 1, int(np.floor(ymax - 0.5)))
        r0[t] = lo
        r1[t] = hi
        for r in range(lo, hi + 1):
            counts[r + 1] += 1
    for r in range(height):
        counts[r + 1] += counts[r]
    fill = counts[:-1].copy()
    items = np.empty(counts[height], np.int64)
    for t in range(T):
        for r in range(r0[t], r1[t] + 1):
            items[fill[r]] = t
            fill[r] += 1
    return counts, items


@njit(cache=True, parallel=True)
def _scan_rows(xs, ys, zs, tris, counts, items, width, height, tri_id, bary, zbuf):
    for r in prange(height):
        py = r + 0.5
        for k in range(counts[r], counts[r + 1]):
            t = items[k]
            i0 = tris[t, 0]
            i1 = tris[t, 1]
            i2 = tris[t, 2]
            area = _edge(xs[i0], ys[i0], xs[i1], ys[i1], xs[i2], ys[i2])
            flip = area < 0.0
            if flip:
                i1, i2 = i2, i1
                area = -area
            ax, ay = xs[i0], ys[i0]
            bx, by = xs[i1], ys[i1]
            cx, cy = xs[i2], ys[i2]
            xmin = min(ax, min(bx, cx))
            xmax = max(ax, max(bx, cx))
            c0 = max(0, int(np.ceil(xmin - 0.5)))
            c1 = min(width - 1, int(np.floor(xmax - 0.5)))
            own0 = _owns_edge(bx, by, cx, cy)
            own1 = _owns_edge(cx, cy, ax, ay)
            own2 = _owns_edge(ax, ay, bx, by)
            for c in range(c0, c1 + 1):
                px = c + 0.5
                w0 = _edge(bx, by, cx, cy, px, py)
                if w0 < 0.0 or (w0 == 0.0 and not own0):
                    continue
                w1 = _edge(cx, cy, ax, ay, px, py)
                if w1 < 0.0 or (w1 == 0.0 and not own1):
                    continue
                w2 = _edge(ax, ay, bx, by, px, py)
                if w2 < 0.0 or (w2 == 0.0 and not own2):
                    continue
                b0 = w0 / area
                b1 = w1 / area
                b2 = w2 / area
                z = b0 * zs[i0] + b1 * zs[i1] + b2 * zs[i2]
                if z < zbuf[r, c]:
                    zbuf[r, c] = z
                    tri_id[r, c] = t
                    bary[r, c, 0] = b0
                    if flip:
                        bary[r, c, 1] = b2
                        bary[r, c, 2] = b1
                    else:
                        bary[r, c, 1] = b1
                        bary[r, c, 2] = b2


def scan_convert(xs, ys, zs, tris, active, width, height):
    """Return (tri_id, bary, zbuf) for triangles in raster space."""
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    zs = np.ascontiguousarray(zs, dtype=np.float64)
    tris = np.ascontiguousarray(tris, dtype=np.int64)
    active = np.ascontiguousarray(active, dtype=np.bool_)
    tri_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))
    zbuf = np.full((height, width), np.inf)
    if tris.shape[0] == 0:
        return tri_id, bary, zbuf
    counts, items = _row_buckets(xs, ys, tris, active, height)
    _scan_rows(xs, ys, zs, tris, counts, items, width, height, tri_id, bary, zbuf)
    return tri_id, bary, zbuf
