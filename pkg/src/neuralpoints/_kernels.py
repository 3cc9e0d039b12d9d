"""Compiled index-selection kernels (no gradients flow through these)."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _sq(p, i, c0, c1, c2):
    dx = p[i, 0] - c0
    dy = p[i, 1] - c1
    dz = p[i, 2] - c2
    return dx * dx + dy * dy + dz * dz


@njit(cache=True)
def _better(d1, i1, d2, i2):
    # larger distance wins, then the smaller index (matches argmax)
    return d1 > d2 or (d1 == d2 and i1 < i2)


@njit(cache=True)
def _rescan_cell(c, counts, items, d, cell_d, cell_i):
    bd = -1.0
    bi = -1
    for t in range(counts[c], counts[c + 1]):
        i = items[t]
        if d[i] >= 0.0 and _better(d[i], i, bd, bi):
            bd = d[i]
            bi = i
    cell_d[c] = bd
    cell_i[c] = bi


@njit(cache=True)
def _rescan_block(b, block, ncell, cell_d, cell_i, block_d, block_i):
    bd = -1.0
    bi = -1
    for c in range(b * block, min(ncell, (b + 1) * block)):
        if cell_i[c] >= 0 and _better(cell_d[c], cell_i[c], bd, bi):
            bd = cell_d[c]
            bi = cell_i[c]
    block_d[b] = bd
    block_i[b] = bi


@njit(cache=True)
def fps_grid(points, m, start):
    """Exact farthest point sampling.

    Squared min-distances only ever shrink, and a newly selected point can
    only lower distances that exceed its distance to the candidate, so each
    update is restricted to grid cells within the current max min-distance.
    The argmax (first index on ties, like the brute-force scan) is kept as
    a per-cell maximum under a per-block maximum. Selected points carry
    distance -1.
    """
    n = points.shape[0]
    out = np.empty(m, np.int64)
    lo = np.empty(3)
    hi = np.empty(3)
    for a in range(3):
        lo[a] = points[:, a].min()
        hi[a] = points[:, a].max()
    ext = max(hi[0] - lo[0], max(hi[1] - lo[1], hi[2] - lo[2]))
    if ext <= 0.0:
        ext = 1.0
    g = int(round((n / 2.0) ** (1.0 / 3.0)))
    g = max(1, min(128, g))
    h = ext / g
    dims = np.empty(3, np.int64)
    for a in range(3):
        dims[a] = min(g, int((hi[a] - lo[a]) / h)) + 1
    ncell = dims[0] * dims[1] * dims[2]
    cell = np.empty(n, np.int64)
    for i in range(n):
        cx = min(dims[0] - 1, int((points[i, 0] - lo[0]) / h))
        cy = min(dims[1] - 1, int((points[i, 1] - lo[1]) / h))
        cz = min(dims[2] - 1, int((points[i, 2] - lo[2]) / h))
        cell[i] = (cx * dims[1] + cy) * dims[2] + cz
    counts = np.zeros(ncell + 1, np.int64)
    for i in range(n):
        counts[cell[i] + 1] += 1
    for c in range(ncell):
        counts[c + 1] += counts[c]
    fill = counts[:-1].copy()
    items = np.empty(n, np.int64)
    for i in range(n):
        items[fill[cell[i]]] = i
        fill[cell[i]] += 1

    block = 64
    nblock = (ncell + block - 1) // block
    cell_d = np.full(ncell, -1.0)
    cell_i = np.full(ncell, -1, np.int64)
    block_d = np.full(nblock, -1.0)
    block_i = np.full(nblock, -1, np.int64)
    touched = np.zeros(nblock, np.bool_)
    d = np.full(n, np.inf)
    cur = start
    for j in range(m):
        out[j] = cur
        r2 = d[cur]
        d[cur] = -1.0
        c0, c1, c2 = points[cur, 0], points[cur, 1], points[cur, 2]
        if j == 0:
            for i in range(n):
                if d[i] >= 0.0:
                    d[i] = _sq(points, i, c0, c1, c2)
            for c in range(ncell):
                _rescan_cell(c, counts, items, d, cell_d, cell_i)
            for b in range(nblock):
                _rescan_block(b, block, ncell, cell_d, cell_i, block_d, block_i)
        else:
            r = np.sqrt(r2)
            x0 = max(0, int((c0 - r - lo[0]) / h) - 1)
            x1 = min(dims[0] - 1, int((c0 + r - lo[0]) / h) + 1)
            y0 = max(0, int((c1 - r - lo[1]) / h) - 1)
            y1 = min(dims[1] - 1, int((c1 + r - lo[1]) / h) + 1)
            z0 = max(0, int((c2 - r - lo[2]) / h) - 1)
            z1 = min(dims[2] - 1, int((c2 + r - lo[2]) / h) + 1)
            own = cell[cur]  # always in range; its max must drop cur
            for cx in range(x0, x1 + 1):
                for cy in range(y0, y1 + 1):
                    base = (cx * dims[1] + cy) * dims[2]
                    for cz in range(z0, z1 + 1):
                        c = base + cz
                        changed = c == own
                        for t in range(counts[c], counts[c + 1]):
                            i = items[t]
                            if d[i] < 0.0:
                                continue
                            dd = _sq(points, i, c0, c1, c2)
                            if dd < d[i]:
                                d[i] = dd
                                changed = True
                        if changed:
                            _rescan_cell(c, counts, items, d, cell_d, cell_i)
                            touched[c // block] = True
            for b in range(nblock):
                if touched[b]:
                    _rescan_block(b, block, ncell, cell_d, cell_i, block_d, block_i)
                    touched[b] = False
        if j + 1 == m:
            break
        bd = -1.0
        bi = -1
        for b in range(nblock):
            if block_i[b] >= 0 and _better(block_d[b], block_i[b], bd, bi):
                bd = block_d[b]
                bi = block_i[b]
        cur = bi
    return out


@njit(cache=True)
def knn_in_groups(queries, groups, samples, group_size, k):
    """k nearest samples of each query inside each listed group.

    Group ``c`` owns rows ``c*group_size .. (c+1)*group_size-1`` of
    ``samples``. Ties resolve to the smaller sample index.
    """
    m, ng = groups.shape
    out = np.empty((m, ng, k), np.int64)
    best_d = np.empty(k)
    best_i = np.empty(k, np.int64)
    for q in range(m):
        c0, c1, c2 = queries[q, 0], queries[q, 1], queries[q, 2]
        for gi in range(ng):
            base = groups[q, gi] * group_size
            filled = 0
            for r in range(group_size):
                idx = base + r
                dd = _sq(samples, idx, c0, c1, c2)
                if filled == k and not dd < best_d[k - 1]:
                    continue
                pos = filled if filled < k else k - 1
                while pos > 0 and dd < best_d[pos - 1]:
                    if pos < k:
                        best_d[pos] = best_d[pos - 1]
                        best_i[pos] = best_i[pos - 1]
                    pos -= 1
                best_d[pos] = dd
                best_i[pos] = idx
                if filled < k:
                    filled += 1
            for t in range(k):
                out[q, gi, t] = best_i[t]
    return out


@njit(cache=True)
def grid_build(points, per_cell):
    """Bucket points into a uniform grid of cubic cells.

    Returns ``(lo, h, dims, starts, items)``: cell ``c`` holds
    ``items[starts[c]:starts[c + 1]]``.
    """
    n = points.shape[0]
    lo = np.empty(3)
    hi = np.empty(3)
    for a in range(3):
        lo[a] = points[:, a].min()
        hi[a] = points[:, a].max()
    ext = max(hi[0] - lo[0], max(hi[1] - lo[1], hi[2] - lo[2]))
    if ext <= 0.0:
        ext = 1.0
    g = int(round((n / per_cell) ** (1.0 / 3.0)))
    g = max(1, min(256, g))
    h = ext / g
    dims = np.empty(3, np.int64)
    for a in range(3):
        dims[a] = min(g, int((hi[a] - lo[a]) / h)) + 1
    ncell = dims[0] * dims[1] * dims[2]
    cell = np.empty(n, np.int64)
    for i in range(n):
        cx = min(dims[0] - 1, int((points[i, 0] - lo[0]) / h))
        cy = min(dims[1] - 1, int((points[i, 1] - lo[1]) / h))
        cz = min(dims[2] - 1, int((points[i, 2] - lo[2]) / h))
        cell[i] = (cx * dims[1] + cy) * dims[2] + cz
    starts = np.zeros(ncell + 1, np.int64)
    for i in range(n):
        starts[cell[i] + 1] += 1
    for c in range(ncell):
        starts[c + 1] += starts[c]
    fill = starts[:-1].copy()
    items = np.empty(n, np.int64)
    for i in range(n):
        items[fill[cell[i]]] = i
        fill[cell[i]] += 1
    return lo, h, dims, starts, items


@njit(cache=True)
def _clampi(v, a, b):
    return a if v < a else (b if v > b else v)


@njit(cache=True)
def grid_knn(points, lo, h, dims, starts, items, queries, k):
    """Exact k nearest points, ordered by (squared distance, index).

    Rings of cells are visited outward from the query's cell until the k-th
    best distance is strictly below the distance to any unvisited cell.
    """
    nq = queries.shape[0]
    out = np.empty((nq, k), np.int64)
    best_d = np.empty(k)
    best_i = np.empty(k, np.int64)
    dmax = max(dims[0], max(dims[1], dims[2]))
    for q in range(nq):
        c0, c1, c2 = queries[q, 0], queries[q, 1], queries[q, 2]
        qx = _clampi(int(np.floor((c0 - lo[0]) / h)), 0, dims[0] - 1)
        qy = _clampi(int(np.floor((c1 - lo[1]) / h)), 0, dims[1] - 1)
        qz = _clampi(int(np.floor((c2 - lo[2]) / h)), 0, dims[2] - 1)
        filled = 0
        s = 0
        while True:
            x0, x1 = max(0, qx - s), min(dims[0] - 1, qx + s)
            y0, y1 = max(0, qy - s), min(dims[1] - 1, qy + s)
            z0, z1 = max(0, qz - s), min(dims[2] - 1, qz + s)
            for cx in range(x0, x1 + 1):
                ex = cx == qx - s or cx == qx + s
                for cy in range(y0, y1 + 1):
                    ey = ex or cy == qy - s or cy == qy + s
                    base = (cx * dims[1] + cy) * dims[2]
                    for cz in range(z0, z1 + 1):
                        if not (ey or cz == qz - s or cz == qz + s):
                            continue  # interior cell, seen in an earlier ring
                        c = base + cz
                        for t in range(starts[c], starts[c + 1]):
                            i = items[t]
                            dd = _sq(points, i, c0, c1, c2)
                            if filled == k and not (dd < best_d[k - 1] or
                                                    (dd == best_d[k - 1] and i < best_i[k - 1])):
                                continue
                            pos = filled if filled < k else k - 1
                            while pos > 0 and (dd < best_d[pos - 1] or
                                               (dd == best_d[pos - 1] and i < best_i[pos - 1])):
                                if pos < k:
                                    best_d[pos] = best_d[pos - 1]
                                    best_i[pos] = best_i[pos - 1]
                                pos -= 1
                            best_d[pos] = dd
                            best_i[pos] = i
                            if filled < k:
                                filled += 1
            if x0 == 0 and y0 == 0 and z0 == 0 and x1 == dims[0] - 1 and \
                    y1 == dims[1] - 1 and z1 == dims[2] - 1:
                break
            if filled == k:
                # distance from the query to the nearest face of the visited box
                # that still has cells beyond it
                bound = np.inf
                if x0 > 0:
                    bound = min(bound, c0 - (lo[0] + x0 * h))
                if x1 < dims[0] - 1:
                    bound = min(bound, lo[0] + (x1 + 1) * h - c0)
                if y0 > 0:
                    bound = min(bound, c1 - (lo[1] + y0 * h))
                if y1 < dims[1] - 1:
                    bound = min(bound, lo[1] + (y1 + 1) * h - c1)
                if z0 > 0:
                    bound = min(bound, c2 - (lo[2] + z0 * h))
                if z1 < dims[2] - 1:
                    bound = min(bound, lo[2] + (z1 + 1) * h - c2)
                if bound > 0 and best_d[k - 1] < bound * bound * (1.0 - 1e-12):
                    break
            s += 1
            if s > dmax:
                break
        for t in range(k):
            out[q, t] = best_i[t]
    return out


@njit(cache=True)
def blend_forward(q, a, v, nrm, alpha, underflow, eps):
    """Exponentially weighted blend of ``v`` (and unit-normalised ``nrm``).

    Row ``s`` weighs its k entries by exp(-alpha |a_sj - q_s|^2), shifted by
    the row minimum. Rows whose unshifted weights all underflow take the
    nearest entry. Normals are flipped to agree with the nearest entry's
    normal before blending; a blend shorter than ``eps`` falls back to that
    normal. ``nrm`` may have zero rows to skip normals.
    """
    s_n, k = a.shape[0], a.shape[1]
    has_n = nrm.shape[0] > 0
    p = np.zeros((s_n, 3))
    nout = np.zeros((s_n, 3))
    w = np.empty((s_n, k))
    sgn = np.ones((s_n, k))
    blen = np.zeros(s_n)
    nearest = np.empty(s_n, np.int64)
    flags = np.zeros(s_n, np.uint8)
    d2 = np.empty(k)
    for s in range(s_n):
        best = 0
        for j in range(k):
            dx = a[s, j, 0] - q[s, 0]
            dy = a[s, j, 1] - q[s, 1]
            dz = a[s, j, 2] - q[s, 2]
            d2[j] = dx * dx + dy * dy + dz * dz
            if d2[j] < d2[best]:
                best = j
        nearest[s] = best
        if alpha * d2[best] > underflow:
            flags[s] = 1
            for j in range(k):
                w[s, j] = 0.0
            w[s, best] = 1.0
        else:
            tot = 0.0
            for j in range(k):
                w[s, j] = np.exp((d2[j] - d2[best]) * (-alpha))
                tot += w[s, j]
            for j in range(k):
                w[s, j] = w[s, j] / tot
        for j in range(k):
            for c in range(3):
                p[s, c] += w[s, j] * v[s, j, c]
        if has_n:
            r0, r1, r2 = nrm[s, best, 0], nrm[s, best, 1], nrm[s, best, 2]
            b0 = 0.0
            b1 = 0.0
            b2 = 0.0
            for j in range(k):
                dot = nrm[s, j, 0] * r0 + nrm[s, j, 1] * r1 + nrm[s, j, 2] * r2
                if dot < 0:
                    sgn[s, j] = -1.0
                b0 += w[s, j] * (nrm[s, j, 0] * sgn[s, j])
                b1 += w[s, j] * (nrm[s, j, 1] * sgn[s, j])
                b2 += w[s, j] * (nrm[s, j, 2] * sgn[s, j])
            ln = np.sqrt(b0 * b0 + b1 * b1 + b2 * b2)
            blen[s] = ln
            if ln < eps:
                flags[s] |= 2
                nout[s, 0], nout[s, 1], nout[s, 2] = r0, r1, r2
            else:
                nout[s, 0], nout[s, 1], nout[s, 2] = b0 / ln, b1 / ln, b2 / ln
    return p, nout, w, sgn, blen, nearest, flags


@njit(cache=True)
def blend_backward(gp, gn, q, a, v, nrm, w, sgn, nout, blen, flags, alpha):
    """Gradients of :func:`blend_forward` for ``q``, ``a``, ``v`` and ``nrm``."""
    s_n, k = a.shape[0], a.shape[1]
    has_n = nrm.shape[0] > 0
    gq = np.zeros((s_n, 3))
    ga = np.zeros((s_n, k, 3))
    gv = np.zeros((s_n, k, 3))
    gnrm = np.zeros(nrm.shape)
    gw = np.empty(k)
    for s in range(s_n):
        gb0 = 0.0
        gb1 = 0.0
        gb2 = 0.0
        use_n = has_n and (flags[s] & 2) == 0
        if use_n:
            proj = gn[s, 0] * nout[s, 0] + gn[s, 1] * nout[s, 1] + gn[s, 2] * nout[s, 2]
            gb0 = (gn[s, 0] - nout[s, 0] * proj) / blen[s]
            gb1 = (gn[s, 1] - nout[s, 1] * proj) / blen[s]
            gb2 = (gn[s, 2] - nout[s, 2] * proj) / blen[s]
        wg = 0.0
        for j in range(k):
            gw[j] = gp[s, 0] * v[s, j, 0] + gp[s, 1] * v[s, j, 1] + gp[s, 2] * v[s, j, 2]
            for c in range(3):
                gv[s, j, c] = w[s, j] * gp[s, c]
            if use_n:
                sj = sgn[s, j]
                gw[j] += sj * (gb0 * nrm[s, j, 0] + gb1 * nrm[s, j, 1] + gb2 * nrm[s, j, 2])
                gnrm[s, j, 0] = w[s, j] * sj * gb0
                gnrm[s, j, 1] = w[s, j] * sj * gb1
                gnrm[s, j, 2] = w[s, j] * sj * gb2
            wg += w[s, j] * gw[j]
        if flags[s] & 1:
            continue  # one-hot weights are constant
        for j in range(k):
            gd2 = -alpha * w[s, j] * (gw[j] - wg)
            for c in range(3):
                t = 2.0 * (a[s, j, c] - q[s, c]) * gd2
                ga[s, j, c] = t
                gq[s, c] -= t
    return gq, ga, gv, gnrm


@njit(cache=True)
def scatter_rows(g, idx, n_rows):
    """out[idx[r]] += g[r] for a (M, C) gradient, in row order."""
    out = np.zeros((n_rows, g.shape[1]))
    for r in range(idx.shape[0]):
        t = idx[r]
        for c in range(g.shape[1]):
            out[t, c] += g[r, c]
    return out


@njit(cache=True)
def gather_max_forward(values, idx):
    """out[r, c] = max_j values[idx[r, j], c], plus the winning row (first on ties)."""
    m, k = idx.shape
    ch = values.shape[1]
    out = np.empty((m, ch))
    arg = np.empty((m, ch), np.int64)
    for r in range(m):
        i0 = idx[r, 0]
        for c in range(ch):
            out[r, c] = values[i0, c]
            arg[r, c] = i0
        for j in range(1, k):
            ij = idx[r, j]
            for c in range(ch):
                if values[ij, c] > out[r, c]:
                    out[r, c] = values[ij, c]
                    arg[r, c] = ij
    return out, arg


@njit(cache=True)
def gather_max_backward(g, arg, n_rows):
    m, ch = g.shape
    out = np.zeros((n_rows, ch))
    for r in range(m):
        for c in range(ch):
            out[arg[r, c], c] += g[r, c]
    return out


@njit(cache=True)
def knn_graph_sets(features, k):
    """k nearest members (self included) of each point within its own set.

    ``features`` is (B, N, C); squared distances accumulate over channels in
    order and ties go to the smaller member index.
    """
    b_n, n, ch = features.shape
    out = np.empty((b_n, n, k), np.int64)
    d2 = np.empty(n)
    best_d = np.empty(k)
    best_i = np.empty(k, np.int64)
    for b in range(b_n):
        for i in range(n):
            for j in range(n):
                acc = 0.0
                for c in range(ch):
                    t = features[b, i, c] - features[b, j, c]
                    acc += t * t
                d2[j] = acc
            filled = 0
            for j in range(n):
                dd = d2[j]
                if filled == k and not dd < best_d[k - 1]:
                    continue
                pos = filled if filled < k else k - 1
                while pos > 0 and dd < best_d[pos - 1]:
                    if pos < k:
                        best_d[pos] = best_d[pos - 1]
                        best_i[pos] = best_i[pos - 1]
                    pos -= 1
                best_d[pos] = dd
                best_i[pos] = j
                if filled < k:
                    filled += 1
            for t in range(k):
                out[b, i, t] = best_i[t]
    return out
