# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rasterizer and grid nearest-neighbor kernels (hot inner loops)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, exp, fabs, floor, sqrt

BACKEND_NAME = "cython"

cdef double ALPHA_CLIP = 0.999
cdef double T_CUTOFF = 1e-4


def _build_tiles(double[:, ::1] means2d, double[:, ::1] radii, int h, int w, int tile):
    """Flat per-tile candidate lists in incoming (depth) order."""
    cdef int ntx = (w + tile - 1) // tile
    cdef int nty = (h + tile - 1) // tile
    cdef Py_ssize_t m = means2d.shape[0]
    counts_np = np.zeros(ntx * nty + 1, dtype=np.int64)
    cdef long long[::1] counts = counts_np
    cdef Py_ssize_t g
    cdef int jlo, jhi, ilo, ihi, tx, ty
    for g in range(m):
        jlo = <int>ceil(means2d[g, 0] - radii[g, 0])
        jhi = <int>floor(means2d[g, 0] + radii[g, 0])
        ilo = <int>ceil(means2d[g, 1] - radii[g, 1])
        ihi = <int>floor(means2d[g, 1] + radii[g, 1])
        if jlo < 0: jlo = 0
        if ilo < 0: ilo = 0
        if jhi > w - 1: jhi = w - 1
        if ihi > h - 1: ihi = h - 1
        if jlo > jhi or ilo > ihi:
            continue
        for ty in range(ilo // tile, ihi // tile + 1):
            for tx in range(jlo // tile, jhi // tile + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets_np = np.cumsum(counts_np)
    cdef long long[::1] offsets = offsets_np
    flat_np = np.empty(offsets_np[ntx * nty], dtype=np.int64)
    cdef long long[::1] flat = flat_np
    cursor_np = offsets_np[:-1].copy()
    cdef long long[::1] cursor = cursor_np
    cdef int t
    for g in range(m):
        jlo = <int>ceil(means2d[g, 0] - radii[g, 0])
        jhi = <int>floor(means2d[g, 0] + radii[g, 0])
        ilo = <int>ceil(means2d[g, 1] - radii[g, 1])
        ihi = <int>floor(means2d[g, 1] + radii[g, 1])
        if jlo < 0: jlo = 0
        if ilo < 0: ilo = 0
        if jhi > w - 1: jhi = w - 1
        if ihi > h - 1: ihi = h - 1
        if jlo > jhi or ilo > ihi:
            continue
        for ty in range(ilo // tile, ihi // tile + 1):
            for tx in range(jlo // tile, jhi // tile + 1):
                t = ty * ntx + tx
                flat[cursor[t]] = g
                cursor[t] += 1
    return flat_np, offsets_np, ntx, nty


def rasterize_forward(double[:, ::1] means2d, double[:, ::1] conic,
                      double[::1] depths, double[::1] opac,
                      double[:, ::1] colors, double[:, ::1] normals,
                      double[:, ::1] radii, int h, int w, int tile=16):
    color_np = np.zeros((h, w, 3))
    depth_np = np.zeros((h, w))
    nacc_np = np.zeros((h, w, 3))
    alpha_np = np.zeros((h, w))
    finalt_np = np.ones((h, w))
    ncontrib_np = np.zeros((h, w), dtype=np.int32)
    cdef double[:, :, ::1] color = color_np
    cdef double[:, ::1] depth = depth_np
    cdef double[:, :, ::1] nacc = nacc_np
    cdef double[:, ::1] alpha_out = alpha_np
    cdef double[:, ::1] final_t = finalt_np
    cdef int[:, ::1] ncontrib = ncontrib_np

    flat_np, offsets_np, ntx, nty = _build_tiles(means2d, radii, h, w, tile)
    cdef long long[::1] flat = flat_np
    cdef long long[::1] offsets = offsets_np

    cdef int tx, ty, i, j, i0, i1, j0, j1
    cdef long long k, s, e, g
    cdef int cnt
    cdef double dx, dy, q, araw, al, wgt, tcur
    for ty in range(nty):
        i0 = ty * tile
        i1 = min(i0 + tile, h)
        for tx in range(ntx):
            s = offsets[ty * ntx + tx]
            e = offsets[ty * ntx + tx + 1]
            if s == e:
                continue
            j0 = tx * tile
            j1 = min(j0 + tile, w)
            for i in range(i0, i1):
                for j in range(j0, j1):
                    tcur = 1.0
                    cnt = 0
                    for k in range(s, e):
                        g = flat[k]
                        dx = j - means2d[g, 0]
                        if fabs(dx) > radii[g, 0]:
                            continue
                        dy = i - means2d[g, 1]
                        if fabs(dy) > radii[g, 1]:
                            continue
                        q = (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                             + conic[g, 2] * dy * dy)
                        araw = opac[g] * exp(-0.5 * q)
                        al = araw if araw < ALPHA_CLIP else ALPHA_CLIP
                        wgt = al * tcur
                        color[i, j, 0] += wgt * colors[g, 0]
                        color[i, j, 1] += wgt * colors[g, 1]
                        color[i, j, 2] += wgt * colors[g, 2]
                        depth[i, j] += wgt * depths[g]
                        nacc[i, j, 0] += wgt * normals[g, 0]
                        nacc[i, j, 1] += wgt * normals[g, 1]
                        nacc[i, j, 2] += wgt * normals[g, 2]
                        alpha_out[i, j] += wgt
                        tcur *= 1.0 - al
                        cnt += 1
                        if tcur < T_CUTOFF:
                            break
                    final_t[i, j] = tcur
                    ncontrib[i, j] = cnt
    return color_np, depth_np, nacc_np, alpha_np, finalt_np, ncontrib_np


def rasterize_backward(double[:, ::1] means2d, double[:, ::1] conic,
                       double[::1] depths, double[::1] opac,
                       double[:, ::1] colors, double[:, ::1] normals,
                       double[:, ::1] radii, int h, int w,
                       double[:, :, ::1] d_color, double[:, ::1] d_depth,
                       double[:, :, ::1] d_nacc, double[:, ::1] d_alpha,
                       int tile=16):
    cdef Py_ssize_t m = means2d.shape[0]
    d_means_np = np.zeros((m, 2))
    d_conic_np = np.zeros((m, 3))
    d_depths_np = np.zeros(m)
    d_opac_np = np.zeros(m)
    d_colors_np = np.zeros((m, 3))
    d_normals_np = np.zeros((m, 3))
    cdef double[:, ::1] d_means = d_means_np
    cdef double[:, ::1] d_con = d_conic_np
    cdef double[::1] d_dep = d_depths_np
    cdef double[::1] d_op = d_opac_np
    cdef double[:, ::1] d_col = d_colors_np
    cdef double[:, ::1] d_nrm = d_normals_np

    flat_np, offsets_np, ntx, nty = _build_tiles(means2d, radii, h, w, tile)
    cdef long long[::1] flat = flat_np
    cdef long long[::1] offsets = offsets_np

    cdef long long maxlen = 0, s, e, k, g
    cdef int t
    for t in range(ntx * nty):
        if offsets[t + 1] - offsets[t] > maxlen:
            maxlen = offsets[t + 1] - offsets[t]
    idxbuf_np = np.empty(max(maxlen, 1), dtype=np.int64)
    albuf_np = np.empty(max(maxlen, 1))
    tbuf_np = np.empty(max(maxlen, 1))
    gbuf_np = np.empty(max(maxlen, 1))
    cdef long long[::1] idxbuf = idxbuf_np
    cdef double[::1] albuf = albuf_np
    cdef double[::1] tbuf = tbuf_np
    cdef double[::1] gbuf = gbuf_np

    cdef int tx, ty, i, j, i0, i1, j0, j1, n, kk
    cdef double dx, dy, q, gauss, araw, al, tcur, wgt
    cdef double gc0, gc1, gc2, gd, gn0, gn1, gn2, ga
    cdef double gdot, suffix, dal, dq, ca, cb, cc
    for ty in range(nty):
        i0 = ty * tile
        i1 = min(i0 + tile, h)
        for tx in range(ntx):
            s = offsets[ty * ntx + tx]
            e = offsets[ty * ntx + tx + 1]
            if s == e:
                continue
            j0 = tx * tile
            j1 = min(j0 + tile, w)
            for i in range(i0, i1):
                for j in range(j0, j1):
                    tcur = 1.0
                    n = 0
                    for k in range(s, e):
                        g = flat[k]
                        dx = j - means2d[g, 0]
                        if fabs(dx) > radii[g, 0]:
                            continue
                        dy = i - means2d[g, 1]
                        if fabs(dy) > radii[g, 1]:
                            continue
                        q = (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                             + conic[g, 2] * dy * dy)
                        gauss = exp(-0.5 * q)
                        araw = opac[g] * gauss
                        al = araw if araw < ALPHA_CLIP else ALPHA_CLIP
                        idxbuf[n] = g
                        albuf[n] = al
                        tbuf[n] = tcur
                        gbuf[n] = gauss
                        tcur *= 1.0 - al
                        n += 1
                        if tcur < T_CUTOFF:
                            break
                    if n == 0:
                        continue
                    gc0 = d_color[i, j, 0]
                    gc1 = d_color[i, j, 1]
                    gc2 = d_color[i, j, 2]
                    gd = d_depth[i, j]
                    gn0 = d_nacc[i, j, 0]
                    gn1 = d_nacc[i, j, 1]
                    gn2 = d_nacc[i, j, 2]
                    ga = d_alpha[i, j]
                    suffix = 0.0
                    for kk in range(n - 1, -1, -1):
                        g = idxbuf[kk]
                        al = albuf[kk]
                        tcur = tbuf[kk]
                        gauss = gbuf[kk]
                        wgt = al * tcur
                        gdot = (gc0 * colors[g, 0] + gc1 * colors[g, 1]
                                + gc2 * colors[g, 2] + gd * depths[g]
                                + gn0 * normals[g, 0] + gn1 * normals[g, 1]
                                + gn2 * normals[g, 2] + ga)
                        d_col[g, 0] += wgt * gc0
                        d_col[g, 1] += wgt * gc1
                        d_col[g, 2] += wgt * gc2
                        d_dep[g] += wgt * gd
                        d_nrm[g, 0] += wgt * gn0
                        d_nrm[g, 1] += wgt * gn1
                        d_nrm[g, 2] += wgt * gn2
                        dal = tcur * gdot - suffix / (1.0 - al)
                        suffix += wgt * gdot
                        araw = opac[g] * gauss
                        if araw < ALPHA_CLIP:
                            d_op[g] += dal * gauss
                            dq = dal * opac[g] * (-0.5 * gauss)
                            dx = j - means2d[g, 0]
                            dy = i - means2d[g, 1]
                            ca = conic[g, 0]
                            cb = conic[g, 1]
                            cc = conic[g, 2]
                            d_means[g, 0] += -dq * (2.0 * ca * dx + 2.0 * cb * dy)
                            d_means[g, 1] += -dq * (2.0 * cb * dx + 2.0 * cc * dy)
                            d_con[g, 0] += dq * dx * dx
                            d_con[g, 1] += dq * 2.0 * dx * dy
                            d_con[g, 2] += dq * dy * dy
    return d_means_np, d_conic_np, d_depths_np, d_opac_np, d_colors_np, d_normals_np


# ---------------------------------------------------------------------------
# exact nearest-neighbor distances on a uniform spatial grid
# ---------------------------------------------------------------------------

cdef inline long long _bisect(long long[::1] arr, long long val) nogil:
    cdef long long lo = 0, hi = arr.shape[0], mid
    while lo < hi:
        mid = (lo + hi) // 2
        if arr[mid] < val:
            lo = mid + 1
        else:
            hi = mid
    if lo < arr.shape[0] and arr[lo] == val:
        return lo
    return -1


def grid_min_dists(double[:, ::1] query, double[:, ::1] ref):
    """Exact Euclidean distance from each query point to its nearest ref point."""
    ref_np = np.asarray(ref)
    lo_np = ref_np.min(axis=0)
    ext = ref_np.max(axis=0) - lo_np
    m = ref_np.shape[0]
    cell_f = max(float(ext.max()) / max(4, round(m ** (1.0 / 3.0))), 1e-12)
    dims_np = np.maximum(1, np.floor(ext / cell_f).astype(np.int64) + 1)
    cc = np.minimum((ref_np - lo_np) // cell_f, dims_np - 1).astype(np.int64)
    ids = (cc[:, 0] * dims_np[1] + cc[:, 1]) * dims_np[2] + cc[:, 2]
    order_np = np.argsort(ids, kind="stable").astype(np.int64)
    sorted_ids = ids[order_np]
    uniq_np, starts_np = np.unique(sorted_ids, return_index=True)
    ends_np = np.append(starts_np[1:], sorted_ids.size).astype(np.int64)
    starts_np = starts_np.astype(np.int64)
    uniq_np = uniq_np.astype(np.int64)

    cdef long long[::1] uniq = uniq_np
    cdef long long[::1] starts = starts_np
    cdef long long[::1] ends = ends_np
    cdef long long[::1] order = order_np
    cdef double cell = cell_f
    cdef double lx = lo_np[0], ly = lo_np[1], lz = lo_np[2]
    cdef long long dx = dims_np[0], dy = dims_np[1], dz = dims_np[2]

    out_np = np.empty(query.shape[0])
    cdef double[::1] out = out_np
    cdef Py_ssize_t qi, t
    cdef long long cq0, cq1, cq2, r, ix, iy, iz, pos, ridx
    cdef long long x0, x1, y0, y1, z0, z1, cheb, a0, a1, a2
    cdef double px, py, pz, best, d0, d1, d2, dd
    for qi in range(query.shape[0]):
        px = query[qi, 0]
        py = query[qi, 1]
        pz = query[qi, 2]
        cq0 = <long long>floor((px - lx) / cell)
        cq1 = <long long>floor((py - ly) / cell)
        cq2 = <long long>floor((pz - lz) / cell)
        r = 0
        if -cq0 > r: r = -cq0
        if cq0 - (dx - 1) > r: r = cq0 - (dx - 1)
        if -cq1 > r: r = -cq1
        if cq1 - (dy - 1) > r: r = cq1 - (dy - 1)
        if -cq2 > r: r = -cq2
        if cq2 - (dz - 1) > r: r = cq2 - (dz - 1)
        best = -1.0
        while True:
            x0 = cq0 - r if cq0 - r > 0 else 0
            x1 = cq0 + r if cq0 + r < dx - 1 else dx - 1
            y0 = cq1 - r if cq1 - r > 0 else 0
            y1 = cq1 + r if cq1 + r < dy - 1 else dy - 1
            z0 = cq2 - r if cq2 - r > 0 else 0
            z1 = cq2 + r if cq2 + r < dz - 1 else dz - 1
            for ix in range(x0, x1 + 1):
                a0 = ix - cq0 if ix > cq0 else cq0 - ix
                for iy in range(y0, y1 + 1):
                    a1 = iy - cq1 if iy > cq1 else cq1 - iy
                    for iz in range(z0, z1 + 1):
                        a2 = iz - cq2 if iz > cq2 else cq2 - iz
                        cheb = a0
                        if a1 > cheb: cheb = a1
                        if a2 > cheb: cheb = a2
                        if cheb != r:
                            continue
                        pos = _bisect(uniq, (ix * dy + iy) * dz + iz)
                        if pos < 0:
                            continue
                        for t in range(starts[pos], ends[pos]):
                            ridx = order[t]
                            d0 = ref[ridx, 0] - px
                            d1 = ref[ridx, 1] - py
                            d2 = ref[ridx, 2] - pz
                            dd = d0 * d0 + d1 * d1 + d2 * d2
                            if best < 0.0 or dd < best:
                                best = dd
            if best >= 0.0 and best <= (r * cell) * (r * cell):
                break
            r += 1
        out[qi] = sqrt(best)
    return out_np
