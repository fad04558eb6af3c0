"""Pure numpy fallback for the hot kernels.

Implements exactly the same semantics as the compiled backend: per pixel the
depth-sorted splats whose 3-sigma bounding box covers the pixel are alpha
composited front to back, terminating once transmittance drops below 1e-4.
Coverage is defined by each splat's own bounding box, so results do not
depend on the tile size used for scheduling.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"

ALPHA_CLIP = 0.999
T_CUTOFF = 1e-4


def _tile_lists(means2d, radii, h, w, tile):
    """Per-tile candidate index lists, preserving the incoming (depth) order."""
    ntx = (w + tile - 1) // tile
    nty = (h + tile - 1) // tile
    lists = [[] for _ in range(ntx * nty)]
    for g in range(means2d.shape[0]):
        mx, my = means2d[g]
        rx, ry = radii[g]
        jlo = max(0, int(np.ceil(mx - rx)))
        jhi = min(w - 1, int(np.floor(mx + rx)))
        ilo = max(0, int(np.ceil(my - ry)))
        ihi = min(h - 1, int(np.floor(my + ry)))
        if jlo > jhi or ilo > ihi:
            continue
        for ty in range(ilo // tile, ihi // tile + 1):
            for tx in range(jlo // tile, jhi // tile + 1):
                lists[ty * ntx + tx].append(g)
    return lists, ntx, nty


def _tile_geometry(idx, means2d, conic, opac, radii, px, py):
    """Coverage, alpha and transmittance for one tile; arrays are (P, K)."""
    dx = px[:, None] - means2d[idx, 0][None, :]
    dy = py[:, None] - means2d[idx, 1][None, :]
    cover = (np.abs(dx) <= radii[idx, 0][None, :]) & (np.abs(dy) <= radii[idx, 1][None, :])
    a = conic[idx, 0][None, :]
    b = conic[idx, 1][None, :]
    c = conic[idx, 2][None, :]
    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    gauss = np.exp(-0.5 * q)
    alpha_raw = opac[idx][None, :] * gauss
    alpha = np.minimum(alpha_raw, ALPHA_CLIP) * cover
    one_m = 1.0 - alpha
    t_incl = np.cumprod(one_m, axis=1)
    t_before = np.concatenate([np.ones((alpha.shape[0], 1)), t_incl[:, :-1]], axis=1)
    proc = t_before >= T_CUTOFF
    weight = alpha * t_before * proc
    return dx, dy, cover, q, gauss, alpha_raw, alpha, one_m, t_before, proc, weight


def rasterize_forward(means2d, conic, depths, opac, colors, normals, radii,
                      h, w, tile=16):
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    nacc = np.zeros((h, w, 3))
    alpha_out = np.zeros((h, w))
    final_t = np.ones((h, w))
    ncontrib = np.zeros((h, w), dtype=np.int32)
    lists, ntx, nty = _tile_lists(means2d, radii, h, w, tile)
    for ty in range(nty):
        for tx in range(ntx):
            idx = lists[ty * ntx + tx]
            if not idx:
                continue
            idx = np.asarray(idx, dtype=np.intp)
            i0, i1 = ty * tile, min((ty + 1) * tile, h)
            j0, j1 = tx * tile, min((tx + 1) * tile, w)
            jj, ii = np.meshgrid(np.arange(j0, j1), np.arange(i0, i1))
            px = jj.ravel().astype(np.float64)
            py = ii.ravel().astype(np.float64)
            geo = _tile_geometry(idx, means2d, conic, opac, radii, px, py)
            cover, one_m, proc, weight = geo[2], geo[7], geo[9], geo[10]
            sh = (i1 - i0, j1 - j0)
            color[i0:i1, j0:j1] += (weight @ colors[idx]).reshape(*sh, 3)
            depth[i0:i1, j0:j1] += (weight @ depths[idx]).reshape(sh)
            nacc[i0:i1, j0:j1] += (weight @ normals[idx]).reshape(*sh, 3)
            alpha_out[i0:i1, j0:j1] += weight.sum(axis=1).reshape(sh)
            final_t[i0:i1, j0:j1] = np.prod(
                np.where(proc, one_m, 1.0), axis=1).reshape(sh)
            ncontrib[i0:i1, j0:j1] = (cover & proc).sum(axis=1).reshape(sh)
    return color, depth, nacc, alpha_out, final_t, ncontrib


def rasterize_backward(means2d, conic, depths, opac, colors, normals, radii,
                       h, w, d_color, d_depth, d_nacc, d_alpha, tile=16):
    m = means2d.shape[0]
    d_means2d = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_depths = np.zeros(m)
    d_opac = np.zeros(m)
    d_colors = np.zeros((m, 3))
    d_normals = np.zeros((m, 3))
    lists, ntx, nty = _tile_lists(means2d, radii, h, w, tile)
    for ty in range(nty):
        for tx in range(ntx):
            idx = lists[ty * ntx + tx]
            if not idx:
                continue
            idx = np.asarray(idx, dtype=np.intp)
            i0, i1 = ty * tile, min((ty + 1) * tile, h)
            j0, j1 = tx * tile, min((tx + 1) * tile, w)
            jj, ii = np.meshgrid(np.arange(j0, j1), np.arange(i0, i1))
            px = jj.ravel().astype(np.float64)
            py = ii.ravel().astype(np.float64)
            (dx, dy, cover, q, gauss, alpha_raw, alpha, one_m, t_before,
             proc, weight) = _tile_geometry(idx, means2d, conic, opac, radii, px, py)
            gc = d_color[i0:i1, j0:j1].reshape(-1, 3)
            gd = d_depth[i0:i1, j0:j1].ravel()
            gn = d_nacc[i0:i1, j0:j1].reshape(-1, 3)
            ga = d_alpha[i0:i1, j0:j1].ravel()
            # per-candidate inner product of output grads with its attributes
            gdot = (gc @ colors[idx].T + gn @ normals[idx].T
                    + gd[:, None] * depths[idx][None, :] + ga[:, None])
            wg = weight * gdot
            suffix = np.sum(wg, axis=1, keepdims=True) - np.cumsum(wg, axis=1)
            d_alpha_mat = (t_before * gdot - suffix / one_m) * (proc & cover)
            d_alpha_raw = d_alpha_mat * (alpha_raw < ALPHA_CLIP)
            d_opac[idx] += np.sum(d_alpha_raw * gauss, axis=0)
            d_q = d_alpha_raw * opac[idx][None, :] * (-0.5 * gauss)
            a = conic[idx, 0][None, :]
            b = conic[idx, 1][None, :]
            c = conic[idx, 2][None, :]
            d_means2d[idx, 0] += np.sum(-d_q * (2.0 * a * dx + 2.0 * b * dy), axis=0)
            d_means2d[idx, 1] += np.sum(-d_q * (2.0 * b * dx + 2.0 * c * dy), axis=0)
            d_conic[idx, 0] += np.sum(d_q * dx * dx, axis=0)
            d_conic[idx, 1] += np.sum(d_q * 2.0 * dx * dy, axis=0)
            d_conic[idx, 2] += np.sum(d_q * dy * dy, axis=0)
            d_colors[idx] += weight.T @ gc
            d_normals[idx] += weight.T @ gn
            d_depths[idx] += weight.T @ gd
    return d_means2d, d_conic, d_depths, d_opac, d_colors, d_normals


# ---------------------------------------------------------------------------
# exact nearest-neighbor distances on a uniform spatial grid
# ---------------------------------------------------------------------------

def _grid_build(ref: np.ndarray):
    lo = ref.min(axis=0)
    ext = ref.max(axis=0) - lo
    m = ref.shape[0]
    cell = max(float(ext.max()) / max(4, round(m ** (1.0 / 3.0))), 1e-12)
    dims = np.maximum(1, np.floor(ext / cell).astype(np.int64) + 1)
    cc = np.minimum((ref - lo) // cell, dims - 1).astype(np.int64)
    ids = (cc[:, 0] * dims[1] + cc[:, 1]) * dims[2] + cc[:, 2]
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    uniq, starts = np.unique(sorted_ids, return_index=True)
    ends = np.append(starts[1:], sorted_ids.size)
    table = {int(u): order[s:e] for u, s, e in zip(uniq, starts, ends)}
    return lo, cell, dims, table


def grid_min_dists(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each query point to its nearest ref point."""
    lo, cell, dims, table = _grid_build(ref)
    dx, dy, dz = (int(v) for v in dims)
    out = np.empty(query.shape[0])
    for qi in range(query.shape[0]):
        p = query[qi]
        cq = np.floor((p - lo) / cell).astype(np.int64)
        # first radius whose shell can intersect the occupied grid box
        r = int(max(0, -cq[0], cq[0] - (dx - 1), -cq[1], cq[1] - (dy - 1),
                    -cq[2], cq[2] - (dz - 1)))
        best = np.inf
        while True:
            cand = []
            for ix in range(max(0, cq[0] - r), min(dx - 1, cq[0] + r) + 1):
                ddx = abs(ix - cq[0])
                for iy in range(max(0, cq[1] - r), min(dy - 1, cq[1] + r) + 1):
                    ddy = abs(iy - cq[1])
                    for iz in range(max(0, cq[2] - r), min(dz - 1, cq[2] + r) + 1):
                        if max(ddx, ddy, abs(iz - cq[2])) != r:
                            continue
                        hit = table.get(int((ix * dy + iy) * dz + iz))
                        if hit is not None:
                            cand.append(hit)
            if cand:
                pts = ref[np.concatenate(cand)]
                d2 = np.sum((pts - p) ** 2, axis=1)
                best = min(best, float(d2.min()))
            if best <= (r * cell) ** 2:
                break
            r += 1
        out[qi] = np.sqrt(best)
    return out
