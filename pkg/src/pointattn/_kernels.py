"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with identical results (bit-identical for
the selection kernels, since both evaluate the same floating point expression
in the same order). Set ``POINTATTN_NO_NUMBA=1`` to force the numpy path.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("POINTATTN_NO_NUMBA", "0") not in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------


def _perp_sqdist_np(positions, origins, dirs):
    vx = positions[None, :, 0] - origins[:, None, 0]
    vy = positions[None, :, 1] - origins[:, None, 1]
    vz = positions[None, :, 2] - origins[:, None, 2]
    dx = dirs[:, None, 0]
    dy = dirs[:, None, 1]
    dz = dirs[:, None, 2]
    proj = vx * dx + vy * dy + vz * dz
    tx = vx - proj * dx
    ty = vy - proj * dy
    tz = vz - proj * dz
    return tx * tx + ty * ty + tz * tz


def topk_perpendicular_np(positions, origins, dirs, k, chunk=1024):
    n_rays = origins.shape[0]
    k_eff = min(k, positions.shape[0])
    idx = np.empty((n_rays, k_eff), dtype=np.int64)
    sq = np.empty((n_rays, k_eff), dtype=np.float64)
    for start in range(0, n_rays, chunk):
        stop = min(start + chunk, n_rays)
        d2 = _perp_sqdist_np(positions, origins[start:stop], dirs[start:stop])
        order = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]
        idx[start:stop] = order
        sq[start:stop] = np.take_along_axis(d2, order, axis=1)
    return idx, sq


def topk_rows_np(dist, k):
    k_eff = min(k, dist.shape[1])
    order = np.argsort(dist, axis=1, kind="stable")[:, :k_eff]
    return order, np.take_along_axis(dist, order, axis=1)


def scatter_add_rows_np(index, src, n_rows):
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, index, src)
    return out


def pairwise_sqdist_np(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def nearest_sqdist_np(a, b, chunk=2048):
    out = np.empty(a.shape[0], dtype=np.float64)
    for start in range(0, a.shape[0], chunk):
        out[start:start + chunk] = pairwise_sqdist_np(a[start:start + chunk], b).min(axis=1)
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if numba is not None:

    @njit(cache=True)
    def _insert_sorted(best_d, best_i, count, k, d, i):
        # keeps best_d ascending; strict comparison so earlier (lower) indices win ties
        if count == k and d >= best_d[k - 1]:
            return count
        pos = count if count < k else k - 1
        while pos > 0 and best_d[pos - 1] > d:
            if pos < k:
                best_d[pos] = best_d[pos - 1]
                best_i[pos] = best_i[pos - 1]
            pos -= 1
        best_d[pos] = d
        best_i[pos] = i
        return min(count + 1, k)

    @njit(cache=True)
    def topk_perpendicular_nb(positions, origins, dirs, k):
        n_rays = origins.shape[0]
        n_pts = positions.shape[0]
        k_eff = min(k, n_pts)
        idx = np.empty((n_rays, k_eff), dtype=np.int64)
        sq = np.empty((n_rays, k_eff), dtype=np.float64)
        best_d = np.empty(k_eff, dtype=np.float64)
        best_i = np.empty(k_eff, dtype=np.int64)
        for r in range(n_rays):
            ox = origins[r, 0]
            oy = origins[r, 1]
            oz = origins[r, 2]
            dx = dirs[r, 0]
            dy = dirs[r, 1]
            dz = dirs[r, 2]
            count = 0
            for i in range(n_pts):
                vx = positions[i, 0] - ox
                vy = positions[i, 1] - oy
                vz = positions[i, 2] - oz
                proj = vx * dx + vy * dy + vz * dz
                tx = vx - proj * dx
                ty = vy - proj * dy
                tz = vz - proj * dz
                d = tx * tx + ty * ty + tz * tz
                count = _insert_sorted(best_d, best_i, count, k_eff, d, i)
            for j in range(k_eff):
                idx[r, j] = best_i[j]
                sq[r, j] = best_d[j]
        return idx, sq

    @njit(cache=True)
    def topk_rows_nb(dist, k):
        n_rows, n_cols = dist.shape
        k_eff = min(k, n_cols)
        idx = np.empty((n_rows, k_eff), dtype=np.int64)
        out = np.empty((n_rows, k_eff), dtype=np.float64)
        best_d = np.empty(k_eff, dtype=np.float64)
        best_i = np.empty(k_eff, dtype=np.int64)
        for r in range(n_rows):
            count = 0
            for i in range(n_cols):
                count = _insert_sorted(best_d, best_i, count, k_eff, dist[r, i], i)
            for j in range(k_eff):
                idx[r, j] = best_i[j]
                out[r, j] = best_d[j]
        return idx, out

    @njit(cache=True)
    def _scatter_add_2d(index, src, out):
        for r in range(index.shape[0]):
            row = index[r]
            for c in range(src.shape[1]):
                out[row, c] += src[r, c]
        return out

    def scatter_add_rows_nb(index, src, n_rows):
        flat = np.ascontiguousarray(src.reshape(src.shape[0], -1))
        out = np.zeros((n_rows, flat.shape[1]), dtype=src.dtype)
        _scatter_add_2d(np.ascontiguousarray(index, dtype=np.int64), flat, out)
        return out.reshape((n_rows,) + src.shape[1:])

    @njit(cache=True)
    def pairwise_sqdist_nb(a, b):
        out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
        for i in range(a.shape[0]):
            for j in range(b.shape[0]):
                acc = 0.0
                for c in range(a.shape[1]):
                    diff = a[i, c] - b[j, c]
                    acc += diff * diff
                out[i, j] = acc
        return out

    @njit(cache=True)
    def nearest_sqdist_nb(a, b):
        out = np.empty(a.shape[0], dtype=np.float64)
        for i in range(a.shape[0]):
            best = np.inf
            for j in range(b.shape[0]):
                acc = 0.0
                for c in range(a.shape[1]):
                    diff = a[i, c] - b[j, c]
                    acc += diff * diff
                if acc < best:
                    best = acc
            out[i] = best
        return out


NUMPY_KERNELS = {
    "topk_perpendicular": topk_perpendicular_np,
    "topk_rows": topk_rows_np,
    "scatter_add_rows": scatter_add_rows_np,
    "pairwise_sqdist": pairwise_sqdist_np,
    "nearest_sqdist": nearest_sqdist_np,
}

NUMBA_KERNELS = {}
if numba is not None:
    NUMBA_KERNELS = {
        "topk_perpendicular": topk_perpendicular_nb,
        "topk_rows": topk_rows_nb,
        "scatter_add_rows": scatter_add_rows_nb,
        "pairwise_sqdist": pairwise_sqdist_nb,
        "nearest_sqdist": nearest_sqdist_nb,
    }

_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def backend():
    return "numba" if _ACTIVE is NUMBA_KERNELS else "numpy"


def topk_perpendicular(positions, origins, dirs, k):
    """Per ray, the ``k`` point indices with smallest perpendicular distance.

    Returns ``(idx, sqdist)``, both ``(n_rays, min(k, n_points))``, sorted by
    distance with ties broken towards the lower point index.
    """
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    return _ACTIVE["topk_perpendicular"](positions, origins, dirs, int(k))


def topk_rows(dist, k):
    return _ACTIVE["topk_rows"](np.ascontiguousarray(dist, dtype=np.float64), int(k))


def scatter_add_rows(index, src, n_rows):
    return _ACTIVE["scatter_add_rows"](index, src, int(n_rows))


def pairwise_sqdist(a, b):
    return _ACTIVE["pairwise_sqdist"](np.ascontiguousarray(a, dtype=np.float64),
                                      np.ascontiguousarray(b, dtype=np.float64))


def nearest_sqdist(a, b):
    """Squared distance from each row of ``a`` to its nearest row of ``b``."""
    return _ACTIVE["nearest_sqdist"](np.ascontiguousarray(a, dtype=np.float64),
                                     np.ascontiguousarray(b, dtype=np.float64))
