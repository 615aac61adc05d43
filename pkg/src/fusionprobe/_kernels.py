"""Compiled inner loops: BVH ray traversal and z-buffered triangle rasterization."""

import numpy as np
from numba import njit

T_EPS = 1e-6
DET_EPS = 1e-14
STACK_SIZE = 128


@njit(cache=True)
def _tri_hit(ox, oy, oz, dx, dy, dz, v0, e1, e2, k):
    # Moller-Trumbore; returns +inf on miss
    px = dy * e2[k, 2] - dz * e2[k, 1]
    py = dz * e2[k, 0] - dx * e2[k, 2]
    pz = dx * e2[k, 1] - dy * e2[k, 0]
    det = e1[k, 0] * px + e1[k, 1] * py + e1[k, 2] * pz
    if abs(det) < DET_EPS:
        return np.inf
    inv = 1.0 / det
    tx = ox - v0[k, 0]
    ty = oy - v0[k, 1]
    tz = oz - v0[k, 2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = ty * e1[k, 2] - tz * e1[k, 1]
    qy = tz * e1[k, 0] - tx * e1[k, 2]
    qz = tx * e1[k, 1] - ty * e1[k, 0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    t = (e2[k, 0] * qx + e2[k, 1] * qy + e2[k, 2] * qz) * inv
    if t < T_EPS:
        return np.inf
    return t


@njit(cache=True)
def _slab(ox, oy, oz, ix, iy, iz, bmin, bmax, n, tmax):
    t0 = (bmin[n, 0] - ox) * ix
    t1 = (bmax[n, 0] - ox) * ix
    lo = min(t0, t1)
    hi = max(t0, t1)
    t0 = (bmin[n, 1] - oy) * iy
    t1 = (bmax[n, 1] - oy) * iy
    lo = max(lo, min(t0, t1))
    hi = min(hi, max(t0, t1))
    t0 = (bmin[n, 2] - oz) * iz
    t1 = (bmax[n, 2] - oz) * iz
    lo = max(lo, min(t0, t1))
    hi = min(hi, max(t0, t1))
    if hi < lo or hi < 0.0 or lo > tmax:
        return np.inf
    return max(lo, 0.0)


@njit(cache=True)
def _safe_inv(d):
    if d == 0.0:
        return 1e300
    return 1.0 / d


@njit(cache=True)
def raycast_batch(origins, dirs, tmax, bmin, bmax, left, right, start, count,
                  tri_ids, v0, e1, e2):
    """First hit per ray. Returns (t, triangle id) with inf / -1 on miss.

    Triangle arrays are in BVH leaf order; ``tri_ids`` maps back to mesh ids.
    Equal-t ties resolve to the smaller mesh triangle id.
    """
    n_rays = origins.shape[0]
    out_t = np.full(n_rays, np.inf)
    out_id = np.full(n_rays, -1, dtype=np.int64)
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    for r in range(n_rays):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix, iy, iz = _safe_inv(dx), _safe_inv(dy), _safe_inv(dz)
        best = tmax[r]
        best_id = -1
        found = False
        if _slab(ox, oy, oz, ix, iy, iz, bmin, bmax, 0, best) == np.inf:
            continue
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _slab(ox, oy, oz, ix, iy, iz, bmin, bmax, node, best) == np.inf:
                continue
            if left[node] < 0:
                s = start[node]
                for k in range(s, s + count[node]):
                    t = _tri_hit(ox, oy, oz, dx, dy, dz, v0, e1, e2, k)
                    if t == np.inf or t > best:
                        continue
                    tid = tri_ids[k]
                    if t < best or not found or tid < best_id:
                        if t <= tmax[r]:
                            best = t
                            best_id = tid
                            found = True
            else:
                tl = _slab(ox, oy, oz, ix, iy, iz, bmin, bmax, left[node], best)
                tr = _slab(ox, oy, oz, ix, iy, iz, bmin, bmax, right[node], best)
                # push the farther child first so the nearer one is visited next
                if tl <= tr:
                    if tr != np.inf:
                        stack[sp] = right[node]
                        sp += 1
                    if tl != np.inf:
                        stack[sp] = left[node]
                        sp += 1
                else:
                    if tl != np.inf:
                        stack[sp] = left[node]
                        sp += 1
                    if tr != np.inf:
                        stack[sp] = right[node]
                        sp += 1
        if found:
            out_t[r] = best
            out_id[r] = best_id
    return out_t, out_id


@njit(cache=True)
def rasterize(screen, zw, invw, colors, owner, width, height, zbuf, rgb, ids):
    """Z-buffered fill of projected triangles.

    ``screen`` (T, 3, 2) pixel coords, ``zw`` (T, 3) camera depth divided by
    the projective w, ``invw`` (T, 3) 1/w. Depth is recovered perspective
    correctly as (z/w)/(1/w). Pixel centers are integer coordinates and a
    pixel is covered when its center is inside or on the triangle. A pixel
    is only replaced by a strictly smaller depth, so earlier triangles win
    ties.
    """
    for k in range(screen.shape[0]):
        x0, y0 = screen[k, 0, 0], screen[k, 0, 1]
        x1, y1 = screen[k, 1, 0], screen[k, 1, 1]
        x2, y2 = screen[k, 2, 0], screen[k, 2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        c0 = max(int(np.ceil(min(x0, min(x1, x2)))), 0)
        c1 = min(int(np.floor(max(x0, max(x1, x2)))), width - 1)
        r0 = max(int(np.ceil(min(y0, min(y1, y2)))), 0)
        r1 = min(int(np.floor(max(y0, max(y1, y2)))), height - 1)
        for row in range(r0, r1 + 1):
            py = float(row)
            for col in range(c0, c1 + 1):
                px = float(col)
                w0 = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
                w1 = (x0 - x2) * (py - y2) - (y0 - y2) * (px - x2)
                w2 = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
                if area > 0:
                    if w0 < 0 or w1 < 0 or w2 < 0:
                        continue
                else:
                    if w0 > 0 or w1 > 0 or w2 > 0:
                        continue
                l0 = w0 / area
                l1 = w1 / area
                l2 = w2 / area
                iw = l0 * invw[k, 0] + l1 * invw[k, 1] + l2 * invw[k, 2]
                zz = l0 * zw[k, 0] + l1 * zw[k, 1] + l2 * zw[k, 2]
                if iw <= 0:
                    continue
                z = zz / iw
                if z < zbuf[row, col]:
                    zbuf[row, col] = z
                    rgb[row, col, 0] = colors[k, 0]
                    rgb[row, col, 1] = colors[k, 1]
                    rgb[row, col, 2] = colors[k, 2]
                    ids[row, col] = owner[k]


@njit(cache=True)
def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


@njit(cache=True)
def radius_components(pts, radius):
    """Connected components of the graph linking points within ``radius`` (inclusive).

    Points are binned on a grid of side radius/sqrt(2), so any two points in
    one cell are linked; neighboring cells are joined as soon as one pair
    qualifies. Returns a root label per point.
    """
    n, dim = pts.shape
    parent = np.arange(n)
    if n == 0:
        return parent
    cs = radius / np.sqrt(2.0)
    if dim == 3:
        cs = radius / np.sqrt(3.0)
    lo = np.empty(dim)
    for d in range(dim):
        lo[d] = pts[:, d].min()
    dims = np.empty(dim, dtype=np.int64)
    for d in range(dim):
        dims[d] = int((pts[:, d].max() - lo[d]) / cs) + 1
    cell = np.empty(n, dtype=np.int64)
    coords = np.empty((n, dim), dtype=np.int64)
    for i in range(n):
        key = 0
        for d in range(dim):
            c = int((pts[i, d] - lo[d]) / cs)
            if c >= dims[d]:
                c = dims[d] - 1
            coords[i, d] = c
            key = key * dims[d] + c
        cell[i] = key
    order = np.argsort(cell)
    sorted_cells = cell[order]
    # unique cells with their point ranges
    starts = [0]
    for k in range(1, n):
        if sorted_cells[k] != sorted_cells[k - 1]:
            starts.append(k)
    m = len(starts)
    begin = np.empty(m, dtype=np.int64)
    end = np.empty(m, dtype=np.int64)
    keys = np.empty(m, dtype=np.int64)
    for k in range(m):
        begin[k] = starts[k]
        end[k] = starts[k + 1] if k + 1 < m else n
        keys[k] = sorted_cells[starts[k]]
    for k in range(m):
        first = order[begin[k]]
        for q in range(begin[k] + 1, end[k]):
            a = _find(parent, first)
            b = _find(parent, order[q])
            if a != b:
                parent[b] = a
    reach = 2  # ceil(radius / cs) for both 2D and 3D cells
    r2 = radius * radius
    nb = 2 * reach + 1
    n_off = nb ** dim
    for k in range(m):
        p0 = order[begin[k]]
        for o in range(n_off):
            rem = o
            key = 0
            ok = True
            positive = False
            decided = False
            for d in range(dim):
                div = nb ** (dim - 1 - d)
                off = rem // div - reach
                rem = rem % div
                if not decided and off != 0:
                    positive = off > 0
                    decided = True
                c = coords[p0, d] + off
                if c < 0 or c >= dims[d]:
                    ok = False
                key = key * dims[d] + c
            if not ok or not positive:
                continue
            # binary search for the neighbor cell
            a_lo, a_hi = 0, m
            while a_lo < a_hi:
                mid = (a_lo + a_hi) // 2
                if keys[mid] < key:
                    a_lo = mid + 1
                else:
                    a_hi = mid
            if a_lo >= m or keys[a_lo] != key:
                continue
            j = a_lo
            if _find(parent, p0) == _find(parent, order[begin[j]]):
                continue
            linked = False
            for qa in range(begin[k], end[k]):
                pa = order[qa]
                for qb in range(begin[j], end[j]):
                    pb = order[qb]
                    s = 0.0
                    for d in range(dim):
                        t = pts[pa, d] - pts[pb, d]
                        s += t * t
                    if s <= r2:
                        linked = True
                        break
                if linked:
                    break
            if linked:
                ra = _find(parent, p0)
                rb = _find(parent, order[begin[j]])
                parent[rb] = ra
    for i in range(n):
        parent[i] = _find(parent, i)
    return parent
