"""Numba kernels for multistencil fast marching on a 3D lattice."""
import numpy as np
from numba import njit

# each stencil is three mutually independent lattice directions
STENCILS = np.array(
    [
        [[1, 0, 0], [0, 1, 0], [0, 0, 1]],
        [[1, 1, 0], [1, -1, 0], [0, 0, 1]],
        [[1, 0, 1], [1, 0, -1], [0, 1, 0]],
        [[0, 1, 1], [0, 1, -1], [1, 0, 0]],
    ],
    dtype=np.int64,
)

FAR, TRIAL, KNOWN = 0, 1, 2


@njit(cache=True)
def _less(t1, i1, t2, i2):
    return t1 < t2 or (t1 == t2 and i1 < i2)


@njit(cache=True)
def _sift_up(hk, hi, pos, k):
    while k > 0:
        parent = (k - 1) // 2
        if _less(hk[k], hi[k], hk[parent], hi[parent]):
            hk[k], hk[parent] = hk[parent], hk[k]
            hi[k], hi[parent] = hi[parent], hi[k]
            pos[hi[k]] = k
            pos[hi[parent]] = parent
            k = parent
        else:
            break


@njit(cache=True)
def _sift_down(hk, hi, pos, k, n):
    while True:
        left = 2 * k + 1
        if left >= n:
            break
        best = left
        right = left + 1
        if right < n and _less(hk[right], hi[right], hk[left], hi[left]):
            best = right
        if _less(hk[best], hi[best], hk[k], hi[k]):
            hk[k], hk[best] = hk[best], hk[k]
            hi[k], hi[best] = hi[best], hi[k]
            pos[hi[k]] = k
            pos[hi[best]] = best
            k = best
        else:
            break


@njit(cache=True)
def _solve_directions(a, c, b, r, use, n, inv_f):
    """Upwind solution over a (possibly non-orthogonal) direction set.

    Direction ``p`` contributes the finite difference ``a[p] * T - c[p]``
    along the unit vector ``r[p]``; ``b[p]`` is its nearest known time.
    Directions whose neighbour is too late are dropped in turn.
    """
    for p in range(n):
        use[p] = True
    m = n
    while m > 0:
        g00 = g01 = g02 = g11 = g12 = g22 = 0.0
        idx0 = idx1 = idx2 = -1
        q = 0
        for p in range(n):
            if use[p]:
                if q == 0:
                    idx0 = p
                elif q == 1:
                    idx1 = p
                else:
                    idx2 = p
                q += 1
        # inverse gram matrix of the active unit directions
        if m == 1:
            i00 = 1.0
            i01 = i02 = i11 = i12 = i22 = 0.0
        elif m == 2:
            g01 = r[idx0, 0] * r[idx1, 0] + r[idx0, 1] * r[idx1, 1] + r[idx0, 2] * r[idx1, 2]
            det = 1.0 - g01 * g01
            i00 = 1.0 / det
            i11 = 1.0 / det
            i01 = -g01 / det
            i02 = i12 = i22 = 0.0
        else:
            g01 = r[idx0, 0] * r[idx1, 0] + r[idx0, 1] * r[idx1, 1] + r[idx0, 2] * r[idx1, 2]
            g02 = r[idx0, 0] * r[idx2, 0] + r[idx0, 1] * r[idx2, 1] + r[idx0, 2] * r[idx2, 2]
            g12 = r[idx1, 0] * r[idx2, 0] + r[idx1, 1] * r[idx2, 1] + r[idx1, 2] * r[idx2, 2]
            g00 = g11 = g22 = 1.0
            det = (g00 * (g11 * g22 - g12 * g12) - g01 * (g01 * g22 - g12 * g02)
                   + g02 * (g01 * g12 - g11 * g02))
            i00 = (g11 * g22 - g12 * g12) / det
            i01 = (g02 * g12 - g01 * g22) / det
            i02 = (g01 * g12 - g02 * g11) / det
            i11 = (g00 * g22 - g02 * g02) / det
            i12 = (g01 * g02 - g00 * g12) / det
            i22 = (g00 * g11 - g01 * g01) / det
        a0 = a[idx0]
        c0 = c[idx0]
        bmax = b[idx0]
        a1 = c1 = a2 = c2 = 0.0
        if m >= 2:
            a1 = a[idx1]
            c1 = c[idx1]
            bmax = max(bmax, b[idx1])
        if m == 3:
            a2 = a[idx2]
            c2 = c[idx2]
            bmax = max(bmax, b[idx2])
        aqa = (i00 * a0 * a0 + i11 * a1 * a1 + i22 * a2 * a2
               + 2.0 * (i01 * a0 * a1 + i02 * a0 * a2 + i12 * a1 * a2))
        aqc = (i00 * a0 * c0 + i11 * a1 * c1 + i22 * a2 * c2
               + i01 * (a0 * c1 + a1 * c0) + i02 * (a0 * c2 + a2 * c0)
               + i12 * (a1 * c2 + a2 * c1))
        cqc = (i00 * c0 * c0 + i11 * c1 * c1 + i22 * c2 * c2
               + 2.0 * (i01 * c0 * c1 + i02 * c0 * c2 + i12 * c1 * c2))
        disc = aqc * aqc - aqa * (cqc - inv_f * inv_f)
        if disc >= 0.0:
            t = (aqc + np.sqrt(disc)) / aqa
            if t >= bmax:
                return t
        worst = idx0
        for p in range(n):
            if use[p] and b[p] > b[worst]:
                worst = p
        use[worst] = False
        m -= 1
    return np.inf


@njit(cache=True)
def _update(T, state, speed, spacing, i, j, k, stencils, unit, steps, order,
            a, c, b, r, use):
    nx, ny, nz = T.shape
    best = np.inf
    inv_f = 1.0 / speed[i, j, k]
    for s in range(stencils.shape[0]):
        n = 0
        for d in range(3):
            ox = stencils[s, d, 0]
            oy = stencils[s, d, 1]
            oz = stencils[s, d, 2]
            tmin = np.inf
            sign = 0
            for sg in (-1, 1):
                ia = i + sg * ox
                ja = j + sg * oy
                ka = k + sg * oz
                if 0 <= ia < nx and 0 <= ja < ny and 0 <= ka < nz:
                    if state[ia, ja, ka] == KNOWN and T[ia, ja, ka] < tmin:
                        tmin = T[ia, ja, ka]
                        sign = sg
            if sign != 0:
                h = steps[s, d]
                b[n] = tmin
                a[n] = 1.0 / h
                c[n] = tmin / h
                if order == 2:
                    ib = i + 2 * sign * ox
                    jb = j + 2 * sign * oy
                    kb = k + 2 * sign * oz
                    if 0 <= ib < nx and 0 <= jb < ny and 0 <= kb < nz:
                        if state[ib, jb, kb] == KNOWN and T[ib, jb, kb] < tmin:
                            t2 = T[ib, jb, kb]
                            a[n] = 1.5 / h
                            c[n] = (2.0 * tmin - 0.5 * t2) / h
                # direction from the neighbour towards the voxel
                r[n, 0] = -sign * unit[s, d, 0]
                r[n, 1] = -sign * unit[s, d, 1]
                r[n, 2] = -sign * unit[s, d, 2]
                n += 1
        if n > 0:
            t = _solve_directions(a, c, b, r, use, n, inv_f)
            if t < best:
                best = t
    return best


@njit(cache=True)
def fast_march_kernel(speed, spacing, seeds, stencils, order=2, init_radius=0.0,
                      target=-1, stop_factor=np.inf):
    """Arrival times from ``seeds`` (voxel indices) for ``|grad T| * speed = 1``.

    Voxels within ``init_radius`` mm of a seed are initialized with the
    straight-line travel time (trapezoidal slowness) and frozen; this removes
    the large point-source error of the upwind differences.

    With a ``target`` linear index, marching stops once the accepted time
    exceeds ``stop_factor`` times the target's time; voxels not accepted by
    then are left at infinity.

    Returns ``(T, accepted)`` where ``accepted`` lists the accepted times in
    acceptance order (used to check monotonicity).
    """
    nx, ny, nz = speed.shape
    nvox = nx * ny * nz
    T = np.full((nx, ny, nz), np.inf)
    state = np.zeros((nx, ny, nz), dtype=np.int8)
    hk = np.empty(nvox)
    hi = np.empty(nvox, dtype=np.int64)
    pos = np.full(nvox, -1, dtype=np.int64)
    frozen = np.zeros((nx, ny, nz), dtype=np.bool_)
    for s in range(seeds.shape[0]):
        i, j, k = seeds[s, 0], seeds[s, 1], seeds[s, 2]
        T[i, j, k] = 0.0
        frozen[i, j, k] = True
        ri = int(init_radius / spacing[0])
        rj = int(init_radius / spacing[1])
        rk = int(init_radius / spacing[2])
        for a in range(max(i - ri, 0), min(i + ri + 1, nx)):
            for bb in range(max(j - rj, 0), min(j + rj + 1, ny)):
                for cz in range(max(k - rk, 0), min(k + rk + 1, nz)):
                    dist = np.sqrt(((a - i) * spacing[0]) ** 2 + ((bb - j) * spacing[1]) ** 2
                                   + ((cz - k) * spacing[2]) ** 2)
                    if dist <= init_radius:
                        t = 0.5 * dist * (1.0 / speed[i, j, k] + 1.0 / speed[a, bb, cz])
                        if t < T[a, bb, cz]:
                            T[a, bb, cz] = t
                        frozen[a, bb, cz] = True
    n = 0
    for a in range(nx):
        for bb in range(ny):
            for cz in range(nz):
                if frozen[a, bb, cz]:
                    lin = a + nx * (bb + ny * cz)
                    state[a, bb, cz] = TRIAL
                    hk[n] = T[a, bb, cz]
                    hi[n] = lin
                    pos[lin] = n
                    _sift_up(hk, hi, pos, n)
                    n += 1
    accepted = np.empty(nvox)
    na = 0
    ns = stencils.shape[0]
    unit = np.empty((ns, 3, 3))
    steps = np.empty((ns, 3))
    for s in range(ns):
        for d in range(3):
            ln = 0.0
            for e in range(3):
                ln += (stencils[s, d, e] * spacing[e]) ** 2
            ln = np.sqrt(ln)
            steps[s, d] = ln
            for e in range(3):
                unit[s, d, e] = stencils[s, d, e] * spacing[e] / ln
    a = np.empty(3)
    c = np.empty(3)
    b = np.empty(3)
    r = np.empty((3, 3))
    use = np.empty(3, dtype=np.bool_)
    stop = np.inf
    while n > 0:
        t0 = hk[0]
        lin = hi[0]
        if t0 > stop:
            break
        if lin == target:
            stop = t0 * stop_factor
        n -= 1
        pos[lin] = -1
        if n > 0:
            hk[0] = hk[n]
            hi[0] = hi[n]
            pos[hi[0]] = 0
            _sift_down(hk, hi, pos, 0, n)
        i = lin % nx
        j = (lin // nx) % ny
        k = lin // (nx * ny)
        state[i, j, k] = KNOWN
        accepted[na] = t0
        na += 1
        for di in range(-1, 2):
            for dj in range(-1, 2):
                for dk in range(-1, 2):
                    nzc = (di != 0) + (dj != 0) + (dk != 0)
                    if nzc == 0 or nzc == 3:
                        continue
                    a_ = i + di
                    bb = j + dj
                    cz = k + dk
                    if not (0 <= a_ < nx and 0 <= bb < ny and 0 <= cz < nz):
                        continue
                    if state[a_, bb, cz] == KNOWN or frozen[a_, bb, cz]:
                        continue
                    t = _update(T, state, speed, spacing, a_, bb, cz, stencils, unit, steps,
                                order, a, c, b, r, use)
                    if t < T[a_, bb, cz]:
                        T[a_, bb, cz] = t
                        nlin = a_ + nx * (bb + ny * cz)
                        if state[a_, bb, cz] == FAR:
                            state[a_, bb, cz] = TRIAL
                            hk[n] = t
                            hi[n] = nlin
                            pos[nlin] = n
                            _sift_up(hk, hi, pos, n)
                            n += 1
                        else:
                            p = pos[nlin]
                            hk[p] = t
                            _sift_up(hk, hi, pos, p)
    if n > 0:
        for q in range(n):
            lin = hi[q]
            T[lin % nx, (lin // nx) % ny, lin // (nx * ny)] = np.inf
    return T, accepted[:na]


@njit(cache=True)
def descent_field(T, spacing):
    """Per-voxel unit direction of steepest upwind descent of ``T``."""
    nx, ny, nz = T.shape
    out = np.zeros((nx, ny, nz, 3))
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                t = T[i, j, k]
                if not np.isfinite(t):
                    continue
                v = np.zeros(3)
                idx = (i, j, k)
                for d in range(3):
                    lo = np.inf
                    hi = np.inf
                    if idx[d] > 0:
                        if d == 0:
                            lo = T[i - 1, j, k]
                        elif d == 1:
                            lo = T[i, j - 1, k]
                        else:
                            lo = T[i, j, k - 1]
                    if idx[d] < T.shape[d] - 1:
                        if d == 0:
                            hi = T[i + 1, j, k]
                        elif d == 1:
                            hi = T[i, j + 1, k]
                        else:
                            hi = T[i, j, k + 1]
                    if lo < t or hi < t:
                        if lo <= hi:
                            v[d] = -(t - lo) / spacing[d]
                        else:
                            v[d] = (t - hi) / spacing[d]
                norm = np.sqrt(v[0] ** 2 + v[1] ** 2 + v[2] ** 2)
                if norm > 0:
                    for d in range(3):
                        out[i, j, k, d] = v[d] / norm
    return out
