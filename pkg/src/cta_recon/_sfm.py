"""Numba kernel for sparse-field level-set evolution.

Layer labels: 0 is the active (zero) layer, +-1 and +-2 the inner/outer
support layers, +-3 far inside/outside.  ``phi`` is positive inside.
Layers are found by scanning the label array in x-fastest order each
iteration, so results never depend on list ordering.
"""
import numpy as np
from numba import njit

FAR = 3
OK, VANISHED, NONFINITE = 0, 1, 2

_DI = np.array([1, -1, 0, 0, 0, 0])
_DJ = np.array([0, 0, 1, -1, 0, 0])
_DK = np.array([0, 0, 0, 0, 1, -1])


@njit(cache=True)
def _clampi(v, n):
    if v < 0:
        return 0
    if v >= n:
        return n - 1
    return v


@njit(cache=True)
def curvature(phi, i, j, k):
    """Mean curvature, half the divergence of the unit normal (1/r on a
    sphere).  Central differences in index space, replicated borders."""
    nx, ny, nz = phi.shape
    ip, im = _clampi(i + 1, nx), _clampi(i - 1, nx)
    jp, jm = _clampi(j + 1, ny), _clampi(j - 1, ny)
    kp, km = _clampi(k + 1, nz), _clampi(k - 1, nz)
    c = phi[i, j, k]
    px = 0.5 * (phi[ip, j, k] - phi[im, j, k])
    py = 0.5 * (phi[i, jp, k] - phi[i, jm, k])
    pz = 0.5 * (phi[i, j, kp] - phi[i, j, km])
    pxx = phi[ip, j, k] - 2 * c + phi[im, j, k]
    pyy = phi[i, jp, k] - 2 * c + phi[i, jm, k]
    pzz = phi[i, j, kp] - 2 * c + phi[i, j, km]
    pxy = 0.25 * (phi[ip, jp, k] - phi[ip, jm, k] - phi[im, jp, k] + phi[im, jm, k])
    pxz = 0.25 * (phi[ip, j, kp] - phi[ip, j, km] - phi[im, j, kp] + phi[im, j, km])
    pyz = 0.25 * (phi[i, jp, kp] - phi[i, jp, km] - phi[i, jm, kp] + phi[i, jm, km])
    g2 = px * px + py * py + pz * pz
    if g2 < 1e-12:
        return 0.0
    num = ((pyy + pzz) * px * px + (pxx + pzz) * py * py + (pxx + pyy) * pz * pz
           - 2.0 * (px * py * pxy + px * pz * pxz + py * pz * pyz))
    return 0.5 * num / (g2 * np.sqrt(g2))


@njit(cache=True)
def heaviside(z, eps):
    return 0.5 * (1.0 + (2.0 / np.pi) * np.arctan(z / eps))


@njit(cache=True)
def dirac(z, eps):
    return (eps / np.pi) / (eps * eps + z * z)


@njit(cache=True)
def shape_force_scalar(phi_v, psi_v, lab_v, eps):
    hl = 1.0 if lab_v > 0 else 0.0
    return 2.0 * (heaviside(phi_v, eps) * hl - heaviside(psi_v, eps)) * hl * dirac(phi_v, eps)


@njit(cache=True)
def region_means(phi, u, roi):
    s1 = 0.0
    s2 = 0.0
    n1 = 0
    n2 = 0
    nx, ny, nz = phi.shape
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                if roi[i, j, k]:
                    if phi[i, j, k] > 0:
                        s1 += u[i, j, k]
                        n1 += 1
                    else:
                        s2 += u[i, j, k]
                        n2 += 1
    c1 = s1 / n1 if n1 > 0 else 0.0
    c2 = s2 / n2 if n2 > 0 else 0.0
    return c1, c2, n1, n2


@njit(cache=True)
def _in(i, j, k, nx, ny, nz):
    return 0 <= i < nx and 0 <= j < ny and 0 <= k < nz


@njit(cache=True)
def _crosses(phi, i, j, k, nx, ny, nz):
    v = phi[i, j, k]
    if v == 0.0:
        return True
    for d in range(6):
        a = i + _DI[d]
        b = j + _DJ[d]
        c = k + _DK[d]
        if _in(a, b, c, nx, ny, nz) and phi[a, b, c] * v <= 0:
            return True
    return False


@njit(cache=True)
def _nearest_layer_value(phi, label, i, j, k, inner, s, nx, ny, nz):
    """Value one unit further from the interface than the closest neighbour
    in layer ``inner``; ``nan`` when there is none."""
    best = np.nan
    for d in range(6):
        a = i + _DI[d]
        b = j + _DJ[d]
        c = k + _DK[d]
        if _in(a, b, c, nx, ny, nz) and label[a, b, c] == inner:
            v = phi[a, b, c] * s
            if best != best or v < best:
                best = v
    return best + 1.0


@njit(cache=True)
def _rebuild_band(phi, label):
    """Relabel from the signs of ``phi``: the zero layer is every voxel with a
    sign change among its 6-neighbours, then one-voxel shells +-1 and +-2
    whose values follow the nearest inner-shell value plus one."""
    nx, ny, nz = phi.shape
    # zero layer; clamping keeps signs, so later crossing tests are unaffected
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                s = 1 if phi[i, j, k] > 0 else -1
                if abs(label[i, j, k]) <= 2 and _crosses(phi, i, j, k, nx, ny, nz):
                    label[i, j, k] = 0
                    phi[i, j, k] = min(max(phi[i, j, k], -0.5), 0.5)
                else:
                    label[i, j, k] = FAR * s
    for shell in range(1, 3):
        for k in range(nz):
            for j in range(ny):
                for i in range(nx):
                    lb = label[i, j, k]
                    if lb != FAR and lb != -FAR:
                        continue
                    s = 1 if lb > 0 else -1
                    m = _nearest_layer_value(phi, label, i, j, k, s * (shell - 1), s,
                                             nx, ny, nz)
                    if m == m:
                        label[i, j, k] = s * shell
                        phi[i, j, k] = s * min(max(m, shell - 0.5 + 1e-9), shell + 0.5)
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                lb = label[i, j, k]
                if lb == FAR or lb == -FAR:
                    phi[i, j, k] = 2.5 * lb / FAR


@njit(cache=True)
def evolve_kernel(phi, label, u, roi, psi, lab_field, use_shape, a, w_data, w_shape, dt,
                  eps_h, n_iter):
    """Run ``n_iter`` sparse-field iterations in place.

    Returns ``(status, iterations_done, c1, c2)``.
    """
    nx, ny, nz = phi.shape
    nvox = nx * ny * nz
    lz = np.empty(nvox, dtype=np.int64)
    force = np.empty(nvox)
    cvv = np.empty(nvox)
    c1, c2, n1, n2 = region_means(phi, u, roi)
    for it in range(n_iter):
        c1, c2, n1, n2 = region_means(phi, u, roi)
        nzero = 0
        for k in range(nz):
            for j in range(ny):
                for i in range(nx):
                    if label[i, j, k] == 0:
                        lz[nzero] = i + nx * (j + ny * k)
                        nzero += 1
        if nzero == 0 or n1 == 0:
            return VANISHED, it, c1, c2
        # forces from the current phi (all computed before any update)
        maxcv = 0.0
        for q in range(nzero):
            lin = lz[q]
            i = lin % nx
            j = (lin // nx) % ny
            k = lin // (nx * ny)
            if roi[i, j, k]:
                v = u[i, j, k]
                cv = (v - c1) ** 2 - (v - c2) ** 2
                cvv[q] = cv
                if abs(cv) > maxcv:
                    maxcv = abs(cv)
        maxtot = 0.0
        for q in range(nzero):
            lin = lz[q]
            i = lin % nx
            j = (lin // nx) % ny
            k = lin // (nx * ny)
            if not roi[i, j, k]:
                tot = -1.0
            else:
                data = -cvv[q] / maxcv if maxcv > 0 else 0.0
                tot = w_data * data
                if use_shape:
                    tot -= w_shape * shape_force_scalar(phi[i, j, k], psi[i, j, k],
                                                        lab_field[i, j, k], eps_h)
                if a != 0.0:
                    tot += a * curvature(phi, i, j, k)
            force[q] = tot
            if abs(tot) > maxtot:
                maxtot = abs(tot)
        step = dt / max(1.0, maxtot)
        # zero layer
        for q in range(nzero):
            lin = lz[q]
            i = lin % nx
            j = (lin // nx) % ny
            k = lin // (nx * ny)
            p = phi[i, j, k] + step * force[q]
            if not np.isfinite(p):
                return NONFINITE, it, c1, c2
            phi[i, j, k] = p
        _rebuild_band(phi, label)
    c1, c2, n1, n2 = region_means(phi, u, roi)
    return OK, n_iter, c1, c2
