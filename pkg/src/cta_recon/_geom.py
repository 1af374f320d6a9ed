"""Numba kernel for exact point-to-polyline projection."""
import numpy as np
from numba import njit


@njit(cache=True)
def polyline_projection_kernel(pts, line):
    n = pts.shape[0]
    m = line.shape[0]
    dist = np.empty(n)
    arc = np.zeros(n)
    # -1 / +1 when the closest point is the first / last vertex
    end = np.zeros(n, dtype=np.int8)
    cum = np.zeros(m)
    for s in range(m - 1):
        d = 0.0
        for e in range(3):
            d += (line[s + 1, e] - line[s, e]) ** 2
        cum[s + 1] = cum[s] + np.sqrt(d)
    for p in range(n):
        best = np.inf
        best_s = 0.0
        best_end = 0
        for s in range(m - 1):
            dx = line[s + 1, 0] - line[s, 0]
            dy = line[s + 1, 1] - line[s, 1]
            dz = line[s + 1, 2] - line[s, 2]
            rx = pts[p, 0] - line[s, 0]
            ry = pts[p, 1] - line[s, 1]
            rz = pts[p, 2] - line[s, 2]
            dd = dx * dx + dy * dy + dz * dz
            t = 0.0
            if dd > 0.0:
                t = (rx * dx + ry * dy + rz * dz) / dd
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            ex = rx - t * dx
            ey = ry - t * dy
            ez = rz - t * dz
            d2 = ex * ex + ey * ey + ez * ez
            if d2 < best:
                best = d2
                best_s = cum[s] + t * (cum[s + 1] - cum[s])
                best_end = 0
                if s == 0 and t == 0.0:
                    best_end = -1
                elif s == m - 2 and t == 1.0:
                    best_end = 1
                    best_s = cum[m - 1]
        dist[p] = np.sqrt(best)
        arc[p] = best_s
        end[p] = best_end
    return dist, arc, end
