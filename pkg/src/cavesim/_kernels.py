"""JIT-compiled inner loops: ray casting, scan traversal, controller cost.

Pure-python reference implementations of the same traversal semantics live
in :mod:`cavesim.raycast` (and serve as test oracles); these kernels exist
because the mission loop runs them thousands of times per second.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def cast_rays(origin, dirs, max_range, solid, gx, gy, gz, res):
    """Per-ray grid walk against a dense solid grid; inf marks a miss."""
    n = dirs.shape[0]
    out = np.full(n, np.inf)
    nx, ny, nz = solid.shape
    ox = math.floor(origin[0] / res) - gx
    oy = math.floor(origin[1] / res) - gy
    oz = math.floor(origin[2] / res) - gz
    for r in range(n):
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix, iy, iz = ox, oy, oz
        if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz and solid[ix, iy, iz]:
            out[r] = 0.0
            continue
        sx = 1 if dx > 0 else (-1 if dx < 0 else 0)
        sy = 1 if dy > 0 else (-1 if dy < 0 else 0)
        sz = 1 if dz > 0 else (-1 if dz < 0 else 0)
        big = 1.0e300
        tdx = res / abs(dx) if sx != 0 else big
        tdy = res / abs(dy) if sy != 0 else big
        tdz = res / abs(dz) if sz != 0 else big
        bx = (gx + ix + (1 if sx > 0 else 0)) * res
        by = (gy + iy + (1 if sy > 0 else 0)) * res
        bz = (gz + iz + (1 if sz > 0 else 0)) * res
        tx = (bx - origin[0]) / dx if sx != 0 else big
        ty = (by - origin[1]) / dy if sy != 0 else big
        tz = (bz - origin[2]) / dz if sz != 0 else big
        while True:
            if tx <= ty and tx <= tz:
                t = tx
                ix += sx
                tx += tdx
                if ix < 0 or ix >= nx:
                    if (sx > 0 and ix >= nx) or (sx < 0 and ix < 0):
                        break
                    continue
            elif ty <= tz:
                t = ty
                iy += sy
                ty += tdy
                if iy < 0 or iy >= ny:
                    if (sy > 0 and iy >= ny) or (sy < 0 and iy < 0):
                        break
                    continue
            else:
                t = tz
                iz += sz
                tz += tdz
                if iz < 0 or iz >= nz:
                    if (sz > 0 and iz >= nz) or (sz < 0 and iz < 0):
                        break
                    continue
            if t > max_range:
                break
            if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz and solid[ix, iy, iz]:
                out[r] = t
                break
    return out


@njit(cache=True)
def traverse_to_flat(origin, endpoints, res, gx, gy, gz, nx, ny, nz):
    """Flat in-bounds indices of all voxels on origin->endpoint segments.

    Returns ``(flats, end_flat)``: every visited voxel of every segment as a
    flat C-order index into the (nx, ny, nz) grid (out-of-bounds voxels are
    skipped), plus each segment's endpoint voxel (-1 when out of bounds).
    """
    n = endpoints.shape[0]
    ox = math.floor(origin[0] / res)
    oy = math.floor(origin[1] / res)
    oz = math.floor(origin[2] / res)

    # Worst-case visit count = sum of per-axis index spans + 1 per ray.
    total = 0
    for r in range(n):
        ex = math.floor(endpoints[r, 0] / res)
        ey = math.floor(endpoints[r, 1] / res)
        ez = math.floor(endpoints[r, 2] / res)
        total += abs(ex - ox) + abs(ey - oy) + abs(ez - oz) + 1

    flats = np.empty(total, dtype=np.int64)
    end_flat = np.empty(n, dtype=np.int64)
    m = 0
    for r in range(n):
        px, py, pz = origin[0], origin[1], origin[2]
        qx, qy, qz = endpoints[r, 0], endpoints[r, 1], endpoints[r, 2]
        dx, dy, dz = qx - px, qy - py, qz - pz
        ix, iy, iz = ox, oy, oz
        ex = math.floor(qx / res)
        ey = math.floor(qy / res)
        ez = math.floor(qz / res)

        sx = 1 if dx > 0 else (-1 if dx < 0 else 0)
        sy = 1 if dy > 0 else (-1 if dy < 0 else 0)
        sz = 1 if dz > 0 else (-1 if dz < 0 else 0)
        big = 1.0e300
        tdx = res / abs(dx) if sx != 0 else big
        tdy = res / abs(dy) if sy != 0 else big
        tdz = res / abs(dz) if sz != 0 else big
        tx = ((ix + (1 if sx > 0 else 0)) * res - px) / dx if sx != 0 else big
        ty = ((iy + (1 if sy > 0 else 0)) * res - py) / dy if sy != 0 else big
        tz = ((iz + (1 if sz > 0 else 0)) * res - pz) / dz if sz != 0 else big
        if ix == ex:
            tx = big
        if iy == ey:
            ty = big
        if iz == ez:
            tz = big

        lx, ly, lz = ix - gx, iy - gy, iz - gz
        if 0 <= lx < nx and 0 <= ly < ny and 0 <= lz < nz:
            flats[m] = (lx * ny + ly) * nz + lz
            m += 1
        guard = abs(ex - ix) + abs(ey - iy) + abs(ez - iz) + 3
        it = 0
        while (ix != ex or iy != ey or iz != ez) and it < guard:
            it += 1
            if tx <= ty and tx <= tz:
                ix += sx
                tx += tdx
                if ix == ex:
                    tx = big
            elif ty <= tz:
                iy += sy
                ty += tdy
                if iy == ey:
                    ty = big
            else:
                iz += sz
                tz += tdz
                if iz == ez:
                    tz = big
            lx, ly, lz = ix - gx, iy - gy, iz - gz
            if 0 <= lx < nx and 0 <= ly < ny and 0 <= lz < nz:
                flats[m] = (lx * ny + ly) * nz + lz
                m += 1
        lx, ly, lz = ex - gx, ey - gy, ez - gz
        if 0 <= lx < nx and 0 <= ly < ny and 0 <= lz < nz:
            end_flat[r] = (lx * ny + ly) * nz + lz
        else:
            end_flat[r] = -1
    return flats[:m], end_flat


@njit(cache=True)
def nmpc_cost_grad(
    u, x0, x_ref, u_prev, w_x, w_u, w_du, dphi_max, dtheta_max,
    dt, g, ax, ay, az, kphi, ktheta, tphi, ttheta, penalty,
):
    """Fused rollout + adjoint for the tracking objective in input space."""
    n = u.shape[0]
    xs = np.empty((n + 1, 8))
    for j in range(8):
        xs[0, j] = x0[j]
    cost = 0.0
    err2 = np.empty((n, 8))
    px, py, pz = x0[0], x0[1], x0[2]
    vx, vy, vz = x0[3], x0[4], x0[5]
    phi, theta = x0[6], x0[7]
    for i in range(n):
        T = u[i, 0]
        sp, cp = math.sin(phi), math.cos(phi)
        st, ct = math.sin(theta), math.cos(theta)
        px, py, pz = px + dt * vx, py + dt * vy, pz + dt * vz
        vx = vx + dt * (T * st * cp - ax * vx)
        vy = vy + dt * (-T * sp - ay * vy)
        vz = vz + dt * (T * ct * cp - g - az * vz)
        phi = phi + dt * (kphi * u[i, 1] - phi) / tphi
        theta = theta + dt * (ktheta * u[i, 2] - theta) / ttheta
        xs[i + 1, 0] = px
        xs[i + 1, 1] = py
        xs[i + 1, 2] = pz
        xs[i + 1, 3] = vx
        xs[i + 1, 4] = vy
        xs[i + 1, 5] = vz
        xs[i + 1, 6] = phi
        xs[i + 1, 7] = theta
        for j in range(8):
            e = xs[i + 1, j] - x_ref[j]
            cost += w_x[j] * e * e
            err2[i, j] = 2.0 * w_x[j] * e

    grad = np.zeros((n, 3))
    for i in range(n):
        for j in range(3):
            uref = g if j == 0 else 0.0
            d = u[i, j] - uref
            cost += w_u[j] * d * d
            grad[i, j] += 2.0 * w_u[j] * d
            prev = u_prev[j] if i == 0 else u[i - 1, j]
            dd = u[i, j] - prev
            cost += w_du[j] * dd * dd
            grad[i, j] += 2.0 * w_du[j] * dd
            if i > 0:
                grad[i - 1, j] -= 2.0 * w_du[j] * dd
            if penalty > 0.0 and j > 0:
                bound = dphi_max if j == 1 else dtheta_max
                over = abs(dd) - bound
                if over > 0.0:
                    cost += penalty * over * over
                    s = 1.0 if dd > 0 else -1.0
                    grad[i, j] += 2.0 * penalty * over * s
                    if i > 0:
                        grad[i - 1, j] -= 2.0 * penalty * over * s

    kph = dt * kphi / tphi
    kth = dt * ktheta / ttheta
    dph = 1.0 - dt / tphi
    dth = 1.0 - dt / ttheta
    l0 = l1 = l2 = l3 = l4 = l5 = l6 = l7 = 0.0
    for i in range(n - 1, -1, -1):
        m0, m1, m2 = l0 + err2[i, 0], l1 + err2[i, 1], l2 + err2[i, 2]
        m3, m4, m5 = l3 + err2[i, 3], l4 + err2[i, 4], l5 + err2[i, 5]
        m6, m7 = l6 + err2[i, 6], l7 + err2[i, 7]
        phi, theta = xs[i, 6], xs[i, 7]
        T = u[i, 0]
        sp, cp = math.sin(phi), math.cos(phi)
        st, ct = math.sin(theta), math.cos(theta)
        grad[i, 0] += dt * (st * cp * m3 - sp * m4 + ct * cp * m5)
        grad[i, 1] += kph * m6
        grad[i, 2] += kth * m7
        l0, l1, l2 = m0, m1, m2
        l3 = dt * m0 + (1.0 - dt * ax) * m3
        l4 = dt * m1 + (1.0 - dt * ay) * m4
        l5 = dt * m2 + (1.0 - dt * az) * m5
        l6 = dt * T * (-st * sp * m3 - cp * m4 - ct * sp * m5) + dph * m6
        l7 = dt * T * (ct * cp * m3 - st * cp * m5) + dth * m7
    return cost, grad
