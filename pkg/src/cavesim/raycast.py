"""Exact voxel traversal and ray casting on axis-aligned voxel grids.

All functions use the convention ``voxel(i,j,k) = [i*res, (i+1)*res) x ...``,
i.e. a world point maps to the voxel ``floor(p / res)``.  Traversal is the
classic incremental grid walk (step one voxel face at a time, advancing the
axis with the nearest boundary crossing), which visits exactly the voxels the
segment passes through.  Ties at voxel corners are broken by axis order
(x, then y, then z) and are measure-zero for generic rays.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-12


def world_to_voxel(points: np.ndarray, res: float) -> np.ndarray:
    """Map world positions (…, 3) to integer voxel indices."""
    return np.floor(np.asarray(points, dtype=np.float64) / res).astype(np.int64)


def voxel_center(keys: np.ndarray, res: float) -> np.ndarray:
    """Center position of voxel indices (…, 3)."""
    return (np.asarray(keys, dtype=np.float64) + 0.5) * res


def cast_ray(
    origin: np.ndarray,
    direction: np.ndarray,
    max_range: float,
    solid: np.ndarray,
    grid_origin: np.ndarray,
    res: float,
) -> float | None:
    """Cast a single ray against a dense boolean solid grid.

    Args:
        origin: world position (3,).
        direction: unit vector (3,); must have norm 1 within 1e-9.
        max_range: maximum travel distance in meters.
        solid: bool array (nx, ny, nz), True where rock.
        grid_origin: voxel index (3,) of solid[0, 0, 0].
        res: voxel edge length in meters.

    Returns:
        Distance to the first solid voxel boundary, or None on a miss.
        A ray starting inside a solid voxel hits at distance 0.
    """
    direction = np.asarray(direction, dtype=np.float64)
    norm = float(np.linalg.norm(direction))
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"direction must be a unit vector, got norm {norm}")
    origin = np.asarray(origin, dtype=np.float64)
    grid_origin = np.asarray(grid_origin, dtype=np.int64)
    shape = np.asarray(solid.shape, dtype=np.int64)

    idx = world_to_voxel(origin, res) - grid_origin

    def _is_solid(ix: np.ndarray) -> bool:
        if np.any(ix < 0) or np.any(ix >= shape):
            return False
        return bool(solid[ix[0], ix[1], ix[2]])

    if _is_solid(idx):
        return 0.0

    step = np.where(direction > 0, 1, np.where(direction < 0, -1, 0)).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t_delta = np.where(step != 0, res / np.abs(direction), np.inf)
        next_boundary = (grid_origin + idx + (step > 0)) * res
        t_max = np.where(step != 0, (next_boundary - origin) / direction, np.inf)

    while True:
        axis = int(np.argmin(t_max))
        t_enter = float(t_max[axis])
        if t_enter > max_range:
            return None
        idx[axis] += step[axis]
        if idx[axis] < 0 or idx[axis] >= shape[axis]:
            # No solids exist outside the grid; check whether the ray can
            # still re-enter on the remaining axes, otherwise miss.
            if (step[axis] > 0 and idx[axis] >= shape[axis]) or (
                step[axis] < 0 and idx[axis] < 0
            ):
                return None
        elif _is_solid(idx) and np.all(idx >= 0) and np.all(idx < shape):
            return t_enter
        t_max[axis] += t_delta[axis]


def batch_cast(
    origin: np.ndarray,
    directions: np.ndarray,
    max_range: float,
    solid: np.ndarray,
    grid_origin: np.ndarray,
    res: float,
) -> np.ndarray:
    """Cast many rays from one origin (compiled inner loop).

    Returns per-ray hit distances, np.inf on miss.  Semantics identical to
    :func:`cast_ray` for generic rays.
    """
    from . import _kernels

    directions = np.ascontiguousarray(directions, dtype=np.float64)
    origin = np.ascontiguousarray(origin, dtype=np.float64)
    grid_origin = np.asarray(grid_origin, dtype=np.int64)
    return _kernels.cast_rays(
        origin,
        directions,
        float(max_range),
        solid,
        int(grid_origin[0]),
        int(grid_origin[1]),
        int(grid_origin[2]),
        float(res),
    )


def segment_voxels(p0: np.ndarray, p1: np.ndarray, res: float) -> np.ndarray:
    """All voxels visited by the segment p0 -> p1, in order, inclusive.

    Exact: enumerates the parameters at which the segment crosses voxel
    face planes and reads off the voxel between consecutive crossings.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    d = p1 - p0
    ts = [0.0, 1.0]
    for a in range(3):
        if abs(d[a]) < _EPS:
            continue
        k0 = int(np.floor(min(p0[a], p1[a]) / res))
        k1 = int(np.ceil(max(p0[a], p1[a]) / res))
        for k in range(k0, k1 + 1):
            t = (k * res - p0[a]) / d[a]
            if 0.0 < t < 1.0:
                ts.append(t)
    ts = np.unique(np.asarray(ts))
    mids = p0 + np.outer((ts[:-1] + ts[1:]) / 2.0, d)
    keys = world_to_voxel(mids, res)
    # Endpoints exactly on a voxel face belong to the floor-convention voxel
    # even when the segment's overlap with it is measure zero.
    k0 = world_to_voxel(p0, res)[None, :]
    k1 = world_to_voxel(p1, res)[None, :]
    keys = np.concatenate([k0, keys, k1], axis=0)
    # Consecutive mids can map to the same voxel when crossings coincide.
    keep = np.ones(len(keys), dtype=bool)
    keep[1:] = np.any(keys[1:] != keys[:-1], axis=1)
    return keys[keep]


def batch_traverse(origin: np.ndarray, endpoints: np.ndarray, res: float):
    """Voxels visited by segments from one origin to many endpoints.

    Returns ``(ray_idx, keys)`` where ``keys`` is (m, 3) int64 and
    ``ray_idx`` assigns each visited voxel to its segment.  Each segment's
    voxels include both the origin voxel and the endpoint voxel.
    """
    endpoints = np.asarray(endpoints, dtype=np.float64)
    n = endpoints.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64), np.empty((0, 3), dtype=np.int64)
    origin = np.asarray(origin, dtype=np.float64)
    d = endpoints - origin

    cur = np.tile(world_to_voxel(origin, res), (n, 1))
    end = world_to_voxel(endpoints, res)

    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t_delta = np.where(step != 0, res / np.abs(d), np.inf)
        next_boundary = (cur + (step > 0)) * res
        t_max = np.where(step != 0, (next_boundary - origin) / d, np.inf)
    # An axis that has reached its endpoint index must not step again; this
    # pins termination at exactly the endpoint voxel under float rounding.
    t_max[cur == end] = np.inf

    out_idx = [np.arange(n, dtype=np.int64)]
    out_keys = [cur.copy()]

    active = np.any(cur != end, axis=1)
    max_iters = int(np.abs(end - cur).sum(axis=1).max()) + 3
    rows = np.arange(n)
    for _ in range(max_iters):
        if not np.any(active):
            break
        axis = np.argmin(t_max, axis=1)
        adv = active
        cur[adv, axis[adv]] += step[adv, axis[adv]]
        t_max[adv, axis[adv]] += t_delta[adv, axis[adv]]
        done_axis = adv & (cur[rows, axis] == end[rows, axis])
        t_max[done_axis, axis[done_axis]] = np.inf
        out_idx.append(rows[adv].copy())
        out_keys.append(cur[adv].copy())
        active = adv & np.any(cur != end, axis=1)

    return np.concatenate(out_idx), np.concatenate(out_keys, axis=0)
