"""Ground-truth cave geometry and a synthetic 3D lidar.

The world is a dense boolean voxel grid: everything inside the bounds is
solid rock except the tunnel network carved by the generator.  Geometry is
immutable after generation and all sensing is a pure function of
(pose, seed state), so missions replay bit-identically.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import raycast


@dataclass
class Pose:
    """Position in meters plus heading (yaw, rad)."""

    position: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)


@dataclass
class TubeParams:
    """Procedural tube generator knobs.

    ``length_m`` is the arc length of the main tunnel; side tunnels are added
    on top of it.  All carving happens with overlapping spheres along a
    random-walk centerline, which keeps the free space connected by
    construction.
    """

    length_m: float = 150.0
    radius_min: float = 1.6
    radius_max: float = 3.2
    branch_count: int = 2
    dead_end_count: int = 2
    res: float = 0.5
    step_m: float = 0.5          # centerline sample spacing
    turn_sigma: float = 0.06     # rad of heading change per step (azimuth)
    climb_sigma: float = 0.02    # rad of pitch change per step
    z_extent: float = 2.0        # soft bound on centerline altitude
    radius_wavelength: float = 25.0
    roughness: float = 0.12      # relative radius jitter per carve sphere
    margin_voxels: int = 2

    def validate(self) -> None:
        if self.length_m <= 0:
            raise ValueError("world.length_m must be positive")
        if self.res <= 0:
            raise ValueError("world.res must be positive")
        if not (0 < self.radius_min <= self.radius_max):
            raise ValueError("world.radius_min/radius_max must satisfy 0 < min <= max")
        if self.branch_count < 0 or self.dead_end_count < 0:
            raise ValueError("world branch/dead-end counts must be >= 0")
        if self.step_m <= 0:
            raise ValueError("world.step_m must be positive")


@dataclass
class SensorSpec:
    """Spinning multi-ring lidar model (VLP-16-like defaults)."""

    h_fov: float = 2.0 * np.pi
    v_fov: float = np.deg2rad(30.0)
    rings: int = 16
    rays_per_ring: int = 360
    max_range: float = 8.0
    noise_sigma: float = 0.0

    def validate(self) -> None:
        if not (0 < self.v_fov <= np.pi):
            raise ValueError("sensor.v_fov must be in (0, pi]")
        if not (0 < self.h_fov <= 2 * np.pi + 1e-12):
            raise ValueError("sensor.h_fov must be in (0, 2*pi]")
        if self.max_range <= 0:
            raise ValueError("sensor.max_range must be positive")
        if self.rings < 1 or self.rays_per_ring < 1:
            raise ValueError("sensor.rings and rays_per_ring must be >= 1")

    def ray_directions(self) -> np.ndarray:
        """Unit directions for one scan, in the sensor frame (x forward, z up)."""
        if self.rings == 1:
            elev = np.array([0.0])
        else:
            elev = np.linspace(-self.v_fov / 2.0, self.v_fov / 2.0, self.rings)
        full_circle = abs(self.h_fov - 2 * np.pi) < 1e-9
        if full_circle:
            az = -self.h_fov / 2.0 + self.h_fov * np.arange(self.rays_per_ring) / self.rays_per_ring
        elif self.rays_per_ring == 1:
            az = np.array([0.0])
        else:
            az = np.linspace(-self.h_fov / 2.0, self.h_fov / 2.0, self.rays_per_ring)
        ee, aa = np.meshgrid(elev, az, indexing="ij")
        ce = np.cos(ee)
        return np.stack(
            [ce * np.cos(aa), ce * np.sin(aa), np.sin(ee)], axis=-1
        ).reshape(-1, 3)


@dataclass
class PointCloud:
    """Hit points relative to the sensor origin (sensor frame), plus sim time."""

    points: np.ndarray
    stamp: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class WorldGeometry:
    """Immutable dense voxel world.

    ``solid`` is indexed by voxel index minus ``origin``; voxels outside the
    array are empty space (the generator pads the tunnel with solid margin,
    so rays escaping the bounds have already left the cave).
    """

    res: float
    origin: np.ndarray          # voxel index of solid[0,0,0]
    solid: np.ndarray           # bool (nx, ny, nz)
    spawn: Pose
    seed: int | None = None
    params: TubeParams | None = None
    _free_count: int = field(default=-1, repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.int64)
        self.solid.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.solid.shape

    @property
    def bounds_min(self) -> np.ndarray:
        return self.origin * self.res

    @property
    def bounds_max(self) -> np.ndarray:
        return (self.origin + np.asarray(self.shape)) * self.res

    def contains(self, position: np.ndarray) -> bool:
        p = np.asarray(position, dtype=np.float64)
        return bool(np.all(p >= self.bounds_min) and np.all(p < self.bounds_max))

    def is_solid_key(self, keys: np.ndarray) -> np.ndarray:
        """Solid lookup for voxel keys (n, 3); out-of-bounds is empty."""
        keys = np.atleast_2d(np.asarray(keys, dtype=np.int64))
        idx = keys - self.origin
        shape = np.asarray(self.shape)
        ok = np.all((idx >= 0) & (idx < shape), axis=1)
        out = np.zeros(len(keys), dtype=bool)
        if np.any(ok):
            ii = idx[ok]
            out[ok] = self.solid[ii[:, 0], ii[:, 1], ii[:, 2]]
        return out

    def free_voxel_count(self) -> int:
        if self._free_count < 0:
            object.__setattr__(self, "_free_count", int((~self.solid).sum()))
        return self._free_count

    def solid_keys(self) -> np.ndarray:
        return np.argwhere(self.solid) + self.origin

    def reachable_free_keys(self) -> np.ndarray:
        """Free voxels flood-fill connected (6-neighborhood) to the spawn voxel."""
        labels, _ = ndimage.label(~self.solid)
        sk = raycast.world_to_voxel(self.spawn.position, self.res) - self.origin
        lab = labels[sk[0], sk[1], sk[2]]
        return np.argwhere(labels == lab) + self.origin


def _heading(az: float, el: float) -> np.ndarray:
    return np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def _walk_centerline(
    rng: np.random.Generator,
    start: np.ndarray,
    az0: float,
    el0: float,
    length: float,
    p: TubeParams,
) -> np.ndarray:
    n = max(2, int(round(length / p.step_m)) + 1)
    pts = np.empty((n, 3))
    pts[0] = start
    az, el = az0, el0
    for i in range(1, n):
        az += rng.normal(0.0, p.turn_sigma)
        az = float(np.clip(az, az0 - 0.9, az0 + 0.9))
        el += rng.normal(0.0, p.climb_sigma)
        el = float(np.clip(el, -0.15, 0.15))
        # Pull the centerline back toward z=0 so tubes stay desk-scale flat.
        if abs(pts[i - 1, 2] - start[2]) > p.z_extent:
            el = -0.1 * np.sign(pts[i - 1, 2] - start[2])
        pts[i] = pts[i - 1] + p.step_m * _heading(az, el)
    return pts


def generate_tube(seed: int, params: TubeParams | None = None) -> WorldGeometry:
    """Carve a branching lava-tube-like tunnel network from solid rock.

    Deterministic for a fixed ``(seed, params)`` pair.  The main tunnel runs
    roughly along +x; branches and dead-end stubs fork off interior points.
    Free space is a union of overlapping carve spheres and therefore
    connected, with the spawn voxel at the tunnel entrance.
    """
    p = params or TubeParams()
    p.validate()
    rng = np.random.default_rng(seed)

    lines = [_walk_centerline(rng, np.zeros(3), 0.0, 0.0, p.length_m, p)]
    main = lines[0]

    def _fork(length: float) -> None:
        i = int(rng.integers(len(main) // 4, 3 * len(main) // 4))
        base = main[i]
        side = 1.0 if rng.random() < 0.5 else -1.0
        az = side * rng.uniform(np.deg2rad(50), np.deg2rad(120))
        lines.append(_walk_centerline(rng, base, az, 0.0, length, p))

    for _ in range(p.branch_count):
        _fork(rng.uniform(0.2, 0.35) * p.length_m)
    for _ in range(p.dead_end_count):
        _fork(rng.uniform(6.0, 15.0))

    centers = np.concatenate(lines, axis=0)
    # Smooth radius profile per sample plus bounded jitter for wall texture.
    arc = np.concatenate([np.arange(len(l)) * p.step_m for l in lines])
    base_r = p.radius_min + (p.radius_max - p.radius_min) * (
        0.5 + 0.5 * np.sin(2 * np.pi * arc / p.radius_wavelength + rng.uniform(0, 2 * np.pi))
    )
    radii = np.clip(
        base_r * (1.0 + p.roughness * rng.standard_normal(len(centers))),
        p.radius_min,
        p.radius_max,
    )

    res = p.res
    m = p.margin_voxels
    lo = raycast.world_to_voxel(centers - radii[:, None], res).min(axis=0) - m
    hi = raycast.world_to_voxel(centers + radii[:, None], res).max(axis=0) + m + 1
    shape = hi - lo
    solid = np.ones(shape, dtype=bool)

    grid_offset = lo
    for c, r in zip(centers, radii):
        k0 = raycast.world_to_voxel(c - r, res) - grid_offset
        k1 = raycast.world_to_voxel(c + r, res) - grid_offset + 1
        k0 = np.maximum(k0, 0)
        k1 = np.minimum(k1, shape)
        sl = tuple(slice(a, b) for a, b in zip(k0, k1))
        ii, jj, kk = np.meshgrid(
            *[np.arange(a, b) for a, b in zip(k0, k1)], indexing="ij"
        )
        cc = (np.stack([ii, jj, kk], axis=-1) + grid_offset + 0.5) * res
        mask = np.sum((cc - c) ** 2, axis=-1) <= r * r
        solid[sl] &= ~mask

    spawn_pos = centers[0].copy()
    spawn_key = raycast.world_to_voxel(spawn_pos, res) - grid_offset
    if solid[spawn_key[0], spawn_key[1], spawn_key[2]]:
        raise RuntimeError("generator invariant violated: spawn voxel is solid")
    heading0 = main[1] - main[0]
    yaw0 = float(np.arctan2(heading0[1], heading0[0]))

    return WorldGeometry(
        res=res, origin=grid_offset, solid=solid,
        spawn=Pose(spawn_pos, yaw0), seed=seed, params=p,
    )


def world_from_solid_keys(
    keys: np.ndarray, res: float, spawn: Pose, margin: int = 0
) -> WorldGeometry:
    """Build a world from explicit solid voxel indices (tests, file loads)."""
    keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    if len(keys) == 0:
        origin = np.zeros(3, dtype=np.int64)
        solid = np.zeros((1, 1, 1), dtype=bool)
        return WorldGeometry(res=res, origin=origin, solid=solid, spawn=spawn)
    lo = keys.min(axis=0) - margin
    hi = keys.max(axis=0) + margin + 1
    solid = np.zeros(tuple(hi - lo), dtype=bool)
    idx = keys - lo
    solid[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return WorldGeometry(res=res, origin=lo, solid=solid, spawn=spawn)


def cast_ray(
    world: WorldGeometry, origin: np.ndarray, direction: np.ndarray, max_range: float
) -> float | None:
    """Distance to the first solid voxel boundary along the ray, or None."""
    return raycast.cast_ray(
        origin, direction, max_range, world.solid, world.origin, world.res
    )


# Hit points are nudged this far inside the struck voxel so that the
# endpoint voxelizes onto the solid voxel instead of the face between it
# and the last free voxel.
_HIT_NUDGE_FRAC = 1e-3


def simulate_lidar(
    pose: Pose,
    spec: SensorSpec,
    world: WorldGeometry,
    rng: np.random.Generator,
) -> PointCloud:
    """One full scan from ``pose``: one ray per (ring, azimuth) sample.

    Hits become points in the sensor frame (x along heading) with optional
    Gaussian range noise truncated at 3 sigma; misses are omitted.
    """
    if not world.contains(pose.position):
        raise ValueError("sensor pose lies outside the world bounds")
    dirs_sensor = spec.ray_directions()
    c, s = np.cos(pose.yaw), np.sin(pose.yaw)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    dirs_world = dirs_sensor @ rz.T

    dist = raycast.batch_cast(
        pose.position, dirs_world, spec.max_range, world.solid, world.origin, world.res
    )
    hit = np.isfinite(dist)
    d = dist[hit] + _HIT_NUDGE_FRAC * world.res
    if spec.noise_sigma > 0:
        noise = rng.normal(0.0, spec.noise_sigma, size=d.shape)
        d = d + np.clip(noise, -3 * spec.noise_sigma, 3 * spec.noise_sigma)
        d = np.maximum(d, 0.1 * world.res)
    return PointCloud(points=dirs_sensor[hit] * d[:, None])


def save_world(world: WorldGeometry, path: str) -> None:
    """Text export: header (resolution, bounds, spawn), one solid voxel per line."""
    keys = world.solid_keys()
    with open(path, "w") as f:
        f.write("# cavesim-world v1\n")
        f.write(f"# res {world.res!r}\n")
        f.write(f"# origin {world.origin[0]} {world.origin[1]} {world.origin[2]}\n")
        f.write(f"# shape {world.shape[0]} {world.shape[1]} {world.shape[2]}\n")
        sp = world.spawn
        f.write(
            f"# spawn {float(sp.position[0])!r} {float(sp.position[1])!r}"
            f" {float(sp.position[2])!r} {float(sp.yaw)!r}\n"
        )
        np.savetxt(f, keys, fmt="%d")


def load_world(path: str) -> WorldGeometry:
    header: dict[str, list[str]] = {}
    body = io.StringIO()
    with open(path) as f:
        for line in f:
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) >= 2:
                    header[parts[0]] = parts[1:]
            else:
                body.write(line)
    res = float(header["res"][0])
    origin = np.array([int(v) for v in header["origin"]], dtype=np.int64)
    shape = tuple(int(v) for v in header["shape"])
    sp = [float(v) for v in header["spawn"]]
    spawn = Pose(np.array(sp[:3]), sp[3])
    body.seek(0)
    keys = np.loadtxt(body, dtype=np.int64).reshape(-1, 3)
    solid = np.zeros(shape, dtype=bool)
    idx = keys - origin
    solid[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return WorldGeometry(res=res, origin=origin, solid=solid, spawn=spawn)
