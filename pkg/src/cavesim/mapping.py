"""Probabilistic voxel occupancy map with Bayesian updates and change tracking.

Storage is a dense log-odds grid over fixed bounds, presented through a
voxel-keyed interface: the observable behavior (per-voxel probability,
Free/Occupied/Unknown states, changed-cell sets) is what matters, not the
memory layout.  Endpoints of a scan receive a hit update, traversed voxels a
miss update, once per voxel per scan, with hits taking precedence.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import raycast
from .world import PointCloud, Pose


class VoxelState(IntEnum):
    UNKNOWN = 0
    FREE = 1
    OCCUPIED = 2


@dataclass
class OccupancyConfig:
    resolution: float = 0.5
    p_hit: float = 0.7
    p_miss: float = 0.4
    p_prior: float = 0.5
    clamp_min: float = 0.12
    clamp_max: float = 0.97
    max_integration_range: float = 8.0

    def validate(self) -> None:
        if self.resolution <= 0:
            raise ValueError("occupancy.resolution must be positive")
        if not (0 < self.p_miss < self.p_prior < self.p_hit < 1):
            raise ValueError(
                "occupancy probabilities must satisfy 0 < p_miss < p_prior < p_hit < 1"
            )
        if not (0 < self.clamp_min < self.p_prior < self.clamp_max < 1):
            raise ValueError(
                "occupancy clamps must satisfy 0 < clamp_min < p_prior < clamp_max < 1"
            )
        if self.max_integration_range <= 0:
            raise ValueError("occupancy.max_integration_range must be positive")


@dataclass
class UpdatedCells:
    """Voxels whose discrete state flipped in one integration, lex-sorted."""

    keys: np.ndarray  # (n, 3) int64

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)

    def __len__(self) -> int:
        return self.keys.shape[0]

    def as_set(self) -> set[tuple[int, int, int]]:
        return {tuple(k) for k in self.keys.tolist()}

    @staticmethod
    def empty() -> "UpdatedCells":
        return UpdatedCells(np.empty((0, 3), dtype=np.int64))


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def update_node_probability(
    prior: float, measurement_prob: float, history_prob: float
) -> float:
    """Recursive Bayes update for one voxel.

    Combines the instantaneous measurement probability with the accumulated
    probability so far, relative to the prior.  With a 0.5 prior this is
    exactly log-odds addition.  Inputs at 0 or 1 are rejected (division by
    zero in the odds ratios).
    """
    for name, v in (
        ("prior", prior),
        ("measurement_prob", measurement_prob),
        ("history_prob", history_prob),
    ):
        if not (0.0 < v < 1.0):
            raise ValueError(f"{name} must lie strictly inside (0, 1), got {v}")
    q = (
        (1.0 - measurement_prob)
        / measurement_prob
        * (1.0 - history_prob)
        / history_prob
        * prior
        / (1.0 - prior)
    )
    return 1.0 / (1.0 + q)


NEIGHBOR_OFFSETS = np.array(
    [
        (di, dj, dk)
        for di in (-1, 0, 1)
        for dj in (-1, 0, 1)
        for dk in (-1, 0, 1)
        if (di, dj, dk) != (0, 0, 0)
    ],
    dtype=np.int64,
)


def neighbors26(key) -> np.ndarray:
    """The 26 voxel keys adjacent to ``key`` (all offsets within one step)."""
    return np.asarray(key, dtype=np.int64) + NEIGHBOR_OFFSETS


class OccupancyMap:
    """Dense-backed occupancy grid over fixed bounds.

    Keys outside the bounds are permanently Unknown; integration clips rays
    at the bounds.  Mutation happens only in :meth:`integrate_scan`
    (single-writer); reads between integrations see a frozen state.
    """

    def __init__(self, cfg: OccupancyConfig, bounds_min, bounds_max):
        cfg.validate()
        self.cfg = cfg
        res = cfg.resolution
        self.res = res
        self.origin = raycast.world_to_voxel(np.asarray(bounds_min, dtype=np.float64), res)
        hi = np.ceil(np.asarray(bounds_max, dtype=np.float64) / res).astype(np.int64)
        self.shape = tuple((hi - self.origin).tolist())
        self._log = np.zeros(self.shape, dtype=np.float64)
        self._state = np.zeros(self.shape, dtype=np.int8)  # VoxelState values
        self._n_free = 0
        self._n_occ = 0
        self._l_hit = _logit(cfg.p_hit)
        self._l_miss = _logit(cfg.p_miss)
        self._l_prior = _logit(cfg.p_prior)
        self._l_min = _logit(cfg.clamp_min)
        self._l_max = _logit(cfg.clamp_max)

    # -- key helpers -------------------------------------------------------

    def _to_flat(self, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(flat_index, in_bounds_mask) for keys (n, 3)."""
        idx = keys - self.origin
        shape = np.asarray(self.shape)
        ok = np.all((idx >= 0) & (idx < shape), axis=1)
        flat = np.zeros(len(keys), dtype=np.int64)
        if np.any(ok):
            ii = idx[ok]
            flat[ok] = np.ravel_multi_index((ii[:, 0], ii[:, 1], ii[:, 2]), self.shape)
        return flat, ok

    def _from_flat(self, flat: np.ndarray) -> np.ndarray:
        ii = np.unravel_index(flat, self.shape)
        return np.stack(ii, axis=1) + self.origin

    def in_bounds(self, keys: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(np.asarray(keys, dtype=np.int64)) - self.origin
        return np.all((idx >= 0) & (idx < np.asarray(self.shape)), axis=1)

    # -- queries -----------------------------------------------------------

    def states_at(self, keys: np.ndarray) -> np.ndarray:
        """Vectorized state lookup; out-of-bounds keys are UNKNOWN."""
        keys = np.atleast_2d(np.asarray(keys, dtype=np.int64))
        flat, ok = self._to_flat(keys)
        out = np.zeros(len(keys), dtype=np.int8)
        out[ok] = self._state.ravel()[flat[ok]]
        return out

    def voxel_state(self, key) -> VoxelState:
        return VoxelState(int(self.states_at(np.asarray(key).reshape(1, 3))[0]))

    def probability(self, key) -> float:
        """Occupancy probability; the prior for never-observed voxels."""
        keys = np.asarray(key, dtype=np.int64).reshape(1, 3)
        flat, ok = self._to_flat(keys)
        if not ok[0]:
            return self.cfg.p_prior
        if self._state.ravel()[flat[0]] == VoxelState.UNKNOWN:
            return self.cfg.p_prior
        l = self._log.ravel()[flat[0]]
        return float(1.0 / (1.0 + np.exp(-l)))

    def observed_keys(self) -> np.ndarray:
        return np.argwhere(self._state != VoxelState.UNKNOWN) + self.origin

    def counts(self) -> tuple[int, int]:
        """(free, occupied) voxel counts, maintained incrementally."""
        return self._n_free, self._n_occ

    def state_grid(self) -> np.ndarray:
        """Read-only view of the dense state array (int8 VoxelState values)."""
        v = self._state.view()
        v.setflags(write=False)
        return v

    def snapshot(self) -> "MapSnapshot":
        return MapSnapshot(self)

    # -- integration -------------------------------------------------------

    def integrate_scan(self, cloud: PointCloud, sensor_pose: Pose) -> UpdatedCells:
        """Carve one scan into the map and report state flips.

        Endpoint voxels get a hit update; every other voxel on each ray gets
        a miss update.  Rays are truncated at ``max_integration_range`` and
        at the map bounds, in which case they carve free space only.
        Log-odds are clamped to the configured interval.
        """
        if len(cloud) == 0:
            return UpdatedCells.empty()
        c, s = np.cos(sensor_pose.yaw), np.sin(sensor_pose.yaw)
        rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        pts_world = cloud.points @ rz.T + sensor_pose.position

        origin = sensor_pose.position
        vec = pts_world - origin
        rng_full = np.linalg.norm(vec, axis=1)
        keep = rng_full > 1e-12
        vec, rng_full = vec[keep], rng_full[keep]
        if vec.shape[0] == 0:
            return UpdatedCells.empty()

        # Truncate by range, then clip at the map bounds (both carve-only).
        scale = np.minimum(1.0, self.cfg.max_integration_range / rng_full)
        lo = self.origin * self.res
        hi = (self.origin + np.asarray(self.shape)) * self.res
        eps = 1e-9
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = (lo + eps - origin) / vec
            t_hi = (hi - eps - origin) / vec
        t_exit = np.where(vec > 0, t_hi, np.where(vec < 0, t_lo, np.inf)).min(axis=1)
        t_end = np.minimum(scale, np.maximum(t_exit, 0.0))
        is_hit = t_end >= scale - 1e-12
        is_hit &= scale >= 1.0 - 1e-12
        endpoints = origin + vec * t_end[:, None]

        from . import _kernels

        flat, end_flat = _kernels.traverse_to_flat(
            np.ascontiguousarray(origin),
            np.ascontiguousarray(endpoints),
            self.res,
            int(self.origin[0]),
            int(self.origin[1]),
            int(self.origin[2]),
            self.shape[0],
            self.shape[1],
            self.shape[2],
        )
        ends = end_flat[is_hit & (end_flat >= 0)]
        hit_flat = np.unique(ends)
        miss_flat = np.setdiff1d(np.unique(flat), hit_flat, assume_unique=True)

        touched = np.concatenate([hit_flat, miss_flat])
        if touched.size == 0:
            return UpdatedCells.empty()
        log = self._log.ravel()
        state = self._state.ravel()
        before = state[touched].copy()

        # First observation starts from the prior; each update adds the
        # measurement log-odds relative to the prior (recursive Bayes form).
        log[touched[before == VoxelState.UNKNOWN]] = self._l_prior
        log[hit_flat] = np.clip(
            log[hit_flat] + self._l_hit - self._l_prior, self._l_min, self._l_max
        )
        log[miss_flat] = np.clip(
            log[miss_flat] + self._l_miss - self._l_prior, self._l_min, self._l_max
        )
        after = np.where(log[touched] > self._l_prior, VoxelState.OCCUPIED, VoxelState.FREE)
        state[touched] = after

        self._n_free += int((after == VoxelState.FREE).sum()) - int(
            (before == VoxelState.FREE).sum()
        )
        self._n_occ += int((after == VoxelState.OCCUPIED).sum()) - int(
            (before == VoxelState.OCCUPIED).sum()
        )

        flips = touched[before != after]
        keys_out = self._from_flat(np.sort(flips))
        return UpdatedCells(keys_out)

    def mark_free_sphere(self, center, radius: float) -> UpdatedCells:
        """Write never-observed voxels within a sphere as free (one miss).

        Realizes the assumed-known bubble around the vehicle: the flight
        envelope it occupies is free by the fact of collision-free flight,
        and the sensor's vertical blind cone can never observe it.  Voxels
        with any recorded evidence are left untouched.
        """
        center = np.asarray(center, dtype=np.float64)
        r_vox = int(np.ceil(radius / self.res))
        c_key = raycast.world_to_voxel(center, self.res)
        lo = np.maximum(c_key - r_vox - self.origin, 0)
        hi = np.minimum(c_key + r_vox + 1 - self.origin, np.asarray(self.shape))
        if np.any(lo >= hi):
            return UpdatedCells.empty()
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        ii, jj, kk = np.meshgrid(
            *[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"
        )
        centers = (np.stack([ii, jj, kk], axis=-1) + self.origin + 0.5) * self.res
        inside = np.sum((centers - center) ** 2, axis=-1) <= radius * radius
        unknown = self._state[sl] == VoxelState.UNKNOWN
        pick = inside & unknown
        if not np.any(pick):
            return UpdatedCells.empty()
        self._log[sl][pick] = self._l_miss  # prior + one miss of evidence
        block = self._state[sl]
        block[pick] = VoxelState.FREE
        self._state[sl] = block
        self._n_free += int(pick.sum())
        keys = np.stack([ii[pick], jj[pick], kk[pick]], axis=1) + self.origin
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        return UpdatedCells(keys[order])

    # -- persistence -------------------------------------------------------

    def save_text(self, path: str) -> None:
        """Text export: one known voxel per line ``i j k state prob``."""
        keys = self.observed_keys()
        flat, _ = self._to_flat(keys)
        st = self._state.ravel()[flat]
        pr = 1.0 / (1.0 + np.exp(-self._log.ravel()[flat]))
        with open(path, "w") as f:
            f.write("# cavesim-map v1\n")
            f.write(f"# res {self.res!r}\n")
            f.write(f"# origin {self.origin[0]} {self.origin[1]} {self.origin[2]}\n")
            f.write(f"# shape {self.shape[0]} {self.shape[1]} {self.shape[2]}\n")
            for k, s_, p_ in zip(keys, st, pr):
                f.write(f"{k[0]} {k[1]} {k[2]} {int(s_)} {float(p_)!r}\n")

    @classmethod
    def load_text(cls, path: str, cfg: OccupancyConfig) -> "OccupancyMap":
        header = {}
        rows = []
        with open(path) as f:
            for line in f:
                if line.startswith("#"):
                    parts = line[1:].split()
                    if len(parts) >= 2:
                        header[parts[0]] = parts[1:]
                elif line.strip():
                    rows.append(line.split())
        origin = np.array([int(v) for v in header["origin"]], dtype=np.int64)
        shape = tuple(int(v) for v in header["shape"])
        m = cls.__new__(cls)
        m.cfg = cfg
        m.res = float(header["res"][0])
        m.origin = origin
        m.shape = shape
        m._log = np.zeros(shape, dtype=np.float64)
        m._state = np.zeros(shape, dtype=np.int8)
        m._l_hit = _logit(cfg.p_hit)
        m._l_miss = _logit(cfg.p_miss)
        m._l_prior = _logit(cfg.p_prior)
        m._l_min = _logit(cfg.clamp_min)
        m._l_max = _logit(cfg.clamp_max)
        m._n_free = 0
        m._n_occ = 0
        if rows:
            arr = np.array([[float(v) for v in r] for r in rows])
            keys = arr[:, :3].astype(np.int64)
            idx = keys - origin
            p = arr[:, 4]
            m._log[idx[:, 0], idx[:, 1], idx[:, 2]] = np.log(p / (1 - p))
            m._state[idx[:, 0], idx[:, 1], idx[:, 2]] = arr[:, 3].astype(np.int8)
            m._n_free = int((m._state == VoxelState.FREE).sum())
            m._n_occ = int((m._state == VoxelState.OCCUPIED).sum())
        return m


class MapSnapshot:
    """Read-only view of a map for planning and frontier queries.

    The mission loop is tick-sequential: the map mutates only between
    snapshot consumers, so a view (no copy) provides snapshot semantics.
    """

    def __init__(self, src: OccupancyMap):
        self.res = src.res
        self.origin = src.origin
        self.shape = src.shape
        self.cfg = src.cfg
        self._src = src

    def states_at(self, keys: np.ndarray) -> np.ndarray:
        return self._src.states_at(keys)

    def state_grid(self) -> np.ndarray:
        return self._src.state_grid()

    def observed_keys(self) -> np.ndarray:
        return self._src.observed_keys()

    def counts(self) -> tuple[int, int]:
        return self._src.counts()
