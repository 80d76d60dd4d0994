"""Safe frontier detection, two-set classification, and candidate selection.

A frontier here is a Free voxel on the boundary of unmapped space: none of
its 26 neighbors may be Occupied (keeps goals out of confined gaps) and at
least ``n_req`` of them must still be Unknown.  Detected frontiers are split
into a directly accessible set D (inside the forward acceptance cone and
height band, reachable with minimal heading change) and an indirectly
accessible set I (everything else, candidates for global repositioning).

Selection prioritizes D by smallest heading change; when D is empty a
weighted cost over I plus the persistent global leftovers picks the
repositioning target.  Incremental bookkeeping re-examines only cells whose
state changed plus their neighborhoods, which keeps the maintained set equal
to a full-map scan at all times.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mapping import NEIGHBOR_OFFSETS, VoxelState

Key = tuple[int, int, int]


@dataclass
class ExplorationConfig:
    n_req: int = 5               # min Unknown neighbors for a frontier
    # Known-sphere radius and direct-access height band.  Chosen together
    # against the sensor geometry: with a +-15 deg vertical FOV, any cell at
    # distance >= 4.0 with |dh| <= 1.0 lies inside the observable elevation
    # band (atan(1.0 / sqrt(16 - 1)) ~= 14.5 deg), so directly accessible
    # frontiers always resolve as they are approached instead of parking in
    # the sensor's vertical blind cone.
    r_known: float = 4.0         # assumed-known sphere radius around the vehicle (m)
    theta_fov: float = np.deg2rad(90.0)  # horizontal acceptance cone (full angle)
    h_r: float = 1.0             # max |height difference| for direct access (m)
    w_alpha: float = 1.0
    w_h: float = 1.0
    w_d: float = 0.25

    def validate(self, sensor_range: float | None = None) -> None:
        if not (1 <= self.n_req <= 26):
            raise ValueError("exploration.n_req must be in [1, 26]")
        if self.r_known < 0:
            raise ValueError("exploration.r_known must be >= 0")
        if sensor_range is not None and self.r_known >= sensor_range:
            raise ValueError("exploration.r_known must be smaller than the sensor range")
        if not (0 < self.theta_fov <= 2 * np.pi):
            raise ValueError("exploration.theta_fov must be in (0, 2*pi]")
        if self.h_r <= 0:
            raise ValueError("exploration.h_r must be positive")
        w = (self.w_alpha, self.w_h, self.w_d)
        if any(v < 0 for v in w) or all(v == 0 for v in w):
            raise ValueError("exploration weights must be >= 0 and not all zero")


@dataclass
class Frontier:
    """One candidate cell with geometry relative to the current vehicle state."""

    key: Key
    position: np.ndarray  # voxel center, world frame
    alpha: float          # heading change to face it, in [0, pi]
    dist: float
    dh: float             # frontier height minus vehicle height

    def sort_key(self, primary: float):
        return (primary, self.dist, self.key)


@dataclass
class FrontierSets:
    """Classification output plus the persistent exploration bookkeeping."""

    D: list[Frontier] = field(default_factory=list)
    I: list[Frontier] = field(default_factory=list)
    leftover: dict[Key, Frontier] = field(default_factory=dict)
    inaccessible: set[Key] = field(default_factory=set)


@dataclass
class Selection:
    """Either a frontier to fly to, or exploration-complete (frontier=None)."""

    frontier: Frontier | None
    repositioning: bool = False

    @property
    def complete(self) -> bool:
        return self.frontier is None


def forward_direction(pos_prev, pos_now, previous=None) -> np.ndarray:
    """Unit motion direction; hovering keeps the previous heading.

    Displacements under 1e-6 m do not define a direction, so the previous
    forward vector (default +x) is retained.
    """
    d = np.asarray(pos_now, dtype=np.float64) - np.asarray(pos_prev, dtype=np.float64)
    n = float(np.linalg.norm(d))
    if n < 1e-6:
        if previous is None:
            return np.array([1.0, 0.0, 0.0])
        return np.asarray(previous, dtype=np.float64)
    return d / n


def frontier_angle(p_f: np.ndarray, v_fwd: np.ndarray) -> float:
    """Angle between the frontier vector and the motion direction, in [0, pi]."""
    p_f = np.asarray(p_f, dtype=np.float64)
    v_fwd = np.asarray(v_fwd, dtype=np.float64)
    np_f = float(np.linalg.norm(p_f))
    nv = float(np.linalg.norm(v_fwd))
    if np_f <= 0.0:
        raise ValueError("frontier vector must have positive length")
    c = float(np.dot(p_f, v_fwd) / (np_f * nv))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def repositioning_cost(f: Frontier, cfg: ExplorationConfig) -> float:
    """Weighted heading-change + height + distance cost for visiting ``f``."""
    return cfg.w_alpha * f.alpha + cfg.w_h * abs(f.dh) + cfg.w_d * f.dist


def classify_frontiers(
    frontiers, pose_position, v_fwd, cfg: ExplorationConfig,
    inaccessible: set[Key] | None = None,
) -> FrontierSets:
    """Partition valid frontiers into directly / indirectly accessible sets.

    Directly accessible: heading change at most theta_fov/2 (inclusive) and
    height difference within the h_r band.  Keys flagged inaccessible are
    excluded from both sets.
    """
    sets = FrontierSets(inaccessible=set(inaccessible or ()))
    half = cfg.theta_fov / 2.0
    for f in frontiers:
        if f.key in sets.inaccessible:
            continue
        if f.alpha <= half and abs(f.dh) <= cfg.h_r:
            sets.D.append(f)
        else:
            sets.I.append(f)
    return sets


def select_candidate(sets: FrontierSets, cfg: ExplorationConfig) -> Selection:
    """Pick the next goal: min-angle in D, else min-cost over I + leftovers.

    Ties break on (smaller distance, then lexicographic key) so a fixed set
    always yields the same choice.
    """
    if sets.D:
        best = min(sets.D, key=lambda f: f.sort_key(f.alpha))
        return Selection(best, repositioning=False)
    pool: dict[Key, Frontier] = {}
    for f in sets.I:
        pool[f.key] = f
    for k, f in sets.leftover.items():
        pool.setdefault(k, f)
    pool = {k: f for k, f in pool.items() if k not in sets.inaccessible}
    if pool:
        best = min(pool.values(), key=lambda f: f.sort_key(repositioning_cost(f, cfg)))
        return Selection(best, repositioning=True)
    return Selection(None)


def mark_inaccessible(sets: FrontierSets, key: Key) -> FrontierSets:
    """Remove a key the planner rejected from every set; remember the verdict."""
    key = tuple(int(v) for v in key)
    sets.D = [f for f in sets.D if f.key != key]
    sets.I = [f for f in sets.I if f.key != key]
    sets.leftover.pop(key, None)
    sets.inaccessible.add(key)
    return sets


class FrontierTracker:
    """Incrementally maintained set of structure-valid frontier cells.

    The structural rules (Free, no Occupied neighbor, enough Unknown
    neighbors) depend only on a cell and its 26-neighborhood, so after each
    integration only the changed cells and their neighborhoods can gain or
    lose frontier status.  The vehicle-relative rules (known-sphere radius,
    acceptance cone, height band) are applied per query, which keeps the
    maintained set equal to a brute-force scan for any vehicle position.
    """

    def __init__(self, cfg: ExplorationConfig):
        self.cfg = cfg
        self._cells: set[Key] = set()

    def __len__(self) -> int:
        return len(self._cells)

    def cells(self) -> set[Key]:
        return set(self._cells)

    def structure_frontier_mask(self, snap, keys: np.ndarray) -> np.ndarray:
        """Vectorized structural rule over candidate keys (n, 3)."""
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        if keys.shape[0] == 0:
            return np.zeros(0, dtype=bool)
        states = snap.states_at(keys)
        nbr = keys[:, None, :] + NEIGHBOR_OFFSETS[None, :, :]
        nstates = snap.states_at(nbr.reshape(-1, 3)).reshape(-1, 26)
        no_occ = ~np.any(nstates == VoxelState.OCCUPIED, axis=1)
        enough_unknown = (nstates == VoxelState.UNKNOWN).sum(axis=1) >= self.cfg.n_req
        return (states == VoxelState.FREE) & no_occ & enough_unknown

    def update(self, snap, changed_keys: np.ndarray) -> np.ndarray:
        """Re-evaluate changed cells and their neighborhoods.

        Returns the wavefront: the subset of the *changed* cells themselves
        that are now structure frontiers (the per-scan detection output).
        """
        changed_keys = np.asarray(changed_keys, dtype=np.int64).reshape(-1, 3)
        if changed_keys.shape[0] == 0:
            return changed_keys
        cand = np.concatenate(
            [changed_keys, (changed_keys[:, None, :] + NEIGHBOR_OFFSETS[None, :, :]).reshape(-1, 3)]
        )
        cand = np.unique(cand, axis=0)
        ok = self.structure_frontier_mask(snap, cand)
        for key, good in zip(map(tuple, cand.tolist()), ok.tolist()):
            if good:
                self._cells.add(key)
            else:
                self._cells.discard(key)
        wave = self.structure_frontier_mask(snap, changed_keys)
        return changed_keys[wave]

    def rescan(self, snap) -> None:
        """Full-map rebuild (tests and world reloads)."""
        self._cells.clear()
        keys = snap.observed_keys()
        ok = self.structure_frontier_mask(snap, keys)
        self._cells = {tuple(k) for k in keys[ok].tolist()}

    def materialize(self, res: float, pose_position, v_fwd, keys=None) -> list[Frontier]:
        """Frontier records outside the known sphere, with current geometry.

        ``keys`` restricts the output to a subset (e.g. the latest wavefront);
        unknown keys are ignored.  Defaults to the whole maintained set.
        """
        if keys is None:
            if not self._cells:
                return []
            keys = np.array(sorted(self._cells), dtype=np.int64)
        else:
            keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
            if keys.shape[0] == 0:
                return []
            member = np.array([tuple(k) in self._cells for k in keys.tolist()], bool)
            keys = keys[member]
            if keys.shape[0] == 0:
                return []
        centers = (keys + 0.5) * res
        rel = centers - np.asarray(pose_position, dtype=np.float64)
        dist = np.linalg.norm(rel, axis=1)
        keep = dist >= self.cfg.r_known
        if not np.any(keep):
            return []
        keys, centers, rel, dist = keys[keep], centers[keep], rel[keep], dist[keep]
        v = np.asarray(v_fwd, dtype=np.float64)
        denom = dist * float(np.linalg.norm(v))
        cosang = np.clip(np.where(denom > 0, rel @ v / np.where(denom > 0, denom, 1.0), 1.0), -1, 1)
        alpha = np.arccos(cosang)
        dh = rel[:, 2]
        return [
            Frontier(tuple(k), c, float(a), float(d), float(h))
            for k, c, a, d, h in zip(keys.tolist(), centers, alpha, dist, dh)
        ]


def detect_frontiers(
    snap, cfg: ExplorationConfig, vehicle_pos, changed_keys: np.ndarray,
    v_fwd=None,
) -> list[Frontier]:
    """One-shot detection over the changed cells of the latest integration.

    Returns every changed Free voxel outside the known sphere that passes the
    structural frontier rules.  An empty change set yields no frontiers.
    """
    tracker = FrontierTracker(cfg)
    changed_keys = np.asarray(changed_keys, dtype=np.int64).reshape(-1, 3)
    if changed_keys.shape[0] == 0:
        return []
    ok = tracker.structure_frontier_mask(snap, changed_keys)
    tracker._cells = {tuple(k) for k in changed_keys[ok].tolist()}
    if v_fwd is None:
        v_fwd = np.array([1.0, 0.0, 0.0])
    return tracker.materialize(snap.res, vehicle_pos, v_fwd)


def merge_global_frontiers(
    sets: FrontierSets, snap, tracker: FrontierTracker,
    pose_position, v_fwd, cfg: ExplorationConfig,
    observed: set[Key] | None = None,
) -> FrontierSets:
    """Reconcile the persistent leftovers with the current map and heading.

    Leftovers that stopped being valid frontiers are dropped for good.
    Leftovers the sensor just re-observed (``observed``: keys whose
    neighborhood changed this tick; None means all) and that are now
    directly accessible move into D: the vehicle rediscovered a previously
    partially seen area.
    """
    if not sets.leftover:
        return sets
    keys = np.array(sorted(sets.leftover), dtype=np.int64)
    valid = tracker.structure_frontier_mask(snap, keys)
    inacc = np.array(
        [tuple(k) in sets.inaccessible for k in keys.tolist()], dtype=bool
    )
    drop = ~valid | inacc
    for key in map(tuple, keys[drop].tolist()):
        del sets.leftover[key]
    keys = keys[~drop]
    if keys.shape[0] == 0:
        return sets
    if observed is not None:
        seen = np.array([tuple(k) in observed for k in keys.tolist()], dtype=bool)
        keys = keys[seen]
        if keys.shape[0] == 0:
            return sets

    pos = np.asarray(pose_position, dtype=np.float64)
    centers = (keys + 0.5) * snap.res
    rel = centers - pos
    dist = np.linalg.norm(rel, axis=1)
    v = np.asarray(v_fwd, dtype=np.float64)
    denom = dist * float(np.linalg.norm(v))
    cosang = np.clip(
        np.where(denom > 0, rel @ v / np.where(denom > 0, denom, 1.0), 1.0), -1, 1
    )
    alpha = np.arccos(cosang)
    dh = rel[:, 2]
    half = cfg.theta_fov / 2.0
    promote = (dist >= cfg.r_known) & (alpha <= half) & (np.abs(dh) <= cfg.h_r)
    if np.any(promote):
        d_keys = {f.key for f in sets.D}
        for k, c, a, d_, h in zip(
            keys[promote].tolist(), centers[promote], alpha[promote],
            dist[promote], dh[promote],
        ):
            key = tuple(k)
            del sets.leftover[key]
            if key not in d_keys:
                sets.D.append(Frontier(key, c, float(a), float(d_), float(h)))
    return sets
