"""Risk-aware incremental grid planning over the occupancy map.

The traversal grid assigns every voxel an enter-cost: 1 for Free, a
configurable constant for Unknown (tunes appetite for exploring through
unmapped space), and an additive proximity risk ``risk_gain / (d + 1)`` for
cells within ``r_risk`` voxels of the nearest obstacle.  Vehicle size is
handled by inflating obstacles by ``ceil(vehicle_radius / resolution)``
voxels before risk assignment; inflated cells are untraversable, which is
what makes too-narrow gaps read as inaccessible goals.

Search is an incremental lifelong A* variant rooted at the goal (the same
repair mechanics as D*-lite): when voxel costs change, only the affected
vertices are repaired, and the repaired solution is cost-identical to a
from-scratch search.  A path's total cost is the sum of enter-costs over
every voxel on it, including the start voxel; diagonal steps do not scale
cost.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .mapping import VoxelState

Key = tuple[int, int, int]

_INF = math.inf


@dataclass
class RiskConfig:
    c_occupied: float = 1.0e6     # stored for export; planning treats occupied as blocked
    c_unknown: float = 2.0
    risk_gain: float = 4.0        # additive constant, spread as risk_gain/(d+1)
    r_risk: int = 3               # risk range from an obstacle, in voxels
    vehicle_radius: float = 0.3   # m

    def validate(self) -> None:
        if self.c_unknown < 1.0:
            raise ValueError("risk.c_unknown must be >= 1")
        if self.c_occupied <= self.c_unknown:
            raise ValueError("risk.c_occupied must greatly exceed risk.c_unknown")
        if self.risk_gain <= 0:
            raise ValueError("risk.risk_gain must be positive")
        if self.r_risk < 1:
            raise ValueError("risk.r_risk must be >= 1")
        if self.vehicle_radius < 0:
            raise ValueError("risk.vehicle_radius must be >= 0")


def assign_cost(state: int, d, cfg: RiskConfig) -> float:
    """Enter-cost of a single voxel given its state and obstacle distance.

    ``d`` counts voxels to the nearest (inflated) obstacle, infinity when no
    obstacle is known.  The proximity increment applies once, at assignment.
    """
    if state == VoxelState.OCCUPIED:
        return cfg.c_occupied
    base = 1.0 if state == VoxelState.FREE else cfg.c_unknown
    if d is not None and d < cfg.r_risk:
        base += cfg.risk_gain / (d + 1.0)
    return base


@dataclass
class PlannedPath:
    """26-connected voxel path; waypoints are voxel centers in meters."""

    keys: np.ndarray            # (n, 3) int64
    waypoints: np.ndarray       # (n, 3) float64
    total_cost: float
    goal: Key
    res: float = 0.5
    _cursor: int = field(default=0, repr=False)

    def __len__(self) -> int:
        return len(self.keys)


def next_waypoint(path: PlannedPath, position) -> np.ndarray:
    """First waypoint not yet reached; advances monotonically, holds at the end.

    A waypoint counts as reached within half a voxel of its center.
    """
    if len(path) == 0:
        raise ValueError("path is empty")
    reach = 0.5 * path.res
    pos = np.asarray(position, dtype=np.float64)
    while path._cursor < len(path) - 1 and (
        np.linalg.norm(pos - path.waypoints[path._cursor]) <= reach
    ):
        path._cursor += 1
    return path.waypoints[path._cursor]


class RiskGrid:
    """Dense cost field over the map bounds, kept in sync incrementally.

    Holds its own copy of the voxel states plus the capped Chebyshev
    distance-to-obstacle field.  The mission loop applies occupancy changes
    once per tick, so planners always search a grid consistent with the
    latest integration (single-threaded lockstep stands in for snapshots).
    """

    def __init__(self, states: np.ndarray, origin, res: float, cfg: RiskConfig):
        cfg.validate()
        self.cfg = cfg
        self.res = res
        self.origin = np.asarray(origin, dtype=np.int64)
        self.states = np.ascontiguousarray(states, dtype=np.int8).copy()
        self.shape = self.states.shape
        self.inflation = int(np.ceil(cfg.vehicle_radius / res))
        self.cap = self.inflation + cfg.r_risk
        self.d_occ = np.full(self.shape, self.cap, dtype=np.int16)
        occ = self.states == VoxelState.OCCUPIED
        if occ.any():
            self._rebuild_distance_field(occ)
        c = self.cap
        zz = np.arange(-c, c + 1)
        ii, jj, kk = np.meshgrid(zz, zz, zz, indexing="ij")
        self._kernel = np.maximum(np.abs(ii), np.maximum(np.abs(jj), np.abs(kk))).astype(
            np.int16
        )

    @classmethod
    def from_map(cls, snap, cfg: RiskConfig) -> "RiskGrid":
        return cls(snap.state_grid(), snap.origin, snap.res, cfg)

    def _rebuild_distance_field(self, occ: np.ndarray) -> None:
        reach = occ.copy()
        self.d_occ[occ] = 0
        for d in range(1, self.cap):
            reach = ndimage.binary_dilation(reach, structure=np.ones((3, 3, 3), bool))
            newly = reach & (self.d_occ == self.cap)
            self.d_occ[newly] = d

    # -- key helpers ---------------------------------------------------------

    def _local(self, keys: np.ndarray) -> np.ndarray:
        return np.asarray(keys, dtype=np.int64).reshape(-1, 3) - self.origin

    def in_bounds_local(self, loc: np.ndarray) -> np.ndarray:
        return np.all((loc >= 0) & (loc < np.asarray(self.shape)), axis=1)

    # -- cost queries ---------------------------------------------------------

    def cost_at(self, keys: np.ndarray) -> np.ndarray:
        """Vectorized per-voxel enter-costs (c_occupied where blocked)."""
        loc = self._local(keys)
        ok = self.in_bounds_local(loc)
        out = np.full(len(loc), self.cfg.c_occupied)
        if np.any(ok):
            ll = loc[ok]
            st = self.states[ll[:, 0], ll[:, 1], ll[:, 2]]
            d_eff = self.d_occ[ll[:, 0], ll[:, 1], ll[:, 2]].astype(np.int64) - self.inflation
            base = np.where(st == VoxelState.FREE, 1.0, self.cfg.c_unknown)
            risky = d_eff < self.cfg.r_risk
            base = base + np.where(risky, self.cfg.risk_gain / (d_eff + 1.0), 0.0)
            blocked = (st == VoxelState.OCCUPIED) | (d_eff <= 0)
            out[ok] = np.where(blocked, self.cfg.c_occupied, base)
        return out

    def enter_cost_local(self, i: int, j: int, k: int) -> float:
        """Scalar enter-cost in grid-local indices; inf when untraversable."""
        st = self.states[i, j, k]
        if st == VoxelState.OCCUPIED:
            return _INF
        d_eff = int(self.d_occ[i, j, k]) - self.inflation
        if d_eff <= 0:
            return _INF
        base = 1.0 if st == VoxelState.FREE else self.cfg.c_unknown
        if d_eff < self.cfg.r_risk:
            base += self.cfg.risk_gain / (d_eff + 1.0)
        return base

    def blocked_key(self, key) -> bool:
        loc = self._local(np.asarray(key).reshape(1, 3))[0]
        if not self.in_bounds_local(loc[None, :])[0]:
            return True
        return self.enter_cost_local(int(loc[0]), int(loc[1]), int(loc[2])) == _INF

    def state_key(self, key) -> int:
        loc = self._local(np.asarray(key).reshape(1, 3))[0]
        if not self.in_bounds_local(loc[None, :])[0]:
            return int(VoxelState.UNKNOWN)
        return int(self.states[loc[0], loc[1], loc[2]])

    # -- incremental sync ------------------------------------------------------

    def apply_state_changes(self, keys: np.ndarray, new_states: np.ndarray) -> np.ndarray:
        """Update states and the distance field; return cost-affected keys.

        ``keys`` are world voxel indices whose discrete state flipped;
        ``new_states`` their new VoxelState values.  The returned array
        contains every voxel whose enter-cost changed (the flipped cells
        themselves plus cells whose obstacle distance moved).
        """
        loc = self._local(keys)
        ok = self.in_bounds_local(loc)
        loc = loc[ok]
        if loc.shape[0] == 0:
            return np.empty((0, 3), dtype=np.int64)
        new_states = np.asarray(new_states, dtype=np.int8).reshape(-1)[ok]
        old = self.states[loc[:, 0], loc[:, 1], loc[:, 2]]
        self.states[loc[:, 0], loc[:, 1], loc[:, 2]] = new_states

        affected = [loc]
        became_occ = loc[(new_states == VoxelState.OCCUPIED) & (old != VoxelState.OCCUPIED)]
        became_clear = loc[(old == VoxelState.OCCUPIED) & (new_states != VoxelState.OCCUPIED)]

        c = self.cap
        shape = np.asarray(self.shape)
        for cell in became_occ:
            sl, ksl = self._block(cell, c, shape)
            block = self.d_occ[sl]
            kern = self._kernel[ksl]
            lowered = kern < block
            if np.any(lowered):
                block[lowered] = kern[lowered]
                affected.append(np.argwhere(lowered) + [s.start for s in sl])
            self.d_occ[sl] = block

        if len(became_clear) > 0:
            # Distances can only grow here; rebuild the neighborhood exactly.
            lo = np.maximum(became_clear.min(axis=0) - 2 * c, 0)
            hi = np.minimum(became_clear.max(axis=0) + 2 * c + 1, shape)
            sl = tuple(slice(a, b) for a, b in zip(lo, hi))
            before = self.d_occ[sl].copy()
            self._rebuild_block(sl, c)
            diff = np.argwhere(before != self.d_occ[sl]) + lo
            affected.append(diff)

        out = np.unique(np.concatenate(affected, axis=0), axis=0)
        return out + self.origin

    def _block(self, cell, c, shape):
        lo = np.maximum(cell - c, 0)
        hi = np.minimum(cell + c + 1, shape)
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        ksl = tuple(
            slice(a - (v - c), b - (v - c)) for a, b, v in zip(lo, hi, cell)
        )
        return sl, ksl

    def _rebuild_block(self, sl, c):
        shape = np.asarray(self.shape)
        lo = np.array([s.start for s in sl])
        hi = np.array([s.stop for s in sl])
        xlo = np.maximum(lo - c, 0)
        xhi = np.minimum(hi + c, shape)
        xsl = tuple(slice(a, b) for a, b in zip(xlo, xhi))
        occ = self.states[xsl] == VoxelState.OCCUPIED
        d = np.full(occ.shape, self.cap, dtype=np.int16)
        d[occ] = 0
        reach = occ.copy()
        for dist in range(1, self.cap):
            reach = ndimage.binary_dilation(reach, structure=np.ones((3, 3, 3), bool))
            newly = reach & (d == self.cap)
            d[newly] = dist
        inner = tuple(
            slice(a - b, (a - b) + (h - l))
            for a, b, l, h in zip(lo, xlo, lo, hi)
        )
        self.d_occ[sl] = d[inner]


_NBR = [
    (di, dj, dk)
    for di in (-1, 0, 1)
    for dj in (-1, 0, 1)
    for dk in (-1, 0, 1)
    if (di, dj, dk) != (0, 0, 0)
]


class Inaccessible:
    """Returned (as None) when no traversable route to the goal exists."""


class DStarPlanner:
    """Goal-rooted incremental search over a RiskGrid; one instance per goal.

    ``g``/``rhs`` hold cost-to-goal values *including* a vertex's own
    enter-cost, so the start vertex's value is the full path cost.  The
    heuristic is the Chebyshev distance to the current start (admissible:
    every entered voxel costs at least 1) with the usual key offset ``km``
    accumulated as the start advances.
    """

    def __init__(self, grid: RiskGrid, goal):
        self.grid = grid
        self.goal = tuple(int(v) for v in np.asarray(goal).reshape(3) - grid.origin)
        self.g: dict[Key, float] = {}
        self.rhs: dict[Key, float] = {}
        self.queue: list = []
        self.km = 0.0
        self.start: Key | None = None
        self.start_override: Key | None = None
        self._pops = 0
        shape = grid.shape
        self._inb = lambda c: 0 <= c[0] < shape[0] and 0 <= c[1] < shape[1] and 0 <= c[2] < shape[2]
        gl = self.goal
        if self._inb(gl):
            self.rhs[gl] = self._cost(gl)
            self._push(gl)

    # -- internals -----------------------------------------------------------

    def _cost(self, cell: Key) -> float:
        c = self.grid.enter_cost_local(cell[0], cell[1], cell[2])
        if c == _INF and cell == self.start_override:
            st = self.grid.states[cell]
            if st != VoxelState.OCCUPIED:
                # The vehicle already sits here; let it leave an
                # inflation-blocked cell instead of freezing in place.
                return 1.0 if st == VoxelState.FREE else self.grid.cfg.c_unknown
        return c

    def _h(self, cell: Key) -> float:
        s = self.start
        if s is None:
            return 0.0
        return float(
            max(abs(cell[0] - s[0]), abs(cell[1] - s[1]), abs(cell[2] - s[2]))
        )

    def _key(self, cell: Key):
        v = min(self.g.get(cell, _INF), self.rhs.get(cell, _INF))
        return (v + self._h(cell) + self.km, v)

    def _push(self, cell: Key) -> None:
        k = self._key(cell)
        heapq.heappush(self.queue, (k[0], k[1], cell))

    def _neighbors(self, cell: Key):
        i, j, k = cell
        for di, dj, dk in _NBR:
            n = (i + di, j + dj, k + dk)
            if self._inb(n):
                yield n

    def _recompute_rhs(self, cell: Key) -> None:
        if cell == self.goal:
            self.rhs[cell] = self._cost(cell)
            return
        c = self._cost(cell)
        if c == _INF:
            self.rhs[cell] = _INF
            return
        best = _INF
        g = self.g
        for n in self._neighbors(cell):
            v = g.get(n, _INF)
            if v < best:
                best = v
        self.rhs[cell] = c + best if best < _INF else _INF

    def _update_vertex(self, cell: Key) -> None:
        if self.g.get(cell, _INF) != self.rhs.get(cell, _INF):
            self._push(cell)

    def _compute(self) -> None:
        """Repair until the start vertex is consistent (or proven unreachable)."""
        start = self.start
        g, rhs = self.g, self.rhs
        while self.queue:
            k1, k2, cell = self.queue[0]
            sk = self._key(start)
            if (k1, k2) >= sk and rhs.get(start, _INF) == g.get(start, _INF):
                break
            heapq.heappop(self.queue)
            nk = self._key(cell)
            gv = g.get(cell, _INF)
            rv = rhs.get(cell, _INF)
            if (k1, k2) < nk:
                if gv != rv:
                    heapq.heappush(self.queue, (nk[0], nk[1], cell))
                continue
            if gv == rv:
                continue  # stale entry for an already-consistent vertex
            self._pops += 1
            if gv > rv:
                g[cell] = rv
                gc = rv
                for n in self._neighbors(cell):
                    if n == self.goal:
                        continue
                    c_n = self._cost(n)
                    if c_n == _INF:
                        continue
                    cand = c_n + gc
                    if cand < self.rhs.get(n, _INF):
                        self.rhs[n] = cand
                        self._update_vertex(n)
            else:
                g[cell] = _INF
                self._recompute_rhs(cell)
                self._update_vertex(cell)
                for n in self._neighbors(cell):
                    if n == self.goal:
                        continue
                    # Only vertices that routed through `cell` need a rebuild.
                    if self.rhs.get(n, _INF) == self._cost_cached_sum(n, gv):
                        self._recompute_rhs(n)
                        self._update_vertex(n)

    def _cost_cached_sum(self, n: Key, g_old: float) -> float:
        c = self._cost(n)
        return c + g_old if c < _INF and g_old < _INF else _INF

    # -- public API ------------------------------------------------------------

    def set_start(self, start) -> None:
        s = tuple(int(v) for v in np.asarray(start).reshape(3) - self.grid.origin)
        if self.start is not None and s != self.start:
            self.km += float(
                max(abs(s[0] - self.start[0]), abs(s[1] - self.start[1]), abs(s[2] - self.start[2]))
            )
        old_override = self.start_override
        self.start = s
        self.start_override = s
        for cell in {old_override, s} - {None}:
            if cell in self.rhs or cell in self.g or cell == self.goal:
                self._recompute_rhs(cell)
                self._update_vertex(cell)

    def update_costs(self, changed_keys: np.ndarray) -> None:
        """Repair vertices whose enter-cost changed (world voxel indices)."""
        changed_keys = np.asarray(changed_keys, dtype=np.int64).reshape(-1, 3)
        if changed_keys.shape[0] == 0:
            return
        loc = changed_keys - self.grid.origin
        for cell in map(tuple, loc.tolist()):
            if cell == self.goal or cell in self.rhs or cell in self.g:
                self._recompute_rhs(cell)
                self._update_vertex(cell)

    def plan(self, start) -> PlannedPath | None:
        """Compute (or repair) the minimum-cost path from ``start`` to the goal."""
        if not self._inb(self.goal):
            return None
        if self.grid.state_key(np.asarray(self.goal) + self.grid.origin) != VoxelState.FREE:
            return None
        if self.grid.blocked_key(np.asarray(self.goal) + self.grid.origin):
            return None
        start_world = np.asarray(start, dtype=np.int64).reshape(3)
        s_loc = tuple(int(v) for v in start_world - self.grid.origin)
        if not self._inb(s_loc):
            raise ValueError("start voxel lies outside the planning grid")
        if self.grid.states[s_loc] == VoxelState.OCCUPIED:
            raise ValueError("start voxel is occupied")
        if self.start != s_loc:
            self.set_start(start_world)
        self._pops = 0
        self._compute()
        if self.rhs.get(self.start, _INF) == _INF:
            return None
        return self._extract()

    def _extract(self) -> PlannedPath | None:
        g = self.g
        cur = self.start
        cells = [cur]
        total = self.rhs.get(cur, _INF)
        if total == _INF:
            return None
        limit = 8 * sum(self.grid.shape)
        while cur != self.goal and len(cells) <= limit:
            best = None
            best_v = _INF
            for n in self._neighbors(cur):
                v = g.get(n, _INF)
                if v < best_v or (v == best_v and best is not None and n < best):
                    best = n
                    best_v = v
            if best is None or best_v == _INF:
                return None
            cur = best
            cells.append(cur)
        if cur != self.goal:
            return None
        keys = np.asarray(cells, dtype=np.int64) + self.grid.origin
        waypoints = (keys + 0.5) * self.grid.res
        return PlannedPath(
            keys=keys,
            waypoints=waypoints,
            total_cost=float(total),
            goal=tuple(keys[-1]),
            res=self.grid.res,
        )

    def replan_on_update(self, changed_keys: np.ndarray, start=None) -> PlannedPath | None:
        """Spec-level convenience: sync changed costs, then plan again."""
        self.update_costs(changed_keys)
        if start is None:
            start = np.asarray(self.start) + self.grid.origin
        return self.plan(start)

    @property
    def expansions(self) -> int:
        return self._pops


def plan(start, goal, grid: RiskGrid) -> PlannedPath | None:
    """One-shot minimum-cost plan on a risk grid (fresh planner instance)."""
    return DStarPlanner(grid, goal).plan(start)


def save_path_csv(path: PlannedPath, grid: RiskGrid, fname: str) -> None:
    costs = grid.cost_at(path.keys)
    with open(fname, "w") as f:
        f.write("idx,x,y,z,voxel_cost\n")
        for i, (w, c) in enumerate(zip(path.waypoints, costs)):
            f.write(f"{i},{w[0]!r},{w[1]!r},{w[2]!r},{c!r}\n")
