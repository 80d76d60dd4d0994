"""Time-budgeted exploration missions: the 20 Hz sense-map-plan-act loop.

Each tick: simulate a lidar scan, integrate it into the occupancy map, feed
state changes to the risk grid and the frontier tracker, pick or keep a
frontier goal, repair the incremental plan, run the potential-field step and
the predictive controller, integrate the vehicle dynamics, and record
metrics.  When the time budget expires (or no frontiers remain) the vehicle
plans a homing path to the spawn point over the map it built.

Everything is seeded and tick-ordered, so a mission is a pure function of
its configuration: two runs produce bit-identical reports.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import raycast
from .avoidance import ApfConfig, ForceState, compute_reference
from .control import (
    ControlInput,
    ModelParams,
    NmpcConfig,
    NmpcController,
    VehicleState,
    thrust_direction,
)
from .frontiers import (
    ExplorationConfig,
    FrontierSets,
    FrontierTracker,
    Selection,
    classify_frontiers,
    forward_direction,
    mark_inaccessible,
    merge_global_frontiers,
    select_candidate,
)
from .mapping import OccupancyConfig, OccupancyMap
from .planner import DStarPlanner, RiskConfig, RiskGrid, next_waypoint
from .world import (
    Pose,
    SensorSpec,
    TubeParams,
    WorldGeometry,
    generate_tube,
    load_world,
    simulate_lidar,
)


class MissionPhase(Enum):
    EXPLORING = "exploring"
    REPOSITIONING = "repositioning"
    HOMING = "homing"
    DONE = "done"


class Outcome(Enum):
    COMPLETE = "complete"
    BUDGET_HOMED = "budget_homed"
    STUCK = "stuck"


@dataclass
class MissionConfig:
    seed: int = 7
    budget_s: float = 600.0
    v_max: float = 1.5
    loop_hz: float = 20.0
    yaw_rate_max: float = 0.5          # rad/s toward the next waypoint
    goal_reached_factor: float = 2.0   # x map resolution
    stuck_timeout_s: float = 30.0
    # A goal whose cell stops being a frontier is still flown to for this
    # long while the wavefront is empty; the next scans usually repopulate
    # it ahead, avoiding spurious repositioning on momentary blips.
    goal_commit_s: float = 1.5
    # A goal the vehicle stops closing on (potential-field equilibria,
    # planner/avoidance disagreement) is parked as inaccessible after this
    # long without approach progress.
    goal_stall_s: float = 6.0
    # Inaccessible marks are cleared on map change around the cell, but only
    # after this cooldown; otherwise the clearing re-arms stuck goals while
    # the vehicle is still next to them.
    mark_cooldown_s: float = 20.0
    # Radius of the assumed-known bubble written free around the vehicle
    # (the lidar's vertical blind cone can never observe this space; the
    # vehicle flying through it certifies it).  Must stay below the minimum
    # wall clearance so only genuinely free space is ever marked.
    known_bubble_m: float = 1.0
    world_file: str = ""
    world: TubeParams = field(default_factory=TubeParams)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    occupancy: OccupancyConfig = field(default_factory=OccupancyConfig)
    exploration: ExplorationConfig = field(default_factory=ExplorationConfig)
    risk: RiskConfig = field(default_factory=RiskConfig)
    apf: ApfConfig = field(default_factory=ApfConfig)
    nmpc: NmpcConfig = field(default_factory=NmpcConfig)
    model: ModelParams = field(default_factory=ModelParams)

    def validate(self) -> None:
        if self.budget_s <= 0:
            raise ValueError("budget_s must be positive")
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")
        if self.loop_hz <= 0:
            raise ValueError("loop_hz must be positive")
        if self.yaw_rate_max <= 0:
            raise ValueError("yaw_rate_max must be positive")
        if self.goal_reached_factor <= 0:
            raise ValueError("goal_reached_factor must be positive")
        if self.stuck_timeout_s <= 0:
            raise ValueError("stuck_timeout_s must be positive")
        self.world.validate()
        self.sensor.validate()
        self.occupancy.validate()
        self.exploration.validate(sensor_range=self.sensor.max_range)
        self.risk.validate()
        self.apf.validate()
        self.nmpc.validate()
        self.model.validate()
        if abs(self.model.a_x - self.model.a_y) > 1e-12:
            raise ValueError(
                "model.a_x must equal model.a_y (drag must be yaw-symmetric)"
            )


@dataclass
class MissionReport:
    times: np.ndarray
    volume: np.ndarray            # explored m^3 per tick
    base_distance: np.ndarray     # euclidean distance from spawn per tick
    velocity: np.ndarray          # signed forward velocity per tick
    acceleration: np.ndarray      # dv/dt of the signed forward velocity
    trajectory: np.ndarray        # (n, 8): x y z yaw vx vy vz phase-ordinal
    repositioning_events: list    # (t, key) tuples
    inaccessible_events: list     # (t, key) tuples
    outcome: Outcome
    seed: int
    reachable_free_voxels: int
    known_free_voxels: int
    known_voxels: int
    spawn: np.ndarray
    resolution: float

    def distance_traveled(self) -> float:
        steps = np.diff(self.trajectory[:, 0:3], axis=0)
        return float(np.linalg.norm(steps, axis=1).sum())

    def hover_fraction(self, threshold: float = 0.05) -> float:
        if len(self.velocity) == 0:
            return 1.0
        speeds = np.linalg.norm(self.trajectory[:, 4:7], axis=1)
        return float(np.mean(speeds < threshold))


def explored_volume(map_: OccupancyMap) -> float:
    """Volume of voxels known to be free or occupied, in cubic meters."""
    free, occ = map_.counts()
    return (free + occ) * map_.res**3


def trigger_homing(phase: MissionPhase, t: float, cfg: MissionConfig,
                   exploration_complete: bool = False) -> MissionPhase:
    """Budget expiry or a fully explored map switches the mission to homing."""
    if phase in (MissionPhase.HOMING, MissionPhase.DONE):
        return phase
    if t > cfg.budget_s or exploration_complete:
        return MissionPhase.HOMING
    return phase


def record_tick(report_lists, t, map_, spawn, pose_vec, v_world, yaw, phase, dt):
    """Append one tick of metrics; the signed forward velocity projects the
    world velocity onto the heading, so reversing reads negative."""
    heading = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    v_fwd_signed = float(np.dot(v_world, heading))
    report_lists["times"].append(t)
    report_lists["volume"].append(explored_volume(map_))
    report_lists["base_distance"].append(float(np.linalg.norm(pose_vec - spawn)))
    prev = report_lists["velocity"][-1] if report_lists["velocity"] else 0.0
    report_lists["velocity"].append(v_fwd_signed)
    report_lists["acceleration"].append((v_fwd_signed - prev) / dt)
    report_lists["trajectory"].append(
        [pose_vec[0], pose_vec[1], pose_vec[2], yaw, v_world[0], v_world[1], v_world[2],
         float(list(MissionPhase).index(phase))]
    )


def _rotz(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def world_frame_step(
    state: VehicleState, u: ControlInput, yaw: float, params: ModelParams
) -> VehicleState:
    """Vehicle dynamics in the world frame: the body model rotated by yaw.

    Requires a_x == a_y so the drag term is yaw-invariant.
    """
    dt = params.dt
    acc = (
        _rotz(yaw) @ (thrust_direction(state.phi, state.theta) * u.thrust)
        + np.array([0.0, 0.0, -params.g])
        - np.array([params.a_x, params.a_y, params.a_z]) * state.v
    )
    return VehicleState(
        p=state.p + dt * state.v,
        v=state.v + dt * acc,
        phi=state.phi + dt * (params.k_phi * u.phi_ref - state.phi) / params.tau_phi,
        theta=state.theta
        + dt * (params.k_theta * u.theta_ref - state.theta) / params.tau_theta,
    )


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _pursuit_waypoint(path, position, lookahead: float) -> np.ndarray:
    """First path waypoint beyond the lookahead radius (monotone cursor).

    The controller tracks with decimeter-scale cross-track error, so the
    half-voxel reach radius of :func:`cavesim.planner.next_waypoint` can
    starve; chasing the first waypoint outside a lookahead ball keeps the
    carrot ahead along the path instead.
    """
    pos = np.asarray(position, dtype=np.float64)
    while path._cursor < len(path) - 1 and (
        float(np.linalg.norm(pos - path.waypoints[path._cursor])) <= lookahead
    ):
        path._cursor += 1
    return path.waypoints[path._cursor]


def run_mission(cfg: MissionConfig, world: WorldGeometry | None = None) -> MissionReport:
    """Run one mission to completion and return its metrics.

    ``world`` overrides procedural generation (used by tests and replays);
    otherwise the world comes from ``cfg.world_file`` or the tube generator
    seeded with ``cfg.seed``.
    """
    cfg.validate()
    if world is None:
        if cfg.world_file:
            world = load_world(cfg.world_file)
        else:
            world = generate_tube(cfg.seed, cfg.world)

    dt = 1.0 / cfg.loop_hz
    model = cfg.model
    if abs(model.dt - dt) > 1e-12:
        # The controller predicts with the loop period.
        model = ModelParams(**{**model.__dict__, "dt": dt})

    pad = cfg.occupancy.max_integration_range + cfg.occupancy.resolution
    map_ = OccupancyMap(
        cfg.occupancy, world.bounds_min - pad, world.bounds_max + pad
    )
    grid = RiskGrid.from_map(map_.snapshot(), cfg.risk)
    tracker = FrontierTracker(cfg.exploration)
    controller = NmpcController(cfg.nmpc, model)
    apf_state = ForceState()
    rng = np.random.default_rng(cfg.seed)

    spawn = world.spawn.position.copy()
    state = VehicleState.hover(spawn)
    yaw = float(world.spawn.yaw)
    v_fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    prev_pos = state.p.copy()
    p_ref_prev = state.p.copy()

    sets = FrontierSets()
    phase = MissionPhase.EXPLORING
    outcome: Outcome | None = None
    goal = None
    goal_invalid_since: float | None = None
    goal_best_dist = float("inf")
    goal_best_t = 0.0
    mark_time: dict = {}
    planner: DStarPlanner | None = None
    path = None
    homing_complete_flag = False  # homing caused by full exploration

    lists = {
        "times": [], "volume": [], "base_distance": [],
        "velocity": [], "acceleration": [], "trajectory": [],
    }
    repositioning_events: list = []
    inaccessible_events: list = []

    reach_radius = cfg.goal_reached_factor * map_.res
    max_ticks = int(round(2.0 * cfg.budget_s * cfg.loop_hz))
    last_progress_t = 0.0
    progress_pos = state.p.copy()
    progress_volume = 0

    for tick in range(max_ticks):
        t = tick * dt
        pose = Pose(state.p.copy(), yaw)

        # Sense and map.
        cloud = simulate_lidar(pose, cfg.sensor, world, rng)
        changed = map_.integrate_scan(cloud, pose)
        bubble = map_.mark_free_sphere(state.p, cfg.known_bubble_m)
        changed_keys = changed.keys
        if len(bubble):
            changed_keys = np.concatenate([changed_keys, bubble.keys])
        wavefront = np.empty((0, 3), dtype=np.int64)
        observed: set = set()
        if len(changed_keys):
            new_states = map_.states_at(changed_keys)
            cost_changed = grid.apply_state_changes(changed_keys, new_states)
            if planner is not None:
                planner.update_costs(cost_changed)
            wavefront = tracker.update(map_, changed_keys)
            observed = {
                (k[0] + di, k[1] + dj, k[2] + dk)
                for k in changed_keys.tolist()
                for di in (-1, 0, 1)
                for dj in (-1, 0, 1)
                for dk in (-1, 0, 1)
            }
            if sets.inaccessible:
                clearable = {
                    k
                    for k in sets.inaccessible & observed
                    if t - mark_time.get(k, 0.0) >= cfg.mark_cooldown_s
                }
                sets.inaccessible -= clearable
                for k in clearable:
                    mark_time.pop(k, None)

        # Heading and frontier bookkeeping.  The per-tick D/I split covers
        # the detection wavefront (cells whose state just changed); frontiers
        # that fall out of the wavefront without being visited persist in the
        # global leftover pool until re-observed or resolved.
        v_fwd = forward_direction(prev_pos, state.p, v_fwd)
        prev_pos = state.p.copy()
        frontiers = tracker.materialize(map_.res, state.p, v_fwd, keys=wavefront)
        leftover = sets.leftover
        inaccessible = sets.inaccessible
        sets = classify_frontiers(
            frontiers, state.p, v_fwd, cfg.exploration, inaccessible=inaccessible
        )
        sets.leftover = leftover
        merge_global_frontiers(
            sets, map_.snapshot(), tracker, state.p, v_fwd, cfg.exploration,
            observed=observed,
        )
        for f in sets.I:
            sets.leftover.setdefault(f.key, f)
        for f in sets.D:
            sets.leftover.setdefault(f.key, f)

        # Phase transitions and goal selection.
        if phase in (MissionPhase.EXPLORING, MissionPhase.REPOSITIONING):
            if t > cfg.budget_s:
                phase = MissionPhase.HOMING
                goal = None
                planner = DStarPlanner(grid, raycast.world_to_voxel(spawn, map_.res))
                path = None
            else:
                # Retire the current goal when reached or (after the commit
                # window) when its cell stopped being a frontier.
                if goal is not None:
                    d_goal = float(np.linalg.norm(goal.position - state.p))
                    reached = d_goal <= reach_radius
                    if d_goal < goal_best_dist - 0.25:
                        goal_best_dist = d_goal
                        goal_best_t = t
                    valid = (
                        goal.key in tracker.cells()
                        and goal.key not in sets.inaccessible
                    )
                    if reached:
                        if valid:
                            # Reached but still bordering unknown space: the
                            # cell sits in the sensor's vertical blind cone
                            # and cannot be resolved from here.  Park it; the
                            # mark clears once the map changes around it
                            # (e.g. it is seen from farther away).
                            mark_inaccessible(sets, goal.key)
                            mark_time[goal.key] = t
                        goal = None
                    elif t - goal_best_t > cfg.goal_stall_s:
                        # Not closing on this goal (avoidance equilibrium or
                        # unreachable pocket); park it and move on.
                        mark_inaccessible(sets, goal.key)
                        mark_time[goal.key] = t
                        inaccessible_events.append((t, goal.key))
                        goal = None
                    elif not valid:
                        if goal_invalid_since is None:
                            goal_invalid_since = t
                        if sets.D or (t - goal_invalid_since) >= cfg.goal_commit_s:
                            goal = None
                    else:
                        goal_invalid_since = None
                need_select = goal is None or (
                    phase is MissionPhase.REPOSITIONING and len(sets.D) > 0
                )
                if need_select:
                    if not sets.D and sets.leftover:
                        # Leftover geometry ages with vehicle motion; rebuild
                        # it against the current pose before costing.
                        fresh = tracker.materialize(
                            map_.res, state.p, v_fwd,
                            keys=np.array(sorted(sets.leftover), dtype=np.int64),
                        )
                        sel_sets = FrontierSets(
                            D=sets.D, I=sets.I,
                            leftover={f.key: f for f in fresh},
                            inaccessible=sets.inaccessible,
                        )
                        sel = select_candidate(sel_sets, cfg.exploration)
                    else:
                        sel = select_candidate(sets, cfg.exploration)
                    if sel.complete:
                        phase = MissionPhase.HOMING
                        homing_complete_flag = True
                        goal = None
                        planner = DStarPlanner(grid, raycast.world_to_voxel(spawn, map_.res))
                        path = None
                    else:
                        new_goal = sel.frontier
                        if goal is None or new_goal.key != goal.key:
                            goal = new_goal
                            planner = DStarPlanner(grid, np.array(goal.key))
                            path = None
                            goal_best_dist = float(
                                np.linalg.norm(goal.position - state.p)
                            )
                            goal_best_t = t
                        goal_invalid_since = None
                        phase = (
                            MissionPhase.REPOSITIONING
                            if sel.repositioning
                            else MissionPhase.EXPLORING
                        )
                        if sel.repositioning:
                            repositioning_events.append((t, goal.key))
                        sets.leftover.pop(goal.key, None)

        # Plan (incremental repair; cheap when nothing relevant changed).
        if planner is not None:
            start_key = raycast.world_to_voxel(state.p, map_.res)
            try:
                path = planner.plan(start_key)
            except ValueError:
                path = None
            if path is None and phase is not MissionPhase.HOMING and goal is not None:
                inaccessible_events.append((t, goal.key))
                mark_inaccessible(sets, goal.key)
                mark_time[goal.key] = t
                goal = None
                planner = None

        # Reference through the potential field.  The lookahead must exceed
        # the reference lead plus tracking error, or the carrot orbits a
        # waypoint that never falls behind.
        if path is not None and len(path):
            lookahead = max(2.0 * map_.res, cfg.apf.step_gain + 0.6)
            wp = _pursuit_waypoint(path, state.p, lookahead=lookahead)
        else:
            wp = state.p
        cloud_rel = type(cloud)(points=cloud.points @ _rotz(yaw).T, stamp=cloud.stamp)
        raw_ref = compute_reference(wp, state.p, cloud_rel, apf_state, cfg.apf)
        step_vec = raw_ref - p_ref_prev
        step_norm = float(np.linalg.norm(step_vec))
        max_step = cfg.v_max * dt
        if step_norm > max_step:
            step_vec *= max_step / step_norm
        p_ref = p_ref_prev + step_vec
        p_ref_prev = p_ref

        # Control in the yaw-compensated frame, then integrate world-frame.
        rz_inv = _rotz(-yaw)
        x_local = VehicleState(
            p=np.zeros(3), v=rz_inv @ state.v, phi=state.phi, theta=state.theta
        )
        u = controller.step(x_local, rz_inv @ (p_ref - state.p))
        state = world_frame_step(state, u, yaw, model)

        # Yaw slews toward the next waypoint at a capped rate.
        to_wp = wp - state.p
        if float(np.hypot(to_wp[0], to_wp[1])) > 0.3:
            desired = math.atan2(to_wp[1], to_wp[0])
            delta = _wrap_angle(desired - yaw)
            yaw = _wrap_angle(yaw + float(np.clip(delta, -cfg.yaw_rate_max * dt, cfg.yaw_rate_max * dt)))

        record_tick(lists, t, map_, spawn, state.p, state.v, yaw, phase, dt)

        # Homing completion.
        if phase is MissionPhase.HOMING and float(np.linalg.norm(state.p - spawn)) <= 1.0:
            phase = MissionPhase.DONE
            outcome = Outcome.COMPLETE if homing_complete_flag else Outcome.BUDGET_HOMED
            break

        # Stuck detection: no motion and no new map knowledge.
        free, occ = map_.counts()
        if (
            float(np.linalg.norm(state.p - progress_pos)) > 0.1
            or (free + occ) > progress_volume
        ):
            last_progress_t = t
            progress_pos = state.p.copy()
            progress_volume = free + occ
        elif t - last_progress_t > cfg.stuck_timeout_s:
            outcome = Outcome.STUCK
            break

    if outcome is None:
        outcome = Outcome.STUCK

    free, occ = map_.counts()
    report = MissionReport(
        times=np.asarray(lists["times"]),
        volume=np.asarray(lists["volume"]),
        base_distance=np.asarray(lists["base_distance"]),
        velocity=np.asarray(lists["velocity"]),
        acceleration=np.asarray(lists["acceleration"]),
        trajectory=np.asarray(lists["trajectory"]).reshape(-1, 8),
        repositioning_events=repositioning_events,
        inaccessible_events=inaccessible_events,
        outcome=outcome,
        seed=cfg.seed,
        reachable_free_voxels=len(world.reachable_free_keys()),
        known_free_voxels=free,
        known_voxels=free + occ,
        spawn=spawn,
        resolution=map_.res,
    )
    report._final_map = map_   # kept for exports; not part of the metric series
    report._world = world
    return report


# -- report persistence ---------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_report(report: MissionReport, out_dir: str, config_hash: str) -> None:
    """Write the CSV series, the summary JSON, and the map/world exports."""
    os.makedirs(out_dir, exist_ok=True)
    stamp = f"# seed={report.seed} config={config_hash}\n"

    def series(name, header, cols):
        with open(os.path.join(out_dir, name), "w") as f:
            f.write(stamp)
            f.write(header + "\n")
            for row in zip(*cols):
                f.write(",".join(_fmt(v) for v in row) + "\n")

    series("volume.csv", "t,explored_m3", (report.times, report.volume))
    series("distance.csv", "t,distance_from_base_m", (report.times, report.base_distance))
    series("velocity.csv", "t,v_forward_signed", (report.times, report.velocity))
    series("acceleration.csv", "t,dv_dt", (report.times, report.acceleration))
    with open(os.path.join(out_dir, "trajectory.csv"), "w") as f:
        f.write(stamp)
        f.write("t,x,y,z,yaw,vx,vy,vz,phase\n")
        for t, row in zip(report.times, report.trajectory):
            f.write(_fmt(t) + "," + ",".join(_fmt(v) for v in row) + "\n")

    summary = {
        "seed": report.seed,
        "config": config_hash,
        "outcome": report.outcome.value,
        "ticks": int(len(report.times)),
        "sim_time_s": float(report.times[-1]) if len(report.times) else 0.0,
        "explored_volume_m3": float(report.volume[-1]) if len(report.volume) else 0.0,
        "reachable_free_voxels": report.reachable_free_voxels,
        "known_free_voxels": report.known_free_voxels,
        "known_voxels": report.known_voxels,
        "distance_traveled_m": report.distance_traveled(),
        "mean_velocity": float(np.mean(np.abs(report.velocity))) if len(report.velocity) else 0.0,
        "max_velocity": float(np.max(np.abs(report.velocity))) if len(report.velocity) else 0.0,
        "hover_fraction": report.hover_fraction(),
        "repositioning_count": len(report.repositioning_events),
        "repositioning_events": [[t, list(k)] for t, k in report.repositioning_events],
        "inaccessible_events": [[t, list(k)] for t, k in report.inaccessible_events],
        "resolution": report.resolution,
        "spawn": [float(v) for v in report.spawn],
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")

    if hasattr(report, "_final_map"):
        report._final_map.save_text(os.path.join(out_dir, "map.txt"))
    if hasattr(report, "_world"):
        from .world import save_world

        save_world(report._world, os.path.join(out_dir, "world.txt"))
