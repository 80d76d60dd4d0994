"""Scratch diagnostics for the mission loop (not part of the deliverable suite)."""

import numpy as np

import cavesim.mission as M
from cavesim.mission import MissionConfig
from cavesim.world import TubeParams

cfg = MissionConfig(
    seed=3,
    budget_s=90.0,
    v_max=1.5,
    world=TubeParams(length_m=30.0, branch_count=0, dead_end_count=1),
)

orig_record = M.record_tick
counter = {"n": 0}


def rec(lists, t, map_, spawn, pose_vec, v_world, yaw, phase, dt):
    orig_record(lists, t, map_, spawn, pose_vec, v_world, yaw, phase, dt)
    counter["n"] += 1
    if counter["n"] % 200 == 0:
        free, occ = map_.counts()
        actual_free = int((map_._state == 1).sum())
        print(
            "t=%6.1f pos=(%6.2f,%6.2f,%6.2f) yaw=%5.2f phase=%-13s free=%d actual=%d occ=%d"
            % (t, pose_vec[0], pose_vec[1], pose_vec[2], yaw, phase.value, free, actual_free, occ)
        )


M.record_tick = rec
rep = M.run_mission(cfg)
print("outcome", rep.outcome, "known_free", rep.known_free_voxels, "reachable", rep.reachable_free_voxels)
print("repositioning", len(rep.repositioning_events))
