"""Reactive 3D potential-field avoidance from the instantaneous point cloud.

Every lidar return within the influence radius pushes the vehicle away with
a force that falls off quadratically toward the radius; the next planner
waypoint pulls with a force equal to the remaining displacement.  The total
force is saturated, rate-limited against the previous tick, and normalized
to a fixed step so the position reference always advances by the same
magnitude (no oscillatory sprint/stall behavior near obstacles).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .world import PointCloud


@dataclass
class ApfConfig:
    # Repulsion sums over every in-range return, so the gain scales with
    # point density; these defaults keep wall repulsion below the waypoint
    # attraction at tunnel constrictions (~1.6 m radius) while still
    # overwhelming it inside ~0.8 m of a surface.
    r_influence: float = 1.5   # repulsion radius (m)
    repulse_gain: float = 0.3  # repulsive constant
    f_max: float = 2.0         # total force magnitude cap
    df_max: float = 0.5        # per-tick force change cap
    # Reference lead distance.  The controller plans to arrive and stop at
    # the reference within its horizon, so the lead sets the cruise speed
    # ceiling; 1.2 m supports ~1.5 m/s under the attitude rate bounds.
    step_gain: float = 1.2

    def validate(self) -> None:
        if self.r_influence <= 0:
            raise ValueError("apf.r_influence must be positive")
        if self.repulse_gain <= 0:
            raise ValueError("apf.repulse_gain must be positive")
        if self.f_max <= 0:
            raise ValueError("apf.f_max must be positive")
        if self.df_max <= 0:
            raise ValueError("apf.df_max must be positive")
        if self.step_gain <= 0:
            raise ValueError("apf.step_gain must be positive")


@dataclass
class ForceState:
    """Carries the rate-limited force between ticks; starts at rest."""

    f_prev: np.ndarray = field(default_factory=lambda: np.zeros(3))


def repulsive_force(cloud: PointCloud, cfg: ApfConfig) -> np.ndarray:
    """Sum of per-point repulsions for returns inside the influence radius.

    Each point at body-relative offset rho contributes
    ``repulse_gain * (1 - |rho|/r)^2`` along ``-rho/|rho|``.  Points at the
    exact origin have no defined direction and are skipped.
    """
    pts = cloud.points
    if pts.shape[0] == 0:
        return np.zeros(3)
    r = np.linalg.norm(pts, axis=1)
    keep = (r > 1e-12) & (r <= cfg.r_influence)
    if not np.any(keep):
        return np.zeros(3)
    rr = r[keep]
    mag = cfg.repulse_gain * (1.0 - rr / cfg.r_influence) ** 2
    return -np.sum(pts[keep] * (mag / rr)[:, None], axis=0)


def attractive_force(waypoint, pose_est) -> np.ndarray:
    """Pull toward the next waypoint: simply the remaining displacement."""
    return np.asarray(waypoint, dtype=np.float64) - np.asarray(pose_est, dtype=np.float64)


def compute_reference(
    waypoint,
    pose_est,
    cloud: PointCloud,
    state: ForceState,
    cfg: ApfConfig,
) -> np.ndarray:
    """Obstacle-aware position reference for the controller.

    Pipeline: sum attractive and repulsive forces, saturate the magnitude,
    rate-limit against the previous tick's force, then normalize to
    ``step_gain`` and add to the position estimate.  A zero total force
    holds position.
    """
    pose_est = np.asarray(pose_est, dtype=np.float64)
    f = attractive_force(waypoint, pose_est) + repulsive_force(cloud, cfg)

    n = float(np.linalg.norm(f))
    if n > cfg.f_max:
        f = f * (cfg.f_max / n)

    df = f - state.f_prev
    dn = float(np.linalg.norm(df))
    if dn > cfg.df_max:
        f = state.f_prev + df * (cfg.df_max / dn)
    state.f_prev = f.copy()

    n = float(np.linalg.norm(f))
    if n < 1e-12:
        return pose_est.copy()
    return pose_est + f * (cfg.step_gain / n)
