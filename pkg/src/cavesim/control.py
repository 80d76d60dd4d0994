"""Vehicle dynamics, predictive position control, and rotor allocation.

The vehicle model has eight states in a yaw-compensated frame: position,
linear velocity, roll, and pitch.  Thrust tilts with roll/pitch; the
attitude channels are first-order lags standing in for a low-level attitude
loop.  The controller is a receding-horizon optimizer over the forward-Euler
rollout of that model with box bounds on the inputs and hard per-step bounds
on the roll/pitch reference rate.  Gradients are computed analytically by
backward accumulation through the rollout, so solver behavior is cheap and
verifiable against finite differences.

The coaxial eight-rotor allocation maps a (thrust, roll, pitch, yaw) wrench
to squared rotor speeds through the minimum-norm right inverse of the
allocation matrix; its rows are mutually orthogonal, which makes the
round-trip exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize


@dataclass
class VehicleState:
    p: np.ndarray
    v: np.ndarray
    phi: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v, [self.phi, self.theta]])

    @staticmethod
    def from_vector(x: np.ndarray) -> "VehicleState":
        return VehicleState(x[0:3].copy(), x[3:6].copy(), float(x[6]), float(x[7]))

    @staticmethod
    def hover(position) -> "VehicleState":
        return VehicleState(np.asarray(position, dtype=np.float64), np.zeros(3))


@dataclass
class ControlInput:
    thrust: float          # mass-normalized, m/s^2
    phi_ref: float
    theta_ref: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.thrust, self.phi_ref, self.theta_ref])


@dataclass
class ModelParams:
    g: float = 3.71                  # Mars surface gravity
    a_x: float = 0.10                # linear drag, 1/s
    a_y: float = 0.10
    a_z: float = 0.20
    k_phi: float = 1.0
    k_theta: float = 1.0
    tau_phi: float = 0.30
    tau_theta: float = 0.30
    dt: float = 0.05

    def validate(self) -> None:
        if self.g <= 0:
            raise ValueError("model.g must be positive")
        if self.tau_phi <= 0 or self.tau_theta <= 0:
            raise ValueError("model attitude time constants must be positive")
        if self.dt <= 0:
            raise ValueError("model.dt must be positive")


@dataclass
class NmpcConfig:
    horizon: int = 20
    w_x: np.ndarray = field(
        default_factory=lambda: np.array([10.0, 10.0, 12.0, 1.0, 1.0, 2.0, 0.5, 0.5])
    )
    w_u: np.ndarray = field(default_factory=lambda: np.array([0.3, 2.0, 2.0]))
    w_du: np.ndarray = field(default_factory=lambda: np.array([0.3, 4.0, 4.0]))
    u_min: np.ndarray = field(default_factory=lambda: np.array([0.0, -0.35, -0.35]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([7.42, 0.35, 0.35]))
    dphi_max: float = 0.05   # per-step reference rate bounds, rad
    dtheta_max: float = 0.05
    max_iter: int = 20
    tol: float = 1e-9

    def __post_init__(self):
        self.w_x = np.asarray(self.w_x, dtype=np.float64)
        self.w_u = np.asarray(self.w_u, dtype=np.float64)
        self.w_du = np.asarray(self.w_du, dtype=np.float64)
        self.u_min = np.asarray(self.u_min, dtype=np.float64)
        self.u_max = np.asarray(self.u_max, dtype=np.float64)

    def validate(self) -> None:
        if self.horizon < 1:
            raise ValueError("nmpc.horizon must be >= 1")
        for name, w in (("w_x", self.w_x), ("w_u", self.w_u), ("w_du", self.w_du)):
            if np.any(w < 0):
                raise ValueError(f"nmpc.{name} entries must be >= 0")
        if self.w_x.shape != (8,) or self.w_u.shape != (3,) or self.w_du.shape != (3,):
            raise ValueError("nmpc weight vectors must have shapes (8,), (3,), (3,)")
        if np.any(self.u_min > self.u_max):
            raise ValueError("nmpc.u_min must not exceed nmpc.u_max")
        if self.dphi_max <= 0 or self.dtheta_max <= 0:
            raise ValueError("nmpc attitude rate bounds must be positive")


@dataclass
class RotorParams:
    k_thrust: float = 0.60
    k_drag: float = 0.20e-3
    arm_length: float = 0.3
    rotor_inertia: float = 4.240e-4

    def validate(self) -> None:
        if self.k_thrust <= 0 or self.k_drag <= 0 or self.arm_length <= 0:
            raise ValueError("rotor coefficients and arm length must be positive")


@dataclass
class Wrench:
    thrust: float
    tau_phi: float
    tau_theta: float
    tau_psi: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.thrust, self.tau_phi, self.tau_theta, self.tau_psi])


@dataclass
class EnvParams:
    """Atmosphere constants, recorded for the Mars preset but not consumed
    by the simplified dynamics."""

    density: float = 0.017          # kg/m^3
    pressure: float = 720.0         # Pa
    temperature: float = 223.0      # K
    gas_constant: float = 188.90    # m^2/s^2/K
    dynamic_viscosity: float = 1.130e-5
    gamma: float = 1.289


def mars_presets() -> tuple[ModelParams, RotorParams, EnvParams]:
    """Simulation constants for the Mars coaxial quadrotor configuration."""
    return ModelParams(g=3.71), RotorParams(), EnvParams()


def thrust_direction(phi: float, theta: float) -> np.ndarray:
    """Body-z thrust axis rotated by pitch about y then roll about x."""
    return np.array(
        [
            np.sin(theta) * np.cos(phi),
            -np.sin(phi),
            np.cos(theta) * np.cos(phi),
        ]
    )


def dynamics_step(x: VehicleState, u: ControlInput, params: ModelParams) -> VehicleState:
    """One forward-Euler step of the eight-state model."""
    dt = params.dt
    acc = (
        thrust_direction(x.phi, x.theta) * u.thrust
        + np.array([0.0, 0.0, -params.g])
        - np.array([params.a_x, params.a_y, params.a_z]) * x.v
    )
    return VehicleState(
        p=x.p + dt * x.v,
        v=x.v + dt * acc,
        phi=x.phi + dt * (params.k_phi * u.phi_ref - x.phi) / params.tau_phi,
        theta=x.theta + dt * (params.k_theta * u.theta_ref - x.theta) / params.tau_theta,
    )


def _rollout(x0: np.ndarray, u: np.ndarray, params: ModelParams) -> np.ndarray:
    """States x_0..x_N stacked under the Euler prediction model.

    Scalar math on purpose: this sits inside the optimizer's inner loop and
    numpy overhead on 8-element vectors dominates otherwise.
    """
    import math

    n = u.shape[0]
    xs = np.empty((n + 1, 8))
    xs[0] = x0
    dt = params.dt
    ax, ay, az = params.a_x, params.a_y, params.a_z
    g = params.g
    px, py, pz, vx, vy, vz, phi, theta = (float(x0[i]) for i in range(8))
    for i in range(n):
        T = u[i, 0]
        sp, cp = math.sin(phi), math.cos(phi)
        st, ct = math.sin(theta), math.cos(theta)
        px, py, pz = px + dt * vx, py + dt * vy, pz + dt * vz
        vx = vx + dt * (T * st * cp - ax * vx)
        vy = vy + dt * (-T * sp - ay * vy)
        vz = vz + dt * (T * ct * cp - g - az * vz)
        phi = phi + dt * (params.k_phi * u[i, 1] - phi) / params.tau_phi
        theta = theta + dt * (params.k_theta * u[i, 2] - theta) / params.tau_theta
        xs[i + 1, 0] = px
        xs[i + 1, 1] = py
        xs[i + 1, 2] = pz
        xs[i + 1, 3] = vx
        xs[i + 1, 4] = vy
        xs[i + 1, 5] = vz
        xs[i + 1, 6] = phi
        xs[i + 1, 7] = theta
    return xs


def nmpc_cost_and_gradient(
    z: np.ndarray,
    x0: np.ndarray,
    x_ref: np.ndarray,
    u_prev: np.ndarray,
    cfg: NmpcConfig,
    params: ModelParams,
    penalty_weight: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Tracking cost and its exact gradient via backward accumulation.

    ``z`` is the flattened (N, 3) input sequence.  The cost sums state
    tracking, deviation from the hover input, and input-rate terms over the
    horizon; ``penalty_weight`` adds a smooth quadratic penalty on attitude
    reference rates beyond the configured bounds.  The fused rollout and
    adjoint sweep are compiled (this is the optimizer's inner loop).
    """
    from ._kernels import nmpc_cost_grad

    n = cfg.horizon
    u = np.ascontiguousarray(z.reshape(n, 3))
    cost, grad = nmpc_cost_grad(
        u,
        np.ascontiguousarray(x0, dtype=np.float64),
        np.ascontiguousarray(x_ref, dtype=np.float64),
        np.ascontiguousarray(u_prev, dtype=np.float64),
        cfg.w_x,
        cfg.w_u,
        cfg.w_du,
        cfg.dphi_max,
        cfg.dtheta_max,
        params.dt,
        params.g,
        params.a_x,
        params.a_y,
        params.a_z,
        params.k_phi,
        params.k_theta,
        params.tau_phi,
        params.tau_theta,
        penalty_weight,
    )
    return float(cost), grad.ravel()


@dataclass
class NmpcResult:
    inputs: np.ndarray       # (N, 3), first row is applied
    converged: bool
    iterations: int

    @property
    def first(self) -> ControlInput:
        return ControlInput(*self.inputs[0])


def _deltas_to_inputs(z: np.ndarray, u_prev: np.ndarray, n: int) -> np.ndarray:
    """Decision variables are (thrusts, attitude-reference deltas)."""
    u = np.empty((n, 3))
    u[:, 0] = z[0:n]
    u[:, 1] = u_prev[1] + np.cumsum(z[n : 2 * n])
    u[:, 2] = u_prev[2] + np.cumsum(z[2 * n : 3 * n])
    return u


def nmpc_solver_cost_and_gradient(
    z: np.ndarray,
    x0: np.ndarray,
    x_ref: np.ndarray,
    u_prev: np.ndarray,
    cfg: NmpcConfig,
    params: ModelParams,
    penalty_weight: float = 1.0e4,
) -> tuple[float, np.ndarray]:
    """Objective actually minimized: the tracking cost in delta coordinates.

    Attitude-reference rates are decision variables here, so their bounds
    are plain boxes; the only soft term left is the (rarely active) attitude
    amplitude penalty.  Gradients map back through the cumulative sums.
    """
    n = cfg.horizon
    u = _deltas_to_inputs(z, u_prev, n)
    cost, grad_flat = nmpc_cost_and_gradient(
        u.ravel(), x0, x_ref, u_prev, cfg, params, penalty_weight=0.0
    )
    gu = grad_flat.reshape(n, 3)
    if penalty_weight > 0:
        lo, hi = cfg.u_min[1:], cfg.u_max[1:]
        att = u[:, 1:]
        over = np.maximum(att - hi, 0.0) + np.minimum(att - lo, 0.0)
        cost += penalty_weight * float(np.sum(over * over))
        gu[:, 1:] += 2.0 * penalty_weight * over
    gz = np.empty_like(z)
    gz[0:n] = gu[:, 0]
    gz[n : 2 * n] = np.cumsum(gu[:, 1][::-1])[::-1]
    gz[2 * n : 3 * n] = np.cumsum(gu[:, 2][::-1])[::-1]
    return cost, gz


def nmpc_solve(
    x0: VehicleState,
    x_ref: np.ndarray,
    u_prev: ControlInput,
    cfg: NmpcConfig,
    params: ModelParams,
    warm_start: np.ndarray | None = None,
) -> NmpcResult:
    """Receding-horizon solve; the returned sequence satisfies all bounds.

    Thrust boxes and attitude-rate bounds are handled natively as variable
    boxes (rates are decision variables), so every returned sequence
    satisfies them exactly.  Attitude amplitude limits are enforced by a
    quadratic penalty plus a final clip; clipping is 1-Lipschitz, so it
    cannot break the rate bounds.  A solver failure returns the best
    iterate found with ``converged=False``.
    """
    cfg.validate()
    params.validate()
    x0v = x0.as_vector() if isinstance(x0, VehicleState) else np.asarray(x0, float)
    upv = (
        u_prev.as_vector() if isinstance(u_prev, ControlInput) else np.asarray(u_prev, float)
    )
    x_ref = np.asarray(x_ref, dtype=np.float64)
    n = cfg.horizon

    z0 = np.zeros(3 * n)
    if warm_start is not None and warm_start.shape == (n, 3):
        u_w = warm_start
        z0[0:n] = np.clip(u_w[:, 0], cfg.u_min[0], cfg.u_max[0])
        dphi = np.diff(np.concatenate([[upv[1]], u_w[:, 1]]))
        dthe = np.diff(np.concatenate([[upv[2]], u_w[:, 2]]))
        z0[n : 2 * n] = np.clip(dphi, -cfg.dphi_max, cfg.dphi_max)
        z0[2 * n : 3 * n] = np.clip(dthe, -cfg.dtheta_max, cfg.dtheta_max)
    else:
        z0[0:n] = np.clip(upv[0], cfg.u_min[0], cfg.u_max[0])

    bounds = (
        [(cfg.u_min[0], cfg.u_max[0])] * n
        + [(-cfg.dphi_max, cfg.dphi_max)] * n
        + [(-cfg.dtheta_max, cfg.dtheta_max)] * n
    )
    res = minimize(
        nmpc_solver_cost_and_gradient,
        z0,
        args=(x0v, x_ref, upv, cfg, params),
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": cfg.max_iter, "ftol": cfg.tol, "gtol": 1e-8},
    )
    u = _deltas_to_inputs(res.x, upv, n)
    u[:, 0] = np.clip(u[:, 0], cfg.u_min[0], cfg.u_max[0])
    u[:, 1] = np.clip(u[:, 1], cfg.u_min[1], cfg.u_max[1])
    u[:, 2] = np.clip(u[:, 2], cfg.u_min[2], cfg.u_max[2])
    _enforce_rates_exact(u[:, 1], upv[1], cfg.dphi_max)
    _enforce_rates_exact(u[:, 2], upv[2], cfg.dtheta_max)
    return NmpcResult(inputs=u, converged=bool(res.success), iterations=int(res.nit))


def _enforce_rates_exact(col: np.ndarray, prev: float, bound: float) -> None:
    """Make |col[i] - col[i-1]| <= bound hold under float comparison.

    Reconstruction through cumulative sums can overshoot the bound by one
    ulp; nudge offending entries until the literal check passes.
    """
    for i in range(col.shape[0]):
        v = float(col[i])
        if v - prev > bound:
            v = prev + bound
            while v - prev > bound:
                v = np.nextafter(v, -np.inf)
        elif prev - v > bound:
            v = prev - bound
            while prev - v > bound:
                v = np.nextafter(v, np.inf)
        col[i] = v
        prev = v


class NmpcController:
    """Stateful wrapper: warm starts between ticks, remembers the last input."""

    def __init__(self, cfg: NmpcConfig, params: ModelParams):
        cfg.validate()
        params.validate()
        self.cfg = cfg
        self.params = params
        self.u_prev = np.array([params.g, 0.0, 0.0])
        self._warm: np.ndarray | None = None

    def reset(self) -> None:
        self.u_prev = np.array([self.params.g, 0.0, 0.0])
        self._warm = None

    def step(self, x0: VehicleState, p_ref: np.ndarray) -> ControlInput:
        x_ref = np.zeros(8)
        x_ref[0:3] = p_ref
        result = nmpc_solve(
            x0, x_ref, self.u_prev, self.cfg, self.params, warm_start=self._warm
        )
        u = result.inputs
        self._warm = np.vstack([u[1:], u[-1:]])
        self.u_prev = u[0].copy()
        return ControlInput(*u[0])


# -- rotor allocation ---------------------------------------------------------


def allocation_matrix(rp: RotorParams) -> np.ndarray:
    """Wrench from squared rotor speeds for four coaxial pairs.

    Columns are rotors 1..8; pairs sit on +y, +x, -y, -x arms.  Upper and
    lower rotors of each pair counter-rotate, giving the alternating drag
    signs in the yaw row.
    """
    kt, kd, d = rp.k_thrust, rp.k_drag, rp.arm_length
    return np.array(
        [
            [kt, kt, kt, kt, kt, kt, kt, kt],
            [0, 0, d * kt, d * kt, 0, 0, -d * kt, -d * kt],
            [d * kt, d * kt, 0, 0, -d * kt, -d * kt, 0, 0],
            [-kd, kd, -kd, kd, -kd, kd, -kd, kd],
        ]
    )


def allocate_rotors(w: Wrench, rp: RotorParams) -> tuple[np.ndarray, bool]:
    """Minimum-norm squared rotor speeds realizing the wrench.

    Returns ``(omega_sq, saturated)``; negative entries are clamped to zero
    and flagged, in which case the wrench is not exactly realizable.
    """
    rp.validate()
    a = allocation_matrix(rp)
    # Rows are orthogonal, so the right inverse reduces to a diagonal solve.
    gram = a @ a.T
    omega_sq = a.T @ (np.diag(1.0 / np.diag(gram)) @ w.as_vector())
    saturated = bool(np.any(omega_sq < -1e-9))
    return np.maximum(omega_sq, 0.0), saturated
