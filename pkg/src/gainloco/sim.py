"""Simplified rigid-body quadruped dynamics.

Model: a single rigid base (mass + diagonal inertia) carries four massless
3-DOF legs. Joint coordinates integrate directly against a per-joint
reflected inertia; ground contact is a spring-damper penalty normal force
plus Coulomb-capped viscous tangential friction applied at point feet.
Integration is semi-implicit Euler; the gyroscopic precession term is
dropped so passive ballistic motion conserves energy exactly.

Conventions:
  * base frame: x forward, y left, z up; quaternions are wxyz, body->world
  * angular velocity is stored in the body frame
  * joint order: [FL, FR, RL, RR] x [hip-abduction, hip-pitch, knee]
  * positive hip pitch swings the foot forward; knee angle is relative
    to the thigh (negative folds the calf backwards)
"""

from dataclasses import dataclass

import numpy as np

from .terrain import TerrainHeightfield, terrain_heights_batch

N_JOINTS = 12
N_LEGS = 4

LEG_NAMES = ("FL", "FR", "RL", "RR")
JOINT_NAMES = tuple(f"{leg}_{j}" for leg in LEG_NAMES for j in ("hip_abduction", "hip_pitch", "knee"))

# Fixed gain-law constants: initial PD gains and the action scaling factors.
P_INIT = 28.0
D_INIT = 0.7
ALPHA_POS = 0.25
ALPHA_GAIN = 0.5

DEFAULT_Q_DEF = (0.0, 0.8, -1.5) * N_LEGS

# (sx, sy) signs of each leg's hip mount, FL/FR/RL/RR
_LEG_SIGNS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])


class SimulationFault(RuntimeError):
    """Raised when integration produces a non-finite state."""


@dataclass
class SimParams:
    mass: float = 7.5
    inertia: tuple[float, float, float] = (0.07, 0.19, 0.21)
    gravity: float = 9.81
    reflected_inertia: float = 0.05
    hip_x: float = 0.1881
    hip_y: float = 0.04675
    hip_link: float = 0.08
    thigh: float = 0.213
    calf: float = 0.213
    contact_stiffness: float = 5000.0
    contact_damping: float = 150.0
    tangential_damping: float = 100.0
    friction: float = 0.8
    torque_limit: float = 23.7
    p_floor: float = 1.0
    q_def: tuple[float, ...] = DEFAULT_Q_DEF


@dataclass
class GainState:
    """Raw per-joint gain offset actions plus the fixed initial gains.

    Effective gains are init + ALPHA_GAIN * offset, clamped so the P gain
    never drops below p_floor and the D gain never goes negative.
    """

    p_offsets: np.ndarray
    d_offsets: np.ndarray
    p_init: float = P_INIT
    d_init: float = D_INIT
    p_floor: float = 1.0

    @classmethod
    def zero(cls, p_floor: float = 1.0) -> "GainState":
        return cls(p_offsets=np.zeros(N_JOINTS), d_offsets=np.zeros(N_JOINTS), p_floor=p_floor)

    @classmethod
    def from_action(cls, a_p: np.ndarray, a_d: np.ndarray, p_floor: float = 1.0) -> "GainState":
        return cls(p_offsets=np.asarray(a_p, dtype=float).copy(),
                   d_offsets=np.asarray(a_d, dtype=float).copy(), p_floor=p_floor)

    def effective_p(self) -> np.ndarray:
        return np.maximum(self.p_init + ALPHA_GAIN * self.p_offsets, self.p_floor)

    def effective_d(self) -> np.ndarray:
        return np.maximum(self.d_init + ALPHA_GAIN * self.d_offsets, 0.0)

    def raw_gains(self) -> np.ndarray:
        """Unclamped effective-gain vector (P then D), as used by the
        gain-change reward term."""
        return np.concatenate([self.p_init + ALPHA_GAIN * self.p_offsets,
                               self.d_init + ALPHA_GAIN * self.d_offsets])


@dataclass
class SimState:
    base_position: np.ndarray          # (3,) world
    base_orientation: np.ndarray       # (4,) wxyz unit quaternion
    base_linear_velocity: np.ndarray   # (3,) world
    base_angular_velocity: np.ndarray  # (3,) body frame
    joint_positions: np.ndarray        # (12,)
    joint_velocities: np.ndarray       # (12,)
    foot_positions: np.ndarray         # (4, 3) world
    time: float = 0.0

    def copy(self) -> "SimState":
        return SimState(
            base_position=self.base_position.copy(),
            base_orientation=self.base_orientation.copy(),
            base_linear_velocity=self.base_linear_velocity.copy(),
            base_angular_velocity=self.base_angular_velocity.copy(),
            joint_positions=self.joint_positions.copy(),
            joint_velocities=self.joint_velocities.copy(),
            foot_positions=self.foot_positions.copy(),
            time=self.time,
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (
            self.base_position, self.base_orientation, self.base_linear_velocity,
            self.base_angular_velocity, self.joint_positions, self.joint_velocities,
            self.foot_positions)) and np.isfinite(self.time)


@dataclass
class StepDiagnostics:
    contact_forces: np.ndarray   # (4, 3) world
    in_contact: np.ndarray       # (4,) bool
    applied_torque: np.ndarray   # (12,)
    oob_clamped: bool = False


# ---------------------------------------------------------------------------
# quaternion helpers (wxyz)

def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(q))
    if n < 1e-12:
        raise SimulationFault("degenerate quaternion")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return quat_to_matrix(q) @ v


def quat_rotate_inverse(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return quat_to_matrix(q).T @ v


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = float(np.linalg.norm(axis))
    if n < 1e-12 or abs(angle) < 1e-15:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def integrate_quat(q: np.ndarray, omega_body: np.ndarray, dt: float) -> np.ndarray:
    angle = float(np.linalg.norm(omega_body)) * dt
    if angle < 1e-15:
        return q.copy()
    dq = quat_from_axis_angle(omega_body, angle)
    return quat_normalize(quat_mul(q, dq))


def yaw_from_quat(q: np.ndarray) -> float:
    r = quat_to_matrix(q)
    return float(np.arctan2(r[1, 0], r[0, 0]))


def roll_pitch_from_quat(q: np.ndarray) -> tuple[float, float]:
    r = quat_to_matrix(q)
    roll = float(np.arctan2(r[2, 1], r[2, 2]))
    pitch = float(np.arctan2(-r[2, 0], np.sqrt(max(r[2, 1] ** 2 + r[2, 2] ** 2, 1e-12))))
    return roll, pitch


# ---------------------------------------------------------------------------
# kinematics

def hip_mounts(params: SimParams) -> np.ndarray:
    """(4, 3) hip mount points in the base frame."""
    mounts = np.zeros((N_LEGS, 3))
    mounts[:, 0] = _LEG_SIGNS[:, 0] * params.hip_x
    mounts[:, 1] = _LEG_SIGNS[:, 1] * params.hip_y
    return mounts


def leg_kinematics(params: SimParams, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Foot positions (4, 3) in the base frame and Jacobians (4, 3, 3).

    Jacobian columns are d(foot)/d(abduction, hip pitch, knee).
    """
    q = np.asarray(q, dtype=float).reshape(N_LEGS, 3)
    q0, q1, q2 = q[:, 0], q[:, 1], q[:, 2]
    a = q1
    b = q1 + q2
    sy = _LEG_SIGNS[:, 1]
    l2, l3 = params.thigh, params.calf

    ux = l2 * np.sin(a) + l3 * np.sin(b)
    uy = sy * params.hip_link
    uz = -(l2 * np.cos(a) + l3 * np.cos(b))
    u = np.stack([ux, uy, uz], axis=1)                       # (4, 3)

    dua = np.stack([l2 * np.cos(a), np.zeros(N_LEGS), l2 * np.sin(a)], axis=1)
    dub = np.stack([l3 * np.cos(b), np.zeros(N_LEGS), l3 * np.sin(b)], axis=1)

    c0, s0 = np.cos(q0), np.sin(q0)
    rot = np.zeros((N_LEGS, 3, 3))                           # R_x(q0) per leg
    rot[:, 0, 0] = 1.0
    rot[:, 1, 1] = c0
    rot[:, 1, 2] = -s0
    rot[:, 2, 1] = s0
    rot[:, 2, 2] = c0

    feet = hip_mounts(params) + np.einsum("lij,lj->li", rot, u)

    # d(R_x(q0) u)/dq0 = R_x(q0) @ [0, -uz, uy]
    s_u = np.stack([np.zeros(N_LEGS), -uz, uy], axis=1)
    jac = np.zeros((N_LEGS, 3, 3))
    jac[:, :, 0] = np.einsum("lij,lj->li", rot, s_u)
    jac[:, :, 1] = np.einsum("lij,lj->li", rot, dua + dub)
    jac[:, :, 2] = np.einsum("lij,lj->li", rot, dub)
    return feet, jac


def foot_world_positions(params: SimParams, state: SimState) -> np.ndarray:
    feet_b, _ = leg_kinematics(params, state.joint_positions)
    r = quat_to_matrix(state.base_orientation)
    return state.base_position[None, :] + feet_b @ r.T


# ---------------------------------------------------------------------------
# actuation

def reference_position(a_pos: np.ndarray, q_def: np.ndarray, alpha_pos: float = ALPHA_POS) -> np.ndarray:
    """Desired joint positions: home posture plus scaled position actions."""
    return np.asarray(q_def, dtype=float) + alpha_pos * np.asarray(a_pos, dtype=float)


def pd_torque(q_des: np.ndarray, q: np.ndarray, qd: np.ndarray, gains: GainState,
              torque_limit: float = 23.7) -> np.ndarray:
    """Per-joint PD torque with learned gain offsets, clipped to the motor limit."""
    tau = gains.effective_p() * (np.asarray(q_des, dtype=float) - np.asarray(q, dtype=float)) \
        - gains.effective_d() * np.asarray(qd, dtype=float)
    return np.clip(tau, -torque_limit, torque_limit)


# ---------------------------------------------------------------------------
# contact + integration

def foot_contact_forces(params: SimParams, field: TerrainHeightfield,
                        foot_pos_w: np.ndarray, foot_vel_w: np.ndarray,
                        friction: float | None = None) -> tuple[np.ndarray, np.ndarray, bool]:
    """Penalty contact forces at the feet.

    Normal: stiffness * penetration - damping * penetration_rate, floored at 0.
    Tangential: viscous drag opposing slip, capped at friction * normal.
    Returns (forces (4,3) world, in_contact (4,), out_of_bounds_flag).
    """
    mu = params.friction if friction is None else friction
    ground, oob = terrain_heights_batch(field, foot_pos_w[:, :2])
    pen = ground - foot_pos_w[:, 2]
    in_contact = pen > 0.0
    forces = np.zeros((N_LEGS, 3))
    if np.any(in_contact):
        fn = params.contact_stiffness * pen - params.contact_damping * foot_vel_w[:, 2]
        fn = np.where(in_contact, np.maximum(fn, 0.0), 0.0)
        ft = -params.tangential_damping * foot_vel_w[:, :2]
        ft_norm = np.linalg.norm(ft, axis=1)
        cap = mu * fn
        scale = np.where(ft_norm > cap, np.divide(cap, ft_norm, out=np.ones_like(cap),
                                                  where=ft_norm > 1e-12), 1.0)
        forces[:, :2] = ft * (scale * in_contact)[:, None]
        forces[:, 2] = fn
    return forces, in_contact, oob


def step(state: SimState, tau: np.ndarray, field: TerrainHeightfield, params: SimParams,
         dt: float, friction: float | None = None) -> tuple[SimState, StepDiagnostics]:
    """One semi-implicit Euler step of dt seconds under applied joint torques."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    tau = np.clip(np.asarray(tau, dtype=float), -params.torque_limit, params.torque_limit)

    r = quat_to_matrix(state.base_orientation)
    feet_b, jac = leg_kinematics(params, state.joint_positions)
    feet_w = state.base_position[None, :] + feet_b @ r.T

    omega_b = state.base_angular_velocity
    qd = state.joint_velocities.reshape(N_LEGS, 3)
    # v_foot = v_base + R (omega x r_b) + R J qd
    vel_b = np.cross(np.broadcast_to(omega_b, (N_LEGS, 3)), feet_b) \
        + np.einsum("lij,lj->li", jac, qd)
    feet_vel_w = state.base_linear_velocity[None, :] + vel_b @ r.T

    forces, in_contact, oob = foot_contact_forces(params, field, feet_w, feet_vel_w, friction)

    # base dynamics
    total_force = forces.sum(axis=0)
    torque_w = np.cross(feet_b @ r.T, forces).sum(axis=0)
    acc = total_force / params.mass
    acc[2] -= params.gravity
    new_lin_vel = state.base_linear_velocity + dt * acc

    inertia = np.asarray(params.inertia)
    torque_b = r.T @ torque_w
    omega_new = omega_b + dt * torque_b / inertia
    new_quat = integrate_quat(state.base_orientation, omega_new, dt)
    new_pos = state.base_position + dt * new_lin_vel

    # joint dynamics: generalized contact torque is J_world^T f = J^T R^T f
    tau_contact = np.einsum("lji,lj->li", jac, forces @ r).reshape(N_JOINTS)
    qdd = (tau + tau_contact) / params.reflected_inertia
    new_qd = state.joint_velocities + dt * qdd
    new_q = state.joint_positions + dt * new_qd

    new_state = SimState(
        base_position=new_pos,
        base_orientation=new_quat,
        base_linear_velocity=new_lin_vel,
        base_angular_velocity=omega_new,
        joint_positions=new_q,
        joint_velocities=new_qd,
        foot_positions=np.zeros((N_LEGS, 3)),
        time=state.time + dt,
    )
    new_state.foot_positions = foot_world_positions(params, new_state)
    if not new_state.is_finite():
        raise SimulationFault(
            "non-finite state after integration\n"
            f"  pos={state.base_position} vel={state.base_linear_velocity}\n"
            f"  quat={state.base_orientation} omega={state.base_angular_velocity}\n"
            f"  q={state.joint_positions}\n  qd={state.joint_velocities}\n"
            f"  tau={tau}\n  contact={forces}"
        )
    diag = StepDiagnostics(contact_forces=forces, in_contact=in_contact,
                           applied_torque=tau, oob_clamped=oob)
    return new_state, diag


def default_state(params: SimParams, base_position: np.ndarray | None = None,
                  yaw: float = 0.0) -> SimState:
    """Robot at the home posture with zero velocities."""
    q_def = np.asarray(params.q_def, dtype=float)
    quat = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw)
    state = SimState(
        base_position=np.zeros(3) if base_position is None else np.asarray(base_position, dtype=float).copy(),
        base_orientation=quat,
        base_linear_velocity=np.zeros(3),
        base_angular_velocity=np.zeros(3),
        joint_positions=q_def.copy(),
        joint_velocities=np.zeros(N_JOINTS),
        foot_positions=np.zeros((N_LEGS, 3)),
        time=0.0,
    )
    state.foot_positions = foot_world_positions(params, state)
    return state
