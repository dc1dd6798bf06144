"""Episode logic: observation assembly, command sampling, rewards,
termination and the control-rate step contract consumed by the trainer.

A control step applies one 36-dim action (12 reference-position actions,
12 P-offset actions, 12 D-offset actions), holds the resulting joint targets
and gains for ``control_decimation`` physics substeps, recomputing the PD
torque each substep, and then scores the transition.
"""

import csv
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import sim
from .sim import (GainState, SimParams, SimState, N_JOINTS, pd_torque,
                  quat_rotate_inverse, reference_position, roll_pitch_from_quat,
                  yaw_from_quat)
from .terrain import (TerrainHeightfield, TerrainKind, generate_terrain, height_scan,
                      terrain_height, terrain_heights_batch, SCAN_SIZE)

ACTION_DIM = 3 * N_JOINTS  # 36

# raw observation components and actions are clipped to this envelope; it
# bounds the action -> last-action -> observation feedback loop
OBS_CLIP = 100.0

# Observation component widths, in serialization order.
OBS_LAYOUT = (
    ("gravity", 3),
    ("joint_positions", N_JOINTS),
    ("joint_velocities", N_JOINTS),
    ("base_vx_vy", 2),
    ("base_yaw_rate", 1),
    ("command", 3),
    ("last_action", ACTION_DIM),
)
OBS_DIM = sum(width for _, width in OBS_LAYOUT)  # 69

PRIV_DIM = 6 + SCAN_SIZE + len(TerrainKind)  # 197

TERRAIN_KINDS = tuple(TerrainKind)  # one-hot order LEVEL/SLOPE/ROUGH/STAIRS

REWARD_WEIGHTS = {
    "track_xy": 3.0,
    "track_yaw": 1.5,
    "z_velocity": -2.0,
    "angular_velocity": -0.05,
    "joint_power": -0.0001,
    "action_rate": -0.01,
    "body_height": -10.0,
    "foot_clearance": -0.4,
    "p_gain_limit": 0.25,
    "gain_change": -0.01,
}
REWARD_TERMS = tuple(REWARD_WEIGHTS)


@dataclass
class EnvConfig:
    sim: SimParams = dc_field(default_factory=SimParams)
    physics_dt: float = 0.0025
    control_decimation: int = 8              # 50 Hz control
    terrain_kinds: tuple[TerrainKind, ...] = TERRAIN_KINDS
    terrain_extent: float = 12.0
    terrain_cell: float = 0.1
    slope_range: tuple[float, float] = (0.08, 0.35)
    stair_rise_range: tuple[float, float] = (0.04, 0.12)
    stair_run_range: tuple[float, float] = (0.25, 0.35)
    rough_amplitude_range: tuple[float, float] = (0.015, 0.06)
    cmd_vx_range: tuple[float, float] = (-1.0, 2.0)
    cmd_vy_range: tuple[float, float] = (-0.5, 0.5)
    cmd_wz_range: tuple[float, float] = (-1.0, 1.0)
    qd_obs_scale: float = 0.05
    yaw_rate_obs_scale: float = 0.25
    h_des: float = 0.30
    foot_clearance_des: float = 0.09
    max_steps: int = 1000
    min_body_height: float = 0.15
    orientation_limit: float = 1.0
    history_length: int = 6
    scan_spacing: float = 0.1
    friction_randomization: bool = False
    friction_range: tuple[float, float] = (0.4, 1.0)

    @property
    def control_dt(self) -> float:
        return self.physics_dt * self.control_decimation


@dataclass
class Command:
    vx: float = 0.0
    vy: float = 0.0
    wz: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.wz])


@dataclass
class Observation:
    """Actor-visible proprioceptive observation; vector() serializes in the
    fixed OBS_LAYOUT order."""

    gravity: np.ndarray           # body-frame world-down unit vector
    joint_positions: np.ndarray   # q - q_def
    joint_velocities: np.ndarray  # scaled
    base_vx_vy: np.ndarray        # body frame
    base_yaw_rate: float          # scaled
    command: np.ndarray
    last_action: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([
            self.gravity, self.joint_positions, self.joint_velocities,
            self.base_vx_vy, [self.base_yaw_rate], self.command, self.last_action,
        ])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "Observation":
        v = np.asarray(v, dtype=float)
        if v.shape != (OBS_DIM,):
            raise ValueError(f"observation vector must have length {OBS_DIM}, got {v.shape}")
        parts = []
        off = 0
        for _, width in OBS_LAYOUT:
            parts.append(v[off:off + width])
            off += width
        return cls(gravity=parts[0], joint_positions=parts[1], joint_velocities=parts[2],
                   base_vx_vy=parts[3], base_yaw_rate=float(parts[4][0]),
                   command=parts[5], last_action=parts[6])


@dataclass
class PrivilegedObservation:
    """Critic-only state: true base velocities, height scan, terrain one-hot."""

    base_velocities: np.ndarray   # (6,) body-frame linear + angular
    height_scan: np.ndarray       # (187,)
    terrain_onehot: np.ndarray    # (4,)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.base_velocities, self.height_scan, self.terrain_onehot])


def terrain_onehot(kind: TerrainKind) -> np.ndarray:
    v = np.zeros(len(TERRAIN_KINDS))
    v[kind.value] = 1.0
    return v


def onehot_to_kind(v: np.ndarray) -> TerrainKind:
    v = np.asarray(v, dtype=float)
    idx = int(np.argmax(v))
    if not np.isclose(v.sum(), 1.0) or not np.isclose(v[idx], 1.0):
        raise ValueError(f"not a one-hot vector: {v}")
    return TERRAIN_KINDS[idx]


def build_observation(state: SimState, cmd: Command, last_action: np.ndarray,
                      cfg: EnvConfig) -> Observation:
    q = state.base_orientation
    gravity = quat_rotate_inverse(q, np.array([0.0, 0.0, -1.0]))
    vel_body = quat_rotate_inverse(q, state.base_linear_velocity)
    q_def = np.asarray(cfg.sim.q_def)
    clip = lambda v: np.clip(v, -OBS_CLIP, OBS_CLIP)
    return Observation(
        gravity=gravity,
        joint_positions=clip(state.joint_positions - q_def),
        joint_velocities=clip(state.joint_velocities * cfg.qd_obs_scale),
        base_vx_vy=clip(vel_body[:2]),
        base_yaw_rate=float(np.clip(state.base_angular_velocity[2] * cfg.yaw_rate_obs_scale,
                                    -OBS_CLIP, OBS_CLIP)),
        command=cmd.as_array(),
        last_action=clip(np.asarray(last_action, dtype=float)),
    )


def build_privileged(state: SimState, field: TerrainHeightfield, cfg: EnvConfig) -> PrivilegedObservation:
    vel_body = quat_rotate_inverse(state.base_orientation, state.base_linear_velocity)
    scan = height_scan(field, state.base_position, yaw_from_quat(state.base_orientation),
                       spacing=cfg.scan_spacing)
    return PrivilegedObservation(
        base_velocities=np.concatenate([vel_body, state.base_angular_velocity]),
        height_scan=scan,
        terrain_onehot=terrain_onehot(field.kind),
    )


class ObservationHistory:
    """Ring buffer of the last H observation vectors, flattened oldest-first;
    slots are zero before warm-up."""

    def __init__(self, length: int, obs_dim: int = OBS_DIM):
        self.length = int(length)
        self.obs_dim = int(obs_dim)
        self._buf = np.zeros((self.length, self.obs_dim))

    def reset(self) -> None:
        self._buf[:] = 0.0

    def push(self, obs_vec: np.ndarray) -> None:
        obs_vec = np.asarray(obs_vec, dtype=float)
        if obs_vec.shape != (self.obs_dim,):
            raise ValueError(f"expected ({self.obs_dim},) observation, got {obs_vec.shape}")
        self._buf[:-1] = self._buf[1:]
        self._buf[-1] = obs_vec

    def vector(self) -> np.ndarray:
        return self._buf.reshape(-1).copy()


@dataclass
class StepTelemetry:
    """Per-control-step quantities produced inside env_step and consumed by
    the reward function and trace logging."""

    q_des: np.ndarray
    torques: np.ndarray          # last substep
    power_sum: float             # mean over substeps of sum_i |tau_i * qd_i|
    foot_heights: np.ndarray     # (4,) foot height above terrain
    foot_contacts: np.ndarray    # (4,) bool
    oob_clamped: bool


@dataclass
class RewardBreakdown:
    """Raw (unweighted) values of every reward term plus the weighted total."""

    terms: dict[str, float]
    total: float

    def weighted(self) -> dict[str, float]:
        return {name: REWARD_WEIGHTS[name] * self.terms[name] for name in REWARD_TERMS}


def compute_rewards(prev: SimState, nxt: SimState, cmd: Command, action: np.ndarray,
                    prev_action: np.ndarray, gains: GainState, prev_gains: GainState,
                    telemetry: StepTelemetry, field: TerrainHeightfield,
                    cfg: EnvConfig) -> RewardBreakdown:
    vel_body = quat_rotate_inverse(nxt.base_orientation, nxt.base_linear_velocity)
    omega = nxt.base_angular_velocity

    err_xy = np.array([cmd.vx, cmd.vy]) - vel_body[:2]
    err_yaw = cmd.wz - omega[2]
    h = nxt.base_position[2] - terrain_height(field, nxt.base_position[0], nxt.base_position[1])

    swing = ~telemetry.foot_contacts
    clearance_err = cfg.foot_clearance_des - telemetry.foot_heights
    clearance = float(np.sum(np.where(swing, clearance_err ** 2, 0.0)))

    q_des_err = telemetry.q_des - nxt.joint_positions
    action = np.asarray(action, dtype=float)
    prev_action = np.asarray(prev_action, dtype=float)

    terms = {
        "track_xy": float(np.exp(-4.0 * float(err_xy @ err_xy))),
        "track_yaw": float(np.exp(-4.0 * err_yaw ** 2)),
        "z_velocity": float(vel_body[2] ** 2),
        "angular_velocity": float(omega[0] ** 2 + omega[1] ** 2),
        "joint_power": telemetry.power_sum,
        "action_rate": float(np.sum((prev_action - action) ** 2)),
        "body_height": float((cfg.h_des - h) ** 2),
        "foot_clearance": clearance,
        "p_gain_limit": float(np.exp(-float(q_des_err @ q_des_err))),
        "gain_change": float(np.sum((prev_gains.raw_gains() - gains.raw_gains()) ** 2)),
    }
    total = sum(REWARD_WEIGHTS[name] * terms[name] for name in REWARD_TERMS)
    return RewardBreakdown(terms=terms, total=total)


class Env:
    """Single quadruped episode environment at the control rate."""

    def __init__(self, cfg: EnvConfig, seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.field: TerrainHeightfield | None = None
        self.state: SimState | None = None
        self.cmd = Command()
        self.gains = GainState.zero(cfg.sim.p_floor)
        self.prev_action = np.zeros(ACTION_DIM)
        self.step_count = 0
        self.friction: float | None = None
        self.done = False
        self.done_reason = ""

    # -- episode management ------------------------------------------------

    def _sample_terrain(self, kind: TerrainKind | None) -> TerrainHeightfield:
        cfg = self.cfg
        if kind is None:
            kind = cfg.terrain_kinds[int(self.rng.integers(len(cfg.terrain_kinds)))]
        params: dict = {}
        if kind is TerrainKind.SLOPE:
            params["angle"] = float(self.rng.uniform(*cfg.slope_range))
        elif kind is TerrainKind.STAIRS:
            params["rise"] = float(self.rng.uniform(*cfg.stair_rise_range))
            params["run"] = float(self.rng.uniform(*cfg.stair_run_range))
        elif kind is TerrainKind.ROUGH:
            params["amplitude"] = float(self.rng.uniform(*cfg.rough_amplitude_range))
        seed = int(self.rng.integers(2 ** 31))
        return generate_terrain(kind, params, seed=seed, extent=cfg.terrain_extent,
                                cell_size=cfg.terrain_cell)

    def _sample_command(self, cmd_ranges=None) -> Command:
        cfg = self.cfg
        ranges = cmd_ranges or (cfg.cmd_vx_range, cfg.cmd_vy_range, cfg.cmd_wz_range)
        vals = [float(self.rng.uniform(lo, hi)) for lo, hi in ranges]
        return Command(*vals)

    def reset(self, seed: int | None = None, kind: TerrainKind | None = None,
              cmd_ranges=None) -> tuple[SimState, Observation, PrivilegedObservation]:
        cfg = self.cfg
        if seed is not None:
            self.rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.field = self._sample_terrain(kind)
        self.cmd = self._sample_command(cmd_ranges)
        self.friction = (float(self.rng.uniform(*cfg.friction_range))
                         if cfg.friction_randomization else None)

        state = sim.default_state(cfg.sim)
        feet_b = state.foot_positions  # world == base frame at origin spawn
        ground, _ = terrain_heights_batch(self.field, feet_b[:, :2])
        base_z = float(np.max(ground - feet_b[:, 2])) + 1e-3
        for _ in range(3):
            state = sim.default_state(cfg.sim, base_position=np.array([0.0, 0.0, base_z]))
            ground, _ = terrain_heights_batch(self.field, state.foot_positions[:, :2])
            if np.all(state.foot_positions[:, 2] >= ground - 1e-6):
                break
            base_z += 0.05

        self.state = state
        self.prev_action = np.zeros(ACTION_DIM)
        self.gains = GainState.zero(cfg.sim.p_floor)
        self.step_count = 0
        self.done = False
        self.done_reason = ""
        obs = build_observation(state, self.cmd, self.prev_action, cfg)
        priv = build_privileged(state, self.field, cfg)
        return state, obs, priv

    def check_termination(self, state: SimState) -> tuple[bool, str]:
        cfg = self.cfg
        h = state.base_position[2] - terrain_height(self.field, state.base_position[0],
                                                    state.base_position[1])
        if h < cfg.min_body_height:
            return True, "contact"
        roll, pitch = roll_pitch_from_quat(state.base_orientation)
        if abs(roll) > cfg.orientation_limit or abs(pitch) > cfg.orientation_limit:
            return True, "orientation"
        if self.step_count >= cfg.max_steps:
            return True, "timeout"
        return False, ""

    # -- control step --------------------------------------------------------

    def step(self, action: np.ndarray) -> tuple[Observation, PrivilegedObservation,
                                                RewardBreakdown, bool, dict]:
        if self.state is None:
            raise RuntimeError("environment must be reset before stepping")
        action = np.asarray(action, dtype=float)
        if action.shape != (ACTION_DIM,) or not np.all(np.isfinite(action)):
            raise ValueError(f"action must be a finite {ACTION_DIM}-vector")
        cfg = self.cfg

        a_pos = action[:N_JOINTS]
        gains = GainState.from_action(action[N_JOINTS:2 * N_JOINTS],
                                      action[2 * N_JOINTS:], cfg.sim.p_floor)
        q_des = reference_position(a_pos, np.asarray(cfg.sim.q_def))

        prev_state = self.state
        state = self.state
        power = 0.0
        oob = False
        diag = None
        for _ in range(cfg.control_decimation):
            tau = pd_torque(q_des, state.joint_positions, state.joint_velocities,
                            gains, cfg.sim.torque_limit)
            state, diag = sim.step(state, tau, self.field, cfg.sim, cfg.physics_dt,
                                   friction=self.friction)
            power += float(np.sum(np.abs(diag.applied_torque * state.joint_velocities)))
            oob = oob or diag.oob_clamped

        ground, _ = terrain_heights_batch(self.field, state.foot_positions[:, :2])
        telemetry = StepTelemetry(
            q_des=q_des,
            torques=diag.applied_torque,
            power_sum=power / cfg.control_decimation,
            foot_heights=state.foot_positions[:, 2] - ground,
            foot_contacts=diag.in_contact,
            oob_clamped=oob,
        )

        reward = compute_rewards(prev_state, state, self.cmd, action, self.prev_action,
                                 gains, self.gains, telemetry, self.field, cfg)

        self.state = state
        self.step_count += 1
        done, reason = self.check_termination(state)
        self.done = done
        self.done_reason = reason

        obs = build_observation(state, self.cmd, action, cfg)
        priv = build_privileged(state, self.field, cfg)
        info = {
            "reason": reason,
            "telemetry": telemetry,
            "effective_p": gains.effective_p(),
            "effective_d": gains.effective_d(),
            "body_height": float(state.base_position[2] - terrain_height(
                self.field, state.base_position[0], state.base_position[1])),
        }
        self.prev_action = action.copy()
        self.gains = gains
        return obs, priv, reward, done, info


# ---------------------------------------------------------------------------
# episode traces

TRACE_COLUMNS = (
    ["time", "cmd_vx", "cmd_vy", "cmd_wz", "vx", "vy", "vz", "wx", "wy", "wz", "body_height"]
    + [f"tau_{i}" for i in range(N_JOINTS)]
    + [f"qd_{i}" for i in range(N_JOINTS)]
    + [f"p_gain_{i}" for i in range(N_JOINTS)]
    + [f"d_gain_{i}" for i in range(N_JOINTS)]
    + [f"rew_{name}" for name in REWARD_TERMS]
    + ["rew_total", "done"]
)


class TraceRecorder:
    """Accumulates one row per control step; writes the documented CSV."""

    def __init__(self):
        self.rows: list[list[float]] = []

    def record(self, env: Env, reward: RewardBreakdown, info: dict, done: bool) -> None:
        state = env.state
        vel_body = quat_rotate_inverse(state.base_orientation, state.base_linear_velocity)
        tele: StepTelemetry = info["telemetry"]
        row = [state.time, env.cmd.vx, env.cmd.vy, env.cmd.wz,
               vel_body[0], vel_body[1], vel_body[2],
               state.base_angular_velocity[0], state.base_angular_velocity[1],
               state.base_angular_velocity[2], info["body_height"]]
        row += list(tele.torques)
        row += list(state.joint_velocities)
        row += list(info["effective_p"])
        row += list(info["effective_d"])
        row += [reward.terms[name] for name in REWARD_TERMS]
        row += [reward.total, 1.0 if done else 0.0]
        self.rows.append([float(v) for v in row])

    def write(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            for row in self.rows:
                writer.writerow([repr(v) for v in row])

    def as_dict(self) -> dict[str, np.ndarray]:
        data = np.asarray(self.rows, dtype=float).reshape(len(self.rows), len(TRACE_COLUMNS))
        return {name: data[:, i] for i, name in enumerate(TRACE_COLUMNS)}


def load_trace(path: str | Path) -> dict[str, np.ndarray]:
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.asarray(rows, dtype=float).reshape(len(rows), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}
