"""Batched environment stepping for rollout collection.

VecEnv advances N independent episode environments with array-parallel
numpy math (leading batch dimension over envs, then legs). The physics is
the same model as sim.step; tests pin the two paths against each other.
Done envs auto-reset with freshly sampled terrain and commands.
"""

from dataclasses import dataclass

import numpy as np

from . import sim
from .env import (ACTION_DIM, OBS_CLIP, OBS_DIM, PRIV_DIM, REWARD_TERMS,
                  REWARD_WEIGHTS, EnvConfig, TERRAIN_KINDS)
from .sim import GainState, N_JOINTS, N_LEGS, SimulationFault, _LEG_SIGNS
from .terrain import TerrainKind, generate_terrain, scan_offsets

_WEIGHT_VEC = np.array([REWARD_WEIGHTS[name] for name in REWARD_TERMS])


def quat_to_matrix_batch(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - z * w)
    r[:, 0, 2] = 2 * (x * z + y * w)
    r[:, 1, 0] = 2 * (x * y + z * w)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - x * w)
    r[:, 2, 0] = 2 * (x * z - y * w)
    r[:, 2, 1] = 2 * (y * z + x * w)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_mul_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    w2, x2, y2, z2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=1)


def integrate_quat_batch(q: np.ndarray, omega_body: np.ndarray, dt: float) -> np.ndarray:
    angle = np.linalg.norm(omega_body, axis=1) * dt
    half = 0.5 * angle
    dq = np.zeros_like(q)
    dq[:, 0] = np.cos(half)
    small = angle < 1e-15
    scale = np.where(small, 0.0, np.sin(half) / np.maximum(angle / dt, 1e-300))
    dq[:, 1:] = omega_body * scale[:, None]
    dq[small, 0] = 1.0
    out = quat_mul_batch(q, dq)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def leg_kinematics_batch(params: sim.SimParams, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Foot positions (B, 4, 3) in the base frame and Jacobians (B, 4, 3, 3)."""
    b = q.shape[0]
    qq = q.reshape(b, N_LEGS, 3)
    q0, a = qq[:, :, 0], qq[:, :, 1]
    bb = qq[:, :, 1] + qq[:, :, 2]
    sy = _LEG_SIGNS[:, 1][None, :]
    l2, l3 = params.thigh, params.calf

    ux = l2 * np.sin(a) + l3 * np.sin(bb)
    uy = np.broadcast_to(sy * params.hip_link, (b, N_LEGS))
    uz = -(l2 * np.cos(a) + l3 * np.cos(bb))

    c0, s0 = np.cos(q0), np.sin(q0)
    zeros = np.zeros_like(ux)

    def rot_x(vx, vy, vz):
        return np.stack([vx, c0 * vy - s0 * vz, s0 * vy + c0 * vz], axis=2)

    mounts = sim.hip_mounts(params)[None, :, :]
    feet = mounts + rot_x(ux, uy, uz)

    dua_x, dua_z = l2 * np.cos(a), l2 * np.sin(a)
    dub_x, dub_z = l3 * np.cos(bb), l3 * np.sin(bb)
    jac = np.empty((b, N_LEGS, 3, 3))
    jac[:, :, :, 0] = rot_x(zeros, -uz, uy)
    jac[:, :, :, 1] = rot_x(dua_x + dub_x, zeros, dua_z + dub_z)
    jac[:, :, :, 2] = rot_x(dub_x, zeros, dub_z)
    return feet, jac


@dataclass
class VecStepResult:
    obs: np.ndarray            # (B, 69)
    priv: np.ndarray           # (B, 197)
    reward_terms: np.ndarray   # (B, n_terms) raw values, REWARD_TERMS order
    reward_total: np.ndarray   # (B,)
    done: np.ndarray           # (B,) bool
    timeout: np.ndarray        # (B,) bool; subset of done
    effective_p: np.ndarray    # (B, 12)
    effective_d: np.ndarray    # (B, 12)
    episode_return: np.ndarray  # (B,) filled where done
    episode_length: np.ndarray  # (B,) filled where done


class VecEnv:
    """N independent environments stepped with batched array math."""

    def __init__(self, cfg: EnvConfig, n_envs: int, seed: int = 0,
                 terrain_kinds: tuple[TerrainKind, ...] | None = None,
                 cmd_ranges: tuple | None = None):
        self.cfg = cfg
        self.n = int(n_envs)
        self.kinds_pool = tuple(terrain_kinds or cfg.terrain_kinds)
        self.cmd_ranges = cmd_ranges or (cfg.cmd_vx_range, cfg.cmd_vy_range, cfg.cmd_wz_range)
        root = np.random.SeedSequence(seed)
        self.rngs = [np.random.default_rng(s) for s in root.spawn(self.n)]

        nx = int(round(2.0 * cfg.terrain_extent / cfg.terrain_cell)) + 1
        self._grid_n = nx
        self.heights = np.zeros((self.n, nx, nx))
        self.origin = np.array([-cfg.terrain_extent, -cfg.terrain_extent])
        self.kind_idx = np.zeros(self.n, dtype=int)

        self.pos = np.zeros((self.n, 3))
        self.quat = np.zeros((self.n, 4))
        self.quat[:, 0] = 1.0
        self.lin_vel = np.zeros((self.n, 3))
        self.ang_vel = np.zeros((self.n, 3))
        self.q = np.zeros((self.n, N_JOINTS))
        self.qd = np.zeros((self.n, N_JOINTS))
        self.time = np.zeros(self.n)
        self.cmd = np.zeros((self.n, 3))
        self.prev_action = np.zeros((self.n, ACTION_DIM))
        self.prev_gain_raw = np.tile(GainState.zero().raw_gains(), (self.n, 1))
        self.step_count = np.zeros(self.n, dtype=int)
        self.friction = np.full(self.n, cfg.sim.friction)
        self.ep_return = np.zeros(self.n)

        self._q_def = np.asarray(cfg.sim.q_def)
        self._scan_offsets = scan_offsets(cfg.scan_spacing)
        self._env_idx = np.arange(self.n)

        for i in range(self.n):
            self._reset_env(i)

    # -- terrain ------------------------------------------------------------

    def _sample_field(self, rng: np.random.Generator):
        cfg = self.cfg
        kind = self.kinds_pool[int(rng.integers(len(self.kinds_pool)))]
        params: dict = {}
        if kind is TerrainKind.SLOPE:
            params["angle"] = float(rng.uniform(*cfg.slope_range))
        elif kind is TerrainKind.STAIRS:
            params["rise"] = float(rng.uniform(*cfg.stair_rise_range))
            params["run"] = float(rng.uniform(*cfg.stair_run_range))
        elif kind is TerrainKind.ROUGH:
            params["amplitude"] = float(rng.uniform(*cfg.rough_amplitude_range))
        seed = int(rng.integers(2 ** 31))
        return generate_terrain(kind, params, seed=seed, extent=cfg.terrain_extent,
                                cell_size=cfg.terrain_cell)

    def _heights_at(self, env_ids: np.ndarray, xy: np.ndarray) -> np.ndarray:
        """Bilinear terrain heights; xy is (..., 2) with env_ids broadcastable
        to its leading shape. Out-of-bounds points clamp to the border."""
        cfg = self.cfg
        n = self._grid_n
        fx = np.clip((xy[..., 0] - self.origin[0]) / cfg.terrain_cell, 0.0, n - 1.0)
        fy = np.clip((xy[..., 1] - self.origin[1]) / cfg.terrain_cell, 0.0, n - 1.0)
        ix = np.minimum(fx.astype(int), n - 2)
        iy = np.minimum(fy.astype(int), n - 2)
        tx = fx - ix
        ty = fy - iy
        e = np.broadcast_to(np.asarray(env_ids).reshape((-1,) + (1,) * (xy.ndim - 2)), ix.shape)
        h = self.heights
        return (h[e, ix, iy] * (1 - tx) * (1 - ty) + h[e, ix + 1, iy] * tx * (1 - ty)
                + h[e, ix, iy + 1] * (1 - tx) * ty + h[e, ix + 1, iy + 1] * tx * ty)

    # -- resets ---------------------------------------------------------------

    def _reset_env(self, i: int) -> None:
        cfg = self.cfg
        rng = self.rngs[i]
        field = self._sample_field(rng)
        self.heights[i] = field.heights
        self.kind_idx[i] = field.kind.value
        self.cmd[i] = [rng.uniform(lo, hi) for lo, hi in self.cmd_ranges]
        self.friction[i] = (rng.uniform(*cfg.friction_range)
                            if cfg.friction_randomization else cfg.sim.friction)

        feet_b, _ = sim.leg_kinematics(cfg.sim, self._q_def)
        ground = self._heights_at(np.array([i]), feet_b[None, :, :2])[0]
        base_z = float(np.max(ground - feet_b[:, 2])) + 1e-3
        self.pos[i] = [0.0, 0.0, base_z]
        self.quat[i] = [1.0, 0.0, 0.0, 0.0]
        self.lin_vel[i] = 0.0
        self.ang_vel[i] = 0.0
        self.q[i] = self._q_def
        self.qd[i] = 0.0
        self.time[i] = 0.0
        self.step_count[i] = 0
        self.prev_action[i] = 0.0
        self.prev_gain_raw[i] = GainState.zero().raw_gains()
        self.ep_return[i] = 0.0

    # -- observations ---------------------------------------------------------

    def observations(self) -> np.ndarray:
        cfg = self.cfg
        r = quat_to_matrix_batch(self.quat)
        gravity = -r[:, 2, :]                      # R^T (0,0,-1)
        vel_body = np.einsum("bji,bj->bi", r, self.lin_vel)
        obs = np.empty((self.n, OBS_DIM))
        obs[:, 0:3] = gravity
        obs[:, 3:15] = self.q - self._q_def
        obs[:, 15:27] = self.qd * cfg.qd_obs_scale
        obs[:, 27:29] = vel_body[:, :2]
        obs[:, 29] = self.ang_vel[:, 2] * cfg.yaw_rate_obs_scale
        obs[:, 30:33] = self.cmd
        obs[:, 33:] = self.prev_action
        np.clip(obs[:, :30], -OBS_CLIP, OBS_CLIP, out=obs[:, :30])
        np.clip(obs[:, 33:], -OBS_CLIP, OBS_CLIP, out=obs[:, 33:])
        return obs

    def privileged(self) -> np.ndarray:
        r = quat_to_matrix_batch(self.quat)
        vel_body = np.einsum("bji,bj->bi", r, self.lin_vel)
        yaw = np.arctan2(r[:, 1, 0], r[:, 0, 0])
        c, s = np.cos(yaw), np.sin(yaw)
        off = self._scan_offsets
        px = self.pos[:, 0:1] + c[:, None] * off[:, 0] - s[:, None] * off[:, 1]
        py = self.pos[:, 1:2] + s[:, None] * off[:, 0] + c[:, None] * off[:, 1]
        scan = self._heights_at(self._env_idx, np.stack([px, py], axis=-1)) - self.pos[:, 2:3]
        priv = np.empty((self.n, PRIV_DIM))
        priv[:, 0:3] = vel_body
        priv[:, 3:6] = self.ang_vel
        priv[:, 6:6 + scan.shape[1]] = scan
        onehot = np.zeros((self.n, len(TERRAIN_KINDS)))
        onehot[self._env_idx, self.kind_idx] = 1.0
        priv[:, 6 + scan.shape[1]:] = onehot
        return priv

    def true_base_velocity(self) -> np.ndarray:
        r = quat_to_matrix_batch(self.quat)
        return np.einsum("bji,bj->bi", r, self.lin_vel)

    # -- stepping ---------------------------------------------------------------

    def _substep(self, tau: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """One physics substep for all envs; returns (applied torque, contact mask)."""
        cfg = self.cfg
        p = cfg.sim
        dt = cfg.physics_dt
        tau = np.clip(tau, -p.torque_limit, p.torque_limit)

        r = quat_to_matrix_batch(self.quat)
        feet_b, jac = leg_kinematics_batch(p, self.q)
        feet_w_rel = np.einsum("bij,blj->bli", r, feet_b)
        feet_w = self.pos[:, None, :] + feet_w_rel

        qd_legs = self.qd.reshape(self.n, N_LEGS, 3)
        vel_b = (np.cross(np.broadcast_to(self.ang_vel[:, None, :], feet_b.shape), feet_b)
                 + np.einsum("blij,blj->bli", jac, qd_legs))
        feet_vel_w = self.lin_vel[:, None, :] + np.einsum("bij,blj->bli", r, vel_b)

        ground = self._heights_at(self._env_idx, feet_w[:, :, :2])
        pen = ground - feet_w[:, :, 2]
        in_contact = pen > 0.0
        fn = p.contact_stiffness * pen - p.contact_damping * feet_vel_w[:, :, 2]
        fn = np.where(in_contact, np.maximum(fn, 0.0), 0.0)
        ft = -p.tangential_damping * feet_vel_w[:, :, :2]
        ft_norm = np.linalg.norm(ft, axis=2)
        cap = self.friction[:, None] * fn
        scale = np.where(ft_norm > cap,
                         np.divide(cap, ft_norm, out=np.ones_like(cap), where=ft_norm > 1e-12),
                         1.0)
        forces = np.zeros((self.n, N_LEGS, 3))
        forces[:, :, :2] = ft * (scale * in_contact)[:, :, None]
        forces[:, :, 2] = fn

        total_force = forces.sum(axis=1)
        torque_w = np.cross(feet_w_rel, forces).sum(axis=1)
        acc = total_force / p.mass
        acc[:, 2] -= p.gravity
        self.lin_vel = self.lin_vel + dt * acc

        inertia = np.asarray(p.inertia)
        torque_b = np.einsum("bji,bj->bi", r, torque_w)
        self.ang_vel = self.ang_vel + dt * torque_b / inertia
        self.quat = integrate_quat_batch(self.quat, self.ang_vel, dt)
        self.pos = self.pos + dt * self.lin_vel

        forces_b = np.einsum("bji,blj->bli", r, forces)
        tau_contact = np.einsum("blji,blj->bli", jac, forces_b).reshape(self.n, N_JOINTS)
        qdd = (tau + tau_contact) / p.reflected_inertia
        self.qd = self.qd + dt * qdd
        self.q = self.q + dt * self.qd
        self.time = self.time + dt
        return tau, in_contact

    def step(self, actions: np.ndarray) -> VecStepResult:
        cfg = self.cfg
        actions = np.asarray(actions, dtype=float)
        if actions.shape != (self.n, ACTION_DIM):
            raise ValueError(f"expected actions of shape {(self.n, ACTION_DIM)}, got {actions.shape}")
        if not np.all(np.isfinite(actions)):
            raise ValueError("non-finite action")

        a_pos = actions[:, :N_JOINTS]
        a_p = actions[:, N_JOINTS:2 * N_JOINTS]
        a_d = actions[:, 2 * N_JOINTS:]
        q_des = self._q_def + sim.ALPHA_POS * a_pos
        eff_p = np.maximum(sim.P_INIT + sim.ALPHA_GAIN * a_p, cfg.sim.p_floor)
        eff_d = np.maximum(sim.D_INIT + sim.ALPHA_GAIN * a_d, 0.0)
        gain_raw = np.concatenate([sim.P_INIT + sim.ALPHA_GAIN * a_p,
                                   sim.D_INIT + sim.ALPHA_GAIN * a_d], axis=1)

        power = np.zeros(self.n)
        tau = None
        in_contact = None
        for _ in range(cfg.control_decimation):
            tau_cmd = eff_p * (q_des - self.q) - eff_d * self.qd
            tau, in_contact = self._substep(tau_cmd)
            power += np.abs(tau * self.qd).sum(axis=1)
        power /= cfg.control_decimation

        for arr in (self.pos, self.quat, self.lin_vel, self.ang_vel, self.q, self.qd):
            if not np.all(np.isfinite(arr)):
                bad = np.where(~np.all(np.isfinite(arr.reshape(self.n, -1)), axis=1))[0]
                raise SimulationFault(f"non-finite state in envs {bad.tolist()}")

        self.step_count += 1

        # rewards
        r = quat_to_matrix_batch(self.quat)
        vel_body = np.einsum("bji,bj->bi", r, self.lin_vel)
        err_xy = self.cmd[:, :2] - vel_body[:, :2]
        err_yaw = self.cmd[:, 2] - self.ang_vel[:, 2]
        base_ground = self._heights_at(self._env_idx, self.pos[None, :, :2].swapaxes(0, 1))[:, 0]
        h = self.pos[:, 2] - base_ground

        feet_b, _ = leg_kinematics_batch(cfg.sim, self.q)
        feet_w = self.pos[:, None, :] + np.einsum("bij,blj->bli", r, feet_b)
        foot_ground = self._heights_at(self._env_idx, feet_w[:, :, :2])
        foot_h = feet_w[:, :, 2] - foot_ground
        clearance = np.where(~in_contact, (cfg.foot_clearance_des - foot_h) ** 2, 0.0).sum(axis=1)

        q_err = q_des - self.q
        terms = np.empty((self.n, len(REWARD_TERMS)))
        terms[:, 0] = np.exp(-4.0 * np.sum(err_xy ** 2, axis=1))
        terms[:, 1] = np.exp(-4.0 * err_yaw ** 2)
        terms[:, 2] = vel_body[:, 2] ** 2
        terms[:, 3] = self.ang_vel[:, 0] ** 2 + self.ang_vel[:, 1] ** 2
        terms[:, 4] = power
        terms[:, 5] = np.sum((self.prev_action - actions) ** 2, axis=1)
        terms[:, 6] = (cfg.h_des - h) ** 2
        terms[:, 7] = clearance
        terms[:, 8] = np.exp(-np.sum(q_err ** 2, axis=1))
        terms[:, 9] = np.sum((self.prev_gain_raw - gain_raw) ** 2, axis=1)
        total = terms @ _WEIGHT_VEC
        self.ep_return += total

        # termination
        roll = np.arctan2(r[:, 2, 1], r[:, 2, 2])
        pitch = np.arctan2(-r[:, 2, 0], np.sqrt(np.maximum(r[:, 2, 1] ** 2 + r[:, 2, 2] ** 2, 1e-12)))
        fell = (h < cfg.min_body_height) | (np.abs(roll) > cfg.orientation_limit) \
            | (np.abs(pitch) > cfg.orientation_limit)
        timeout = self.step_count >= cfg.max_steps
        done = fell | timeout

        self.prev_action = actions.copy()
        self.prev_gain_raw = gain_raw

        ep_return = self.ep_return.copy()
        ep_length = self.step_count.copy()
        for i in np.where(done)[0]:
            self._reset_env(i)

        return VecStepResult(
            obs=self.observations(),
            priv=self.privileged(),
            reward_terms=terms,
            reward_total=total,
            done=done,
            timeout=timeout & ~fell,
            effective_p=eff_p,
            effective_d=eff_d,
            episode_return=ep_return,
            episode_length=ep_length,
        )
