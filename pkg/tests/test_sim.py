import numpy as np
import pytest

from gainloco.sim import (ALPHA_GAIN, ALPHA_POS, D_INIT, GainState, P_INIT, SimParams,
                          SimulationFault, default_state, foot_contact_forces,
                          foot_world_positions, integrate_quat, leg_kinematics, pd_torque,
                          quat_from_axis_angle, quat_mul, quat_normalize, quat_rotate,
                          quat_rotate_inverse, reference_position, roll_pitch_from_quat,
                          step, yaw_from_quat)
from gainloco.terrain import TerrainKind, generate_terrain


@pytest.fixture
def params():
    return SimParams()


@pytest.fixture
def level(params):
    return generate_terrain(TerrainKind.LEVEL, {}, seed=0)


class TestReferencePosition:
    def test_zero_action_returns_home_posture(self):
        q_def = np.asarray(SimParams().q_def)
        assert np.array_equal(reference_position(np.zeros(12), q_def), q_def)

    def test_unit_action_scales_by_quarter(self):
        a = np.zeros(12)
        a[0] = 1.0
        q = reference_position(a, np.zeros(12))
        assert abs(q[0] - 0.25) < 1e-12 and np.all(q[1:] == 0.0)

    def test_random_actions_match_direct_recomputation(self):
        rng = np.random.default_rng(0)
        q_def = np.asarray(SimParams().q_def)
        for _ in range(30):
            a = rng.normal(size=12)
            assert np.allclose(reference_position(a, q_def), q_def + ALPHA_POS * a, atol=1e-12)


class TestPdTorque:
    def test_equilibrium_zero_torque(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=12)
        gains = GainState.from_action(rng.normal(size=12), rng.normal(size=12))
        assert np.allclose(pd_torque(q, q, np.zeros(12), gains), 0.0, atol=1e-12)

    def test_hand_case_initial_gains(self):
        q_des = np.zeros(12)
        q_des[5] = 0.1
        tau = pd_torque(q_des, np.zeros(12), np.zeros(12), GainState.zero())
        assert abs(tau[5] - 2.8) < 1e-12

    def test_hand_case_reduced_p(self):
        gains = GainState.from_action(np.full(12, -10.0), np.zeros(12))
        assert np.allclose(gains.effective_p(), 23.0, atol=1e-12)
        q_des = np.zeros(12)
        q_des[5] = 0.1
        tau = pd_torque(q_des, np.zeros(12), np.zeros(12), gains)
        assert abs(tau[5] - 2.3) < 1e-12

    def test_linearity_superposition(self):
        rng = np.random.default_rng(2)
        gains = GainState.from_action(rng.normal(size=12), rng.normal(size=12))
        q = np.zeros(12)
        e1, e2 = rng.normal(size=12) * 0.05, rng.normal(size=12) * 0.05
        v1, v2 = rng.normal(size=12) * 0.2, rng.normal(size=12) * 0.2
        t_sum = pd_torque(e1 + e2, q, v1 + v2, gains, torque_limit=1e9)
        t_parts = pd_torque(e1, q, v1, gains, torque_limit=1e9) \
            + pd_torque(e2, q, v2, gains, torque_limit=1e9)
        assert np.allclose(t_sum, t_parts, atol=1e-9)

    def test_torque_clipped_to_limit(self):
        q_des = np.full(12, 10.0)
        tau = pd_torque(q_des, np.zeros(12), np.zeros(12), GainState.zero())
        assert np.all(np.abs(tau) <= 23.7 + 1e-12)

    def test_gain_clamping_for_any_action(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            gains = GainState.from_action(rng.normal(size=12) * 200,
                                          rng.normal(size=12) * 200)
            assert np.all(gains.effective_p() >= gains.p_floor)
            assert np.all(gains.effective_d() >= 0.0)

    def test_raw_gain_vector_layout(self):
        gains = GainState.from_action(np.ones(12), np.full(12, 2.0))
        raw = gains.raw_gains()
        assert np.allclose(raw[:12], P_INIT + ALPHA_GAIN)
        assert np.allclose(raw[12:], D_INIT + 2.0 * ALPHA_GAIN)


class TestQuaternions:
    def test_rotation_round_trip(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            q = quat_normalize(rng.normal(size=4))
            v = rng.normal(size=3)
            assert np.allclose(quat_rotate_inverse(q, quat_rotate(q, v)), v, atol=1e-12)

    def test_mul_identity(self):
        q = quat_normalize(np.array([0.3, 0.5, -0.2, 0.7]))
        ident = np.array([1.0, 0.0, 0.0, 0.0])
        assert np.allclose(quat_mul(q, ident), q, atol=1e-15)

    def test_yaw_extraction(self):
        q = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), 0.7)
        assert abs(yaw_from_quat(q) - 0.7) < 1e-12

    def test_roll_pitch_extraction(self):
        q = quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), 0.3)
        roll, pitch = roll_pitch_from_quat(q)
        assert abs(roll - 0.3) < 1e-12 and abs(pitch) < 1e-12

    def test_integrate_preserves_norm(self):
        q = quat_normalize(np.array([0.9, 0.1, -0.3, 0.2]))
        for _ in range(100):
            q = integrate_quat(q, np.array([2.0, -1.0, 3.0]), 0.01)
        assert abs(np.linalg.norm(q) - 1.0) < 1e-9


class TestKinematics:
    def test_home_posture_standing_height(self, params):
        feet, _ = leg_kinematics(params, np.asarray(params.q_def))
        # all feet at the same height, roughly 0.31 m below the base
        assert np.allclose(feet[:, 2], feet[0, 2], atol=1e-12)
        assert -0.35 < feet[0, 2] < -0.25

    def test_jacobian_matches_finite_differences(self, params):
        rng = np.random.default_rng(5)
        q = np.asarray(params.q_def) + rng.normal(size=12) * 0.3
        feet, jac = leg_kinematics(params, q)
        h = 1e-7
        for j in range(12):
            qp, qm = q.copy(), q.copy()
            qp[j] += h
            qm[j] -= h
            fd = (leg_kinematics(params, qp)[0] - leg_kinematics(params, qm)[0]) / (2 * h)
            leg, joint = divmod(j, 3)
            assert np.allclose(jac[leg, :, joint], fd[leg], atol=1e-6)
            other = [l for l in range(4) if l != leg]
            assert np.allclose(fd[other], 0.0, atol=1e-9)


class TestContact:
    def test_penalty_normal_force_hand_case(self, level):
        p = SimParams(contact_stiffness=5000.0, contact_damping=0.0)
        pos = np.array([[0.1, 0.0, -0.01], [0.5, 0.5, 0.2], [1.0, 1.0, 0.3], [2.0, 2.0, 0.4]])
        vel = np.zeros((4, 3))
        forces, contact, _ = foot_contact_forces(p, level, pos, vel)
        assert abs(forces[0, 2] - 50.0) < 1e-9
        assert contact[0] and not contact[1:].any()
        assert np.allclose(forces[1:], 0.0)

    def test_friction_capped_by_coulomb(self, level):
        p = SimParams(contact_stiffness=5000.0, contact_damping=0.0,
                      tangential_damping=1e5, friction=0.8)
        pos = np.array([[0.0, 0.0, -0.01]] + [[9, 9, 1]] * 3)
        vel = np.zeros((4, 3))
        vel[0, 0] = 1.0
        forces, _, _ = foot_contact_forces(p, level, pos, vel)
        assert abs(np.linalg.norm(forces[0, :2]) - 0.8 * 50.0) < 1e-9
        assert forces[0, 0] < 0.0  # opposes slip

    def test_separating_foot_has_no_adhesion(self, level):
        p = SimParams(contact_stiffness=5000.0, contact_damping=1e6)
        pos = np.array([[0.0, 0.0, -0.001]] + [[9, 9, 1]] * 3)
        vel = np.zeros((4, 3))
        vel[0, 2] = 1.0  # moving up fast: damping would make force negative
        forces, _, _ = foot_contact_forces(p, level, pos, vel)
        assert forces[0, 2] == 0.0


class TestStep:
    def test_free_body_velocity_unchanged_without_gravity(self, level):
        p = SimParams(gravity=0.0)
        state = default_state(p, base_position=np.array([0.0, 0.0, 2.0]))
        state.base_linear_velocity = np.array([0.3, -0.2, 0.1])
        nxt, _ = step(state, np.zeros(12), level, p, 0.005)
        assert np.array_equal(nxt.base_linear_velocity, state.base_linear_velocity)

    def test_gravity_drops_velocity_by_g_dt(self, params, level):
        state = default_state(params, base_position=np.array([0.0, 0.0, 2.0]))
        nxt, _ = step(state, np.zeros(12), level, params, 0.005)
        assert abs(nxt.base_linear_velocity[2] + params.gravity * 0.005) < 1e-12

    def test_ballistic_energy_never_increases(self, params, level):
        state = default_state(params, base_position=np.array([0.0, 0.0, 5.0]))
        state.base_linear_velocity = np.array([0.5, 0.2, 1.0])
        state.base_angular_velocity = np.array([0.4, -0.3, 0.8])
        state.joint_velocities = np.random.default_rng(6).normal(size=12) * 0.5

        def energy(s):
            ke = 0.5 * params.mass * s.base_linear_velocity @ s.base_linear_velocity
            rot = 0.5 * np.sum(np.asarray(params.inertia) * s.base_angular_velocity ** 2)
            pe = params.mass * params.gravity * s.base_position[2]
            joints = 0.5 * params.reflected_inertia * s.joint_velocities @ s.joint_velocities
            return ke + rot + pe + joints

        e0 = energy(state)
        e_prev = e0
        for _ in range(100):
            state, diag = step(state, np.zeros(12), level, params, 0.0025)
            assert not diag.in_contact.any()
            e = energy(state)
            assert e <= e_prev + 1e-9
            e_prev = e

    def test_determinism_bit_identical(self, params, level):
        rng = np.random.default_rng(7)
        state = default_state(params, base_position=np.array([0.0, 0.0, 0.32]))
        tau = rng.normal(size=12)
        a, _ = step(state.copy(), tau, level, params, 0.0025)
        b, _ = step(state.copy(), tau, level, params, 0.0025)
        assert np.array_equal(a.base_position, b.base_position)
        assert np.array_equal(a.joint_positions, b.joint_positions)
        assert np.array_equal(a.base_orientation, b.base_orientation)

    def test_quaternion_norm_maintained(self, params, level):
        state = default_state(params, base_position=np.array([0.0, 0.0, 0.31]))
        rng = np.random.default_rng(8)
        for _ in range(400):
            state, _ = step(state, rng.normal(size=12) * 3.0, level, params, 0.0025)
            assert abs(np.linalg.norm(state.base_orientation) - 1.0) < 1e-9

    def test_nonfinite_state_faults(self, params, level):
        state = default_state(params)
        state.base_linear_velocity[0] = np.nan
        with pytest.raises(SimulationFault):
            step(state, np.zeros(12), level, params, 0.0025)

    def test_bad_dt_rejected(self, params, level):
        with pytest.raises(ValueError):
            step(default_state(params), np.zeros(12), level, params, 0.0)

    def test_foot_positions_updated(self, params, level):
        state = default_state(params, base_position=np.array([0.0, 0.0, 1.0]))
        nxt, _ = step(state, np.zeros(12), level, params, 0.0025)
        assert np.allclose(nxt.foot_positions, foot_world_positions(params, nxt), atol=1e-12)
