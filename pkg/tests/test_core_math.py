import numpy as np
import pytest

from capsim import core_math as cm
from oracles import (
    classical_euler_rate,
    fd_jacobian_F,
    fd_jacobian_G,
    random_inertia,
    random_state,
    random_unit_quat,
)

RNG = np.random.default_rng(1234)


def test_rotation_matrix_identity():
    assert np.allclose(cm.rotation_matrix(cm.IDENTITY_QUAT), np.eye(3), atol=1e-15)


def test_rotation_matrix_quarter_turn_z():
    q = np.array([0.0, 0.0, np.sqrt(0.5), np.sqrt(0.5)])
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(cm.rotation_matrix(q), expected, atol=1e-12)


def test_rotation_matrix_orthonormal():
    for _ in range(200):
        a = cm.rotation_matrix(random_unit_quat(RNG))
        assert np.allclose(a @ a.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(a) == pytest.approx(1.0, abs=1e-12)


def test_rotation_matrix_rejects_unnormalized():
    with pytest.raises(ValueError):
        cm.rotation_matrix(np.array([0.0, 0.0, 0.0, 1.001]))


def test_quat_product_identity():
    b = random_unit_quat(RNG)
    assert np.allclose(cm.quat_product(cm.IDENTITY_QUAT, b), b, atol=1e-15)


def test_quat_product_half_turn():
    q = np.array([0.0, 0.0, np.sqrt(0.5), np.sqrt(0.5)])
    assert np.allclose(cm.quat_product(q, q), [0.0, 0.0, 1.0, 0.0], atol=1e-12)


def test_quat_inverse_roundtrip():
    for _ in range(50):
        q = random_unit_quat(RNG)
        assert np.allclose(cm.quat_product(q, cm.quat_inverse(q)), cm.IDENTITY_QUAT, atol=1e-12)


def test_composition_convention():
    # Fixed package-wide convention: A(a x b) = A(b) @ A(a).
    for _ in range(100):
        a, b = random_unit_quat(RNG), random_unit_quat(RNG)
        lhs = cm.rotation_matrix(cm.quat_product(a, b))
        rhs = cm.rotation_matrix(b) @ cm.rotation_matrix(a)
        assert np.allclose(lhs, rhs, atol=1e-12)


def test_producing_operations_stay_normalized():
    for _ in range(100):
        q = cm.quat_product(random_unit_quat(RNG), random_unit_quat(RNG))
        assert abs(np.linalg.norm(q) - 1.0) < 1e-12


def test_sigma_from_inertia_reference_body():
    s = cm.sigma_from_inertia(14.0, 10.0, 6.0)
    assert s.sigma1 == pytest.approx(0.2857, abs=5e-4)
    assert s.sigma2 == pytest.approx(-0.80, abs=5e-4)
    assert s.sigma3 == pytest.approx(0.6667, abs=5e-4)


def test_sigma_from_inertia_sphere_and_symmetric():
    assert cm.sigma_from_inertia(5.0, 5.0, 5.0).as_array() == pytest.approx((0.0, 0.0))
    s = cm.sigma_from_inertia(2.0, 2.0, 1.0)
    assert (s.sigma1, s.sigma2, s.sigma3) == pytest.approx((0.5, -0.5, 0.0))


def test_sigma_from_inertia_rejects_bad_moments():
    with pytest.raises(ValueError, match="Iyy"):
        cm.sigma_from_inertia(1.0, -2.0, 1.0)
    with pytest.raises(ValueError, match="Ixx \\+ Iyy > Izz"):
        cm.sigma_from_inertia(1.0, 1.0, 3.0)


def test_sigma_box_and_closure_random():
    for _ in range(2000):
        s = cm.sigma_from_inertia(*random_inertia(RNG))
        s3 = s.sigma3
        assert abs(s.sigma1) < 1.0 and abs(s.sigma2) < 1.0 and abs(s3) < 1.0
        assert abs(cm.sigma_closure(s.sigma1, s.sigma2, s3)) < 1e-12


def test_sigma3_examples():
    assert cm.sigma3_of(cm.SigmaParams(0.2857, -0.8)) == pytest.approx(0.6667, abs=5e-4)
    assert cm.sigma3_of(cm.SigmaParams(0.0, 0.0)) == 0.0
    assert cm.sigma3_of(cm.SigmaParams(0.5, -0.5)) == pytest.approx(0.0, abs=1e-14)


def test_euler_phi_trivial_cases():
    assert np.allclose(cm.euler_phi(np.zeros(3), cm.SigmaParams(0.3, -0.2)), 0.0)
    assert np.allclose(cm.euler_phi(RNG.normal(size=3), cm.SigmaParams(0.0, 0.0)), 0.0)


def test_euler_phi_matches_classical_equations():
    inertia = np.array([14.0, 10.0, 6.0])
    omega = np.array([0.15, -0.18, -0.12])
    s = cm.sigma_from_inertia(*inertia)
    assert np.allclose(cm.euler_phi(omega, s), classical_euler_rate(omega, inertia), atol=1e-14)
    for _ in range(100):
        inertia = random_inertia(RNG)
        omega = RNG.uniform(-0.5, 0.5, size=3)
        s = cm.sigma_from_inertia(*inertia)
        assert np.allclose(
            cm.euler_phi(omega, s), classical_euler_rate(omega, inertia), atol=1e-12
        )


def test_disturbance_gain_sphere():
    assert np.allclose(cm.disturbance_gain_B(cm.SigmaParams(0.0, 0.0)), 3.0 * np.eye(3))


def test_disturbance_gain_matches_inertia_oracle():
    # B(sigma) must equal tr(I) * inv(I) for the generating inertia tensor.
    inertia = np.array([14.0, 10.0, 6.0])
    s = cm.sigma_from_inertia(*inertia)
    oracle = np.sum(inertia) * np.diag(1.0 / inertia)
    assert np.allclose(cm.disturbance_gain_B(s), oracle, atol=1e-12)
    for _ in range(200):
        inertia = random_inertia(RNG)
        s = cm.sigma_from_inertia(*inertia)
        b = cm.disturbance_gain_B(s)
        assert np.allclose(b, np.sum(inertia) * np.diag(1.0 / inertia), atol=1e-9)
        assert np.all(np.diag(b) > 0.0)


def test_state_derivative_stationary():
    body = cm.BodyState(cm.IDENTITY_QUAT, np.zeros(3), np.zeros(3), np.zeros(3))
    state = cm.TargetState(body, cm.SigmaParams(0.3, -0.4), np.zeros(3), cm.IDENTITY_QUAT)
    assert np.allclose(cm.state_derivative(state), 0.0)


def test_state_derivative_principal_spin_equilibrium():
    body = cm.BodyState(random_unit_quat(RNG), np.array([0.0, 0.0, 0.7]), np.zeros(3), np.zeros(3))
    state = cm.TargetState(body, cm.SigmaParams(0.3, -0.4), np.zeros(3), cm.IDENTITY_QUAT)
    ydot = cm.state_derivative(state)
    assert np.allclose(ydot[cm.DYN_W], 0.0, atol=1e-15)


def test_state_derivative_matches_finite_difference_of_propagation():
    for _ in range(20):
        state = random_state(RNG)
        y0 = cm.pack_dynamic(state)
        h = 1e-5
        yp = cm.rk4_step(y0, h, state.sigma)
        ym = cm.rk4_step(y0, -h, state.sigma)
        fd = (yp - ym) / (2.0 * h)
        assert np.allclose(fd, cm.state_derivative(state), atol=1e-8)


def test_energy_and_momentum_conservation():
    # Torque-free tumble: kinetic energy and momentum magnitude are conserved
    # by the integrator to 1e-9 relative over 300 s.
    inertia = np.array([14.0, 10.0, 6.0])
    s = cm.sigma_from_inertia(*inertia)
    i_c = np.diag(inertia)
    y = np.concatenate([random_unit_quat(RNG), [0.15, -0.18, -0.12], np.zeros(3), np.zeros(3)])
    e0 = 0.5 * y[cm.DYN_W] @ i_c @ y[cm.DYN_W]
    h0 = np.linalg.norm(i_c @ y[cm.DYN_W])
    for _ in range(30000):
        y = cm.rk4_step(y, 0.01, s)
    e1 = 0.5 * y[cm.DYN_W] @ i_c @ y[cm.DYN_W]
    h1 = np.linalg.norm(i_c @ y[cm.DYN_W])
    assert abs(e1 - e0) / e0 < 1e-9
    assert abs(h1 - h0) / h0 < 1e-9


def test_spin_advances_attitude_at_constant_rate():
    rate = 0.3
    q0 = random_unit_quat(RNG)
    body = cm.BodyState(q0, np.array([0.0, 0.0, rate]), np.zeros(3), np.zeros(3))
    state = cm.TargetState(body, cm.SigmaParams(0.2, -0.1), np.zeros(3), cm.IDENTITY_QUAT)
    y = cm.integrate_dynamic(cm.pack_dynamic(state), state.sigma, 5.0, 0.01)
    dq = cm.quat_product_raw(y[cm.DYN_Q], cm.quat_inverse(q0))
    assert cm.quat_rotation_angle(dq) == pytest.approx(rate * 5.0, abs=1e-9)
    assert np.allclose(y[cm.DYN_W], [0.0, 0.0, rate], atol=1e-12)


def test_jacobian_F_zero_rate_blocks():
    state = random_state(RNG)
    state.body.omega = np.zeros(3)
    f = cm.jacobian_F(state)
    assert np.allclose(f[cm.ERR_DW, cm.ERR_DW], 0.0)
    assert np.allclose(f[cm.ERR_DW, cm.ERR_DS], 0.0)
    assert np.allclose(f[cm.ERR_DQ, cm.ERR_DQ], 0.0)


def test_jacobian_F_attitude_block_is_minus_rate_skew():
    state = random_state(RNG)
    f = cm.jacobian_F(state)
    assert np.allclose(f[cm.ERR_DQ, cm.ERR_DQ], -cm.skew(state.body.omega))
    assert np.allclose(f[cm.ERR_DQ, cm.ERR_DW], 0.5 * np.eye(3))


def _assert_jacobian_close(analytic, fd):
    tol = np.maximum(1e-6, 1e-4 * np.abs(analytic))
    assert np.all(np.abs(analytic - fd) <= tol), np.abs(analytic - fd).max()


def test_jacobian_F_matches_finite_differences():
    for _ in range(25):
        state = random_state(RNG)
        _assert_jacobian_close(cm.jacobian_F(state), fd_jacobian_F(state))


def test_jacobian_G_matches_finite_differences():
    for _ in range(25):
        state = random_state(RNG)
        _assert_jacobian_close(cm.jacobian_G(state), fd_jacobian_G(state))
