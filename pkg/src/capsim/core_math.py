"""Quaternion algebra, minimum-parameter rigid-body dynamics, and Jacobians.

Conventions used everywhere in this package:

* Quaternions are scalar-last numpy arrays ``[x, y, z, s]`` of shape (4,).
* ``rotation_matrix(q)`` maps body-frame coordinates into the reference
  (camera) frame: ``v_ref = rotation_matrix(q) @ v_body``.
* ``quat_product(a, b)`` composes so that
  ``rotation_matrix(quat_product(a, b)) == rotation_matrix(b) @ rotation_matrix(a)``.
  With ``q`` the body attitude w.r.t. the camera and ``mu`` the constant
  mounting misalignment of the body w.r.t. the model frame, the model-frame
  attitude seen by the sensor is ``eta = quat_product(mu, q)``.
* Attitude error is multiplicative: ``dq = q ⊗ q_hat⁻¹`` (left-sided) for the
  body attitude and ``dmu = mu_hat⁻¹ ⊗ mu`` (right-sided) for the misalignment.

The tumbling body carries two independent dimensionless inertia ratios
``(sigma1, sigma2)``; the third ratio is never stored and is always recomputed
from the closure constraint ``s1 + s2 + s3 + s1*s2*s3 = 0``, so the constraint
holds by construction.

The full estimation state is 20-dimensional; see the ``ERR_*`` slices for the
error-state layout. The dynamic sub-state (attitude quaternion, body rates,
CoM position and velocity) packs into a 13-vector for integration; the
parameter blocks (sigma, grapple offset, misalignment) are constant in time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericDegeneracyError

QUAT_NORM_TOL = 1e-9

# Error-state layout (20 components).
ERR_DQ = slice(0, 3)    # attitude error vector, rad
ERR_DW = slice(3, 6)    # body-rate error, rad/s
ERR_DR = slice(6, 9)    # CoM position error, m
ERR_DV = slice(9, 12)   # CoM velocity error, m/s
ERR_DS = slice(12, 14)  # inertia-ratio error, dimensionless
ERR_DP = slice(14, 17)  # grapple-offset error, m
ERR_DM = slice(17, 20)  # misalignment error vector, rad
N_ERR = 20

# Packed dynamic sub-state layout (13 components): q(4), omega(3), rho_o(3),
# rho_o_dot(3).
DYN_Q = slice(0, 4)
DYN_W = slice(4, 7)
DYN_R = slice(7, 10)
DYN_V = slice(10, 13)
N_DYN = 13

IDENTITY_QUAT = np.array([0.0, 0.0, 0.0, 1.0])


def skew(v):
    """Cross-product matrix, broadcasting over leading axes: skew(v) @ u = v x u."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise NumericDegeneracyError("cannot normalize a near-zero quaternion")
    return q / n


def _check_unit(q, who):
    n = np.linalg.norm(np.asarray(q, dtype=float), axis=-1)
    if np.any(np.abs(n - 1.0) > QUAT_NORM_TOL):
        raise ValueError(f"{who}: quaternion not normalized (|norm - 1| > {QUAT_NORM_TOL})")


def quat_inverse(q):
    """Inverse of a unit quaternion (its conjugate)."""
    q = np.asarray(q, dtype=float)
    out = np.empty_like(q)
    out[..., :3] = -q[..., :3]
    out[..., 3] = q[..., 3]
    return out


def quat_product_raw(a, b):
    """Bilinear quaternion product, no validation or renormalization."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    av, as_ = a[..., :3], a[..., 3:4]
    bv, bs = b[..., :3], b[..., 3:4]
    vec = as_ * bv + bs * av - np.cross(av, bv)
    sca = as_ * bs - np.sum(av * bv, axis=-1, keepdims=True)
    return np.concatenate([vec, sca], axis=-1)


def quat_product(a, b):
    """Unit-quaternion composition; result is renormalized."""
    _check_unit(a, "quat_product")
    _check_unit(b, "quat_product")
    return quat_normalize(quat_product_raw(a, b))


def omega_operator(v):
    """4x4 operator O(v) such that quat_product_raw([v, 0], q) = O(v) @ q."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (4, 4))
    out[..., :3, :3] = -skew(v)
    out[..., :3, 3] = v
    out[..., 3, :3] = -v
    return out


def rotation_matrix(q):
    """Rotation matrix of a unit quaternion (body -> reference frame)."""
    _check_unit(q, "rotation_matrix")
    q = np.asarray(q, dtype=float)
    x, y, z, s = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack(
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - s * z), 2.0 * (x * z + s * y)], axis=-1
    )
    row1 = np.stack(
        [2.0 * (x * y + s * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - s * x)], axis=-1
    )
    row2 = np.stack(
        [2.0 * (x * z - s * y), 2.0 * (y * z + s * x), 1.0 - 2.0 * (x * x + y * y)], axis=-1
    )
    return np.stack([row0, row1, row2], axis=-2)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * float(angle)
    return np.concatenate([axis / n * math.sin(half), [math.cos(half)]])


def quat_rotation_angle(q):
    """Rotation angle in [0, pi] represented by a unit quaternion."""
    q = np.asarray(q, dtype=float)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., :3], axis=-1), np.abs(q[..., 3]))


def quat_angle_between(a, b):
    """Geodesic angle between two attitudes."""
    return quat_rotation_angle(quat_product_raw(a, quat_inverse(b)))


# ---------------------------------------------------------------------------
# Dimensionless inertia parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SigmaParams:
    """Two independent dimensionless inertia ratios of a rigid body."""

    sigma1: float
    sigma2: float

    def __post_init__(self):
        if not (abs(self.sigma1) < 1.0 and abs(self.sigma2) < 1.0):
            raise ValueError(
                f"inertia ratios must lie in (-1, 1): got ({self.sigma1}, {self.sigma2})"
            )

    @property
    def sigma3(self):
        return sigma3_of(self)

    def as_array(self):
        return np.array([self.sigma1, self.sigma2])


def _sigma_pair(sigma):
    if isinstance(sigma, SigmaParams):
        return sigma.sigma1, sigma.sigma2
    arr = np.asarray(sigma, dtype=float)
    return arr[..., 0], arr[..., 1]


def sigma_from_inertia(ixx, iyy, izz):
    """Dimensionless inertia ratios of a principal-axis inertia triple.

    Raises ValueError naming the violated positivity or triangle inequality.
    """
    moments = {"Ixx": float(ixx), "Iyy": float(iyy), "Izz": float(izz)}
    for name, val in moments.items():
        if not val > 0.0:
            raise ValueError(f"principal moment {name} must be positive, got {val}")
    ixx, iyy, izz = moments["Ixx"], moments["Iyy"], moments["Izz"]
    triangles = [
        ("Ixx + Iyy > Izz", ixx + iyy - izz),
        ("Iyy + Izz > Ixx", iyy + izz - ixx),
        ("Izz + Ixx > Iyy", izz + ixx - iyy),
    ]
    for name, margin in triangles:
        if not margin > 0.0:
            raise ValueError(f"triangle inequality {name} violated (margin {margin})")
    return SigmaParams((iyy - izz) / ixx, (izz - ixx) / iyy)


def sigma3_of(sigma):
    """Third inertia ratio from the closure constraint."""
    s1, s2 = _sigma_pair(sigma)
    den = 1.0 + s1 * s2
    if np.any(np.abs(den) <= 1e-12):
        raise NumericDegeneracyError("1 + sigma1*sigma2 is numerically zero")
    return -(s1 + s2) / den


def sigma_closure(s1, s2, s3):
    """Closure residual s1 + s2 + s3 + s1*s2*s3; zero for a physical triple."""
    return s1 + s2 + s3 + s1 * s2 * s3


def euler_phi(omega, sigma):
    """Gyroscopic angular acceleration of a torque-free body, rad/s^2."""
    omega = np.asarray(omega, dtype=float)
    s1, s2 = _sigma_pair(sigma)
    s3 = sigma3_of(sigma)
    wx, wy, wz = omega[..., 0], omega[..., 1], omega[..., 2]
    return np.stack([s1 * wy * wz, s2 * wx * wz, s3 * wx * wy], axis=-1)


def _b_diag(sigma):
    s1, s2 = _sigma_pair(sigma)
    dens = (1.0 - s2, 1.0 + s1, 1.0 + s1 * s2)
    for d in dens:
        if np.any(np.abs(d) <= 1e-12):
            raise NumericDegeneracyError("disturbance gain denominator is numerically zero")
    b1 = 1.0 + (2.0 + s1 * s2 + s1) / dens[0]
    b2 = 1.0 + (2.0 + s1 * s2 - s2) / dens[1]
    b3 = 1.0 + (2.0 + s1 - s2) / dens[2]
    return np.stack(np.broadcast_arrays(b1, b2, b3), axis=-1)


def disturbance_gain_B(sigma):
    """Diagonal gain mapping normalized torque disturbance to body-rate change.

    Equals tr(I_c) * inv(I_c) for the generating inertia tensor; entries are
    positive for every valid ratio pair.
    """
    b = _b_diag(sigma)
    if b.ndim == 1:
        return np.diag(b)
    out = np.zeros(b.shape[:-1] + (3, 3))
    for i in range(3):
        out[..., i, i] = b[..., i]
    return out


def phi_jacobians(omega, sigma):
    """(dphi/domega 3x3, dphi/dsigma 3x2) of the gyroscopic acceleration."""
    omega = np.asarray(omega, dtype=float)
    s1, s2 = _sigma_pair(sigma)
    s3 = sigma3_of(sigma)
    wx, wy, wz = omega
    d_omega = np.array(
        [
            [0.0, s1 * wz, s1 * wy],
            [s2 * wz, 0.0, s2 * wx],
            [s3 * wy, s3 * wx, 0.0],
        ]
    )
    den2 = (1.0 + s1 * s2) ** 2
    d_sigma = np.array(
        [
            [wy * wz, 0.0],
            [0.0, wx * wz],
            [(s2 * s2 - 1.0) / den2 * wx * wy, (s1 * s1 - 1.0) / den2 * wx * wy],
        ]
    )
    return d_omega, d_sigma


# ---------------------------------------------------------------------------
# State containers
# ---------------------------------------------------------------------------


@dataclass
class BodyState:
    """Dynamic state of the target body relative to the camera frame."""

    q: np.ndarray          # attitude, body w.r.t. camera
    omega: np.ndarray      # body rates, rad/s, body frame
    rho_o: np.ndarray      # CoM position, m, camera frame
    rho_o_dot: np.ndarray  # CoM velocity, m/s, camera frame

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).copy()
        self.omega = np.asarray(self.omega, dtype=float).copy()
        self.rho_o = np.asarray(self.rho_o, dtype=float).copy()
        self.rho_o_dot = np.asarray(self.rho_o_dot, dtype=float).copy()
        _check_unit(self.q, "BodyState")
        for arr in (self.q, self.omega, self.rho_o, self.rho_o_dot):
            if not np.all(np.isfinite(arr)):
                raise ValueError("BodyState components must be finite")

    def copy(self):
        return BodyState(self.q, self.omega, self.rho_o, self.rho_o_dot)


@dataclass
class TargetState:
    """Full target state: dynamic sub-state plus constant parameters."""

    body: BodyState
    sigma: SigmaParams
    varrho: np.ndarray  # grapple-fixture offset from the CoM, m, body frame
    mu: np.ndarray      # constant misalignment, body w.r.t. model frame

    def __post_init__(self):
        self.varrho = np.asarray(self.varrho, dtype=float).copy()
        self.mu = np.asarray(self.mu, dtype=float).copy()
        _check_unit(self.mu, "TargetState")

    def copy(self):
        return TargetState(self.body.copy(), self.sigma, self.varrho, self.mu)

    def grapple_position(self):
        """Grapple-fixture position in the camera frame, m."""
        return self.body.rho_o + rotation_matrix(self.body.q) @ self.varrho

    def grapple_velocity(self):
        """Grapple-fixture velocity in the camera frame, m/s."""
        a = rotation_matrix(self.body.q)
        return self.body.rho_o_dot + a @ np.cross(self.body.omega, self.varrho)

    def model_pose(self):
        """Pose (rho, eta) of the model frame w.r.t. the camera frame."""
        return self.grapple_position(), quat_product(self.mu, self.body.q)


def pack_dynamic(state: TargetState):
    """13-vector [q, omega, rho_o, rho_o_dot] of the dynamic sub-state."""
    b = state.body
    return np.concatenate([b.q, b.omega, b.rho_o, b.rho_o_dot])


def unpack_dynamic(state: TargetState, y):
    """New TargetState with the dynamic sub-state replaced by packed vector y."""
    y = np.asarray(y, dtype=float)
    body = BodyState(quat_normalize(y[DYN_Q]), y[DYN_W], y[DYN_R], y[DYN_V])
    return TargetState(body, state.sigma, state.varrho, state.mu)


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


def dynamic_derivative(y, sigma, eps_tau=None, eps_f=None):
    """Time derivative of the packed dynamic state; broadcasts over leading axes.

    eps_tau is the normalized torque disturbance (rad/s^2 before the diagonal
    gain), eps_f the force disturbance per unit mass (m/s^2).
    """
    y = np.asarray(y, dtype=float)
    q = y[..., DYN_Q]
    w = y[..., DYN_W]
    qv, qs = q[..., :3], q[..., 3:4]
    qdot_v = 0.5 * (qs * w - np.cross(w, qv))
    qdot_s = -0.5 * np.sum(w * qv, axis=-1, keepdims=True)
    wdot = euler_phi(w, sigma)
    if eps_tau is not None:
        wdot = wdot + _b_diag(sigma) * np.asarray(eps_tau, dtype=float)
    rddot = np.zeros_like(y[..., DYN_R])
    if eps_f is not None:
        rddot = rddot + np.asarray(eps_f, dtype=float)
    return np.concatenate([qdot_v, qdot_s, wdot, y[..., DYN_V], rddot], axis=-1)


def state_derivative(state: TargetState, eps_tau=None, eps_f=None):
    """Packed dynamic-state derivative; the parameter blocks are constant."""
    return dynamic_derivative(pack_dynamic(state), state.sigma, eps_tau, eps_f)


def rk4_step(y, dt, sigma, eps_tau=None, eps_f=None):
    """One fixed-step 4th-order step with zero-order-hold disturbances.

    Broadcasts over leading axes of y; the quaternion block is renormalized.
    """
    k1 = dynamic_derivative(y, sigma, eps_tau, eps_f)
    k2 = dynamic_derivative(y + 0.5 * dt * k1, sigma, eps_tau, eps_f)
    k3 = dynamic_derivative(y + 0.5 * dt * k2, sigma, eps_tau, eps_f)
    k4 = dynamic_derivative(y + dt * k3, sigma, eps_tau, eps_f)
    out = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[..., DYN_Q] = quat_normalize(out[..., DYN_Q])
    return out


def integrate_dynamic(y0, sigma, duration, dt):
    """Noise-free integration over `duration` with fixed substeps of about `dt`.

    Returns the final packed state. The last substep is shortened so the total
    span is exact.
    """
    y = np.asarray(y0, dtype=float).copy()
    remaining = float(duration)
    if remaining < 0:
        raise ValueError("duration must be non-negative")
    while remaining > 1e-12:
        h = min(dt, remaining)
        y = rk4_step(y, h, sigma)
        remaining -= h
    return y


# ---------------------------------------------------------------------------
# Linearized error dynamics
# ---------------------------------------------------------------------------


def jacobian_F(state: TargetState):
    """20x20 error-state dynamics Jacobian at the given state."""
    f = np.zeros((N_ERR, N_ERR))
    w = state.body.omega
    f[ERR_DQ, ERR_DQ] = -skew(w)
    f[ERR_DQ, ERR_DW] = 0.5 * np.eye(3)
    d_omega, d_sigma = phi_jacobians(w, state.sigma)
    f[ERR_DW, ERR_DW] = d_omega
    f[ERR_DW, ERR_DS] = d_sigma
    f[ERR_DR, ERR_DV] = np.eye(3)
    return f


def jacobian_G(state: TargetState):
    """20x6 noise-input Jacobian; columns are [eps_tau(3), eps_f(3)]."""
    g = np.zeros((N_ERR, 6))
    g[ERR_DW, 0:3] = disturbance_gain_B(state.sigma)
    g[ERR_DV, 3:6] = np.eye(3)
    return g
