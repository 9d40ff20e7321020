"""Constrained, noise-adaptive, fault-gated multiplicative EKF.

The 20-component error state is laid out in ``core_math`` (attitude error,
body-rate, CoM position/velocity, two inertia ratios, grapple offset,
misalignment). Attitude errors are multiplicative and reset to zero after
every update, so the observation Jacobian is always evaluated at identity
error and has constant attitude blocks.

Three mechanisms distinguish this filter from a vanilla EKF:

* Fault gating: the registration health flag scales the Kalman gain to zero,
  so faulted epochs leave the state and covariance exactly untouched and the
  filter coasts on the dynamics model.
* Gain projection: when an unconstrained update would push an inertia ratio
  out of its open box (-1, 1), the corresponding gain row is scaled so the
  posterior lands on the box boundary (inside a small margin) instead.
* Observation-noise adaptation: a sliding window of post-update residuals
  feeds a recursive innovation-covariance estimate from which the
  measurement covariance is re-derived each healthy epoch.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import core_math as cm
from .errors import NumericDegeneracyError
from .registration import RegistrationResult
from .sim_world import ProcessNoise


@dataclass
class FilterConfig:
    window: int = 30              # residual window length for noise adaptation
    char_length: float = 1.0      # m/rad, weight of attitude error in the fault norm
    alpha_gate: float = 5.0       # innovation gate in units of sqrt(tr(S))
    r_floor: float = 1e-8         # eigenvalue floor added to the adapted R
    sigma_margin: float = 1e-3    # projection keeps |sigma| <= 1 - margin
    conv_trace_threshold: float = 5e-4  # parameter-block covariance trace level
    conv_hold: int = 5            # consecutive epochs below threshold to latch
    prop_substep: float = 0.01    # s, RK4 substep for mean propagation
    constrained: bool = True      # disable to run the unconstrained comparison filter
    # Initial uncertainty (standard deviations).
    p0_att: float = 0.05
    p0_omega: float = 0.3
    p0_pos: float = 0.3
    p0_vel: float = 0.02
    p0_sigma: float = 0.6
    p0_varrho: float = 0.2
    p0_mu: float = 0.05
    # Initial measurement-noise guess (variances).
    r0_pos: float = 2.5e-5
    r0_att: float = 1e-4


@dataclass
class Measurement:
    """Registration outcome routed to the filter; healthy carries the fault flag."""

    rho_bar: np.ndarray
    eta_bar: np.ndarray
    healthy: bool
    timestamp: float = 0.0

    def __post_init__(self):
        self.rho_bar = np.asarray(self.rho_bar, dtype=float)
        self.eta_bar = np.asarray(self.eta_bar, dtype=float)


@dataclass
class FilterState:
    xhat: cm.TargetState
    P: np.ndarray                     # 20x20 error covariance
    r_hat: np.ndarray                 # 6x6 adapted observation covariance
    sigma_innov: np.ndarray           # 6x6 windowed residual covariance
    residuals: deque = field(default_factory=deque)
    n_resid: int = 0                  # residuals pushed since initialization
    k: int = 0                        # measurement epochs processed
    conv_streak: int = 0
    converged: bool = False
    degenerate_skip: bool = False     # last update was skipped on an ill-conditioned S

    def copy(self):
        return FilterState(
            xhat=self.xhat.copy(),
            P=self.P.copy(),
            r_hat=self.r_hat.copy(),
            sigma_innov=self.sigma_innov.copy(),
            residuals=deque(self.residuals, maxlen=self.residuals.maxlen),
            n_resid=self.n_resid,
            k=self.k,
            conv_streak=self.conv_streak,
            converged=self.converged,
            degenerate_skip=self.degenerate_skip,
        )

    def param_trace(self):
        """Trace of the parameter sub-block (inertia ratios, offset, misalignment)."""
        return float(np.trace(self.P[12:, 12:]))


def initial_covariance(cfg: FilterConfig):
    stds = np.concatenate(
        [
            np.full(3, cfg.p0_att),
            np.full(3, cfg.p0_omega),
            np.full(3, cfg.p0_pos),
            np.full(3, cfg.p0_vel),
            np.full(2, cfg.p0_sigma),
            np.full(3, cfg.p0_varrho),
            np.full(3, cfg.p0_mu),
        ]
    )
    return np.diag(stds**2)


def filter_init(z: Measurement, cfg: FilterConfig):
    """Bootstrap the filter from the first healthy registration.

    The measured pose seeds the attitude and CoM position directly (zero
    misalignment and grapple offset assumed), rates and parameters start at
    zero with large covariance.
    """
    body = cm.BodyState(
        q=cm.quat_normalize(z.eta_bar),
        omega=np.zeros(3),
        rho_o=z.rho_bar.copy(),
        rho_o_dot=np.zeros(3),
    )
    xhat = cm.TargetState(body, cm.SigmaParams(0.0, 0.0), np.zeros(3), cm.IDENTITY_QUAT)
    r0 = np.diag([cfg.r0_pos] * 3 + [cfg.r0_att] * 3)
    # The ring keeps one extra slot: the sliding-window recursion needs the
    # residual that is falling out of the window.
    return FilterState(
        xhat=xhat,
        P=initial_covariance(cfg),
        r_hat=r0,
        sigma_innov=np.zeros((6, 6)),
        residuals=deque(maxlen=cfg.window + 1),
    )


# ---------------------------------------------------------------------------
# Propagation
# ---------------------------------------------------------------------------


def transition_matrix(f, dt):
    """Second-order expansion of the matrix exponential expm(F dt)."""
    fdt = f * dt
    return np.eye(f.shape[0]) + fdt + 0.5 * fdt @ fdt


def process_covariance(state: cm.TargetState, noise: ProcessNoise, dt):
    g = cm.jacobian_G(state)
    qc = np.diag([noise.alpha_psd] * 3 + [noise.accel_psd] * 3)
    return g @ qc @ g.T * dt


def _resymmetrize(p):
    return 0.5 * (p + p.T)


def propagate(fs: FilterState, dt, noise: ProcessNoise, cfg: FilterConfig):
    """Time update: RK4 on the noise-free dynamics plus linearized covariance."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    f = cm.jacobian_F(fs.xhat)
    phi = transition_matrix(f, dt)
    qk = process_covariance(fs.xhat, noise, dt)
    y = cm.integrate_dynamic(cm.pack_dynamic(fs.xhat), fs.xhat.sigma, dt, cfg.prop_substep)
    out = fs.copy()
    out.xhat = cm.unpack_dynamic(fs.xhat, y)
    out.P = _resymmetrize(phi @ fs.P @ phi.T + qk)
    return out


# ---------------------------------------------------------------------------
# Observation model
# ---------------------------------------------------------------------------


def observation_matrix(state: cm.TargetState):
    """6x20 sensitivity of [grapple position, attitude error vector].

    Evaluated at zero attitude/misalignment error (post-reset), so the
    attitude rows are identity blocks.
    """
    h = np.zeros((6, cm.N_ERR))
    a = cm.rotation_matrix(state.body.q)
    h[0:3, cm.ERR_DQ] = -2.0 * a @ cm.skew(state.varrho)
    h[0:3, cm.ERR_DR] = np.eye(3)
    h[0:3, cm.ERR_DP] = a
    h[3:6, cm.ERR_DQ] = np.eye(3)
    h[3:6, cm.ERR_DM] = np.eye(3)
    return h


def innovation(fs: FilterState, z: Measurement):
    """Innovation vector, its covariance, and the observation matrix.

    The attitude innovation is the vector part of the measured misalignment-
    and attitude-relative quaternion, sign-canonicalized to the short arc.
    """
    if not z.healthy:
        raise ValueError("innovation requires a healthy measurement")
    x = fs.xhat
    predicted_pos = x.body.rho_o + cm.rotation_matrix(x.body.q) @ x.varrho
    d_eta = cm.quat_product(
        cm.quat_inverse(x.mu), cm.quat_product(z.eta_bar, cm.quat_inverse(x.body.q))
    )
    if d_eta[3] < 0.0:
        d_eta = -d_eta
    alpha = np.concatenate([z.rho_bar - predicted_pos, d_eta[:3]])
    h = observation_matrix(x)
    s = h @ fs.P @ h.T + fs.r_hat
    return alpha, s, h


# ---------------------------------------------------------------------------
# Fault detection
# ---------------------------------------------------------------------------


def weighted_alpha_norm(alpha, char_length):
    pos, att = alpha[:3], alpha[3:]
    return float(np.sqrt(pos @ pos + char_length * (att @ att)))


def detect_fault(result: RegistrationResult, alpha, s, cfg: FilterConfig):
    """Health flag for one registration epoch.

    A structurally failed registration (empty scan, degenerate alignment) is
    always a fault. Otherwise the fit error and the innovation must BOTH
    exceed their gates to declare one: a noisy fit that still agrees with the
    prediction stays usable, and the adaptive covariance absorbs it.
    """
    if not np.isfinite(result.fit_error):
        return 0
    if result.healthy:
        return 1
    if alpha is None:
        return 0
    alpha_th = cfg.alpha_gate * np.sqrt(max(np.trace(s), 0.0))
    return 0 if weighted_alpha_norm(alpha, cfg.char_length) >= alpha_th else 1


# ---------------------------------------------------------------------------
# Measurement update
# ---------------------------------------------------------------------------


def _project_sigma_correction(sigma_prior, d_sigma, margin):
    """Scale each inertia-ratio correction so the posterior stays in the box."""
    bound = 1.0 - margin
    beta = np.ones(2)
    for i in range(2):
        post = sigma_prior[i] + d_sigma[i]
        if abs(post) > bound and abs(d_sigma[i]) > 0:
            target = np.sign(post) * bound
            beta[i] = np.clip((target - sigma_prior[i]) / d_sigma[i], 0.0, 1.0)
    return beta


def update(fs: FilterState, z: Measurement, cfg: FilterConfig):
    """Measurement update with fault gating and inertia-ratio gain projection.

    A faulted epoch (z.healthy false) returns the prior state and covariance
    bit-identically, only advancing the epoch counter. The attitude and
    misalignment corrections are applied multiplicatively and the error state
    is reset to zero.
    """
    out = fs.copy()
    out.k = fs.k + 1
    out.degenerate_skip = False
    if not z.healthy:
        return out

    alpha, s, h = innovation(fs, z)
    if np.linalg.cond(s) > 1e12:
        out.degenerate_skip = True
        return out
    k_gain = fs.P @ h.T @ np.linalg.inv(s)
    dx = k_gain @ alpha

    if cfg.constrained:
        sigma_prior = fs.xhat.sigma.as_array()
        beta = _project_sigma_correction(sigma_prior, dx[cm.ERR_DS], cfg.sigma_margin)
        if np.any(beta < 1.0):
            k_gain = k_gain.copy()
            k_gain[cm.ERR_DS] *= beta[:, None]
            dx = k_gain @ alpha

    x = fs.xhat
    dq = cm.quat_normalize(np.concatenate([dx[cm.ERR_DQ], [1.0]]))
    dmu = cm.quat_normalize(np.concatenate([dx[cm.ERR_DM], [1.0]]))
    sigma_post = x.sigma.as_array() + dx[cm.ERR_DS]
    if cfg.constrained:
        sigma_post = np.clip(sigma_post, -1.0 + cfg.sigma_margin, 1.0 - cfg.sigma_margin)
    body = cm.BodyState(
        q=cm.quat_product(dq, x.body.q),
        omega=x.body.omega + dx[cm.ERR_DW],
        rho_o=x.body.rho_o + dx[cm.ERR_DR],
        rho_o_dot=x.body.rho_o_dot + dx[cm.ERR_DV],
    )
    try:
        sigma = cm.SigmaParams(*sigma_post)
    except ValueError:
        # Unconstrained comparison filter left the physical box: carry the
        # values anyway (that failure mode is the point of the comparison).
        sigma = object.__new__(cm.SigmaParams)
        object.__setattr__(sigma, "sigma1", float(sigma_post[0]))
        object.__setattr__(sigma, "sigma2", float(sigma_post[1]))
    out.xhat = cm.TargetState(
        body=body,
        sigma=sigma,
        varrho=x.varrho + dx[cm.ERR_DP],
        mu=cm.quat_product(x.mu, dmu),
    )
    out.P = _resymmetrize((np.eye(cm.N_ERR) - k_gain @ h) @ fs.P)
    residual = alpha - h @ dx
    out.residuals.append(residual)
    out.n_resid = fs.n_resid + 1
    return out


def adapt_R(fs: FilterState, cfg: FilterConfig):
    """Refresh the observation covariance from the residual window.

    The windowed residual covariance is updated recursively (growing average
    until the window fills, sliding average afterwards), then mapped to an
    observation-covariance estimate and floored to stay positive definite.
    """
    if fs.n_resid < 1:
        raise ValueError("no residuals recorded yet")
    out = fs.copy()
    e = fs.residuals[-1]
    ee = np.outer(e, e)
    n = fs.n_resid
    w = fs.residuals.maxlen - 1
    if n == 1:
        sigma = ee
    elif n <= w:
        sigma = ((n - 1) * fs.sigma_innov + ee) / n  # growing-window average
    else:
        e_old = fs.residuals[0]  # the residual sliding out of the window
        sigma = fs.sigma_innov + (ee - np.outer(e_old, e_old)) / w
    out.sigma_innov = _resymmetrize(sigma)
    h = observation_matrix(fs.xhat)
    r = out.sigma_innov + h @ fs.P @ h.T
    r = _resymmetrize(r)
    if np.linalg.eigvalsh(r).min() < cfg.r_floor:
        r = r + cfg.r_floor * np.eye(6)
    out.r_hat = r
    return out


# ---------------------------------------------------------------------------
# Convergence monitor
# ---------------------------------------------------------------------------


def detect_convergence(fs: FilterState, cfg: FilterConfig):
    """Latch convergence once the parameter covariance stays low long enough.

    Returns a new FilterState; read the flag from ``.converged``. The latch
    never reverts within a scenario.
    """
    out = fs.copy()
    if out.converged:
        return out
    if out.param_trace() < cfg.conv_trace_threshold:
        out.conv_streak += 1
    else:
        out.conv_streak = 0
    if out.conv_streak >= cfg.conv_hold:
        out.converged = True
    return out
