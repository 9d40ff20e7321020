"""Shared independent oracles and random-state generators for the test suite."""

from __future__ import annotations

import numpy as np

from capsim import core_math as cm


def random_unit_quat(rng):
    return cm.quat_normalize(rng.normal(size=4))


def random_inertia(rng):
    """Random positive principal moments satisfying the triangle inequalities."""
    while True:
        m = rng.uniform(0.5, 20.0, size=3)
        a, b, c = m
        if a + b > c and b + c > a and c + a > b:
            return m


def random_state(rng, omega_scale=0.4):
    ixx, iyy, izz = random_inertia(rng)
    body = cm.BodyState(
        q=random_unit_quat(rng),
        omega=rng.uniform(-omega_scale, omega_scale, size=3),
        rho_o=rng.uniform(-2.0, 2.0, size=3),
        rho_o_dot=rng.uniform(-0.02, 0.02, size=3),
    )
    return cm.TargetState(
        body=body,
        sigma=cm.sigma_from_inertia(ixx, iyy, izz),
        varrho=rng.uniform(-0.2, 0.2, size=3),
        mu=random_unit_quat(rng),
    )


def inject_error(state, dx):
    """Apply a 20-component error vector to a reference state."""
    dx = np.asarray(dx, dtype=float)
    dq = np.concatenate([dx[cm.ERR_DQ], [np.sqrt(1.0 - dx[cm.ERR_DQ] @ dx[cm.ERR_DQ])]])
    dmu = np.concatenate([dx[cm.ERR_DM], [np.sqrt(1.0 - dx[cm.ERR_DM] @ dx[cm.ERR_DM])]])
    body = cm.BodyState(
        q=cm.quat_normalize(cm.quat_product_raw(dq, state.body.q)),
        omega=state.body.omega + dx[cm.ERR_DW],
        rho_o=state.body.rho_o + dx[cm.ERR_DR],
        rho_o_dot=state.body.rho_o_dot + dx[cm.ERR_DV],
    )
    s = state.sigma
    return cm.TargetState(
        body=body,
        sigma=cm.SigmaParams(s.sigma1 + dx[cm.ERR_DS][0], s.sigma2 + dx[cm.ERR_DS][1]),
        varrho=state.varrho + dx[cm.ERR_DP],
        mu=cm.quat_normalize(cm.quat_product_raw(state.mu, dmu)),
    )


def extract_error_batch(q, omega, rho, vel, sigma, varrho, mu, ref):
    """Error vectors of a batch of perturbed states w.r.t. a reference state."""
    n = q.shape[0]
    out = np.zeros((n, cm.N_ERR))
    dq = cm.quat_product_raw(q, cm.quat_inverse(ref.body.q))
    sign = np.sign(dq[:, 3:4])
    out[:, cm.ERR_DQ] = dq[:, :3] * sign / np.linalg.norm(dq, axis=1, keepdims=True)
    out[:, cm.ERR_DW] = omega - ref.body.omega
    out[:, cm.ERR_DR] = rho - ref.body.rho_o
    out[:, cm.ERR_DV] = vel - ref.body.rho_o_dot
    out[:, cm.ERR_DS] = sigma - ref.sigma.as_array()
    out[:, cm.ERR_DP] = varrho - ref.varrho
    dmu = cm.quat_product_raw(cm.quat_inverse(ref.mu), mu)
    sign = np.sign(dmu[:, 3:4])
    out[:, cm.ERR_DM] = dmu[:, :3] * sign / np.linalg.norm(dmu, axis=1, keepdims=True)
    return out


def _batch_from_states(states):
    y = np.stack([cm.pack_dynamic(s) for s in states])
    sigma = np.stack([s.sigma.as_array() for s in states])
    varrho = np.stack([s.varrho for s in states])
    mu = np.stack([s.mu for s in states])
    return y, sigma, varrho, mu


def fd_jacobian_F(state, h=1e-5, dt=1e-3):
    """Error-state dynamics Jacobian by central differences of short propagations.

    Independent of the analytic block assembly: errors are injected into the
    full nonlinear state, both the perturbed and the reference states are
    integrated forward and backward by one step, and the error is re-extracted.
    """
    cols = []
    states = []
    for j in range(cm.N_ERR):
        for s in (+1.0, -1.0):
            dx = np.zeros(cm.N_ERR)
            dx[j] = s * h
            states.append(inject_error(state, dx))
    y0, sigma, varrho, mu = _batch_from_states(states)
    ref_fwd = cm.rk4_step(cm.pack_dynamic(state), dt, state.sigma)
    ref_bwd = cm.rk4_step(cm.pack_dynamic(state), -dt, state.sigma)
    ref_fwd_state = cm.unpack_dynamic(state, ref_fwd)
    ref_bwd_state = cm.unpack_dynamic(state, ref_bwd)

    y_fwd = cm.rk4_step(y0, dt, sigma)
    y_bwd = cm.rk4_step(y0, -dt, sigma)
    err_fwd = extract_error_batch(
        y_fwd[:, cm.DYN_Q], y_fwd[:, cm.DYN_W], y_fwd[:, cm.DYN_R], y_fwd[:, cm.DYN_V],
        sigma, varrho, mu, ref_fwd_state,
    )
    err_bwd = extract_error_batch(
        y_bwd[:, cm.DYN_Q], y_bwd[:, cm.DYN_W], y_bwd[:, cm.DYN_R], y_bwd[:, cm.DYN_V],
        sigma, varrho, mu, ref_bwd_state,
    )
    for j in range(cm.N_ERR):
        plus, minus = 2 * j, 2 * j + 1
        col = (err_fwd[plus] - err_bwd[plus] - err_fwd[minus] + err_bwd[minus]) / (4.0 * h * dt)
        cols.append(col)
    return np.stack(cols, axis=1)


def fd_jacobian_G(state, h=1e-4, dt=1e-3):
    """Noise-input Jacobian by differencing propagations with held disturbances."""
    y0 = cm.pack_dynamic(state)
    sig = state.sigma.as_array()
    cols = []
    for j in range(6):
        eps = np.zeros(6)
        eps[j] = h
        errs = []
        for step in (dt, -dt):
            ref_state = cm.unpack_dynamic(state, cm.rk4_step(y0, step, state.sigma))
            yp = cm.rk4_step(y0, step, state.sigma, eps_tau=eps[:3], eps_f=eps[3:])
            ym = cm.rk4_step(y0, step, state.sigma, eps_tau=-eps[:3], eps_f=-eps[3:])
            errs.append(
                extract_error_batch(
                    np.stack([yp[cm.DYN_Q], ym[cm.DYN_Q]]),
                    np.stack([yp[cm.DYN_W], ym[cm.DYN_W]]),
                    np.stack([yp[cm.DYN_R], ym[cm.DYN_R]]),
                    np.stack([yp[cm.DYN_V], ym[cm.DYN_V]]),
                    np.stack([sig, sig]),
                    np.stack([state.varrho, state.varrho]),
                    np.stack([state.mu, state.mu]),
                    ref_state,
                )
            )
        fwd, bwd = errs
        cols.append((fwd[0] - bwd[0] - fwd[1] + bwd[1]) / (4.0 * h * dt))
    return np.stack(cols, axis=1)


def classical_euler_rate(omega, inertia):
    """Torque-free angular acceleration from the textbook Euler equations."""
    i_c = np.diag(inertia)
    return np.linalg.solve(i_c, -np.cross(omega, i_c @ omega))
