"""Observability Gramian accumulation and conditioning diagnostics.

Compares how well the measurement stream pins down the state under two
parameterizations of the inertia: the minimum set (two independent ratios,
the third eliminated through the closure constraint, 20 states) and the
redundant set (all three ratios carried independently, 21 states). The
condition number of the accumulated Gramian measures the degree of
observability; the redundant parameterization drags a weakly determined
direction along and conditions worse.

Mixed units (meters, radians, dimensionless ratios) would otherwise dominate
the spectrum, so condition numbers are also reported for a normalized
Gramian, pre- and post-scaled by per-component characteristic magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core_math as cm
from .estimator import observation_matrix, transition_matrix

# Characteristic error scales of the 20-state vector (attitude, rate,
# position, velocity, ratios, offset, misalignment). Kept uniform across the
# dimensionless and dimensional blocks so no block dominates the spectrum by
# choice of unit alone.
STATE_SCALES_MIN = np.concatenate(
    [
        np.full(3, 0.1),
        np.full(3, 0.1),
        np.full(3, 0.1),
        np.full(3, 0.01),
        np.full(2, 0.1),
        np.full(3, 0.1),
        np.full(3, 0.1),
    ]
)
STATE_SCALES_NONMIN = np.concatenate(
    [STATE_SCALES_MIN[:12], np.full(3, 0.1), STATE_SCALES_MIN[14:]]
)


@dataclass
class GramianAccumulator:
    w_o: np.ndarray        # accumulated Gramian
    phi_chain: np.ndarray  # product of transition matrices back to epoch 0
    k: int = 0

    @classmethod
    def zero(cls, n):
        return cls(w_o=np.zeros((n, n)), phi_chain=np.eye(n), k=0)


def gramian_step(acc: GramianAccumulator, phi_k, h_k):
    """Fold one epoch's transition and observation matrices into the Gramian."""
    phi_k = np.asarray(phi_k, dtype=float)
    h_k = np.asarray(h_k, dtype=float)
    if phi_k.shape[0] != acc.phi_chain.shape[0] or h_k.shape[1] != acc.w_o.shape[0]:
        raise ValueError("inconsistent dimensions")
    chain = phi_k @ acc.phi_chain
    w_o = acc.w_o + chain.T @ (h_k.T @ h_k) @ chain
    return GramianAccumulator(w_o=0.5 * (w_o + w_o.T), phi_chain=chain, k=acc.k + 1)


def condition_number(acc: GramianAccumulator, scales=None):
    """Ratio of extreme Gramian eigenvalues; inf when effectively singular."""
    w = acc.w_o
    if scales is not None:
        s = np.asarray(scales, dtype=float)
        w = w * np.outer(s, s)
    eig = np.linalg.eigvalsh(0.5 * (w + w.T))
    if eig[-1] <= 0.0 or eig[0] < 1e-300:
        return np.inf
    return float(eig[-1] / eig[0])


# ---------------------------------------------------------------------------
# Redundant (non-minimum) parameterization
# ---------------------------------------------------------------------------

N_ERR_NONMIN = 21


def jacobian_F_nonmin(state: cm.TargetState):
    """21x21 error dynamics treating all three inertia ratios as independent."""
    f = np.zeros((N_ERR_NONMIN, N_ERR_NONMIN))
    w = state.body.omega
    s1, s2 = state.sigma.sigma1, state.sigma.sigma2
    s3 = state.sigma.sigma3
    wx, wy, wz = w
    f[0:3, 0:3] = -cm.skew(w)
    f[0:3, 3:6] = 0.5 * np.eye(3)
    f[3:6, 3:6] = np.array(
        [[0.0, s1 * wz, s1 * wy], [s2 * wz, 0.0, s2 * wx], [s3 * wy, s3 * wx, 0.0]]
    )
    f[3:6, 12:15] = np.diag([wy * wz, wx * wz, wx * wy])
    f[6:9, 9:12] = np.eye(3)
    return f


def observation_matrix_nonmin(state: cm.TargetState):
    h20 = observation_matrix(state)
    h = np.zeros((6, N_ERR_NONMIN))
    h[:, 0:12] = h20[:, 0:12]
    h[:, 12:14] = h20[:, cm.ERR_DS]  # third ratio column stays zero
    h[:, 15:18] = h20[:, cm.ERR_DP]
    h[:, 18:21] = h20[:, cm.ERR_DM]
    return h


# ---------------------------------------------------------------------------
# Trajectory comparison
# ---------------------------------------------------------------------------


def compare_parameterizations(initial: cm.TargetState, dt, n_epochs, substep=0.01):
    """Accumulate both Gramians along a noise-free trajectory.

    Returns per-epoch arrays: time, raw and normalized condition numbers for
    the minimum-set and the redundant parameterizations.
    """
    acc_min = GramianAccumulator.zero(cm.N_ERR)
    acc_non = GramianAccumulator.zero(N_ERR_NONMIN)
    state = initial.copy()
    rows = {
        "time": np.empty(n_epochs),
        "cond_min_raw": np.empty(n_epochs),
        "cond_min_norm": np.empty(n_epochs),
        "cond_nonmin_raw": np.empty(n_epochs),
        "cond_nonmin_norm": np.empty(n_epochs),
    }
    for k in range(n_epochs):
        phi_min = np.eye(cm.N_ERR) if k == 0 else transition_matrix(cm.jacobian_F(state), dt)
        phi_non = (
            np.eye(N_ERR_NONMIN) if k == 0 else transition_matrix(jacobian_F_nonmin(state), dt)
        )
        if k > 0:
            y = cm.integrate_dynamic(cm.pack_dynamic(state), state.sigma, dt, substep)
            state = cm.unpack_dynamic(state, y)
        acc_min = gramian_step(acc_min, phi_min, observation_matrix(state))
        acc_non = gramian_step(acc_non, phi_non, observation_matrix_nonmin(state))
        rows["time"][k] = k * dt
        rows["cond_min_raw"][k] = condition_number(acc_min)
        rows["cond_min_norm"][k] = condition_number(acc_min, STATE_SCALES_MIN)
        rows["cond_nonmin_raw"][k] = condition_number(acc_non)
        rows["cond_nonmin_norm"][k] = condition_number(acc_non, STATE_SCALES_NONMIN)
    return rows
