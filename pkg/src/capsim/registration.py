"""Prediction-seeded ICP registration against a known surface model.

Pose convention: a registration pose ``(rho, eta)`` maps model-frame
coordinates into the camera frame, ``p_cam = rotation_matrix(eta) @ p_model
+ rho`` — the same forward pose that seeds the search and that the estimator
consumes as its measurement. Correspondence distances are evaluated in the
model frame via the inverse transform, which is equivalent by isometry.

The fine alignment is closed form: the optimal attitude is the maximum
eigenvector of a symmetric 4x4 matrix built from the cross-covariance of the
paired sets, and the translation follows from the centroids. The 4x4
eigenproblem is solved with cyclic Jacobi rotations — tiny, deterministic,
and dependency free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core_math import TargetState, quat_normalize, rotation_matrix
from .errors import DegenerateAlignmentError, EmptyCorrespondenceError
from .sim_world import PointCloud, SurfaceModel


@dataclass
class IcpConfig:
    eps_threshold: float = 1.2e-5        # m^2, fit-error health level
    max_iterations: int = 30
    correspondence_cutoff: float = 0.05  # m, pairs farther than this are dropped
    stall_tolerance: float = 1e-3        # relative improvement under this counts as a stall
    stall_iterations: int = 3            # exit after this many consecutive stalls
    trim_factor: float = 0.0             # optionally drop pairs beyond this multiple of
                                         # the median pair distance (0 disables)

    def __post_init__(self):
        if self.eps_threshold <= 0 or self.max_iterations <= 0 or self.correspondence_cutoff <= 0:
            raise ValueError("IcpConfig fields must be positive")
        if not 0.0 <= self.stall_tolerance < 1.0:
            raise ValueError("stall_tolerance must lie in [0, 1)")
        if self.trim_factor < 0.0:
            raise ValueError("trim_factor must be non-negative")


def default_eps_threshold(noise_std, model_resolution=0.0):
    """Fit-error threshold: three times the noise floor plus discretization floor."""
    return 3.0 * (noise_std**2 + model_resolution**2)


@dataclass
class RegistrationResult:
    rho_bar: np.ndarray       # m, model-frame origin in the camera frame
    eta_bar: np.ndarray       # model-frame attitude w.r.t. the camera
    fit_error: float          # m^2, mean squared residual (inf when failed)
    iterations: int
    healthy: bool


def initial_pose_from_prediction(prior: TargetState):
    """Coarse alignment (rho, eta) predicted by the estimator prior."""
    return prior.model_pose()


# ---------------------------------------------------------------------------
# Correspondence search
# ---------------------------------------------------------------------------


def _closest_on_triangle_pairwise(p, a, b, c):
    """Exact closest point on triangle (a, b, c) to p; broadcasts elementwise."""
    ab = b - a
    ac = c - a
    ap = p - a

    d1 = np.sum(ab * ap, axis=-1)
    d2 = np.sum(ac * ap, axis=-1)
    bp = p - b
    d3 = np.sum(ab * bp, axis=-1)
    d4 = np.sum(ac * bp, axis=-1)
    cp = p - c
    d5 = np.sum(ab * cp, axis=-1)
    d6 = np.sum(ac * cp, axis=-1)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(np.abs(d1 - d3) > 0, d1 / (d1 - d3), 0.0)
        w_ac = np.where(np.abs(d2 - d6) > 0, d2 / (d2 - d6), 0.0)
        w_bc = np.where(
            np.abs((d4 - d3) + (d5 - d6)) > 0, (d4 - d3) / ((d4 - d3) + (d5 - d6)), 0.0
        )
        denom = va + vb + vc
        v_in = np.where(np.abs(denom) > 0, vb / denom, 0.0)
        w_in = np.where(np.abs(denom) > 0, vc / denom, 0.0)

    # Region tests in priority order (vertex A, vertex B, edge AB, vertex C,
    # edge AC, edge BC, interior).
    in_a = (d1 <= 0) & (d2 <= 0)
    in_b = (d3 >= 0) & (d4 <= d3)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    in_c = (d6 >= 0) & (d5 <= d6)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    closest = a + v_in[..., None] * ab + w_in[..., None] * ac
    closest = np.where(on_bc[..., None], b + w_bc[..., None] * (c - b), closest)
    closest = np.where(on_ac[..., None], a + w_ac[..., None] * ac, closest)
    closest = np.where(in_c[..., None], c, closest)
    closest = np.where(on_ab[..., None], a + v_ab[..., None] * ab, closest)
    closest = np.where(in_b[..., None], b, closest)
    closest = np.where(in_a[..., None], a, closest)
    dist = np.linalg.norm(closest - p, axis=-1)
    return closest, dist


def closest_point_on_triangles(points, triangles):
    """Closest points between each query point and every triangle.

    points: (n, 3); triangles: (m, 3, 3). Returns (closest (n, m, 3),
    distances (n, m)).
    """
    p = np.asarray(points, dtype=float)[:, None, :]
    tri = np.asarray(triangles, dtype=float)
    return _closest_on_triangle_pairwise(
        p, tri[None, :, 0, :], tri[None, :, 1, :], tri[None, :, 2, :]
    )


class _FaceCache:
    """Per-face constants for the scalar point-triangle distance kernel."""

    def __init__(self, model: SurfaceModel):
        tri = model.triangles
        self.a = tri[:, 0]
        self.ab = tri[:, 1] - tri[:, 0]
        self.ac = tri[:, 2] - tri[:, 0]
        self.nab2 = np.sum(self.ab * self.ab, axis=1)
        self.nac2 = np.sum(self.ac * self.ac, axis=1)
        bc = self.ac - self.ab
        self.nbc2 = np.sum(bc * bc, axis=1)
        self.abac = np.sum(self.ab * self.ac, axis=1)
        self.a_ab = np.sum(self.a * self.ab, axis=1)
        self.a_ac = np.sum(self.a * self.ac, axis=1)
        self.na2 = np.sum(self.a * self.a, axis=1)
        self.nb2 = np.sum(tri[:, 1] * tri[:, 1], axis=1)
        self.nhat = model.face_normals
        self.a_n = np.sum(self.a * self.nhat, axis=1)


def _face_cache(model: SurfaceModel):
    cache = getattr(model, "_kernel_cache", None)
    if cache is None:
        cache = _FaceCache(model)
        model._kernel_cache = cache
    return cache


def _surface_sq_distances(local, model: SurfaceModel):
    """Squared point-to-triangle distances (n, m) without vector temporaries.

    All six Voronoi-region cases reduce to scalar algebra on four (n, m)
    matmul products, which is what makes dense correspondence search cheap.
    """
    f = _face_cache(model)
    p2 = np.sum(local * local, axis=1)[:, None]
    pa = local @ f.a.T
    pab = local @ f.ab.T
    pac = local @ f.ac.T
    pn = local @ f.nhat.T

    d1 = pab - f.a_ab
    d2 = pac - f.a_ac
    d3 = d1 - f.nab2
    d4 = d2 - f.abac
    d5 = d1 - f.abac
    d6 = d2 - f.nac2
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    dist_a = p2 - 2.0 * pa + f.na2
    dist_b = p2 - 2.0 * (pa + pab) + f.nb2
    dist_c = p2 - 2.0 * (pa + pac) + (f.na2 + 2.0 * f.a_ac + f.nac2)

    with np.errstate(divide="ignore", invalid="ignore"):
        d2_plane = (pn - f.a_n) ** 2
        d2_ab = dist_a - d1 * d1 / f.nab2
        d2_ac = dist_a - d2 * d2 / f.nac2
        d2_bc = dist_b - (d4 - d3) ** 2 / f.nbc2

    out = d2_plane
    out = np.where((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0), d2_bc, out)
    out = np.where((vb <= 0) & (d2 >= 0) & (d6 <= 0), d2_ac, out)
    out = np.where((d6 >= 0) & (d5 <= d6), dist_c, out)
    out = np.where((vc <= 0) & (d1 >= 0) & (d3 <= 0), d2_ab, out)
    out = np.where((d3 >= 0) & (d4 <= d3), dist_b, out)
    out = np.where((d1 <= 0) & (d2 <= 0), dist_a, out)
    return np.maximum(out, 0.0)


def _closest_vertices_brute(local, vertices):
    d = np.linalg.norm(local[:, None, :] - vertices[None], axis=2)
    idx = np.argmin(d, axis=1)  # first minimum: lowest-index tie-break
    return vertices[idx], d[np.arange(len(local)), idx]


def _closest_vertices_tree(local, model: SurfaceModel):
    tree = getattr(model, "_vertex_tree", None)
    if tree is None:
        tree = cKDTree(model.vertices)
        model._vertex_tree = tree
    k = min(2, len(model.vertices))
    dist, idx = tree.query(local, k=k)
    if k == 1:
        return model.vertices[idx], dist
    # Resolve near-ties to the lowest index for determinism.
    tie = np.abs(dist[:, 0] - dist[:, 1]) < 1e-12
    pick = np.where(tie, np.minimum(idx[:, 0], idx[:, 1]), idx[:, 0])
    return model.vertices[pick], np.linalg.norm(local - model.vertices[pick], axis=1)


def _closest_surface_brute(local, model: SurfaceModel):
    sq = _surface_sq_distances(local, model)
    best = np.argmin(sq, axis=1)
    # Reconstruct the winning closest points exactly.
    tri = model.triangles[best]
    closest, dist = _closest_on_triangle_pairwise(local, tri[:, 0], tri[:, 1], tri[:, 2])
    return closest, dist


def _closest_surface_tree(local, model: SurfaceModel):
    """Closest surface point using a centroid k-d tree shortlist.

    Exact: points whose shortlist cannot be proven optimal fall back to the
    full scan.
    """
    m = len(model.faces)
    if m <= 64:
        # Shortlisting cannot beat one vectorized scan on small meshes.
        return _closest_surface_brute(local, model)
    tree = getattr(model, "_centroid_tree", None)
    if tree is None:
        tree = cKDTree(model.face_centroids)
        model._centroid_tree = tree
    k = min(16, m)
    cdist, cidx = tree.query(local, k=k)
    cdist = cdist.reshape(len(local), k)
    cidx = cidx.reshape(len(local), k)
    cand = model.triangles[cidx]  # (n, k, 3, 3)
    pts, d = _closest_on_triangle_pairwise(
        local[:, None, :], cand[:, :, 0, :], cand[:, :, 1, :], cand[:, :, 2, :]
    )
    rows = np.arange(len(local))
    best = np.argmin(d, axis=1)
    closest = pts[rows, best]
    dist = d[rows, best]
    if k < m:
        # A farther face can still contain the closest point if its centroid
        # ball overlaps the current best distance.
        unsafe = dist > cdist[:, -1] - model.face_radii.max()
        if np.any(unsafe):
            closest[unsafe], dist[unsafe] = _closest_surface_brute(local[unsafe], model)
    return closest, dist


@dataclass
class CorrespondenceSet:
    cloud_indices: np.ndarray  # indices into the scan, ascending
    cloud_points: np.ndarray   # (k, 3) camera frame
    model_points: np.ndarray   # (k, 3) model frame
    distances: np.ndarray      # (k,) model-frame pair distances


def find_correspondences(cloud: PointCloud, model: SurfaceModel, pose, cutoff=np.inf,
                         accelerated=True, trim_factor=0.0):
    """Pair each scan point with its closest model point under the given pose.

    Pairs farther apart than `cutoff` are dropped. A nonzero `trim_factor`
    additionally drops pairs beyond that multiple of the median pair distance,
    which rejects outliers without choking a coarse seed. Raises
    EmptyCorrespondenceError when nothing survives.
    """
    if len(cloud) == 0:
        raise EmptyCorrespondenceError("empty point cloud")
    rho, eta = pose
    local = (cloud.points - np.asarray(rho, dtype=float)) @ rotation_matrix(eta)
    if model.faces is None:
        if accelerated:
            matched, dist = _closest_vertices_tree(local, model)
        else:
            matched, dist = _closest_vertices_brute(local, model.vertices)
    elif accelerated:
        matched, dist = _closest_surface_tree(local, model)
    else:
        matched, dist = _closest_surface_brute(local, model)
    limit = cutoff
    if trim_factor > 0.0:
        limit = min(limit, trim_factor * np.median(dist))
    keep = np.flatnonzero(dist <= limit)
    if len(keep) == 0:
        raise EmptyCorrespondenceError("all pairs beyond correspondence cutoff")
    return CorrespondenceSet(keep, cloud.points[keep], matched[keep], dist[keep])


# ---------------------------------------------------------------------------
# Closed-form alignment
# ---------------------------------------------------------------------------


def jacobi_eigh4(m, sweeps=50, tol=1e-15):
    """Eigendecomposition of a symmetric 4x4 matrix by cyclic Jacobi rotations.

    Returns (eigenvalues ascending, eigenvectors as columns).
    """
    a = np.array(m, dtype=float)
    v = np.eye(4)
    scale = max(np.abs(a).max(), 1.0)
    for _ in range(sweeps):
        off = max(abs(a[i, j]) for i in range(4) for j in range(i + 1, 4))
        if off < tol * scale:
            break
        for p in range(3):
            for q in range(p + 1, 4):
                if abs(a[p, q]) < tol * scale * 1e-2:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                if tau == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rot = np.eye(4)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    order = np.argsort(np.diag(a))
    return np.diag(a)[order], v[:, order]


def horn_align(cloud_points, model_points):
    """Closed-form least-squares pose fitting the model points to the cloud.

    Returns (rho, eta, eps): the pose minimizing the mean squared residual
    ``mean ||A(eta) d_i + rho - c_i||^2`` over the pairs, and that residual.
    """
    c = np.asarray(cloud_points, dtype=float).reshape(-1, 3)
    d = np.asarray(model_points, dtype=float).reshape(-1, 3)
    if len(c) < 3:
        raise DegenerateAlignmentError("need at least 3 point pairs")
    c_bar = c.mean(axis=0)
    d_bar = d.mean(axis=0)
    cc = c - c_bar
    dc = d - d_bar
    # Cross-covariance of the model set against the cloud set.
    s = dc.T @ cc / len(c)
    n_vec = np.array([s[1, 2] - s[2, 1], s[2, 0] - s[0, 2], s[0, 1] - s[1, 0]])
    m = np.empty((4, 4))
    m[0, 0] = np.trace(s)
    m[0, 1:] = n_vec
    m[1:, 0] = n_vec
    m[1:, 1:] = s + s.T - np.trace(s) * np.eye(3)
    eigvals, eigvecs = jacobi_eigh4(m)
    gap = eigvals[3] - eigvals[2]
    if not np.isfinite(gap) or gap < 1e-12 * max(1.0, abs(eigvals[3])):
        raise DegenerateAlignmentError("alignment eigenvalue gap below tolerance")
    lead = eigvecs[:, 3]  # scalar-first eigenvector [s, v]
    eta = quat_normalize(np.array([lead[1], lead[2], lead[3], lead[0]]))
    if eta[3] < 0:
        eta = -eta
    rho = c_bar - rotation_matrix(eta) @ d_bar
    resid = d @ rotation_matrix(eta).T + rho - c
    eps = float(np.mean(np.sum(resid * resid, axis=1)))
    return rho, eta, eps


def icp_register(cloud: PointCloud, model: SurfaceModel, initial_pose, cfg: IcpConfig,
                 accelerated=True):
    """Alternate correspondence search and closed-form alignment from a seed pose.

    Iterates until the fit error stalls (relative improvement below
    cfg.stall_tolerance) or the iteration budget runs out; exiting on the
    first dip under the health threshold would freeze the pose well before
    the alignment optimum. The health flag requires the final fit error to
    beat cfg.eps_threshold within the budget.

    Failure is a result state: an empty cloud, degenerate geometry, or a fit
    error stuck above threshold returns healthy=False (fit_error=inf when no
    valid alignment exists at all) rather than raising.
    """
    rho = np.asarray(initial_pose[0], dtype=float)
    eta = np.asarray(initial_pose[1], dtype=float)
    if len(cloud) == 0:
        return RegistrationResult(rho, eta, np.inf, 0, False)
    eps = np.inf
    n = 0
    stalls = 0
    for n in range(1, cfg.max_iterations + 1):
        try:
            pairs = find_correspondences(
                cloud, model, (rho, eta), cfg.correspondence_cutoff, accelerated,
                cfg.trim_factor,
            )
            rho, eta, new_eps = horn_align(pairs.cloud_points, pairs.model_points)
        except (EmptyCorrespondenceError, DegenerateAlignmentError):
            return RegistrationResult(rho, eta, np.inf, n, False)
        if eps - new_eps <= cfg.stall_tolerance * max(new_eps, 1e-30):
            stalls += 1  # require a persistent stall: plateaus can still escape
        else:
            stalls = 0
        eps = new_eps
        if stalls >= cfg.stall_iterations:
            break
    return RegistrationResult(rho, eta, eps, n, bool(eps < cfg.eps_threshold))
