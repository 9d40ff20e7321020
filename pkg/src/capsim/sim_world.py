"""Ground-truth propagation, surface models, and the synthetic range sensor.

The sensor sits at the origin of the camera frame and looks along +z. A scan
samples points on the target's surface model, culls back faces and
out-of-view points, then corrupts the survivors with Gaussian noise and
uniform outliers. Vision faults are injected from a schedule: a blackout
empties the scan, a degraded window inflates its noise.

Process noise is zero-order hold: each integrator substep draws one
disturbance sample with standard deviation sqrt(psd / dt), which realizes the
configured continuous-time covariance.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np

from .core_math import TargetState, pack_dynamic, rk4_step, rotation_matrix, unpack_dynamic
from .errors import ConfigError

TRUTH_SUBSTEP = 0.01  # s, internal integration step independent of sensor rate


# ---------------------------------------------------------------------------
# Surface model
# ---------------------------------------------------------------------------


class SurfaceModel:
    """Target shape in the grapple-anchored model frame, meters.

    Vertex-only models are allowed; when triangular faces are present they
    must be wound right-handed with outward normals.
    """

    def __init__(self, vertices, faces=None):
        self.vertices = np.atleast_2d(np.asarray(vertices, dtype=float))
        if self.vertices.shape[0] < 4 or self.vertices.shape[1] != 3:
            raise ConfigError("surface model needs at least 4 points in R^3")
        centered = self.vertices - self.vertices.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-12) < 3:
            raise ConfigError("surface model vertices are coplanar")
        if faces is not None and len(faces) > 0:
            self.faces = np.asarray(faces, dtype=int)
            if self.faces.ndim != 2 or self.faces.shape[1] != 3:
                raise ConfigError("faces must be vertex-index triples")
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ConfigError("face index out of range")
        else:
            self.faces = None
        self._precompute()

    def _precompute(self):
        if self.faces is None:
            self.triangles = None
            return
        self.triangles = self.vertices[self.faces]  # (m, 3, 3)
        edge1 = self.triangles[:, 1] - self.triangles[:, 0]
        edge2 = self.triangles[:, 2] - self.triangles[:, 0]
        n = np.cross(edge1, edge2)
        self.face_areas = 0.5 * np.linalg.norm(n, axis=1)
        self.face_normals = n / (2.0 * self.face_areas[:, None])
        self.face_centroids = self.triangles.mean(axis=1)
        self.face_radii = np.linalg.norm(
            self.triangles - self.face_centroids[:, None, :], axis=2
        ).max(axis=1)

    @classmethod
    def from_obj(cls, path):
        vertices, faces = [], []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if parts[0] == "v" and len(parts) == 4:
                    vertices.append([float(x) for x in parts[1:]])
                elif parts[0] == "f" and len(parts) == 4:
                    faces.append([int(x) - 1 for x in parts[1:]])
                else:
                    raise ConfigError(f"{path}:{lineno}: unsupported OBJ line: {line!r}")
        return cls(np.array(vertices), np.array(faces) if faces else None)

    def to_obj(self, path):
        with open(path, "w") as fh:
            for v in self.vertices:
                fh.write(f"v {v[0]:.10g} {v[1]:.10g} {v[2]:.10g}\n")
            if self.faces is not None:
                for f in self.faces:
                    fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def default_target_model():
    """The packaged 20 cm asymmetric mock target."""
    ref = importlib.resources.files("capsim") / "data" / "mock_target.obj"
    with importlib.resources.as_file(ref) as path:
        return SurfaceModel.from_obj(path)


# ---------------------------------------------------------------------------
# Sensor configuration and faults
# ---------------------------------------------------------------------------


@dataclass
class PointCloud:
    """Scan points in the camera frame; may be empty under total occlusion."""

    points: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self):
        return len(self.points)


@dataclass
class SensorConfig:
    rate: float = 2.0               # Hz
    noise_std: float = 0.002        # m, per axis
    outlier_fraction: float = 0.0   # [0, 1)
    outlier_box: float = 0.5        # m, cube side around the target
    max_points: int = 240
    fov_halfangle: float = np.pi / 3  # rad, about the +z boresight
    hidden_surface: bool = True

    def __post_init__(self):
        if self.rate <= 0:
            raise ConfigError("sensor rate must be positive")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ConfigError("outlier_fraction must lie in [0, 1)")
        if self.max_points < 1:
            raise ConfigError("max_points must be at least 1")


BLACKOUT = "blackout"
DEGRADED = "degraded"


@dataclass
class FaultWindow:
    start: float
    end: float
    mode: str = BLACKOUT
    noise_multiplier: float = 1.0

    def __post_init__(self):
        if self.start >= self.end:
            raise ConfigError("fault window must have start < end")
        if self.mode not in (BLACKOUT, DEGRADED):
            raise ConfigError(f"unknown fault mode {self.mode!r}")


@dataclass
class FaultSchedule:
    windows: list = field(default_factory=list)

    def __post_init__(self):
        spans = sorted((w.start, w.end) for w in self.windows)
        for (s0, e0), (s1, _) in zip(spans, spans[1:]):
            if s1 < e0:
                raise ConfigError("fault windows overlap")

    def active(self, t):
        """Fault window covering time t, or None."""
        for w in self.windows:
            if w.start <= t < w.end:
                return w
        return None


# ---------------------------------------------------------------------------
# Truth propagation
# ---------------------------------------------------------------------------


@dataclass
class ProcessNoise:
    """Continuous-time disturbance intensities (isotropic).

    accel_psd drives the CoM acceleration (m^2/s^4 per Hz); alpha_psd drives
    the normalized angular acceleration before the inertia-ratio gain.
    """

    accel_psd: float = 0.0
    alpha_psd: float = 0.0

    @classmethod
    def from_draw_covariance(cls, accel_cov, alpha_cov, dt=TRUTH_SUBSTEP):
        """Intensities such that one ZOH draw at step dt has the given covariance."""
        return cls(accel_psd=accel_cov * dt, alpha_psd=alpha_cov * dt)


def sample_disturbances(noise: ProcessNoise, dt, rng, size=None):
    """ZOH disturbance draws (eps_tau, eps_f) for one substep of length dt."""
    shape = (3,) if size is None else (size, 3)
    eps_tau = rng.normal(size=shape) * np.sqrt(noise.alpha_psd / dt)
    eps_f = rng.normal(size=shape) * np.sqrt(noise.accel_psd / dt)
    return eps_tau, eps_f


def propagate_truth(state: TargetState, dt, noise: ProcessNoise, rng, substep=TRUTH_SUBSTEP):
    """Advance the true target state by dt with zero-order-hold process noise."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    y = pack_dynamic(state)
    remaining = float(dt)
    while remaining > 1e-12:
        h = min(substep, remaining)
        eps_tau, eps_f = sample_disturbances(noise, h, rng)
        y = rk4_step(y, h, state.sigma, eps_tau=eps_tau, eps_f=eps_f)
        remaining -= h
    return unpack_dynamic(state, y)


# ---------------------------------------------------------------------------
# Scan generation
# ---------------------------------------------------------------------------


def _sample_surface(model: SurfaceModel, n, rng):
    """n candidate points on the model surface with their outward normals."""
    if model.faces is None:
        idx = rng.integers(0, len(model.vertices), size=n)
        return model.vertices[idx], None
    weights = model.face_areas / model.face_areas.sum()
    idx = rng.choice(len(model.faces), size=n, p=weights)
    tri = model.triangles[idx]
    # Uniform barycentric sampling.
    r1 = np.sqrt(rng.random(size=n))
    r2 = rng.random(size=n)
    a = 1.0 - r1
    b = r1 * (1.0 - r2)
    c = r1 * r2
    pts = a[:, None] * tri[:, 0] + b[:, None] * tri[:, 1] + c[:, None] * tri[:, 2]
    return pts, model.face_normals[idx]


def render_scan(model: SurfaceModel, true_pose, cfg: SensorConfig, fault: FaultSchedule, t, rng):
    """Synthesize one range scan of the model at the given pose.

    true_pose is (rho, eta): the model frame's position and attitude w.r.t.
    the camera, so a model point p maps to rotation_matrix(eta) @ p + rho.
    """
    window = fault.active(t) if fault is not None else None
    if window is not None and window.mode == BLACKOUT:
        return PointCloud(np.empty((0, 3)), t)

    rho, eta = true_pose
    rho = np.asarray(rho, dtype=float)
    a = rotation_matrix(eta)

    pts_model, normals_model = _sample_surface(model, cfg.max_points, rng)
    pts = pts_model @ a.T + rho
    keep = np.ones(len(pts), dtype=bool)
    if cfg.hidden_surface and normals_model is not None:
        normals = normals_model @ a.T
        keep &= np.sum(normals * pts, axis=1) < 0.0  # facing the sensor at the origin
    if cfg.fov_halfangle < np.pi:
        rng_norm = np.linalg.norm(pts, axis=1)
        cos_angle = np.where(rng_norm > 0, pts[:, 2] / np.maximum(rng_norm, 1e-300), 1.0)
        keep &= cos_angle >= np.cos(cfg.fov_halfangle)
    pts = pts[keep]

    noise_std = cfg.noise_std
    if window is not None and window.mode == DEGRADED:
        noise_std *= window.noise_multiplier
    if noise_std > 0:
        pts = pts + rng.normal(size=pts.shape) * noise_std
    if cfg.outlier_fraction > 0 and len(pts):
        is_outlier = rng.random(size=len(pts)) < cfg.outlier_fraction
        n_out = int(is_outlier.sum())
        if n_out:
            pts[is_outlier] = rho + rng.uniform(-0.5, 0.5, size=(n_out, 3)) * cfg.outlier_box
    return PointCloud(pts, t)


# ---------------------------------------------------------------------------
# Chaser plant
# ---------------------------------------------------------------------------


def step_chaser(r, r_dot, u, dt, a_max=np.inf):
    """Exact double-integrator update under a constant acceleration u."""
    u = np.asarray(u, dtype=float)
    if np.linalg.norm(u) > a_max + 1e-9:
        raise ValueError(f"acceleration norm {np.linalg.norm(u)} exceeds bound {a_max}")
    r = np.asarray(r, dtype=float)
    r_dot = np.asarray(r_dot, dtype=float)
    return r + r_dot * dt + 0.5 * u * dt * dt, r_dot + u * dt
