"""Virtual spinning LiDAR: beam pattern, object ray casting, occlusion carving, noise."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, Pose3


@dataclass
class LidarConfig:
    """Angles in degrees. Defaults approximate an HDL-64E at a coarser azimuth step."""

    num_beams: int = 64
    vertical_fov: tuple[float, float] = (-24.8, 2.0)
    azimuth_step: float = 0.2
    horizontal_fov: tuple[float, float] = (-180.0, 180.0)
    max_range: float = 120.0
    dropout_prob: float = 0.05
    range_noise_sigma: float = 0.02
    mount: Pose3 = field(default_factory=lambda: Pose3(0.0, 0.0, 0.0, 0.0))

    def __post_init__(self):
        if self.num_beams < 1:
            raise ValueError("num_beams must be >= 1")
        if not self.azimuth_step > 0:
            raise ValueError("azimuth_step must be positive")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")
        if isinstance(self.mount, dict):
            self.mount = Pose3(**self.mount)

    @property
    def n_azimuth(self) -> int:
        span = self.horizontal_fov[1] - self.horizontal_fov[0]
        return max(1, math.ceil(span / self.azimuth_step - 1e-9))

    @property
    def carve_eps(self) -> float:
        return 3.0 * self.range_noise_sigma


@dataclass(frozen=True, eq=False)
class RaySet:
    """Rays in beam-major order. Directions are in the LiDAR frame."""

    beam: np.ndarray
    azimuth: np.ndarray  # radians
    elevation: np.ndarray  # radians
    dirs: np.ndarray
    origin: np.ndarray
    n_azimuth: int

    def __len__(self):
        return len(self.beam)


def generate_rays(cfg: LidarConfig) -> RaySet:
    elev = np.radians(np.linspace(cfg.vertical_fov[0], cfg.vertical_fov[1], cfg.num_beams))
    n_az = cfg.n_azimuth
    az = np.radians(cfg.horizontal_fov[0] + cfg.azimuth_step * np.arange(n_az))
    e, a = np.meshgrid(elev, az, indexing="ij")
    e, a = e.ravel(), a.ravel()
    d = np.column_stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
    d = d @ cfg.mount.rotation().T
    beam = np.repeat(np.arange(cfg.num_beams), n_az)
    return RaySet(beam, a, e, d, cfg.mount.translation, n_az)


def ray_index_of(points: np.ndarray, cfg: LidarConfig) -> np.ndarray:
    """Nearest ray id for each point (-1 outside the scan pattern)."""
    p = cfg.mount.inverse_apply(np.asarray(points, dtype=float).reshape(-1, 3))
    rho = np.hypot(p[:, 0], p[:, 1])
    elev = np.degrees(np.arctan2(p[:, 2], rho))
    az = np.degrees(np.arctan2(p[:, 1], p[:, 0]))
    v0, v1 = cfg.vertical_fov
    de = (v1 - v0) / (cfg.num_beams - 1) if cfg.num_beams > 1 else 1.0
    beam = np.rint((elev - v0) / de).astype(np.int64) if cfg.num_beams > 1 else np.zeros(len(p), np.int64)
    n_az = cfg.n_azimuth
    k = np.rint((az - cfg.horizontal_fov[0]) / cfg.azimuth_step).astype(np.int64)
    full_circle = cfg.horizontal_fov[1] - cfg.horizontal_fov[0] >= 360.0 - 1e-9
    if full_circle:
        k = np.mod(k, n_az)
    ok = (beam >= 0) & (beam < cfg.num_beams) & (k >= 0) & (k < n_az)
    return np.where(ok, beam * n_az + k, -1)


@dataclass(frozen=True, eq=False)
class SimulatedPoints:
    cloud: PointCloud
    instance: np.ndarray  # owning instance index per point
    ray: np.ndarray  # ray id per point

    def __len__(self):
        return len(self.cloud)

    def subset(self, mask) -> "SimulatedPoints":
        return SimulatedPoints(self.cloud.subset(mask), self.instance[mask], self.ray[mask])


def cast_instances(origin, dirs, instances, tmax):
    """Nearest hit over all instances: (t, instance index, triangle id)."""
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_inst = np.full(n, -1, dtype=np.int64)
    best_tri = np.full(n, -1, dtype=np.int64)
    origins = np.asarray(origin, dtype=float).reshape(-1, 3)
    for k, inst in enumerate(instances):
        t, tri = inst.raycast_world(origins, dirs, tmax)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_inst[closer] = k
        best_tri[closer] = tri[closer]
    return best_t, best_inst, best_tri


def simulate_object_points(rays: RaySet, instances, cfg: LidarConfig,
                           rng: np.random.Generator | None = None) -> SimulatedPoints:
    """First-hit points on the inserted meshes, with dropout and range noise.

    One uniform and one normal variate are drawn per ray regardless of hits,
    so the noise on a given ray does not depend on scene content.
    """
    n = len(rays)
    t, inst, tri = cast_instances(rays.origin, rays.dirs, instances, cfg.max_range)
    hit = inst >= 0
    if rng is not None:
        u = rng.random(n)
        z = rng.standard_normal(n)
    else:
        u = np.ones(n)
        z = np.zeros(n)
    keep = hit & (u >= cfg.dropout_prob)
    r = t + cfg.range_noise_sigma * z
    keep &= (r > 0) & (r <= cfg.max_range)
    idx = np.nonzero(keep)[0]
    pts = rays.origin + r[idx, None] * rays.dirs[idx]
    inten = np.empty(len(idx))
    for k, inst_obj in enumerate(instances):
        m = inst[idx] == k
        if m.any():
            inten[m] = inst_obj.mesh.albedo[tri[idx][m]].mean(axis=1)
    return SimulatedPoints(PointCloud(pts, inten), inst[idx], idx)


def occluded_mask(points: np.ndarray, instances, cfg: LidarConfig) -> np.ndarray:
    """True where the sensor ray to the point is blocked by an instance first."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0 or not instances:
        return np.zeros(len(pts), dtype=bool)
    origin = cfg.mount.translation
    v = pts - origin
    rng_ = np.linalg.norm(v, axis=1)
    ok = rng_ > 1e-9
    d = np.zeros_like(v)
    d[ok] = v[ok] / rng_[ok, None]
    limit = rng_ - cfg.carve_eps
    out = np.zeros(len(pts), dtype=bool)
    sel = np.nonzero(ok & (limit > 0))[0]
    if len(sel):
        t, _, _ = cast_instances(origin, d[sel], instances, limit[sel])
        out[sel] = t < limit[sel]
    return out


def carve_occluded_background(cloud: PointCloud, instances, cfg: LidarConfig) -> PointCloud:
    """Drop background points hidden behind inserted instances; order is preserved."""
    blocked = occluded_mask(cloud.points, instances, cfg)
    return cloud.subset(~blocked)


def hide_behind_background(sim: SimulatedPoints, background: PointCloud, cfg: LidarConfig) -> SimulatedPoints:
    """Drop synthesized points whose ray already returned from nearer background.

    A real scanner records one return per ray, so an inserted surface behind
    an existing return on the same ray cannot be seen.
    """
    if len(sim) == 0 or len(background) == 0:
        return sim
    n_rays = cfg.num_beams * cfg.n_azimuth
    bid = ray_index_of(background.points, cfg)
    brange = np.linalg.norm(np.asarray(background.points, dtype=float) - cfg.mount.translation, axis=1)
    nearest = np.full(n_rays, np.inf)
    ok = bid >= 0
    np.minimum.at(nearest, bid[ok], brange[ok])
    orange = np.linalg.norm(np.asarray(sim.cloud.points, dtype=float) - cfg.mount.translation, axis=1)
    hidden = nearest[sim.ray] < orange - cfg.carve_eps
    return sim.subset(~hidden)


def merge_clouds(background: PointCloud, objects) -> PointCloud:
    obj = objects.cloud if isinstance(objects, SimulatedPoints) else objects
    if len(obj) == 0:
        return background
    if len(background) == 0:
        return obj
    return PointCloud(np.concatenate([background.points, obj.points]),
                      np.concatenate([background.intensity, obj.intensity]))
