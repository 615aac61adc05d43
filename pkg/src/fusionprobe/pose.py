"""Insertion pose estimation.

Drivable ground is found with a height-map grid: a cell is ground when it
holds enough points, is flat, and sits near the expected ground height. The
road is the largest 4-connected ground component touching a seed region in
front of the sensor. Road cells are meshified into a surface that poses are
sampled from, and candidates are rejected when they collide with labeled
objects or with non-ground points.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import csgraph

from .errors import Exhausted, NoGround, TooSparse
from .geometry import (Box3, Calibration, PointCloud, Pose3, box3_corners, iou_3d,
                       lidar_to_cam, points_in_box3, project_points)


@dataclass
class PoseConfig:
    cell_size: float = 0.5
    flatness_thresh: float = 0.15
    ground_band: float = 0.5
    # two neighboring road cells together must stay within this height range (keeps curbs out)
    max_step: float = 0.1
    sensor_height: float = 1.73
    min_points: int = 3
    seed_x: tuple[float, float] = (3.0, 10.0)
    seed_half_width: float = 3.0
    grid_range: float = 100.0
    # bridge the empty rings between far LiDAR scan lines
    fill_gaps: bool = True
    max_fill_gap: float = 20.0
    yaw_mode: str = "road"  # "road" or "uniform"
    yaw_jitter_deg: float = 10.0
    align_radius: float = 5.0
    collision_margin: float = 0.25
    ground_clearance: float = 0.25
    min_range: float = 5.0
    dis_max: float = 80.0
    max_attempts: int = 100
    require_in_camera: bool = True

    @property
    def expected_ground_z(self) -> float:
        return -self.sensor_height


@dataclass(frozen=True, eq=False)
class GroundGrid:
    """Dense height-map grid. Cell (i, j) spans x0 + i*cs .. x0 + (i+1)*cs (same for y)."""

    cell_size: float
    origin: tuple[float, float]
    count: np.ndarray
    min_z: np.ndarray
    max_z: np.ndarray
    mean_z: np.ndarray
    is_ground: np.ndarray
    is_road: np.ndarray
    filled: np.ndarray
    expected_ground_z: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.count.shape

    def cell_of(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        i = np.floor((xy[:, 0] - self.origin[0]) / self.cell_size).astype(np.int64)
        j = np.floor((xy[:, 1] - self.origin[1]) / self.cell_size).astype(np.int64)
        inside = (i >= 0) & (j >= 0) & (i < self.shape[0]) & (j < self.shape[1])
        return i, j, inside

    def cell_center(self, i, j) -> np.ndarray:
        return np.stack([self.origin[0] + (np.asarray(i) + 0.5) * self.cell_size,
                         self.origin[1] + (np.asarray(j) + 0.5) * self.cell_size], axis=-1)

    def cells(self) -> dict:
        """Sparse view ``(i, j) -> stats`` of the occupied or filled cells."""
        out = {}
        for i, j in zip(*np.nonzero((self.count > 0) | self.filled)):
            out[(int(i), int(j))] = dict(
                min_z=float(self.min_z[i, j]), max_z=float(self.max_z[i, j]),
                mean_z=float(self.mean_z[i, j]), count=int(self.count[i, j]),
                is_ground=bool(self.is_ground[i, j]), is_road=bool(self.is_road[i, j]))
        return out

    @cached_property
    def ground_z(self) -> np.ndarray:
        return self.ground_height()

    def ground_height(self, radius_cells: int = 4) -> np.ndarray:
        """Per-cell ground elevation: own mean on ground cells, neighborhood mean elsewhere."""
        g = self.is_ground
        vals = np.where(g, self.mean_z, 0.0)
        size = 2 * radius_cells + 1
        s = ndimage.uniform_filter(vals, size=size, mode="constant")
        n = ndimage.uniform_filter(g.astype(float), size=size, mode="constant")
        with np.errstate(invalid="ignore", divide="ignore"):
            nb = np.where(n > 1e-9, s / np.maximum(n, 1e-12), self.expected_ground_z)
        return np.where(g, self.mean_z, nb)


def _seed_mask(grid_shape, origin, cs, cfg: PoseConfig) -> np.ndarray:
    i = np.arange(grid_shape[0])
    j = np.arange(grid_shape[1])
    cx = origin[0] + (i + 0.5) * cs
    cy = origin[1] + (j + 0.5) * cs
    mx = (cx >= cfg.seed_x[0]) & (cx <= cfg.seed_x[1])
    my = np.abs(cy) < cfg.seed_half_width
    return mx[:, None] & my[None, :]


def _fill_gaps(count, mean_z, is_ground, origin, cs, cfg: PoseConfig):
    """Mark empty cells lying on a sensor ray between two ground cells.

    Walks inward and outward along the ray through each empty cell center and
    interpolates the height when both first-occupied neighbors are ground and
    agree within ``flatness_thresh``.
    """
    nx, ny = count.shape
    ei, ej = np.nonzero(count == 0)
    filled = np.zeros_like(is_ground)
    fz = np.full(count.shape, np.nan)
    if len(ei) == 0:
        return filled, fz
    c = np.stack([origin[0] + (ei + 0.5) * cs, origin[1] + (ej + 0.5) * cs], axis=1)
    r = np.linalg.norm(c, axis=1)
    ok = r > cs
    ei, ej, c, r = ei[ok], ej[ok], c[ok], r[ok]
    u = c / r[:, None]
    step = 0.5 * cs
    ks = np.arange(1, int(cfg.max_fill_gap / step) + 1) * step
    status = np.where(count > 0, np.where(is_ground, 1, 2), 0)

    def first_hit(sign):
        p = c[:, None, :] + sign * ks[None, :, None] * u[:, None, :]
        pi = np.floor((p[..., 0] - origin[0]) / cs).astype(np.int64)
        pj = np.floor((p[..., 1] - origin[1]) / cs).astype(np.int64)
        inside = (pi >= 0) & (pj >= 0) & (pi < nx) & (pj < ny)
        if sign < 0:
            inside &= (r[:, None] - ks[None, :]) > 0
        st = np.zeros(pi.shape, dtype=np.int64)
        st[inside] = status[pi[inside], pj[inside]]
        hit = st > 0
        k = np.argmax(hit, axis=1)
        any_hit = hit[np.arange(len(k)), k]
        rows = np.arange(len(k))
        s = np.where(any_hit, st[rows, k], 0)
        z = np.where(any_hit & inside[rows, k],
                     mean_z[np.clip(pi[rows, k], 0, nx - 1), np.clip(pj[rows, k], 0, ny - 1)], np.nan)
        return s, z, ks[k]

    s_in, z_in, d_in = first_hit(-1.0)
    s_out, z_out, d_out = first_hit(1.0)
    good = ((s_in == 1) & (s_out == 1) & (np.abs(z_in - z_out) < cfg.flatness_thresh)
            & (d_in + d_out <= cfg.max_fill_gap))
    w = d_in / (d_in + d_out)
    filled[ei[good], ej[good]] = True
    fz[ei[good], ej[good]] = (z_in + w * (z_out - z_in))[good]
    return filled, fz


def _step_components(walkable: np.ndarray, lo: np.ndarray, hi: np.ndarray, max_step: float):
    """4-connected components of walkable cells. Neighbors link only when their
    joint height range (lowest min to highest max) is within ``max_step``."""
    nx, ny = walkable.shape
    idx = np.arange(nx * ny).reshape(nx, ny)
    rows, cols = [], []
    for a, b in (((slice(None, -1), slice(None)), (slice(1, None), slice(None))),
                 ((slice(None), slice(None, -1)), (slice(None), slice(1, None)))):
        with np.errstate(invalid="ignore"):
            ok = walkable[a] & walkable[b] & (np.maximum(hi[a], hi[b]) - np.minimum(lo[a], lo[b]) <= max_step)
        rows.append(idx[a][ok])
        cols.append(idx[b][ok])
    r, c = np.concatenate(rows), np.concatenate(cols)
    g = sparse.coo_matrix((np.ones(len(r)), (r, c)), shape=(nx * ny, nx * ny))
    n, labels = csgraph.connected_components(g, directed=False)
    labels = labels.reshape(nx, ny)
    return np.where(walkable, labels, -1), n


def segment_ground(cloud: PointCloud, cfg: PoseConfig | None = None) -> GroundGrid:
    cfg = cfg or PoseConfig()
    pts = np.asarray(cloud.points, dtype=float)
    if len(pts) == 0:
        raise NoGround("empty point cloud")
    keep = (np.abs(pts[:, 0]) <= cfg.grid_range) & (np.abs(pts[:, 1]) <= cfg.grid_range)
    pts = pts[keep]
    if len(pts) == 0:
        raise NoGround("no points within grid range")
    cs = cfg.cell_size
    x0 = math.floor(min(pts[:, 0].min(), cfg.seed_x[0]) / cs) * cs
    y0 = math.floor(min(pts[:, 1].min(), -cfg.seed_half_width) / cs) * cs
    x1 = max(pts[:, 0].max(), cfg.seed_x[1])
    y1 = max(pts[:, 1].max(), cfg.seed_half_width)
    nx = int(math.floor((x1 - x0) / cs)) + 1
    ny = int(math.floor((y1 - y0) / cs)) + 1
    i = np.floor((pts[:, 0] - x0) / cs).astype(np.int64)
    j = np.floor((pts[:, 1] - y0) / cs).astype(np.int64)
    flat = i * ny + j
    z = pts[:, 2]
    count = np.bincount(flat, minlength=nx * ny).reshape(nx, ny)
    sum_z = np.bincount(flat, weights=z, minlength=nx * ny).reshape(nx, ny)
    min_z = np.full(nx * ny, np.inf)
    max_z = np.full(nx * ny, -np.inf)
    np.minimum.at(min_z, flat, z)
    np.maximum.at(max_z, flat, z)
    min_z = min_z.reshape(nx, ny)
    max_z = max_z.reshape(nx, ny)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_z = np.where(count > 0, sum_z / np.maximum(count, 1), np.nan)
    is_ground = ((count >= cfg.min_points) & ((max_z - min_z) < cfg.flatness_thresh)
                 & (np.abs(mean_z - cfg.expected_ground_z) < cfg.ground_band))
    if not is_ground.any():
        raise NoGround("no cell qualifies as ground")

    filled = np.zeros_like(is_ground)
    if cfg.fill_gaps:
        filled, fz = _fill_gaps(count, mean_z, is_ground, (x0, y0), cs, cfg)
        mean_z = np.where(filled, fz, mean_z)
        min_z = np.where(filled, fz, min_z)
        max_z = np.where(filled, fz, max_z)
    walkable = is_ground | filled
    labels, n = _step_components(walkable, min_z, max_z, cfg.max_step)
    seed = _seed_mask((nx, ny), (x0, y0), cs, cfg)
    is_road = np.zeros_like(is_ground)
    if n:
        # the component covering most of the area in front of the sensor; a sidewalk
        # can clip the seed strip and still be the larger component overall
        votes = np.bincount(labels[seed & walkable], minlength=n)
        if votes.any():
            is_road = walkable & (labels == int(np.argmax(votes)))
    return GroundGrid(cs, (x0, y0), count, min_z, max_z, mean_z, is_ground | filled,
                      is_road, filled, cfg.expected_ground_z)


def nonground_mask(points: np.ndarray, grid: GroundGrid, clearance: float = 0.25) -> np.ndarray:
    """True for points more than ``clearance`` above the local ground estimate."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    gh = grid.ground_z
    i, j, inside = grid.cell_of(pts[:, :2])
    base = np.full(len(pts), grid.expected_ground_z)
    base[inside] = gh[i[inside], j[inside]]
    return pts[:, 2] > base + clearance


# ---------------------------------------------------------------- road surface

@dataclass(frozen=True, eq=False)
class RoadSurface:
    """Triangulated road. ``triangles`` is (T, 3, 3) with per-vertex xyz."""

    triangles: np.ndarray
    cell_centers: np.ndarray  # (M, 2) road cell centers, used for heading alignment
    bin_size: float = 0.5

    def __post_init__(self):
        tri = np.asarray(self.triangles, dtype=float).reshape(-1, 3, 3)
        object.__setattr__(self, "triangles", tri)
        a = tri[:, 1, :2] - tri[:, 0, :2]
        b = tri[:, 2, :2] - tri[:, 0, :2]
        object.__setattr__(self, "areas", 0.5 * np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
        index = defaultdict(list)
        lo = tri[:, :, :2].min(axis=1)
        hi = tri[:, :, :2].max(axis=1)
        bs = self.bin_size
        for k in range(len(tri)):
            for bi in range(int(math.floor(lo[k, 0] / bs)), int(math.floor(hi[k, 0] / bs)) + 1):
                for bj in range(int(math.floor(lo[k, 1] / bs)), int(math.floor(hi[k, 1] / bs)) + 1):
                    index[(bi, bj)].append(k)
        object.__setattr__(self, "_index", dict(index))

    @property
    def planes(self) -> np.ndarray:
        """Per-triangle plane (a, b, c, d) with a*x + b*y + c*z + d = 0 and c > 0."""
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n = n * np.sign(n[:, 2:3])
        n = n / np.linalg.norm(n, axis=1, keepdims=True)
        d = -np.einsum("ij,ij->i", n, tri[:, 0])
        return np.column_stack([n, d])

    def _locate(self, x: float, y: float):
        bs = self.bin_size
        for k in self._index.get((int(math.floor(x / bs)), int(math.floor(y / bs))), ()):
            p0, p1, p2 = self.triangles[k]
            det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
            if det == 0:
                continue
            l1 = ((x - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (y - p0[1])) / det
            l2 = ((p1[0] - p0[0]) * (y - p0[1]) - (x - p0[0]) * (p1[1] - p0[1])) / det
            l0 = 1.0 - l1 - l2
            tol = -1e-9
            if l0 >= tol and l1 >= tol and l2 >= tol:
                return k, (l0, l1, l2)
        return None

    def height_at(self, x: float, y: float) -> float | None:
        """Barycentric height on the covering triangle, None off the surface."""
        hit = self._locate(x, y)
        if hit is None:
            return None
        k, (l0, l1, l2) = hit
        t = self.triangles[k]
        return float(l0 * t[0, 2] + l1 * t[1, 2] + l2 * t[2, 2])

    def heights(self, xy: np.ndarray) -> np.ndarray:
        out = [self.height_at(float(x), float(y)) for x, y in np.asarray(xy).reshape(-1, 2)]
        return np.array([np.nan if h is None else h for h in out])


def meshify_road(grid: GroundGrid) -> RoadSurface:
    """Two triangles per 2x2 block of mutually adjacent road cells."""
    r = grid.is_road
    quad = r[:-1, :-1] & r[1:, :-1] & r[:-1, 1:] & r[1:, 1:]
    qi, qj = np.nonzero(quad)
    if len(qi) == 0:
        raise TooSparse("no 2x2 block of road cells")

    def vert(i, j):
        c = grid.cell_center(i, j)
        return np.column_stack([c, grid.mean_z[i, j]])

    v00, v10 = vert(qi, qj), vert(qi + 1, qj)
    v01, v11 = vert(qi, qj + 1), vert(qi + 1, qj + 1)
    tri = np.concatenate([np.stack([v00, v10, v11], axis=1), np.stack([v00, v11, v01], axis=1)])
    ri, rj = np.nonzero(r)
    return RoadSurface(tri, grid.cell_center(ri, rj), bin_size=grid.cell_size)


# ---------------------------------------------------------------- sampling

@dataclass(frozen=True)
class PoseCandidate:
    pose: Pose3
    box: Box3
    distance: float


def _road_heading(surface: RoadSurface, x: float, y: float, radius: float) -> float | None:
    c = surface.cell_centers
    near = c[np.hypot(c[:, 0] - x, c[:, 1] - y) <= radius]
    if len(near) < 3:
        return None
    d = near - near.mean(axis=0)
    w, v = np.linalg.eigh(d.T @ d)
    if w[1] - w[0] < 1e-9 * max(w[1], 1e-12):
        return None  # isotropic patch: no preferred direction
    major = v[:, 1]
    return math.atan2(major[1], major[0])


def box_at(local_box: Box3, pose: Pose3) -> Box3:
    """Carry an object-frame box (yaw 0) through a pose."""
    c = pose.apply(np.array([local_box.center]))[0]
    return Box3(tuple(c), local_box.length, local_box.width, local_box.height, pose.yaw)


def in_camera(box: Box3, calib: Calibration, near: float = 0.5) -> bool:
    cam = lidar_to_cam(box3_corners(box), calib)
    if np.any(cam[:, 2] <= near):
        return False
    uv, _ = project_points(lidar_to_cam(np.array([box.center]), calib), calib)
    w, h = calib.image_size
    u, v = uv[0]
    return bool(0 <= u <= w - 1 and 0 <= v <= h - 1)


def sample_pose(surface: RoadSurface, local_box: Box3, rng: np.random.Generator,
                cfg: PoseConfig | None = None, calib: Calibration | None = None) -> PoseCandidate:
    """Draw a pose uniformly over road area.

    ``local_box`` is the object's box at the identity pose. The footprint
    corners must all lie on the road, and with ``calib`` and
    ``cfg.require_in_camera`` the box must be in front of and centered
    inside the image.
    """
    cfg = cfg or PoseConfig()
    areas = surface.areas
    total = areas.sum()
    if total <= 0:
        raise Exhausted("road surface has zero area")
    p = areas / total
    for _ in range(cfg.max_attempts):
        k = int(rng.choice(len(areas), p=p))
        r1, r2 = rng.random(2)
        if r1 + r2 > 1.0:
            r1, r2 = 1.0 - r1, 1.0 - r2
        t = surface.triangles[k]
        xyz = t[0] + r1 * (t[1] - t[0]) + r2 * (t[2] - t[0])
        x, y, z = float(xyz[0]), float(xyz[1]), float(xyz[2])
        if cfg.yaw_mode == "uniform":
            yaw = rng.uniform(-math.pi, math.pi)
        elif cfg.yaw_mode == "road":
            flip, jitter = rng.random(), rng.uniform(-1.0, 1.0)
            heading = _road_heading(surface, x, y, cfg.align_radius)
            if heading is None:
                heading = math.atan2(y, x)
            yaw = heading + (math.pi if flip < 0.5 else 0.0) + math.radians(cfg.yaw_jitter_deg) * jitter
        else:
            raise ValueError(f"unknown yaw_mode {cfg.yaw_mode!r}")
        # the surface height at (x, y) is exactly z since xyz lies on triangle k
        pose = Pose3(x, y, z, yaw)
        box = box_at(local_box, pose)
        dist = box.distance()
        if not (cfg.min_range <= dist <= cfg.dis_max):
            continue
        if any(surface.height_at(cx, cy) is None for cx, cy in box.bev_corners()):
            continue
        if calib is not None and cfg.require_in_camera and not in_camera(box, calib):
            continue
        return PoseCandidate(pose, box, dist)
    raise Exhausted(f"no admissible pose after {cfg.max_attempts} attempts")


@dataclass(frozen=True)
class Collision:
    reason: str  # "gt_box" or "points"
    index: int  # GT index, or number of offending points


def check_collision(candidate: PoseCandidate, frame, cfg: PoseConfig | None = None,
                    grid: GroundGrid | None = None) -> Collision | None:
    """None when the candidate is valid.

    Labeled boxes collide on any positive 3D overlap. Raw points collide when
    a non-ground point falls inside the candidate box inflated by the margin.
    """
    cfg = cfg or PoseConfig()
    for k, gt in enumerate(frame.labels):
        if gt.box3 is not None and iou_3d(candidate.box, gt.box3) > 0:
            return Collision("gt_box", k)
    pts = np.asarray(frame.cloud.points, dtype=float)
    inside = points_in_box3(pts, candidate.box, cfg.collision_margin)
    if inside.any():
        if grid is None:
            grid = segment_ground(frame.cloud, cfg)
        hits = nonground_mask(pts[inside], grid, cfg.ground_clearance)
        if hits.any():
            return Collision("points", int(hits.sum()))
    return None
