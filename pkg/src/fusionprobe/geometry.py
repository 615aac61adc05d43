"""Shared geometric data model: poses, boxes, calibration and overlap math.

Coordinate conventions follow KITTI. The LiDAR frame is x forward, y left,
z up with the sensor at the origin. The camera frame is x right, y down,
z forward. Pixel centers sit on integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera

_TWO_PI = 2.0 * math.pi
_AREA_EPS = 1e-12


def wrap_angle(a: float) -> float:
    """Normalize an angle to [-pi, pi)."""
    w = math.fmod(a + math.pi, _TWO_PI)
    if w < 0:
        w += _TWO_PI
    w -= math.pi
    if w >= math.pi:  # fmod rounding at the upper edge
        w -= _TWO_PI
    return w


@dataclass(frozen=True)
class Pose3:
    x: float
    y: float
    z: float
    yaw: float = 0.0

    def __post_init__(self):
        for v in (self.x, self.y, self.z, self.yaw):
            if not math.isfinite(v):
                raise ValueError(f"non-finite pose component in {self!r}")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Map object-frame points (N, 3) into the LiDAR frame."""
        return np.asarray(pts, dtype=float) @ self.rotation().T + self.translation

    def inverse_apply(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.translation) @ self.rotation()


@dataclass(frozen=True)
class Box3:
    """Yaw-oriented cuboid. ``length`` runs along the heading, ``width`` across it."""

    center: tuple[float, float, float]
    length: float
    width: float
    height: float
    yaw: float = 0.0

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        if len(c) != 3 or not all(math.isfinite(v) for v in c):
            raise ValueError(f"bad box center {self.center!r}")
        object.__setattr__(self, "center", c)
        for name in ("length", "width", "height"):
            v = float(getattr(self, name))
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"box {name} must be positive, got {v}")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def z_min(self) -> float:
        return self.center[2] - 0.5 * self.height

    @property
    def z_max(self) -> float:
        return self.center[2] + 0.5 * self.height

    def distance(self) -> float:
        """Euclidean distance from the LiDAR origin to the box center."""
        return math.sqrt(sum(v * v for v in self.center))

    def translated(self, dx: float, dy: float, dz: float) -> "Box3":
        x, y, z = self.center
        return Box3((x + dx, y + dy, z + dz), self.length, self.width, self.height, self.yaw)

    def inflated(self, margin: float) -> "Box3":
        return Box3(self.center, self.length + 2 * margin, self.width + 2 * margin,
                    self.height + 2 * margin, self.yaw)

    def scaled(self, s: float) -> "Box3":
        return Box3(self.center, self.length * s, self.width * s, self.height * s, self.yaw)

    def bev_corners(self) -> list[tuple[float, float]]:
        """Footprint corners, counter-clockwise seen from above."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        cx, cy = self.center[0], self.center[1]
        out = []
        for lx, ly in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
            out.append((cx + c * lx - s * ly, cy + s * lx + c * ly))
        return out


@dataclass(frozen=True)
class Box2:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = [float(v) for v in (self.x_min, self.y_min, self.x_max, self.y_max)]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("non-finite Box2")
        if not (vals[0] < vals[2] and vals[1] < vals[3]):
            raise ValueError(f"degenerate Box2 {vals}")
        for name, v in zip(("x_min", "y_min", "x_max", "y_max"), vals):
            object.__setattr__(self, name, v)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def translated(self, du: float, dv: float) -> "Box2":
        return Box2(self.x_min + du, self.y_min + dv, self.x_max + du, self.y_max + dv)


def clamp_box2(box: Box2, image_size: tuple[int, int]) -> Box2 | None:
    """Clip to [0, W-1] x [0, H-1]; None when nothing is left."""
    w, h = image_size
    x0, x1 = max(box.x_min, 0.0), min(box.x_max, float(w - 1))
    y0, y1 = max(box.y_min, 0.0), min(box.y_max, float(h - 1))
    if x0 < x1 and y0 < y1:
        return Box2(x0, y0, x1, y1)
    return None


def _expand4(m: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    r, c = m.shape
    out[:r, :c] = m
    return out


@dataclass(frozen=True, eq=False)
class Calibration:
    """Single camera + LiDAR calibration.

    ``p2`` is the 3x4 camera projection, ``rect`` the 4x4 rectifying rotation
    and ``velo_to_cam`` the LiDAR-to-camera rigid transform.
    """

    p2: np.ndarray
    velo_to_cam: np.ndarray
    image_size: tuple[int, int]
    rect: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        p2 = np.array(self.p2, dtype=float).reshape(3, 4)
        v2c = np.array(self.velo_to_cam, dtype=float)
        v2c = _expand4(v2c.reshape(3, 4) if v2c.size == 12 else v2c.reshape(4, 4))
        rect = np.array(self.rect, dtype=float)
        rect = _expand4(rect.reshape(3, 3) if rect.size == 9 else rect.reshape(4, 4))
        rot = v2c[:3, :3]
        if not (np.allclose(rot @ rot.T, np.eye(3), atol=1e-6)
                and abs(np.linalg.det(rot) - 1.0) < 1e-6):
            raise ValueError("velo_to_cam rotation block is not a proper rotation")
        if not np.all(np.isfinite(p2)) or not np.all(np.isfinite(v2c)):
            raise ValueError("non-finite calibration")
        w, h = (int(v) for v in self.image_size)
        object.__setattr__(self, "p2", p2)
        object.__setattr__(self, "velo_to_cam", v2c)
        object.__setattr__(self, "rect", rect)
        object.__setattr__(self, "image_size", (w, h))

    @property
    def cam_projection(self) -> np.ndarray:
        return self.p2 @ self.rect

    @property
    def cam_to_velo(self) -> np.ndarray:
        r = self.velo_to_cam[:3, :3]
        t = self.velo_to_cam[:3, 3]
        inv = np.eye(4)
        inv[:3, :3] = r.T
        inv[:3, 3] = -r.T @ t
        return inv

    def lidar_to_rect(self, pts: np.ndarray) -> np.ndarray:
        return lidar_to_cam(pts, self) @ self.rect[:3, :3].T

    def rect_to_lidar(self, pts: np.ndarray) -> np.ndarray:
        cam = np.asarray(pts, dtype=float) @ self.rect[:3, :3]
        return cam_to_lidar(cam, self)


def lidar_to_cam(p, calib: Calibration) -> np.ndarray:
    """Apply T_velo->cam to one point (3,) or many (N, 3)."""
    p = np.asarray(p, dtype=float)
    r = calib.velo_to_cam[:3, :3]
    t = calib.velo_to_cam[:3, 3]
    return p @ r.T + t


def cam_to_lidar(p, calib: Calibration) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    r = calib.velo_to_cam[:3, :3]
    t = calib.velo_to_cam[:3, 3]
    return (p - t) @ r


def project_to_image(p, calib: Calibration) -> tuple[float, float, float]:
    """Project a camera-frame point. Returns (u, v, depth)."""
    p = np.asarray(p, dtype=float)
    depth = float(p[2])
    if not depth > 0:
        raise BehindCamera(f"camera depth {depth} <= 0")
    q = calib.cam_projection @ np.append(p, 1.0)
    if not q[2] > 0:
        raise BehindCamera(f"projective depth {q[2]} <= 0")
    return float(q[0] / q[2]), float(q[1] / q[2]), depth


def project_points(p_cam: np.ndarray, calib: Calibration) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of camera-frame points.

    Returns (uv, depth); rows with depth <= 0 get NaN pixel coordinates.
    """
    p_cam = np.asarray(p_cam, dtype=float).reshape(-1, 3)
    proj = calib.cam_projection
    q = p_cam @ proj[:, :3].T + proj[:, 3]
    depth = p_cam[:, 2]
    ok = (depth > 0) & (q[:, 2] > 0)
    uv = np.full((len(p_cam), 2), np.nan)
    uv[ok] = q[ok, :2] / q[ok, 2:3]
    return uv, depth


# ---------------------------------------------------------------- overlap

def iou_2d(a: Box2, b: Box2) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def polygon_area(poly) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    s = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return 0.5 * s


def clip_convex(subject, clip):
    """Sutherland-Hodgman clipping of ``subject`` against convex CCW ``clip``."""
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return out


def _box_key(b: Box3):
    return (b.center, b.length, b.width, b.height, b.yaw)


def bev_intersection_area(a: Box3, b: Box3) -> float:
    if _box_key(b) < _box_key(a):  # canonical order keeps iou exactly symmetric
        a, b = b, a
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.length, a.width)
    rb = 0.5 * math.hypot(b.length, b.width)
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) >= ra + rb:
        return 0.0
    area = polygon_area(clip_convex(a.bev_corners(), b.bev_corners()))
    return area if area >= _AREA_EPS else 0.0


def iou_3d(a: Box3, b: Box3) -> float:
    """BEV polygon intersection times vertical overlap, over the union volume."""
    dz = min(a.z_max, b.z_max) - max(a.z_min, b.z_min)
    if dz <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter <= 0:
        return 0.0
    return min(1.0, inter / (a.volume + b.volume - inter))


# ---------------------------------------------------------------- corners

_CORNER_SIGNS = np.array([
    [1, 1, -1], [-1, 1, -1], [-1, -1, -1], [1, -1, -1],
    [1, 1, 1], [-1, 1, 1], [-1, -1, 1], [1, -1, 1],
], dtype=float)


def box3_corners(b: Box3) -> np.ndarray:
    """(8, 3) corners: bottom face CCW from front-left, then the top face in the same order."""
    half = 0.5 * np.array([b.length, b.width, b.height])
    local = _CORNER_SIGNS * half
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + np.asarray(b.center)


def box3_from_corners(corners: np.ndarray) -> Box3:
    """Inverse of :func:`box3_corners`."""
    k = np.asarray(corners, dtype=float)
    center = k.mean(axis=0)
    front = k[0] - k[1]
    side = k[1] - k[2]
    up = k[4] - k[0]
    return Box3(tuple(center), float(np.linalg.norm(front)), float(np.linalg.norm(side)),
                float(np.linalg.norm(up)), math.atan2(front[1], front[0]))


def points_in_box3(points: np.ndarray, box: Box3, margin: float = 0.0) -> np.ndarray:
    """Boolean membership of (N, 3) points in the (optionally inflated) box."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    d = pts - np.asarray(box.center)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    return ((np.abs(lx) <= 0.5 * box.length + margin)
            & (np.abs(ly) <= 0.5 * box.width + margin)
            & (np.abs(d[:, 2]) <= 0.5 * box.height + margin))


def projected_box2(box: Box3, calib: Calibration, clamp: bool = True) -> Box2 | None:
    """Axis-aligned image bounds of a 3D box's projected corners.

    Corners behind the camera are clipped against a 0.1 m near plane first.
    """
    cam = lidar_to_cam(box3_corners(box), calib)
    near = 0.1
    pts = [p for p in cam if p[2] >= near]
    if len(pts) < 8:
        # intersect box edges with the near plane so truncated boxes still bound correctly
        edges = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4),
                 (0, 4), (1, 5), (2, 6), (3, 7)]
        for i, j in edges:
            zi, zj = cam[i][2], cam[j][2]
            if (zi - near) * (zj - near) < 0:
                t = (near - zi) / (zj - zi)
                pts.append(cam[i] + t * (cam[j] - cam[i]))
    if not pts:
        return None
    uv, _ = project_points(np.array(pts), calib)
    uv = uv[np.all(np.isfinite(uv), axis=1)]
    if len(uv) == 0:
        return None
    x0, y0 = uv.min(axis=0)
    x1, y1 = uv.max(axis=0)
    if not (x0 < x1 and y0 < y1):
        return None
    b = Box2(x0, y0, x1, y1)
    return clamp_box2(b, calib.image_size) if clamp else b


# ---------------------------------------------------------------- containers

@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points (N, 3) and intensities (N,), stored as float32 like the on-disk format."""

    points: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float32).reshape(-1, 3))
        inten = np.ascontiguousarray(np.asarray(self.intensity, dtype=np.float32).reshape(-1))
        if len(pts) != len(inten):
            raise ValueError(f"{len(pts)} points but {len(inten)} intensities")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(inten))):
            raise ValueError("non-finite values in point cloud")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "intensity", inten)

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3), np.float32), np.zeros(0, np.float32))

    def subset(self, mask) -> "PointCloud":
        return PointCloud(self.points[mask], self.intensity[mask])

    def same_as(self, other: "PointCloud") -> bool:
        return (self.points.shape == other.points.shape
                and np.array_equal(self.points, other.points)
                and np.array_equal(self.intensity, other.intensity))


@dataclass(frozen=True)
class GroundTruth:
    box3: Box3 | None
    box2: Box2 | None
    category: str = "Car"
    dont_care: bool = False
    truncation: float = 0.0
    occlusion: int = 0

    def __post_init__(self):
        if self.category == "DontCare":
            object.__setattr__(self, "dont_care", True)
