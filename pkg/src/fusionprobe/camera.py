"""Virtual camera: mesh rasterization, LiDAR-depth occlusion compositing, tone matching."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels
from .geometry import Box2, Calibration, clamp_box2, lidar_to_cam, project_points

NEAR = 0.1


@dataclass
class CameraConfig:
    bg_radius_px: int = 5
    eps_z: float = 0.2
    sun_azimuth_deg: float = 135.0
    sun_elevation_deg: float = 45.0
    ambient: float = 0.4
    tone_match: bool = True
    dont_care_ratio: float = 0.9

    @property
    def sun_dir(self) -> np.ndarray:
        a, e = math.radians(self.sun_azimuth_deg), math.radians(self.sun_elevation_deg)
        return np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])


@dataclass(frozen=True, eq=False)
class Raster:
    depth: np.ndarray  # (H, W) camera depth, inf where empty
    rgb: np.ndarray  # (H, W, 3) float in [0, 255]
    owner: np.ndarray  # (H, W) instance index, -1 where empty


@dataclass(frozen=True, eq=False)
class RenderResult:
    image: np.ndarray
    masks: list  # per instance (H, W) bool of winning pixels
    box2: list  # per instance Box2 or None
    win: np.ndarray  # union of winning pixels
    object_depth: np.ndarray

    @property
    def fully_occluded(self) -> list[bool]:
        return [not m.any() for m in self.masks]


# ---------------------------------------------------------------- depth from LiDAR

def splat_depth(points: np.ndarray, calib: Calibration) -> np.ndarray:
    """Per-pixel minimum camera depth of projected points; NaN where nothing lands."""
    w, h = calib.image_size
    out = np.full(h * w, np.inf)
    if len(points):
        uv, depth = project_points(lidar_to_cam(points, calib), calib)
        ok = np.all(np.isfinite(uv), axis=1) & (depth > 0)
        col = np.rint(uv[ok, 0]).astype(np.int64)
        row = np.rint(uv[ok, 1]).astype(np.int64)
        inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
        np.minimum.at(out, row[inside] * w + col[inside], depth[ok][inside])
    out = out.reshape(h, w)
    out[~np.isfinite(out)] = np.nan
    return out


def _disk(radius: int) -> np.ndarray:
    y, x = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return x * x + y * y <= radius * radius


def background_depth(frame, radius_px: int = 5) -> np.ndarray:
    """Splatted LiDAR depth with unknown pixels filled from known ones within ``radius_px``."""
    d = splat_depth(np.asarray(frame.cloud.points, dtype=float), frame.calib)
    if radius_px <= 0:
        return d
    known = np.where(np.isnan(d), np.inf, d)
    grown = ndimage.minimum_filter(known, footprint=_disk(radius_px), mode="constant", cval=np.inf)
    out = np.where(np.isnan(d), grown, d)
    out[~np.isfinite(out)] = np.nan
    return out


# ---------------------------------------------------------------- rasterization

def _clip_near(tri: np.ndarray) -> list[np.ndarray]:
    """Clip one camera-frame triangle to z >= NEAR; returns 0-2 triangles."""
    poly = []
    for i in range(3):
        a, b = tri[i], tri[(i + 1) % 3]
        ina, inb = a[2] >= NEAR, b[2] >= NEAR
        if ina:
            poly.append(a)
        if ina != inb:
            t = (NEAR - a[2]) / (b[2] - a[2])
            poly.append(a + t * (b - a))
    return [np.array([poly[0], poly[j], poly[j + 1]]) for j in range(1, len(poly) - 1)]


def shade_triangles(world_tris: np.ndarray, albedo: np.ndarray, cfg: CameraConfig) -> np.ndarray:
    """Two-sided Lambert shading of per-triangle albedo, 0-255 scale."""
    t = np.asarray(world_tris, dtype=float)
    n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    lam = np.abs(n @ cfg.sun_dir)
    k = cfg.ambient + (1.0 - cfg.ambient) * lam
    return np.clip(np.asarray(albedo) * k[:, None] * 255.0, 0.0, 255.0)


def shade(instance, cfg: CameraConfig) -> np.ndarray:
    return shade_triangles(instance.world_vertices()[instance.mesh.triangles], instance.mesh.albedo, cfg)


def prepare_triangles(cam_tris: np.ndarray, colors: np.ndarray, owners: np.ndarray, calib: Calibration):
    """Near-clip camera-frame triangles and project them for the kernel."""
    z = cam_tris[:, :, 2]
    front = np.all(z >= NEAR, axis=1)
    partial = ~front & np.any(z >= NEAR, axis=1)
    tris = [cam_tris[front]]
    cols = [colors[front]]
    own = [owners[front]]
    for k in np.nonzero(partial)[0]:
        for piece in _clip_near(cam_tris[k]):
            tris.append(piece[None])
            cols.append(colors[k][None])
            own.append(owners[k:k + 1])
    tris = np.concatenate(tris) if tris else np.zeros((0, 3, 3))
    cols = np.concatenate(cols) if cols else np.zeros((0, 3))
    own = np.concatenate(own) if own else np.zeros(0, np.int64)
    proj = calib.cam_projection
    flat = tris.reshape(-1, 3)
    q = flat @ proj[:, :3].T + proj[:, 3]
    w = q[:, 2]
    screen = (q[:, :2] / w[:, None]).reshape(-1, 3, 2)
    zw = (flat[:, 2] / w).reshape(-1, 3)
    invw = (1.0 / w).reshape(-1, 3)
    return (np.ascontiguousarray(screen), np.ascontiguousarray(zw), np.ascontiguousarray(invw),
            np.ascontiguousarray(cols, dtype=float), np.ascontiguousarray(own, dtype=np.int64))


def rasterize_triangles(cam_tris, colors, owners, calib: Calibration) -> Raster:
    w, h = calib.image_size
    zbuf = np.full((h, w), np.inf)
    rgb = np.zeros((h, w, 3))
    ids = np.full((h, w), -1, dtype=np.int64)
    if len(cam_tris):
        screen, zw, invw, cols, own = prepare_triangles(np.asarray(cam_tris, dtype=float),
                                                        np.asarray(colors, dtype=float),
                                                        np.asarray(owners, dtype=np.int64), calib)
        if len(screen):
            _kernels.rasterize(screen, zw, invw, cols, own, w, h, zbuf, rgb, ids)
    return Raster(zbuf, rgb, ids)


def rasterize_instances(instances, calib: Calibration, cfg: CameraConfig | None = None) -> Raster:
    """Perspective-correct z-buffered rendering of posed meshes with flat Lambert shading."""
    cfg = cfg or CameraConfig()
    tris, cols, owners = [], [], []
    for k, inst in enumerate(instances):
        cam = lidar_to_cam(inst.world_vertices(), calib)
        tris.append(cam[inst.mesh.triangles])
        cols.append(shade(inst, cfg))
        owners.append(np.full(len(inst.mesh.triangles), k, dtype=np.int64))
    if not tris:
        return rasterize_triangles(np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0, np.int64), calib)
    return rasterize_triangles(np.concatenate(tris), np.concatenate(cols), np.concatenate(owners), calib)


# ---------------------------------------------------------------- compositing

def mask_box2(mask: np.ndarray, image_size) -> Box2 | None:
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        return None
    b = Box2(cols.min() - 0.5, rows.min() - 0.5, cols.max() + 0.5, rows.max() + 0.5)
    return clamp_box2(b, image_size)


def neighborhood_pixels(image: np.ndarray, box: Box2, exclude: np.ndarray) -> np.ndarray:
    """Pixels inside ``box`` grown 2x about its center, minus the excluded ones."""
    h, w = image.shape[:2]
    cx, cy = 0.5 * (box.x_min + box.x_max), 0.5 * (box.y_min + box.y_max)
    c0 = max(int(math.floor(cx - box.width)), 0)
    c1 = min(int(math.ceil(cx + box.width)), w - 1)
    r0 = max(int(math.floor(cy - box.height)), 0)
    r1 = min(int(math.ceil(cy + box.height)), h - 1)
    region = image[r0:r1 + 1, c0:c1 + 1]
    keep = ~exclude[r0:r1 + 1, c0:c1 + 1]
    return region[keep].astype(float)


def tone_match(object_pixels: np.ndarray, reference_pixels: np.ndarray) -> np.ndarray:
    """Per-channel affine remap giving the object the reference's mean and std."""
    obj = np.asarray(object_pixels, dtype=float).reshape(-1, 3)
    ref = np.asarray(reference_pixels, dtype=float).reshape(-1, 3)
    if len(obj) == 0 or len(ref) == 0:
        return obj.copy()
    mo, so = obj.mean(axis=0), obj.std(axis=0)
    mr, sr = ref.mean(axis=0), ref.std(axis=0)
    out = np.empty_like(obj)
    for c in range(3):
        if so[c] > 1e-9:
            out[:, c] = (obj[:, c] - mo[c]) * (sr[c] / so[c]) + mr[c]
        else:
            out[:, c] = mr[c]
    return np.clip(out, 0.0, 255.0)


def composite(frame, raster: Raster, bg_depth: np.ndarray, cfg: CameraConfig | None = None,
              n_instances: int | None = None) -> RenderResult:
    """An object pixel wins where background depth is unknown or farther by more than eps_z."""
    cfg = cfg or CameraConfig()
    if raster.depth.shape != bg_depth.shape:
        raise ValueError("raster and background depth differ in size")
    obj = raster.owner >= 0
    unknown = np.isnan(bg_depth)
    with np.errstate(invalid="ignore"):
        nearer = raster.depth < bg_depth - cfg.eps_z
    win = obj & (unknown | nearer)
    if n_instances is None:
        n_instances = int(raster.owner.max()) + 1 if obj.any() else 0
    image = frame.image.copy()
    masks, boxes = [], []
    for k in range(n_instances):
        m = win & (raster.owner == k)
        b = mask_box2(m, frame.calib.image_size)
        masks.append(m)
        boxes.append(b)
        if b is None:
            continue
        px = raster.rgb[m]
        if cfg.tone_match:
            px = tone_match(px, neighborhood_pixels(frame.image, b, obj))
        image[m] = np.clip(np.rint(px), 0, 255).astype(np.uint8)
    return RenderResult(image, masks, boxes, win, np.where(obj, raster.depth, np.inf))


def occlusion_ratios(existing_gts, result: RenderResult, calib: Calibration,
                     threshold: float = 0.9) -> list[tuple[float, bool]]:
    """Fraction of each labeled box2 covered by a nearer inserted pixel, and its DontCare flag."""
    out = []
    for gt in existing_gts:
        if gt.box2 is None:
            out.append((0.0, bool(gt.dont_care)))
            continue
        b = gt.box2
        c0, c1 = int(math.ceil(b.x_min)), int(math.floor(b.x_max))
        r0, r1 = int(math.ceil(b.y_min)), int(math.floor(b.y_max))
        h, w = result.win.shape
        c0, r0 = max(c0, 0), max(r0, 0)
        c1, r1 = min(c1, w - 1), min(r1, h - 1)
        if c1 < c0 or r1 < r0:
            out.append((0.0, bool(gt.dont_care)))
            continue
        win = result.win[r0:r1 + 1, c0:c1 + 1]
        if gt.box3 is not None:
            gt_depth = lidar_to_cam(np.array([gt.box3.center]), calib)[0, 2]
            win = win & (result.object_depth[r0:r1 + 1, c0:c1 + 1] < gt_depth)
        ratio = float(win.sum()) / float(win.size)
        out.append((ratio, bool(gt.dont_care) or ratio > threshold))
    return out


def depth_to_png(depth: np.ndarray, max_depth: float = 80.0) -> np.ndarray:
    """Grayscale visualization: near is bright, unknown is black."""
    d = np.where(np.isfinite(depth), np.clip(depth, 0, max_depth), max_depth)
    g = np.where(np.isfinite(depth), 255.0 * (1.0 - d / max_depth), 0.0)
    g = np.rint(g).astype(np.uint8)
    return np.repeat(g[:, :, None], 3, axis=2)
