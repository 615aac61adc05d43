"""Procedural driving scenes and vehicle meshes in KITTI layout.

Used to build seed corpora and object databases when no recorded data is at
hand: a straight road with raised sidewalks and building walls, parked or
driving cars, a LiDAR scan ray-cast against it all, and a rendered image.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraConfig, mask_box2, rasterize_triangles, shade_triangles
from .geometry import Calibration, GroundTruth, PointCloud, Pose3, iou_3d, lidar_to_cam, projected_box2
from .kitti_io import KITTI_IMAGE_SIZE, Frame, save_frame
from .lidar import LidarConfig, generate_rays, simulate_object_points
from .mesh import ObjectInstance, TriMesh, build_bvh, write_obj

KITTI_P2 = np.array([[721.5377, 0.0, 609.5593, 44.85728],
                     [0.0, 721.5377, 172.854, 0.2163791],
                     [0.0, 0.0, 1.0, 0.002745884]])
KITTI_VELO_R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
KITTI_VELO_T = np.array([0.0, -0.08, -0.27])

CAR_PALETTE = {"glass": (0.12, 0.14, 0.18), "tire": (0.05, 0.05, 0.05)}
BODY_COLORS = [(0.75, 0.1, 0.1), (0.85, 0.85, 0.85), (0.1, 0.2, 0.6), (0.15, 0.15, 0.15),
               (0.6, 0.6, 0.62), (0.2, 0.45, 0.25), (0.9, 0.75, 0.2)]


def kitti_calibration(image_size=KITTI_IMAGE_SIZE) -> Calibration:
    v2c = np.eye(4)
    v2c[:3, :3] = KITTI_VELO_R
    v2c[:3, 3] = KITTI_VELO_T
    return Calibration(KITTI_P2.copy(), v2c, tuple(image_size))


def seed_lidar_config(**kw) -> LidarConfig:
    """Scan pattern restricted to the forward camera wedge to keep scenes cheap."""
    return LidarConfig(**{"horizontal_fov": (-50.0, 50.0), **kw})


# ---------------------------------------------------------------- geometry builders

class _Builder:
    def __init__(self):
        self.v: list = []
        self.t: list = []
        self.c: list = []
        self.m: list = []

    def quad(self, a, b, c, d, color, material="default"):
        base = len(self.v)
        self.v.extend([a, b, c, d])
        self.t.extend([(base, base + 1, base + 2), (base, base + 2, base + 3)])
        self.c.extend([color, color])
        self.m.extend([material, material])

    def box(self, lo, hi, color, material="default", bottom=True):
        x0, y0, z0 = lo
        x1, y1, z1 = hi
        self.hexahedron([(x0, y0, z0), (x1, y0, z0), (x1, y1, z0), (x0, y1, z0),
                         (x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1)], color, material, bottom)

    def hexahedron(self, p, color, material="default", bottom=True):
        """Bottom face p[0:4], top face p[4:8], matching order."""
        faces = [(4, 5, 6, 7), (0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7)]
        if bottom:
            faces.append((0, 3, 2, 1))
        for f in faces:
            self.quad(*(p[i] for i in f), color, material)

    def prism_y(self, cx, cz, r, y0, y1, color, material="default", sides=8):
        """Polygonal cylinder with axis along y (a wheel)."""
        ang = 2 * math.pi * (np.arange(sides) + 0.5) / sides
        ring = [(cx + r * math.cos(a), cz + r * math.sin(a)) for a in ang]
        for k in range(sides):
            (xa, za), (xb, zb) = ring[k], ring[(k + 1) % sides]
            self.quad((xa, y0, za), (xb, y0, zb), (xb, y1, zb), (xa, y1, za), color, material)
        for y in (y0, y1):
            base = len(self.v)
            self.v.extend([(x, y, z) for x, z in ring])
            for k in range(1, sides - 1):
                self.t.append((base, base + k, base + k + 1))
                self.c.append(color)
                self.m.append(material)

    def mesh(self, name="") -> TriMesh:
        return TriMesh(np.array(self.v, dtype=float), np.array(self.t, dtype=np.int64),
                       np.array(self.c, dtype=float), name)


def car_mesh(length=4.2, width=1.75, height=1.5, body=(0.7, 0.1, 0.1), name="car",
             with_materials=False):
    """Boxy sedan: body, cabin and eight-sided wheels. Footprint centered, wheels touch z=0."""
    b = _Builder()
    r = min(0.34, 0.24 * height)
    hl, hw = 0.5 * length, 0.5 * width
    z_body = 0.62 * height
    b.box((-hl, -hw, 0.6 * r), (hl, hw, z_body), body, "body")
    # cabin with sloped windshield and rear window
    xb0, xb1 = -0.42 * length, 0.3 * length
    xt0, xt1 = -0.3 * length, 0.08 * length
    yb, yt = 0.92 * hw, 0.8 * hw
    b.hexahedron([(xb0, -yb, z_body), (xb1, -yb, z_body), (xb1, yb, z_body), (xb0, yb, z_body),
                  (xt0, -yt, height), (xt1, -yt, height), (xt1, yt, height), (xt0, yt, height)],
                 CAR_PALETTE["glass"], "glass", bottom=False)
    tw = min(0.24, 0.15 * width)
    for sx in (-1, 1):
        for sy in (-1, 1):
            y0, y1 = (hw - tw, hw) if sy > 0 else (-hw, -hw + tw)
            b.prism_y(sx * 0.32 * length, r, r, y0, y1, CAR_PALETTE["tire"], "tire")
    m = b.mesh(name)
    return (m, b.m) if with_materials else m


def random_car(rng: np.random.Generator, name="car", with_materials=False):
    dims = (rng.uniform(3.7, 4.8), rng.uniform(1.6, 1.9), rng.uniform(1.4, 1.65))
    color = BODY_COLORS[int(rng.integers(len(BODY_COLORS)))]
    return car_mesh(*dims, body=color, name=name, with_materials=with_materials)


# ---------------------------------------------------------------- scenes

@dataclass
class SceneParams:
    road_width: tuple[float, float] = (7.0, 12.0)
    road_angle_deg: tuple[float, float] = (-10.0, 10.0)
    sidewalk_width: tuple[float, float] = (2.5, 4.0)
    curb_height: tuple[float, float] = (0.18, 0.3)
    wall_height: tuple[float, float] = (6.0, 12.0)
    road_extent: tuple[float, float] = (-30.0, 110.0)
    n_cars: tuple[int, int] = (0, 3)
    car_range: tuple[float, float] = (8.0, 45.0)
    sensor_height: float = 1.73
    image_noise: float = 3.0
    lidar: LidarConfig = field(default_factory=seed_lidar_config)


@dataclass(frozen=True, eq=False)
class Scene:
    frame: Frame
    static: TriMesh
    cars: list  # ObjectInstance
    road_angle: float
    road_offset: float
    road_width: float


def static_world(rng: np.random.Generator, p: SceneParams):
    """Road, curbs, sidewalks and facades as one world-frame mesh."""
    w = rng.uniform(*p.road_width)
    ang = math.radians(rng.uniform(*p.road_angle_deg))
    off = rng.uniform(-(0.5 * w - 2.0), 0.5 * w - 2.0)
    sw = rng.uniform(*p.sidewalk_width)
    curb = rng.uniform(*p.curb_height)
    g = -p.sensor_height
    t0, t1 = p.road_extent
    u = np.array([math.cos(ang), math.sin(ang)])
    n = np.array([-math.sin(ang), math.cos(ang)])

    def pt(t, s, z):
        xy = t * u + (s + off) * n
        return (float(xy[0]), float(xy[1]), float(z))

    b = _Builder()
    road = tuple(np.clip(0.33 + rng.normal(0, 0.03, 3), 0, 1))
    walk = tuple(np.clip(0.6 + rng.normal(0, 0.04, 3), 0, 1))
    hw = 0.5 * w
    step = 20.0
    ts = np.arange(t0, t1 + 1e-9, step)
    for ta, tb in zip(ts[:-1], ts[1:]):
        b.quad(pt(ta, -hw, g), pt(tb, -hw, g), pt(tb, hw, g), pt(ta, hw, g), road)
        for side in (-1, 1):
            s0, s1 = side * hw, side * (hw + sw)
            b.quad(pt(ta, s0, g), pt(tb, s0, g), pt(tb, s0, g + curb), pt(ta, s0, g + curb), walk)
            b.quad(pt(ta, s0, g + curb), pt(tb, s0, g + curb), pt(tb, s1, g + curb), pt(ta, s1, g + curb), walk)
    for side in (-1, 1):
        s1 = side * (hw + sw)
        t = t0
        while t < t1:
            seg = rng.uniform(8.0, 25.0)
            te = min(t + seg, t1)
            hgt = rng.uniform(*p.wall_height)
            col = tuple(np.clip(rng.uniform(0.35, 0.8) * np.array([1.0, rng.uniform(0.8, 1.0), rng.uniform(0.7, 1.0)]), 0, 1))
            b.quad(pt(t, s1, g + curb), pt(te, s1, g + curb), pt(te, s1, g + hgt), pt(t, s1, g + hgt), col)
            t = te
    return b.mesh("static"), ang, off, w


def _sky(h: int, w: int) -> np.ndarray:
    top = np.array([110.0, 150.0, 210.0])
    bottom = np.array([200.0, 215.0, 230.0])
    a = np.linspace(0.0, 1.0, h)[:, None, None]
    return np.broadcast_to(top * (1 - a) + bottom * a, (h, w, 3)).copy()


def render_scene(static: TriMesh, cars, calib: Calibration, rng: np.random.Generator,
                 cfg: CameraConfig | None = None, noise: float = 3.0):
    """Image plus per-car visible masks (world geometry occludes cars and vice versa)."""
    cfg = cfg or CameraConfig()
    tris = [static.vertices[static.triangles]]
    albedo = [static.albedo]
    owner = [np.full(len(static.triangles), -2, dtype=np.int64)]
    for k, inst in enumerate(cars):
        tris.append(inst.world_vertices()[inst.mesh.triangles])
        albedo.append(inst.mesh.albedo)
        owner.append(np.full(len(inst.mesh.triangles), k, dtype=np.int64))
    world = np.concatenate(tris)
    cols = shade_triangles(world, np.concatenate(albedo), cfg)
    cam = lidar_to_cam(world.reshape(-1, 3), calib).reshape(-1, 3, 3)
    r = rasterize_triangles(cam, cols, np.concatenate(owner), calib)
    w, h = calib.image_size
    img = _sky(h, w)
    drawn = np.isfinite(r.depth)
    img[drawn] = r.rgb[drawn]
    img += rng.normal(0.0, noise, img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    masks = [r.owner == k for k in range(len(cars))]
    return img, masks


def _place_cars(rng, p: SceneParams, ang, off, width, calib, count):
    u = np.array([math.cos(ang), math.sin(ang)])
    n = np.array([-math.sin(ang), math.cos(ang)])
    placed = []
    for _ in range(count * 20):
        if len(placed) >= count:
            break
        mesh, mats = random_car(rng, f"scene_car_{len(placed)}", with_materials=True)
        t = rng.uniform(*p.car_range)
        s = rng.uniform(-0.5 * width + 1.2, 0.5 * width - 1.2)
        xy = t * u + (s + off) * n
        yaw = ang + (math.pi if rng.random() < 0.5 else 0.0) + math.radians(rng.uniform(-5, 5))
        pose = Pose3(float(xy[0]), float(xy[1]), -p.sensor_height, yaw)
        inst = ObjectInstance.place(mesh, pose)
        if inst.box.distance() < 6.0:
            continue
        if any(iou_3d(inst.box.inflated(0.5), o.box) > 0 for o in placed):
            continue
        if projected_box2(inst.box, calib) is None:
            continue
        placed.append(inst)
    return placed


def make_scene(frame_id: str, rng: np.random.Generator, params: SceneParams | None = None,
               calib: Calibration | None = None) -> Scene:
    p = params or SceneParams()
    calib = calib or kitti_calibration()
    static, ang, off, width = static_world(rng, p)
    n_cars = int(rng.integers(p.n_cars[0], p.n_cars[1] + 1))
    cars = _place_cars(rng, p, ang, off, width, calib, n_cars)
    world = ObjectInstance.place(static, Pose3(0.0, 0.0, 0.0, 0.0))
    rays = generate_rays(p.lidar)
    sim = simulate_object_points(rays, [world] + cars, p.lidar, rng)
    image, masks = render_scene(static, cars, calib, rng, noise=p.image_noise)
    labels = []
    kept = []
    for inst, m in zip(cars, masks):
        b2 = mask_box2(m, calib.image_size)
        if b2 is None:
            continue
        labels.append(_car_label(inst, b2, m, calib))
        kept.append(inst)
    frame = Frame(frame_id, PointCloud(sim.cloud.points, sim.cloud.intensity), image, calib, labels)
    return Scene(frame, static, kept, ang, off, width)


def _car_label(inst, box2, mask, calib) -> GroundTruth:
    full = projected_box2(inst.box, calib, clamp=False)
    clamped = projected_box2(inst.box, calib, clamp=True)
    trunc = 0.0
    if full is not None and clamped is not None and full.area > 0:
        trunc = float(np.clip(1.0 - clamped.area / full.area, 0.0, 1.0))
    visible = mask.sum() / max(box2.area, 1.0)
    occ = 0 if visible > 0.6 else (1 if visible > 0.3 else 2)
    return GroundTruth(inst.box, box2, "Car", False, round(trunc, 2), occ)


# ---------------------------------------------------------------- on-disk corpora

def write_object_database(root, n_objects: int, rng: np.random.Generator) -> list[str]:
    """Procedural cars as OBJ files under ``<root>/car`` with a palette in ``meta.json``."""
    d = Path(root) / "car"
    d.mkdir(parents=True, exist_ok=True)
    meta = {"category": "Car", "palette": dict(CAR_PALETTE), "objects": {}}
    names = []
    for k in range(n_objects):
        name = f"car_{k:03d}"
        mesh, mats = random_car(rng, name, with_materials=True)
        body = [float(c) for c in mesh.albedo[mats.index("body")]]
        (d / f"{name}.obj").write_text(write_obj(mesh, mats))
        meta["objects"][name] = {"palette": {"body": body}}
        names.append(name)
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return names


def write_seed_corpus(root, n_seeds: int, rng: np.random.Generator, params: SceneParams | None = None,
                      image_format: str = "png") -> list[str]:
    ids = []
    for k in range(n_seeds):
        fid = f"{k:06d}"
        scene = make_scene(fid, rng, params)
        save_frame(root, scene.frame, image_format)
        ids.append(fid)
    return ids


def build_dataset(root, n_seeds: int = 50, n_objects: int = 20, seed: int = 0,
                  params: SceneParams | None = None) -> dict:
    """Seeds under ``<root>/seeds`` and meshes under ``<root>/objects``."""
    root = Path(root)
    ss = np.random.SeedSequence(seed)
    s_obj, s_seed = ss.spawn(2)
    objs = write_object_database(root / "objects", n_objects, np.random.default_rng(s_obj))
    ids = write_seed_corpus(root / "seeds", n_seeds, np.random.default_rng(s_seed), params)
    return {"seeds": ids, "objects": objs, "root": str(root)}
