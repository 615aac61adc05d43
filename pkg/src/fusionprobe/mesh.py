"""Insertable meshes, their canonical bounds, and BVH-accelerated ray queries."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import BadIndex, NoGeometry
from .geometry import Box3, Pose3

DEFAULT_ALBEDO = (0.5, 0.5, 0.5)
MIN_TRI_AREA = 1e-12
LEAF_SIZE = 4


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangle mesh in the object frame (footprint-centered, ground at z=0, x forward)."""

    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    albedo: np.ndarray  # (T, 3) in [0, 1]
    name: str = ""

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=float).reshape(-1, 3))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        a = np.asarray(self.albedo, dtype=float)
        if a.ndim == 1:
            a = np.tile(a, (len(t), 1))
        a = np.ascontiguousarray(a.reshape(-1, 3))
        if len(v) < 3:
            raise NoGeometry("mesh needs at least 3 vertices")
        if len(t) == 0:
            raise NoGeometry("mesh has no triangles")
        if t.min() < 0 or t.max() >= len(v):
            raise BadIndex("triangle index out of range")
        if len(a) != len(t):
            raise ValueError("albedo must have one row per triangle")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "albedo", np.clip(a, 0.0, 1.0))

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.vertices[self.triangles[:, 0]], self.vertices[self.triangles[:, 1]],
                self.vertices[self.triangles[:, 2]])

    def triangle_areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def surface_area(self) -> float:
        return float(self.triangle_areas().sum())

    def local_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        used = self.vertices[np.unique(self.triangles)]
        return used.min(axis=0), used.max(axis=0)


def drop_degenerate(mesh: TriMesh) -> TriMesh:
    keep = mesh.triangle_areas() > MIN_TRI_AREA
    if not keep.any():
        raise NoGeometry("all triangles are degenerate")
    if keep.all():
        return mesh
    return TriMesh(mesh.vertices, mesh.triangles[keep], mesh.albedo[keep], mesh.name)


def _obj_index(tok: str, n_vertices: int, line_no: int) -> int:
    head = tok.split("/")[0]
    try:
        i = int(head)
    except ValueError:
        raise BadIndex(f"line {line_no}: bad face index {tok!r}") from None
    i = i - 1 if i > 0 else n_vertices + i
    if not 0 <= i < n_vertices or head in ("0", "-0"):
        raise BadIndex(f"line {line_no}: face index {tok!r} out of range")
    return i


def load_mesh(obj_text: str, palette: dict | None = None, target_length: float | None = None,
              up_axis: str = "z", name: str = "") -> TriMesh:
    """Parse a Wavefront OBJ subset (``v``, ``f``, ``usemtl``).

    Polygons are fan-triangulated. The result is recentered so the footprint
    center is the origin and the lowest vertex sits at z=0, and optionally
    scaled uniformly to ``target_length`` along x.
    """
    palette = palette or {}
    verts, faces, colors = [], [], []
    color = DEFAULT_ALBEDO
    for line_no, raw in enumerate(obj_text.splitlines(), 1):
        toks = raw.split("#", 1)[0].split()
        if not toks:
            continue
        kind = toks[0]
        if kind == "v":
            try:
                verts.append([float(t) for t in toks[1:4]])
            except ValueError:
                raise NoGeometry(f"line {line_no}: bad vertex") from None
            if len(verts[-1]) != 3:
                raise NoGeometry(f"line {line_no}: vertex needs 3 coordinates")
        elif kind == "usemtl":
            mtl = toks[1] if len(toks) > 1 else ""
            color = tuple(palette.get(mtl, DEFAULT_ALBEDO))
        elif kind == "f":
            idx = [_obj_index(t, len(verts), line_no) for t in toks[1:]]
            if len(idx) < 3:
                raise BadIndex(f"line {line_no}: face needs at least 3 vertices")
            for j in range(1, len(idx) - 1):
                faces.append((idx[0], idx[j], idx[j + 1]))
                colors.append(color)
    if not verts or not faces:
        raise NoGeometry("OBJ text has no triangles")
    v = np.array(verts, dtype=float)
    if up_axis == "y":
        v = np.stack([v[:, 0], -v[:, 2], v[:, 1]], axis=1)
    elif up_axis != "z":
        raise ValueError(f"up_axis must be 'y' or 'z', got {up_axis!r}")
    mesh = drop_degenerate(TriMesh(v, np.array(faces), np.array(colors), name))
    return normalize_mesh(mesh, target_length)


def normalize_mesh(mesh: TriMesh, target_length: float | None = None) -> TriMesh:
    lo, hi = mesh.local_bounds()
    shift = np.array([0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), lo[2]])
    v = mesh.vertices - shift
    if target_length is not None:
        extent = hi[0] - lo[0]
        if extent <= 0:
            raise NoGeometry("mesh has zero length")
        v = v * (target_length / extent)
    return TriMesh(v, mesh.triangles, mesh.albedo, mesh.name)


def write_obj(mesh: TriMesh, materials: list[str] | None = None) -> str:
    """Serialize to OBJ. ``materials`` gives one usemtl name per triangle."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    current = None
    for k, (a, b, c) in enumerate(mesh.triangles.tolist()):
        if materials is not None and materials[k] != current:
            current = materials[k]
            lines.append(f"usemtl {current}")
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    return "\n".join(lines) + "\n"


def mesh_bounds(mesh: TriMesh, pose: Pose3) -> Box3:
    """Tight object-frame box carried through the pose."""
    lo, hi = mesh.local_bounds()
    c_local = 0.5 * (lo + hi)
    center = pose.apply(c_local[None, :])[0]
    dims = np.maximum(hi - lo, 1e-9)
    return Box3(tuple(center), float(dims[0]), float(dims[1]), float(dims[2]), pose.yaw)


# ---------------------------------------------------------------- BVH

@dataclass(frozen=True, eq=False)
class Bvh:
    """Flattened binary BVH over a mesh's triangles.

    Node ``n`` is a leaf when ``left[n] < 0``; its triangles are
    ``order[start[n]:start[n] + count[n]]``.
    """

    mesh: TriMesh
    bmin: np.ndarray
    bmax: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    v0: np.ndarray = field(repr=False)
    e1: np.ndarray = field(repr=False)
    e2: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def leaves(self):
        for n in range(self.n_nodes):
            if self.left[n] < 0:
                yield n, self.order[self.start[n]:self.start[n] + self.count[n]]


def build_bvh(mesh: TriMesh, leaf_size: int = LEAF_SIZE) -> Bvh:
    """Median split on the longest axis of the centroid bounds."""
    a, b, c = mesh.corners()
    tri_min = np.minimum(np.minimum(a, b), c)
    tri_max = np.maximum(np.maximum(a, b), c)
    cent = (a + b + c) / 3.0
    order = np.arange(len(a))
    bmin, bmax, left, right, start, count = [], [], [], [], [], []

    def new_node(lo, hi):
        idx = order[lo:hi]
        bmin.append(tri_min[idx].min(axis=0))
        bmax.append(tri_max[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(lo)
        count.append(hi - lo)
        return len(left) - 1

    stack = [(new_node(0, len(order)), 0, len(order))]
    while stack:
        node, lo, hi = stack.pop()
        n = hi - lo
        if n <= leaf_size:
            continue
        idx = order[lo:hi]
        cspan = cent[idx].max(axis=0) - cent[idx].min(axis=0)
        axis = int(np.argmax(cspan))
        mid = n // 2
        part = np.argsort(cent[idx, axis], kind="stable")
        order[lo:hi] = idx[part]
        l_node = new_node(lo, lo + mid)
        r_node = new_node(lo + mid, hi)
        left[node], right[node] = l_node, r_node
        count[node] = 0
        stack.append((r_node, lo + mid, hi))
        stack.append((l_node, lo, lo + mid))

    va, vb, vc = a[order], b[order], c[order]
    return Bvh(mesh=mesh, bmin=np.array(bmin), bmax=np.array(bmax),
               left=np.array(left, dtype=np.int64), right=np.array(right, dtype=np.int64),
               start=np.array(start, dtype=np.int64), count=np.array(count, dtype=np.int64),
               order=order.astype(np.int64), v0=np.ascontiguousarray(va),
               e1=np.ascontiguousarray(vb - va), e2=np.ascontiguousarray(vc - va))


def raycast_many(bvh: Bvh, origins: np.ndarray, dirs: np.ndarray, tmax=np.inf):
    """Batched first-hit query. Returns (t, triangle id) arrays; inf / -1 on miss."""
    origins = np.ascontiguousarray(np.asarray(origins, dtype=float).reshape(-1, 3))
    dirs = np.ascontiguousarray(np.asarray(dirs, dtype=float).reshape(-1, 3))
    if len(origins) == 1 and len(dirs) > 1:
        origins = np.ascontiguousarray(np.broadcast_to(origins, dirs.shape))
    tm = np.ascontiguousarray(np.broadcast_to(np.asarray(tmax, dtype=float), (len(dirs),)))
    if len(dirs) == 0:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    return _kernels.raycast_batch(origins, dirs, tm, bvh.bmin, bvh.bmax, bvh.left, bvh.right,
                                  bvh.start, bvh.count, bvh.order, bvh.v0, bvh.e1, bvh.e2)


def raycast(bvh: Bvh, origin, direction) -> tuple[float, int] | None:
    d = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("ray direction must be unit length")
    t, tid = raycast_many(bvh, np.asarray(origin, dtype=float)[None], d[None])
    if tid[0] < 0:
        return None
    return float(t[0]), int(tid[0])


# ---------------------------------------------------------------- placed objects

@dataclass(frozen=True, eq=False)
class ObjectInstance:
    mesh: TriMesh
    bvh: Bvh
    pose: Pose3
    box: Box3
    category: str = "Car"

    @classmethod
    def place(cls, mesh: TriMesh, pose: Pose3, bvh: Bvh | None = None, category: str = "Car"):
        return cls(mesh, bvh if bvh is not None else build_bvh(mesh), pose,
                   mesh_bounds(mesh, pose), category)

    def raycast_world(self, origins: np.ndarray, dirs: np.ndarray, tmax=np.inf):
        """Cast LiDAR-frame rays by moving them into the object frame."""
        o = self.pose.inverse_apply(np.asarray(origins, dtype=float).reshape(-1, 3))
        d = np.asarray(dirs, dtype=float).reshape(-1, 3) @ self.pose.rotation()
        return raycast_many(self.bvh, o, d, tmax)

    def world_vertices(self) -> np.ndarray:
        return self.pose.apply(self.mesh.vertices)


# ---------------------------------------------------------------- object database

@dataclass(frozen=True, eq=False)
class MeshEntry:
    name: str
    category: str
    mesh: TriMesh
    bvh: Bvh


def load_object_database(root, palette: dict | None = None) -> list[MeshEntry]:
    """Read ``<root>/<category>/<name>.obj`` plus optional per-category ``meta.json``.

    ``meta.json`` may carry ``category``, ``target_length`` and a ``palette``
    mapping material names to RGB, either top level or under ``objects.<name>``.
    """
    root = Path(root)
    entries = []
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        meta = {}
        if (cat_dir / "meta.json").exists():
            meta = json.loads((cat_dir / "meta.json").read_text())
        for obj in sorted(cat_dir.glob("*.obj")):
            spec = {**meta, **meta.get("objects", {}).get(obj.stem, {})}
            pal = {**(palette or {}), **spec.get("palette", {})}
            mesh = load_mesh(obj.read_text(), palette=pal, target_length=spec.get("target_length"),
                             up_axis=spec.get("up_axis", "z"), name=f"{cat_dir.name}/{obj.stem}")
            entries.append(MeshEntry(mesh.name, spec.get("category", "Car"), mesh, build_bvh(mesh)))
    if not entries:
        raise NoGeometry(f"no .obj files under {root}")
    return entries


def rigid_rays(origins, dirs, angle: float, shift) -> tuple[np.ndarray, np.ndarray]:
    """Rotate about z and translate a ray bundle; used for invariance checks."""
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return np.asarray(origins) @ rot.T + np.asarray(shift), np.asarray(dirs) @ rot.T
