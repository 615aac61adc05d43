"""Systems under test: a geometric reference detector with fault injectors, and a process adapter."""

from __future__ import annotations

import hashlib
import math
import shlex
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import FormatError, NonZeroExit, SutTimeout, UnparsableOutput
from .geometry import Box2, Box3, GroundTruth, lidar_to_cam, project_points, projected_box2
from .kitti_io import gt_to_record, read_labels, record_to_box3, save_frame, write_labels
from .metrics import Detection
from .pose import PoseConfig, nonground_mask, segment_ground


def stable_hash(text: str) -> int:
    """32-bit hash that does not change between interpreter runs."""
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little")


# ---------------------------------------------------------------- fault injectors

@dataclass(frozen=True)
class MaxRange:
    """Drop detections whose center lies farther than ``distance``."""
    distance: float

    def apply(self, dets, frame, rng):
        return [d for d in dets if d.box3 is None or d.box3.distance() <= self.distance]


@dataclass(frozen=True)
class Dropout:
    """Drop each detection independently with probability ``p``."""
    p: float

    def apply(self, dets, frame, rng):
        u = rng.random(len(dets))
        return [d for d, x in zip(dets, u) if x >= self.p]


@dataclass(frozen=True)
class Inflate:
    """Scale 3D box dimensions by ``s`` about the center."""
    s: float

    def apply(self, dets, frame, rng):
        out = []
        for d in dets:
            if d.box3 is None:
                out.append(d)
                continue
            b3 = d.box3.scaled(self.s)
            out.append(Detection(b3, projected_box2(b3, frame.calib) or d.box2, d.category, d.score))
        return out


INJECTORS = {"max_range": MaxRange, "dropout": Dropout, "inflate": Inflate}


def make_injector(spec) -> object:
    """Build from {"max_range": 25} style mappings or pass instances through."""
    if hasattr(spec, "apply"):
        return spec
    if isinstance(spec, dict) and len(spec) == 1:
        (name, arg), = spec.items()
        if name in INJECTORS:
            return INJECTORS[name](float(arg))
    raise ValueError(f"bad fault injector {spec!r}")


# ---------------------------------------------------------------- builtin detector

@dataclass
class BuiltinParams:
    cluster_radius: float = 0.7
    min_points: int = 20
    max_length: float = 7.0
    max_width: float = 3.5
    height_range: tuple[float, float] = (0.5, 3.0)
    prior_dims: tuple[float, float, float] = (4.2, 1.75, 1.5)  # length, width, height
    length_cut: float = 2.2
    yaw_fit: str = "search"  # "search" or "pca"
    yaw_step_deg: float = 1.0
    full_score_points: int = 150
    camera_only: bool = True
    bev_clustering: bool = True  # link points by ground-plane distance only
    ground_clearance: float = 0.25
    faults: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.faults = [make_injector(f) for f in self.faults]
        self.height_range = tuple(self.height_range)
        self.prior_dims = tuple(self.prior_dims)


def euclidean_clusters(pts: np.ndarray, radius: float, min_points: int) -> list[np.ndarray]:
    """Connected components of the radius graph, largest first."""
    if len(pts) == 0:
        return []
    labels = _kernels.radius_components(np.ascontiguousarray(pts, dtype=float), float(radius))
    _, labels = np.unique(labels, return_inverse=True)
    sizes = np.bincount(labels)
    keep = [k for k in np.argsort(-sizes, kind="stable") if sizes[k] >= min_points]
    return [np.nonzero(labels == k)[0] for k in keep]


def _extents(xy: np.ndarray, theta: float):
    c, s = math.cos(theta), math.sin(theta)
    a = xy @ np.array([c, s])
    b = xy @ np.array([-s, c])
    return a.min(), a.max(), b.min(), b.max()


def fit_yaw(xy: np.ndarray, method: str = "search", step_deg: float = 1.0) -> float:
    """Heading of the minimum-area bounding rectangle (or the PCA major axis)."""
    if method == "pca":
        d = xy - xy.mean(axis=0)
        w, v = np.linalg.eigh(d.T @ d)
        return math.atan2(v[1, 1], v[0, 1])
    if method != "search":
        raise ValueError(f"unknown yaw fit {method!r}")
    t = np.radians(np.arange(0.0, 90.0, step_deg))
    a = xy @ np.stack([np.cos(t), np.sin(t)])
    b = xy @ np.stack([-np.sin(t), np.cos(t)])
    area = (a.max(axis=0) - a.min(axis=0)) * (b.max(axis=0) - b.min(axis=0))
    # first angle within 1e-12 of the minimum, so ties go to the smaller angle
    return float(t[np.nonzero(area <= area.min() + 1e-12)[0][0]])


def _grow(lo: float, hi: float, target: float) -> tuple[float, float]:
    """Stretch [lo, hi] to ``target`` keeping the end nearer the sensor (at 0)."""
    if hi - lo >= target:
        return lo, hi
    if lo <= 0.0 <= hi:
        mid = 0.5 * (lo + hi)
        return mid - 0.5 * target, mid + 0.5 * target
    if abs(lo) <= abs(hi):
        return lo, lo + target
    return hi - target, hi


def fit_box(pts: np.ndarray, ground_z: float, p: BuiltinParams) -> Box3 | None:
    xy = pts[:, :2]
    theta = fit_yaw(xy, p.yaw_fit, p.yaw_step_deg)
    a0, a1, b0, b1 = _extents(xy, theta)
    if (b1 - b0) > (a1 - a0):
        theta += 0.5 * math.pi
        a0, a1, b0, b1 = _extents(xy, theta)
    # a short longest side is the visible width of a car seen end-on
    if (a1 - a0) <= p.length_cut:
        theta += 0.5 * math.pi
        a0, a1, b0, b1 = _extents(xy, theta)
    length, width = a1 - a0, b1 - b0
    if length > p.max_length or width > p.max_width:
        return None
    top = float(pts[:, 2].max())
    bottom = min(ground_z, float(pts[:, 2].min()))
    h = top - bottom
    if not (p.height_range[0] <= h <= p.height_range[1]):
        return None
    a0, a1 = _grow(a0, a1, p.prior_dims[0])
    b0, b1 = _grow(b0, b1, p.prior_dims[1])
    ca, cb = 0.5 * (a0 + a1), 0.5 * (b0 + b1)
    c, s = math.cos(theta), math.sin(theta)
    center = (ca * c - cb * s, ca * s + cb * c, bottom + 0.5 * h)
    return Box3(center, a1 - a0, b1 - b0, h, theta)


def frame_rng(seed: int, frame) -> np.random.Generator:
    n = len(frame.cloud)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stable_hash(frame.id), n)))


class BuiltinDetector:
    """Ground removal, Euclidean clustering and box fitting on the LiDAR cloud."""

    def __init__(self, params: BuiltinParams | None = None):
        self.params = params or BuiltinParams()
        self.ground_cfg = PoseConfig(fill_gaps=False)

    def detect_clean(self, frame) -> list[Detection]:
        p = self.params
        pts = np.asarray(frame.cloud.points, dtype=float)
        if len(pts) == 0:
            return []
        try:
            grid = segment_ground(frame.cloud, self.ground_cfg)
        except Exception:
            return []
        keep = nonground_mask(pts, grid, p.ground_clearance)
        if p.camera_only:
            uv, depth = project_points(lidar_to_cam(pts, frame.calib), frame.calib)
            w, h = frame.calib.image_size
            with np.errstate(invalid="ignore"):
                keep &= (depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
        obj = pts[keep]
        gz = grid.ground_z
        dets = []
        feats = obj[:, :2] if p.bev_clustering else obj
        for idx in euclidean_clusters(feats, p.cluster_radius, p.min_points):
            c = obj[idx]
            i, j, inside = grid.cell_of(c[:, :2].mean(axis=0, keepdims=True))
            ground = float(gz[i[0], j[0]]) if inside[0] else grid.expected_ground_z
            box = fit_box(c, ground, p)
            if box is None:
                continue
            b2 = projected_box2(box, frame.calib)
            score = min(1.0, len(idx) / p.full_score_points)
            dets.append(Detection(box, b2, "Car", float(score)))
        return dets

    def detect(self, frame) -> list[Detection]:
        dets = self.detect_clean(frame)
        rng = frame_rng(self.params.seed, frame)
        for f in self.params.faults:
            dets = f.apply(dets, frame, rng)
        return dets


# ---------------------------------------------------------------- external process

def parse_detections(text: str, calib) -> list[Detection]:
    try:
        recs = read_labels(text)
    except FormatError as e:
        raise UnparsableOutput(f"detector output: {e}") from e
    out = []
    for r in recs:
        if r.dont_care:
            continue
        if r.score is None:
            raise UnparsableOutput("detector output lines need 16 fields (score last)")
        try:
            b3 = record_to_box3(r, calib)
        except ValueError:
            b3 = None
        x0, y0, x1, y1 = r.box2
        b2 = Box2(x0, y0, x1, y1) if x1 > x0 and y1 > y0 else None
        if b3 is None and b2 is None:
            continue
        out.append(Detection(b3, b2, r.category, float(r.score)))
    return out


def format_detections(dets, calib) -> str:
    """Inverse of :func:`parse_detections`: 16-field KITTI lines."""
    recs = [gt_to_record(GroundTruth(d.box3, d.box2, d.category), calib, d.score) for d in dets]
    return write_labels(recs)


class ExternalSut:
    """Runs a command per frame. The template gets ``{frame_dir}``, ``{out_file}`` and ``{frame_id}``."""

    def __init__(self, command: str, timeout: float = 60.0, image_format: str = "png"):
        if "{frame_dir}" not in command or "{out_file}" not in command:
            raise ValueError("command template needs {frame_dir} and {out_file}")
        self.command = command
        self.timeout = timeout
        self.image_format = image_format

    def detect(self, frame) -> list[Detection]:
        tmp = Path(tempfile.mkdtemp(prefix="fp_sut_"))
        try:
            save_frame(tmp, frame, self.image_format)
            out_file = tmp / "detections.txt"
            argv = shlex.split(self.command.format(frame_dir=shlex.quote(str(tmp)),
                                                   out_file=shlex.quote(str(out_file)),
                                                   frame_id=shlex.quote(frame.id)))
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except subprocess.TimeoutExpired as e:
                err = e.stderr.decode(errors="replace") if isinstance(e.stderr, bytes) else (e.stderr or "")
                raise SutTimeout(f"detector exceeded {self.timeout}s on {frame.id}", err) from e
            except OSError as e:
                raise NonZeroExit(f"could not start detector: {e}", "") from e
            if proc.returncode != 0:
                raise NonZeroExit(f"detector exited with {proc.returncode} on {frame.id}", proc.stderr)
            if not out_file.exists():
                raise UnparsableOutput(f"detector wrote no {out_file.name}", proc.stderr)
            try:
                return parse_detections(out_file.read_text(), frame.calib)
            except UnparsableOutput as e:
                raise UnparsableOutput(str(e), proc.stderr) from e
        finally:
            shutil.rmtree(tmp, ignore_errors=True)
