"""Readers and writers for KITTI-style frames.

A frame directory holds ``velodyne/<id>.bin``, ``image_2/<id>.png|.ppm``,
``calib/<id>.txt`` and ``label_2/<id>.txt``. Only the left color camera is
modeled.
"""

from __future__ import annotations

import io
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (CorruptHeader, FieldCount, MalformedCloud, MalformedMatrix,
                     MissingKey, NonNumeric, UnsupportedFormat)
from .geometry import Box2, Box3, Calibration, GroundTruth, PointCloud, clamp_box2, wrap_angle

KITTI_IMAGE_SIZE = (1242, 375)


@dataclass(frozen=True, eq=False)
class Frame:
    id: str
    cloud: PointCloud
    image: np.ndarray  # (H, W, 3) uint8
    calib: Calibration
    labels: list[GroundTruth] = field(default_factory=list)

    def __post_init__(self):
        if not self.id:
            raise ValueError("frame id must be nonempty")
        img = np.asarray(self.image)
        if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
            raise ValueError("image must be an (H, W, 3) uint8 raster")
        h, w = img.shape[:2]
        if (w, h) != tuple(self.calib.image_size):
            raise ValueError(f"image {w}x{h} does not match calibration {self.calib.image_size}")
        object.__setattr__(self, "labels", list(self.labels))

    def with_(self, **changes) -> "Frame":
        return replace(self, **changes)


@dataclass(frozen=True)
class LabelRecord:
    category: str
    truncation: float
    occlusion: int
    alpha: float
    box2: tuple[float, float, float, float]
    dimensions: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]  # bottom center, rectified camera frame
    rotation_y: float
    score: float | None = None

    @property
    def dont_care(self) -> bool:
        return self.category == "DontCare"


# ---------------------------------------------------------------- point clouds

def read_point_cloud(data: bytes) -> PointCloud:
    if len(data) % 16:
        raise MalformedCloud(f"byte length {len(data)} is not a multiple of 16")
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    if not np.all(np.isfinite(arr)):
        raise MalformedCloud("non-finite value in point cloud")
    return PointCloud(arr[:, :3].astype(np.float32), arr[:, 3].astype(np.float32))


def write_point_cloud(cloud: PointCloud) -> bytes:
    arr = np.empty((len(cloud), 4), dtype="<f4")
    arr[:, :3] = cloud.points
    arr[:, 3] = cloud.intensity
    return arr.tobytes()


# ---------------------------------------------------------------- calibration

def _parse_calib_lines(text: str) -> dict[str, list[float]]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if ":" not in line:
            raise MalformedMatrix(f"line {n}: expected 'KEY: values'")
        key, rest = line.split(":", 1)
        try:
            out[key.strip()] = [float(v) for v in rest.split()]
        except ValueError as e:
            raise MalformedMatrix(f"line {n}: {e}") from None
    return out


def _matrix(vals: dict, key: str, shape) -> np.ndarray:
    if key not in vals:
        raise MissingKey(key)
    v = vals[key]
    if len(v) != shape[0] * shape[1]:
        raise MalformedMatrix(f"{key}: expected {shape[0] * shape[1]} values, got {len(v)}")
    m = np.array(v, dtype=float).reshape(shape)
    if not np.all(np.isfinite(m)):
        raise MalformedMatrix(f"{key}: non-finite entry")
    return m


def read_calib(text: str, image_size: tuple[int, int] = KITTI_IMAGE_SIZE) -> Calibration:
    vals = _parse_calib_lines(text)
    p2 = _matrix(vals, "P2", (3, 4))
    r0 = _matrix(vals, "R0_rect", (3, 3))
    tr = _matrix(vals, "Tr_velo_to_cam", (3, 4))
    try:
        return Calibration(p2=p2, velo_to_cam=tr, image_size=image_size, rect=r0)
    except ValueError as e:
        raise MalformedMatrix(str(e)) from None


def _fmt(v: float) -> str:
    return repr(float(v))


def write_calib(calib: Calibration) -> str:
    p2 = " ".join(_fmt(v) for v in calib.p2.ravel())
    # only camera 2 is modeled; the other projection slots repeat it
    lines = [f"P0: {p2}", f"P1: {p2}", f"P2: {p2}", f"P3: {p2}",
             "R0_rect: " + " ".join(_fmt(v) for v in calib.rect[:3, :3].ravel()),
             "Tr_velo_to_cam: " + " ".join(_fmt(v) for v in calib.velo_to_cam[:3, :].ravel()),
             "Tr_imu_to_velo: " + " ".join(_fmt(v) for v in np.eye(4)[:3].ravel())]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- labels

def _num(tok: str, n: int, what: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise NonNumeric(f"line {n}: {what} is not numeric: {tok!r}") from None
    return v


def read_labels(text: str) -> list[LabelRecord]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        toks = line.split()
        if not toks:
            continue
        if len(toks) not in (15, 16):
            raise FieldCount(f"line {n}: expected 15 or 16 fields, got {len(toks)}")
        f = [_num(t, n, f"field {i + 1}") for i, t in enumerate(toks[1:], 1)]
        occ = f[1]
        if occ != int(occ):
            raise NonNumeric(f"line {n}: occlusion must be an integer")
        out.append(LabelRecord(
            category=toks[0], truncation=f[0], occlusion=int(occ), alpha=f[2],
            box2=tuple(f[3:7]), dimensions=tuple(f[7:10]), location=tuple(f[10:13]),
            rotation_y=f[13], score=f[14] if len(f) == 15 else None))
    return out


def write_labels(records) -> str:
    lines = []
    for r in records:
        parts = [r.category, _fmt(r.truncation), str(int(r.occlusion)), _fmt(r.alpha)]
        parts += [_fmt(v) for v in r.box2]
        parts += [_fmt(v) for v in r.dimensions]
        parts += [_fmt(v) for v in r.location]
        parts.append(_fmt(r.rotation_y))
        if r.score is not None:
            parts.append(_fmt(r.score))
        lines.append(" ".join(parts))
    return "".join(line + "\n" for line in lines)


def _yaw_to_rotation_y(yaw: float, calib: Calibration) -> float:
    d = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    dc = calib.rect[:3, :3] @ calib.velo_to_cam[:3, :3] @ d
    return wrap_angle(math.atan2(-dc[2], dc[0]))


def _rotation_y_to_yaw(ry: float, calib: Calibration) -> float:
    dc = np.array([math.cos(ry), 0.0, -math.sin(ry)])
    d = calib.velo_to_cam[:3, :3].T @ calib.rect[:3, :3].T @ dc
    return wrap_angle(math.atan2(d[1], d[0]))


def record_to_box3(r: LabelRecord, calib: Calibration) -> Box3 | None:
    h, w, l = r.dimensions
    if not (h > 0 and w > 0 and l > 0):
        return None
    bottom = calib.rect_to_lidar(np.array([r.location]))[0]
    center = bottom + np.array([0.0, 0.0, 0.5 * h])
    return Box3(tuple(center), l, w, h, _rotation_y_to_yaw(r.rotation_y, calib))


def record_to_gt(r: LabelRecord, calib: Calibration) -> GroundTruth:
    try:
        box2 = clamp_box2(Box2(*r.box2), calib.image_size)
    except ValueError:
        box2 = None
    return GroundTruth(box3=record_to_box3(r, calib), box2=box2, category=r.category,
                       dont_care=r.dont_care, truncation=r.truncation, occlusion=r.occlusion)


def box3_to_record_fields(box: Box3, calib: Calibration):
    bottom = np.array([[box.center[0], box.center[1], box.z_min]])
    loc = calib.lidar_to_rect(bottom)[0]
    ry = _yaw_to_rotation_y(box.yaw, calib)
    alpha = wrap_angle(ry - math.atan2(loc[0], loc[2]))
    return (box.height, box.width, box.length), tuple(float(v) for v in loc), ry, alpha


def gt_to_record(gt: GroundTruth, calib: Calibration, score: float | None = None) -> LabelRecord:
    box2 = (gt.box2.x_min, gt.box2.y_min, gt.box2.x_max, gt.box2.y_max) if gt.box2 else (0.0, 0.0, 0.0, 0.0)
    category = "DontCare" if gt.dont_care else gt.category
    if gt.box3 is None:
        return LabelRecord(category, -1.0, -1, -10.0, box2, (-1.0, -1.0, -1.0),
                           (-1000.0, -1000.0, -1000.0), -10.0, score)
    dims, loc, ry, alpha = box3_to_record_fields(gt.box3, calib)
    return LabelRecord(category, float(gt.truncation), int(gt.occlusion), alpha, box2, dims, loc, ry, score)


# ---------------------------------------------------------------- images

def read_image(data: bytes) -> np.ndarray:
    if data[:2] == b"P6":
        return _read_ppm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(data)
    raise UnsupportedFormat("only binary PPM (P6) and PNG are supported")


_PPM_HEADER = re.compile(rb"P6(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def _read_ppm(data: bytes) -> np.ndarray:
    m = _PPM_HEADER.match(data)
    if not m:
        raise CorruptHeader("malformed P6 header")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise UnsupportedFormat(f"PPM maxval {maxval} (only 8-bit supported)")
    if w <= 0 or h <= 0:
        raise CorruptHeader(f"bad PPM dimensions {w}x{h}")
    body = data[m.end():]
    need = w * h * 3
    # size check before touching the pixel buffer
    if len(body) != need:
        raise CorruptHeader(f"PPM body has {len(body)} bytes, header implies {need}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


_PNG_END = b"\0\0\0\0IEND\xaeB`\x82"


def _read_png(data: bytes) -> np.ndarray:
    from PIL import Image

    if not data.endswith(_PNG_END):  # Pillow tolerates a missing trailer
        raise CorruptHeader("PNG stream is truncated (no IEND chunk)")

    try:
        with Image.open(io.BytesIO(data)) as im:
            w, h = im.size
            if w <= 0 or h <= 0 or w * h > 1 << 28:
                raise CorruptHeader(f"implausible PNG size {w}x{h}")
            im.load()
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except CorruptHeader:
        raise
    except Exception as e:  # Pillow raises a variety of types on bad input
        raise CorruptHeader(f"unreadable PNG: {e}") from None


def write_image(img: np.ndarray, fmt: str = "png") -> bytes:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected (H, W, 3) raster")
    h, w = img.shape[:2]
    if fmt == "ppm":
        return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()
    if fmt == "png":
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(img, "RGB").save(buf, format="PNG", optimize=False, compress_level=6)
        return buf.getvalue()
    raise UnsupportedFormat(fmt)


# ---------------------------------------------------------------- frame directories

def list_frame_ids(root) -> list[str]:
    root = Path(root)
    return sorted(p.stem for p in (root / "velodyne").glob("*.bin"))


def load_frame(root, frame_id: str) -> Frame:
    root = Path(root)
    cloud = read_point_cloud((root / "velodyne" / f"{frame_id}.bin").read_bytes())
    for ext in ("png", "ppm"):
        p = root / "image_2" / f"{frame_id}.{ext}"
        if p.exists():
            image = read_image(p.read_bytes())
            break
    else:
        raise FileNotFoundError(f"no image for frame {frame_id} under {root}")
    h, w = image.shape[:2]
    calib = read_calib((root / "calib" / f"{frame_id}.txt").read_text(), image_size=(w, h))
    label_path = root / "label_2" / f"{frame_id}.txt"
    labels = []
    if label_path.exists():
        labels = [record_to_gt(r, calib) for r in read_labels(label_path.read_text())]
    return Frame(frame_id, cloud, image, calib, labels)


def save_frame(root, frame: Frame, image_format: str = "png") -> None:
    root = Path(root)
    for sub in ("velodyne", "image_2", "calib", "label_2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "velodyne" / f"{frame.id}.bin").write_bytes(write_point_cloud(frame.cloud))
    (root / "image_2" / f"{frame.id}.{image_format}").write_bytes(write_image(frame.image, image_format))
    (root / "calib" / f"{frame.id}.txt").write_text(write_calib(frame.calib))
    recs = [gt_to_record(g, frame.calib) for g in frame.labels]
    (root / "label_2" / f"{frame.id}.txt").write_text(write_labels(recs))
