"""Campaign configuration: nested dataclasses loaded from YAML with dotted-key overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .camera import CameraConfig
from .errors import ConfigError
from .fitness import FitnessConfig
from .geometry import Pose3
from .lidar import LidarConfig
from .metrics import Difficulty
from .pose import PoseConfig

GUIDANCE = ("guided", "random")


@dataclass
class SutConfig:
    kind: str = "builtin"  # "builtin" or "external"
    command: str = ""
    timeout: float = 60.0
    params: dict = field(default_factory=dict)  # BuiltinParams fields, e.g. faults: [{max_range: 25}]


@dataclass
class CampaignConfig:
    seeds_dir: str = "seeds"
    objects_dir: str = "objects"
    output_dir: str = "out"
    n_insertions: int = 3
    try_num: int = 5
    guidance: str = "guided"
    rng_seed: int = 0
    tau: float = 0.5
    mode: str = "3d"
    category: str = "Car"
    mr_mode: str = "faults"  # "faults" or "ap"
    ap_delta: float = 0.05
    image_format: str = "png"
    max_seeds: int | None = None
    object_sampling: str = "uniform"  # or "stratified" by category
    fitness: FitnessConfig = field(default_factory=FitnessConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    pose: PoseConfig = field(default_factory=PoseConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    sut: SutConfig = field(default_factory=SutConfig)
    difficulty: Difficulty = field(default_factory=Difficulty)

    def __post_init__(self):
        if self.n_insertions < 1 or self.try_num < 1:
            raise ConfigError("n_insertions and try_num must be at least 1")
        if self.guidance not in GUIDANCE:
            raise ConfigError(f"guidance must be one of {GUIDANCE}, got {self.guidance!r}")
        if self.mode not in ("2d", "3d"):
            raise ConfigError(f"mode must be 2d or 3d, got {self.mode!r}")
        if self.mr_mode not in ("faults", "ap"):
            raise ConfigError(f"mr_mode must be faults or ap, got {self.mr_mode!r}")
        if self.object_sampling not in ("uniform", "stratified"):
            raise ConfigError(f"object_sampling must be uniform or stratified, got {self.object_sampling!r}")
        if not 0 <= int(self.rng_seed) < 2 ** 64:
            raise ConfigError("rng_seed must be an unsigned 64-bit integer")
        if self.sut.kind not in ("builtin", "external"):
            raise ConfigError(f"sut.kind must be builtin or external, got {self.sut.kind!r}")
        if self.sut.kind == "external" and ("{frame_dir}" not in self.sut.command
                                            or "{out_file}" not in self.sut.command):
            raise ConfigError("sut.command needs {frame_dir} and {out_file} placeholders")


_SECTIONS = {"fitness": FitnessConfig, "lidar": LidarConfig, "pose": PoseConfig,
             "camera": CameraConfig, "sut": SutConfig,
             "difficulty": Difficulty}


def _tuplify(cls, data: dict) -> dict:
    out = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in out and isinstance(out[f.name], list) and "tuple" in str(f.type):
            out[f.name] = tuple(out[f.name])
    if cls is LidarConfig and isinstance(out.get("mount"), dict):
        out["mount"] = Pose3(**out["mount"])
    return out


def _build(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    try:
        return cls(**_tuplify(cls, data))
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{cls.__name__}: {e}") from e


def config_from_dict(data: dict | None) -> CampaignConfig:
    data = dict(data or {})
    kw = {}
    for name, cls in _SECTIONS.items():
        sec = data.pop(name, None) or {}
        if not isinstance(sec, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        kw[name] = _build(cls, sec)
    return _build(CampaignConfig, {**data, **kw})


def config_to_dict(cfg: CampaignConfig) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, list):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v
    return conv(cfg)


def apply_override(data: dict, assignment: str) -> None:
    """``a.b=value`` with the value parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"bad override value {raw!r}: {e}") from e
    node = data
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"{p!r} is not a section")
        node = nxt
    node[parts[-1]] = value


def load_config(path=None, overrides=()) -> CampaignConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        base = Path(path).resolve().parent
        for key in ("seeds_dir", "objects_dir", "output_dir"):
            if key in data and not Path(str(data[key])).is_absolute():
                data[key] = str(base / str(data[key]))
    for o in overrides:
        apply_override(data, o)
    return config_from_dict(data)
