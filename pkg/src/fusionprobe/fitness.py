"""Error-revealing fitness: distance-weighted misses and false detections, worst localization gap."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .metrics import FD, OM, FrameEval


@dataclass(frozen=True)
class FitnessConfig:
    alpha: float = 0.5
    beta: float = 0.25
    gamma: float = 0.25
    dis_max: float = 80.0

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if min(w) < 0:
            raise ValueError("fitness weights must be non-negative")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ValueError(f"fitness weights must sum to 1, got {sum(w)}")
        if not self.dis_max > 0:
            raise ValueError("dis_max must be positive")


@dataclass(frozen=True)
class FitnessBreakdown:
    f_om: float
    f_fd: float
    f_le: float
    total: float

    def as_dict(self) -> dict:
        return {"f_om": self.f_om, "f_fd": self.f_fd, "f_le": self.f_le, "total": self.total}


def closeness(distance: float, dis_max: float) -> float:
    """1 - min(d, dis_max)/dis_max; unknown distances contribute nothing."""
    if distance is None or not math.isfinite(distance):
        return 0.0
    return 1.0 - min(distance, dis_max) / dis_max


def f_om(faults, cfg: FitnessConfig) -> float:
    return float(sum(closeness(f.distance, cfg.dis_max) for f in faults if f.kind == OM))


def f_fd(faults, cfg: FitnessConfig) -> float:
    return float(sum(closeness(f.distance, cfg.dis_max) * f.score for f in faults if f.kind == FD))


def f_le(localization_ious) -> float:
    """Largest 1 - IOU over localization pairs, 0 without any."""
    vals = [1.0 - v for v in localization_ious]
    return float(max(vals)) if vals else 0.0


def fitness(ev: FrameEval | None, cfg: FitnessConfig | None = None) -> FitnessBreakdown:
    cfg = cfg or FitnessConfig()
    if ev is None:
        return FitnessBreakdown(0.0, 0.0, 0.0, 0.0)
    om = f_om(ev.faults, cfg)
    fd = f_fd(ev.faults, cfg)
    le = f_le(v for _, _, v in ev.match.localization)
    return FitnessBreakdown(om, fd, le, cfg.alpha * om + cfg.beta * fd + cfg.gamma * le)
