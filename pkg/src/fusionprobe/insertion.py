"""Insert posed meshes into a frame: LiDAR synthesis and carving, image compositing, label update."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .camera import CameraConfig, RenderResult, background_depth, composite, occlusion_ratios, rasterize_instances
from .geometry import GroundTruth, projected_box2
from .lidar import (LidarConfig, RaySet, SimulatedPoints, carve_occluded_background, generate_rays,
                    hide_behind_background, merge_clouds, simulate_object_points)


@dataclass(frozen=True, eq=False)
class InsertionResult:
    frame: object  # Frame
    new_labels: list  # GroundTruth per instance, None when invisible in the image
    render: RenderResult
    points: SimulatedPoints
    n_carved: int
    occlusion: list  # (ratio, dont_care) per existing label

    @property
    def visible(self) -> bool:
        return all(g is not None for g in self.new_labels)


def truncation_of(box3, calib) -> float:
    full = projected_box2(box3, calib, clamp=False)
    clamped = projected_box2(box3, calib, clamp=True)
    if full is None or clamped is None or full.area <= 0:
        return 0.0
    return float(np.clip(1.0 - clamped.area / full.area, 0.0, 1.0))


def occlusion_level(visible_px: int, box2) -> int:
    frac = visible_px / max(box2.area, 1.0)
    return 0 if frac > 0.6 else (1 if frac > 0.3 else 2)


def insert_objects(frame, instances, rng: np.random.Generator | None = None,
                   lidar_cfg: LidarConfig | None = None, camera_cfg: CameraConfig | None = None,
                   rays: RaySet | None = None, bg_depth: np.ndarray | None = None) -> InsertionResult:
    """Synthesize both modalities for ``instances`` and merge them into ``frame``.

    Background points behind an instance are carved, synthetic points behind
    existing returns are hidden, the image is composited against LiDAR depth,
    and existing labels hidden above the threshold become DontCare.
    """
    lidar_cfg = lidar_cfg or LidarConfig()
    camera_cfg = camera_cfg or CameraConfig()
    rays = rays if rays is not None else generate_rays(lidar_cfg)
    instances = list(instances)

    sim = simulate_object_points(rays, instances, lidar_cfg, rng)
    carved = carve_occluded_background(frame.cloud, instances, lidar_cfg)
    sim = hide_behind_background(sim, carved, lidar_cfg)
    cloud = merge_clouds(carved, sim)

    if bg_depth is None:
        bg_depth = background_depth(frame, camera_cfg.bg_radius_px)
    raster = rasterize_instances(instances, frame.calib, camera_cfg)
    render = composite(frame, raster, bg_depth, camera_cfg, n_instances=len(instances))

    occl = occlusion_ratios(frame.labels, render, frame.calib, camera_cfg.dont_care_ratio)
    labels = [replace(g, dont_care=True) if dc and not g.dont_care else g for g, (_, dc) in zip(frame.labels, occl)]
    new = []
    for inst, mask, b2 in zip(instances, render.masks, render.box2):
        if b2 is None:
            new.append(None)
            continue
        new.append(GroundTruth(inst.box, b2, inst.category, False, round(truncation_of(inst.box, frame.calib), 2),
                               occlusion_level(int(mask.sum()), b2)))
    out = frame.with_(cloud=cloud, image=render.image, labels=labels + [g for g in new if g is not None])
    return InsertionResult(out, new, render, sim, len(frame.cloud) - len(carved), occl)
