"""Multi-modal test synthesis by object insertion, with fitness-guided metamorphic testing of detectors."""

from .errors import FusionProbeError
from .geometry import Box2, Box3, Calibration, GroundTruth, PointCloud, Pose3, iou_2d, iou_3d
from .kitti_io import Frame, load_frame, save_frame

__version__ = "0.1.0"

__all__ = [
    "Box2", "Box3", "Calibration", "Frame", "FusionProbeError", "GroundTruth", "PointCloud",
    "Pose3", "iou_2d", "iou_3d", "load_frame", "save_frame",
]
