"""Sparse LiDAR depth projected into the camera and densified by nearest fill."""
import logging
from typing import Tuple

import numpy as np
from scipy import ndimage

from .camera import MIN_DEPTH, CameraModel
from .lidar import LidarSweep

logger = logging.getLogger(__name__)


def sparse_depth(sweep: LidarSweep, cam: CameraModel) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel nearest LiDAR depth and a mask of pixels that received a point."""
    height, width = cam.shape
    depth = np.full(height * width, np.inf)
    if len(sweep):
        pts = cam.to_camera(sweep.xyz)
        z = pts[:, 2]
        ok = z > MIN_DEPTH
        zs = np.where(ok, z, 1.0)
        col = np.floor(pts[:, 0] * cam.fx / zs + cam.cx).astype(np.int64)
        row = np.floor(pts[:, 1] * cam.fy / zs + cam.cy).astype(np.int64)
        ok &= (col >= 0) & (col < width) & (row >= 0) & (row < height)
        np.minimum.at(depth, row[ok] * width + col[ok], z[ok])
    depth = depth.reshape(height, width)
    return depth, np.isfinite(depth)


def densify_depth(sweep: LidarSweep, cam: CameraModel) -> np.ndarray:
    """Dense (H, W) depth: projected pixels keep their depth, the rest copy the nearest one."""
    depth, known = sparse_depth(sweep, cam)
    if not known.any():
        logger.warning("densify_depth: no LiDAR point projects into the image; using the far plane")
        return np.full(cam.shape, cam.far)
    _, (rows, cols) = ndimage.distance_transform_edt(~known, return_indices=True)
    return depth[rows, cols]
