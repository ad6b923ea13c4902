"""Heading-aligned box fit of a vehicle cloud and the rooftop placement pose."""
import logging
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from ..geometry.mesh import GeometryError, Pose, normalize_angle, rotation_z

logger = logging.getLogger(__name__)

MIN_POINTS = 10
HEADING_WINDOW = np.deg2rad(15.0)
HEADING_GRID_STEP = np.deg2rad(0.5)
ROOF_BAND = 0.2


@dataclass
class VehicleFit:
    center: Tuple[float, float, float]
    heading: float
    dims: Tuple[float, float, float]
    points: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        if min(self.dims) <= 0:
            raise GeometryError(f"Fitted dimensions must be positive, got {self.dims}")
        self.heading = normalize_angle(self.heading)

    @property
    def length(self) -> float:
        return self.dims[0]

    @property
    def width(self) -> float:
        return self.dims[1]

    @property
    def height(self) -> float:
        return self.dims[2]


def _footprint_area(xy: np.ndarray, heading: float) -> float:
    c, s = np.cos(heading), np.sin(heading)
    local_x = xy[:, 0] * c + xy[:, 1] * s
    local_y = -xy[:, 0] * s + xy[:, 1] * c
    return float(np.ptp(local_x) * np.ptp(local_y))


def fit_vehicle_box(points: np.ndarray, prior_heading: float) -> VehicleFit:
    """Tightest BEV box with heading within 15 degrees of ``prior_heading``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < MIN_POINTS:
        raise GeometryError(f"Need at least {MIN_POINTS} points to fit a vehicle, got {len(points)}")
    xy = points[:, :2] - points[:, :2].mean(axis=0)
    grid = prior_heading + np.arange(-HEADING_WINDOW, HEADING_WINDOW + 1e-12, HEADING_GRID_STEP)
    areas = np.array([_footprint_area(xy, h) for h in grid])
    best = grid[int(np.argmin(areas))]
    lo = max(best - HEADING_GRID_STEP, prior_heading - HEADING_WINDOW)
    hi = min(best + HEADING_GRID_STEP, prior_heading + HEADING_WINDOW)
    result = minimize_scalar(lambda h: _footprint_area(xy, h), bounds=(lo, hi), method="bounded",
                             options={"xatol": 1e-6})
    heading = float(result.x) if result.success and result.fun <= areas.min() else float(best)

    local = (points - np.r_[points[:, :2].mean(axis=0), 0.0]) @ rotation_z(heading)
    mins, maxs = local.min(axis=0), local.max(axis=0)
    mid_local = (mins + maxs) / 2.0
    center = rotation_z(heading) @ mid_local + np.r_[points[:, :2].mean(axis=0), 0.0]
    dims = tuple(float(d) for d in (maxs - mins))
    if min(dims) <= 0:
        raise GeometryError(f"Degenerate vehicle cloud, extents {dims}")
    logger.debug(f"Fitted vehicle box heading={heading:.4f} dims={dims}")
    return VehicleFit(tuple(center), heading, dims, points)


def rooftop_pose(fit: VehicleFit, use_band_centroid: bool = True) -> Pose:
    """Placement on the top 20 cm of the fitted vehicle.

    With ``use_band_centroid`` the x/y come from the centroid of points in the
    roof band, otherwise from the fitted box centre. z is the band top.
    """
    if fit.height <= ROOF_BAND:
        raise GeometryError(f"Vehicle height {fit.height:.3f} m is not above the {ROOF_BAND} m roof band")
    top = fit.center[2] + fit.height / 2.0
    if use_band_centroid and len(fit.points):
        band = fit.points[fit.points[:, 2] >= top - ROOF_BAND]
        xy = band[:, :2].mean(axis=0)
    else:
        xy = np.asarray(fit.center[:2])
    return Pose((float(xy[0]), float(xy[1]), float(top)), fit.heading)
