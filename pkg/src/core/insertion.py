"""Render the adversary on a host rooftop into both sensor inputs of a scene."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..detector.boxes import DetectionBox
from ..geometry.mesh import GeometryError, Pose, TexturedMesh, transform_mesh
from ..sensors.camera import CameraImage, SoftRasterConfig, composite_image
from ..sensors.lidar import LidarSweep, merge_sweeps, simulate_lidar
from ..sensors.raster import SoftRender, rasterize_soft
from .rooftop import VehicleFit, fit_vehicle_box, rooftop_pose
from .scene import Scene

logger = logging.getLogger(__name__)

SURFACE_SAMPLES = 600
GROUND_CLEARANCE = 0.05
FOOTPRINT_MARGIN = 0.05


@dataclass
class PerturbedInputs:
    image: CameraImage
    sweep: LidarSweep
    adversary_sweep: LidarSweep
    render: SoftRender
    pose: Pose


def sample_vehicle_surface(scene: Scene, host: int, count: int = SURFACE_SAMPLES) -> np.ndarray:
    """Deterministic area-weighted surface samples of a vehicle proxy."""
    mesh = scene.vehicles[host].mesh()
    tri = mesh.vertices.data[mesh.faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    rng = np.random.default_rng([*scene.seed, host])
    face = rng.choice(len(tri), size=count, p=area / area.sum())
    r1, r2 = rng.random(count), rng.random(count)
    flip = r1 + r2 > 1.0
    r1[flip], r2[flip] = 1.0 - r1[flip], 1.0 - r2[flip]
    t = tri[face]
    return t[:, 0] + r1[:, None] * (t[:, 1] - t[:, 0]) + r2[:, None] * (t[:, 2] - t[:, 0])


def host_points(scene: Scene, host: int) -> np.ndarray:
    """Returns of the clean sweep inside the host footprint and above the ground."""
    if scene.sweep is None:
        return np.zeros((0, 3))
    box = scene.vehicles[host].box
    footprint = DetectionBox(box.x, box.y, box.h + 2 * FOOTPRINT_MARGIN, box.w + 2 * FOOTPRINT_MARGIN, box.alpha)
    xyz = scene.sweep.xyz
    return xyz[footprint.contains(xyz) & (xyz[:, 2] > GROUND_CLEARANCE)]


def host_fit(scene: Scene, host: int) -> VehicleFit:
    """Box fit of the host's LiDAR returns; raises GeometryError when they are too sparse."""
    return fit_vehicle_box(host_points(scene, host), scene.vehicles[host].box.alpha)


def proxy_fit(scene: Scene, host: int) -> VehicleFit:
    return fit_vehicle_box(sample_vehicle_surface(scene, host), scene.vehicles[host].box.alpha)


def host_pose(scene: Scene, host: int, use_band_centroid: bool = True) -> Pose:
    """Rooftop placement for ``host``, with the annotated heading as the fit prior.

    Falls back to samples of the vehicle proxy surface when the host returns
    are too sparse or too flat to fit.
    """
    try:
        return rooftop_pose(host_fit(scene, host), use_band_centroid)
    except GeometryError as e:
        logger.warning(f"Scene {scene.index} host {host}: {e}; using the proxy surface instead")
        return rooftop_pose(proxy_fit(scene, host), use_band_centroid)


def insert_adversary(scene: Scene, mesh: TexturedMesh, pose: Pose,
                     raster: Optional[SoftRasterConfig] = None, max_range: float = np.inf) -> PerturbedInputs:
    """Place ``mesh`` at ``pose`` and render it into the LiDAR sweep and the camera image."""
    raster = raster or SoftRasterConfig()
    world = transform_mesh(mesh, pose)
    adversary_sweep = simulate_lidar(world, scene.lidar_spec, max_range)
    sweep = merge_sweeps(scene.sweep, adversary_sweep)
    render = rasterize_soft(world, scene.camera, scene.light, raster, background=scene.image.pixels.data)
    scene_depth = scene.image.dense_depth
    image = composite_image(scene.image, render.rgb, render.alpha, render.depth, scene_depth)
    logger.debug(f"Inserted adversary into scene {scene.index}: {len(adversary_sweep)} LiDAR returns")
    return PerturbedInputs(image, sweep, adversary_sweep, render, pose)
