"""Synthetic driving scenes: box vehicles on a ground plane seen by a LiDAR and a camera."""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..autodiff.tensor import Value
from ..detector.boxes import DetectionBox
from ..evaluation.iou import rotated_iou
from ..geometry.mesh import Pose, TexturedMesh
from ..sensors.camera import CameraImage, CameraModel, DirectionalLight, SoftRasterConfig
from ..sensors.depth import densify_depth
from ..sensors.lidar import LidarSpec, LidarSweep, cast_rays, generate_rays
from ..sensors.raster import rasterize_hard
from ..sensors.sensor_io import quantize_depth, quantize_image
from ..utils.concurrency import map_in_threads
from ..utils.config import ConfigError, dataclass_from_dict

logger = logging.getLogger(__name__)

LENGTH_RANGE = (3.8, 4.8)
WIDTH_RANGE = (1.6, 2.0)
HEIGHT_RANGE = (1.4, 1.7)
PLACEMENT_BUFFER = 0.5
MAX_SUB_SEEDS = 100
FOV_MARGIN = 0.85

BODY_PALETTE = np.array([
    [0.75, 0.10, 0.10], [0.10, 0.25, 0.70], [0.85, 0.85, 0.85], [0.15, 0.15, 0.15],
    [0.20, 0.55, 0.25], [0.85, 0.65, 0.10], [0.55, 0.55, 0.60],
])
SKY_TOP = np.array([0.45, 0.62, 0.85])
SKY_HORIZON = np.array([0.78, 0.85, 0.92])
GROUND_COLOR = np.array([0.36, 0.35, 0.33])


class SceneGenerationError(RuntimeError):
    """No feasible vehicle layout could be sampled"""
    pass


@dataclass
class SceneConfig:
    seed: int = 0
    train_scenes: int = 256
    eval_scenes: int = 64
    vehicles_min: int = 1
    vehicles_max: int = 4
    x_range: Tuple[float, float] = (5.0, 70.0)
    y_range: Tuple[float, float] = (-40.0, 40.0)
    host_range: Tuple[float, float] = (6.0, 35.0)
    max_placement_retries: int = 50
    sensor_profile: str = "default"
    workers: int = 1
    sensors: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.x_range = tuple(self.x_range)
        self.y_range = tuple(self.y_range)
        self.host_range = tuple(self.host_range)
        if not 0 <= self.vehicles_min <= self.vehicles_max:
            raise ConfigError(f"Invalid vehicle count range [{self.vehicles_min}, {self.vehicles_max}]")
        if self.x_range[0] >= self.x_range[1] or self.y_range[0] >= self.y_range[1]:
            raise ConfigError(f"Invalid spatial ranges x={self.x_range} y={self.y_range}")
        if not (self.x_range[0] <= self.host_range[0] < self.host_range[1] <= self.x_range[1]):
            raise ConfigError(f"host_range {self.host_range} must lie inside x_range {self.x_range}")
        if self.max_placement_retries < 1:
            raise ConfigError("max_placement_retries must be positive")
        if not self.sensors:
            from ..utils.config import Config
            self.sensors = Config.DEFAULT_CONFIG["sensors"]
        if self.sensor_profile not in self.sensors.get("profiles", {}):
            raise ConfigError(f"Unknown sensor profile {self.sensor_profile!r}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneConfig":
        return dataclass_from_dict(cls, data)

    @property
    def profile(self) -> Dict[str, Any]:
        return self.sensors["profiles"][self.sensor_profile]

    def with_profile(self, name: str) -> "SceneConfig":
        data = dict(self.__dict__)
        data["sensor_profile"] = name
        return SceneConfig(**data)

    def lidar_spec(self) -> LidarSpec:
        p = self.profile
        return LidarSpec.uniform(int(p["num_beams"]), tuple(p["elevation_range_deg"]), float(p["azimuth_step_deg"]),
                                 tuple(p["azimuth_range_deg"]), (0.0, 0.0, float(p["lidar_height"])))

    def camera(self) -> CameraModel:
        p = self.profile
        return CameraModel.forward_facing(float(p["focal"]), int(p["image_height"]), int(p["image_width"]),
                                          (0.0, 0.0, float(p["camera_height"])))

    def light(self) -> DirectionalLight:
        return DirectionalLight.from_dict(self.sensors["light"])

    def raster_config(self) -> SoftRasterConfig:
        return SoftRasterConfig(**self.sensors.get("soft_raster", {}))

    @property
    def max_range(self) -> float:
        return float(self.profile.get("max_range", 100.0))


@dataclass
class Vehicle:
    box: DetectionBox
    height: float
    color: Tuple[float, float, float]

    def mesh(self) -> TexturedMesh:
        return box_mesh(self.box, self.height, self.color)

    def to_dict(self) -> dict:
        return {"box": self.box.to_list()[:5], "height": self.height, "color": list(self.color)}

    @classmethod
    def from_dict(cls, data: dict) -> "Vehicle":
        return cls(DetectionBox.from_list(data["box"]), float(data["height"]), tuple(data["color"]))


@dataclass
class Scene:
    """One frame: vehicles, sensors and the clean renders of both modalities."""
    index: int
    seed: Tuple[int, ...]
    vehicles: List[Vehicle]
    host_candidates: List[int]
    lidar_spec: LidarSpec
    camera: CameraModel
    light: DirectionalLight
    sweep: Optional[LidarSweep] = None
    image: Optional[CameraImage] = None

    @property
    def ground_truth(self) -> List[DetectionBox]:
        return [v.box for v in self.vehicles]

    @property
    def host_index(self) -> Optional[int]:
        return self.host_candidates[0] if self.host_candidates else None

    def host_box(self, host: Optional[int] = None) -> DetectionBox:
        host = self.host_index if host is None else host
        if host is None:
            raise SceneGenerationError(f"Scene {self.index} has no host vehicle")
        return self.vehicles[host].box

    def samples(self) -> List[Tuple[int, int]]:
        """(scene index, host vehicle index) pairs: one attack sample per eligible vehicle."""
        return [(self.index, h) for h in self.host_candidates]

    def annotations(self) -> dict:
        return {
            "index": self.index,
            "seed": list(self.seed),
            "vehicles": [v.to_dict() for v in self.vehicles],
            "host_candidates": list(self.host_candidates),
            "lidar_spec": self.lidar_spec.to_dict(),
            "camera": self.camera.to_dict(),
            "light": self.light.to_dict(),
        }


def box_mesh(box: DetectionBox, height: float, color: Sequence[float]) -> TexturedMesh:
    """Closed 12-triangle box with outward winding and flat per-side colours."""
    hl, hw = box.h / 2.0, box.w / 2.0
    local = np.array([
        [-hl, -hw, 0.0], [hl, -hw, 0.0], [hl, hw, 0.0], [-hl, hw, 0.0],
        [-hl, -hw, height], [hl, -hw, height], [hl, hw, height], [-hl, hw, height],
    ])
    faces = np.array([
        [0, 2, 1], [0, 3, 2],  # bottom
        [4, 5, 6], [4, 6, 7],  # roof
        [0, 1, 5], [0, 5, 4],  # right side
        [2, 3, 7], [2, 7, 6],  # left side
        [1, 2, 6], [1, 6, 5],  # front
        [3, 0, 4], [3, 4, 7],  # back
    ], dtype=np.int64)
    base = np.asarray(color, dtype=np.float64)
    tint = np.array([0.3, 0.7, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.8, 0.8, 0.6, 0.6])
    face_colors = np.clip(base[None, :] * tint[:, None], 0.0, 1.0)
    # front and back get light/dark bands so heading is visible to the image branch
    face_colors[8:10] = np.clip(face_colors[8:10] + 0.25, 0.0, 1.0)
    vertices = Pose((box.x, box.y, 0.0), box.alpha).apply(local)
    return TexturedMesh(Value(vertices), faces, Value(face_colors[:, None, None, :]))


def _sample_box(rng: np.random.Generator, x_range, y_range, host: bool, cfg: SceneConfig,
                half_fov: float) -> Tuple[DetectionBox, float]:
    length = rng.uniform(*LENGTH_RANGE)
    width = rng.uniform(*WIDTH_RANGE)
    height = rng.uniform(*HEIGHT_RANGE)
    heading = rng.uniform(-np.pi, np.pi)
    if host:
        x = rng.uniform(*cfg.host_range)
        reach = np.tan(half_fov * FOV_MARGIN) * x
        y = rng.uniform(max(-reach, y_range[0]), min(reach, y_range[1]))
    else:
        x = rng.uniform(*x_range)
        y = rng.uniform(*y_range)
    return DetectionBox(x, y, length, width, heading), height


def _overlaps(box: DetectionBox, others: Sequence[DetectionBox]) -> bool:
    grown = DetectionBox(box.x, box.y, box.h + 2 * PLACEMENT_BUFFER, box.w + 2 * PLACEMENT_BUFFER, box.alpha)
    return any(rotated_iou(grown, other) > 0.0 for other in others)


def is_host_eligible(box: DetectionBox, cfg: SceneConfig, half_fov: float) -> bool:
    if not cfg.host_range[0] <= box.x <= cfg.host_range[1]:
        return False
    return abs(np.arctan2(box.y, box.x)) <= half_fov * FOV_MARGIN


def sample_layout(cfg: SceneConfig, rng: np.random.Generator, half_fov: float) -> Optional[List[Vehicle]]:
    """Non-overlapping vehicles, the first one placed as a host; None if placement fails."""
    count = int(rng.integers(cfg.vehicles_min, cfg.vehicles_max + 1))
    vehicles: List[Vehicle] = []
    for i in range(count):
        for _ in range(cfg.max_placement_retries):
            box, height = _sample_box(rng, cfg.x_range, cfg.y_range, i == 0, cfg, half_fov)
            if not _overlaps(box, [v.box for v in vehicles]):
                color = tuple(BODY_PALETTE[rng.integers(len(BODY_PALETTE))])
                vehicles.append(Vehicle(box, height, color))
                break
        else:
            return None
    return vehicles


def merged_vehicle_mesh(vehicles: Sequence[Vehicle]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked (vertices, faces, face colours) of every vehicle proxy."""
    verts, faces, colors, offset = [], [], [], 0
    for v in vehicles:
        m = v.mesh()
        verts.append(m.vertices.data)
        faces.append(m.faces + offset)
        colors.append(m.textures.data[:, 0, 0, :])
        offset += m.num_vertices
    if not verts:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3))
    return np.concatenate(verts), np.concatenate(faces), np.concatenate(colors)


def render_lidar(vehicles: Sequence[Vehicle], spec: LidarSpec, max_range: float) -> LidarSweep:
    """Clean sweep: nearest of vehicle hits and the analytic z = 0 ground plane."""
    origins, directions, ray_ids = generate_rays(spec)
    verts, faces, colors = merged_vehicle_mesh(vehicles)
    t = np.full(len(origins), np.inf)
    if len(faces):
        mesh = TexturedMesh(Value(verts), faces, Value(colors[:, None, None, :]))
        _, t = cast_rays(mesh, origins, directions)
    down = directions[:, 2] < -1e-9
    t_ground = np.full(len(origins), np.inf)
    t_ground[down] = -origins[down, 2] / directions[down, 2]
    t = np.minimum(t, t_ground)
    hit = t <= max_range
    points = origins[hit] + t[hit, None] * directions[hit]
    return LidarSweep(Value(points), ray_ids[hit], spec)


def render_image(vehicles: Sequence[Vehicle], cam: CameraModel, light: DirectionalLight,
                 rng: np.random.Generator) -> np.ndarray:
    """Clean image: sky gradient, textured ground and z-buffered vehicle boxes."""
    height, width = cam.shape
    rays = cam.pixel_rays()
    origin = cam.position
    image = np.empty((height, width, 3))
    depth = np.full((height, width), np.inf)
    elev = np.clip(rays[..., 2], 0.0, 1.0)[..., None]
    image[:] = SKY_HORIZON + (SKY_TOP - SKY_HORIZON) * np.sqrt(elev)
    down = rays[..., 2] < -1e-9
    t = np.where(down, -origin[2] / np.where(down, rays[..., 2], -1.0), np.inf)
    ground = origin + t[..., None] * rays
    ground_ok = down & (t < cam.far)
    checker = ((np.floor(ground[..., 0] / 2.0) + np.floor(ground[..., 1] / 2.0)) % 2 == 0)
    shade = np.where(checker, 1.0, 0.9)[..., None]
    image[ground_ok] = (GROUND_COLOR * shade)[ground_ok]
    depth[ground_ok] = cam.to_camera(ground[ground_ok])[:, 2]
    verts, faces, colors = merged_vehicle_mesh(vehicles)
    if len(faces):
        image, depth = rasterize_hard(verts, faces, colors, cam, light, image, depth)
    image = image + rng.normal(0.0, 0.01, size=image.shape)
    return quantize_image(image)


def generate_scene(cfg: SceneConfig, index: int, seed: int) -> Scene:
    """Scene ``index`` of the dataset seeded by ``seed``; deterministic for a fixed pair."""
    spec, cam, light = cfg.lidar_spec(), cfg.camera(), cfg.light()
    half_fov = np.arctan(cam.width / (2.0 * cam.fx))
    for sub in range(MAX_SUB_SEEDS):
        rng = np.random.default_rng([seed, index, sub])
        vehicles = sample_layout(cfg, rng, half_fov)
        if vehicles is not None:
            break
        logger.info(f"Scene {index}: placement failed, moving to sub-seed {sub + 1}")
    else:
        raise SceneGenerationError(f"Scene {index}: no feasible layout after {MAX_SUB_SEEDS} sub-seeds")
    hosts = [i for i, v in enumerate(vehicles) if is_host_eligible(v.box, cfg, half_fov)]
    sweep = render_lidar(vehicles, spec, cfg.max_range)
    pixels = render_image(vehicles, cam, light, rng)
    dense = quantize_depth(densify_depth(sweep, cam))
    return Scene(index, (seed, index, sub), vehicles, hosts, spec, cam, light, sweep,
                 CameraImage(Value(pixels), dense))


def generate_scenes(cfg: SceneConfig, count: int, seed: Optional[int] = None, workers: Optional[int] = None,
                    start_index: int = 0) -> List[Scene]:
    if count <= 0:
        raise ConfigError(f"Scene count must be positive, got {count}")
    seed = cfg.seed if seed is None else seed
    workers = cfg.workers if workers is None else workers
    indices = range(start_index, start_index + count)
    scenes = map_in_threads(lambda i: generate_scene(cfg, i, seed), indices, workers)
    logger.info(f"Generated {count} scenes (seed {seed}, profile {cfg.sensor_profile})")
    return scenes
