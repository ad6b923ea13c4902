"""Pinhole camera, directional lighting and occlusion-aware image compositing."""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from ..autodiff import tensor as T
from ..autodiff.tensor import Value
from ..geometry.mesh import rotation_z
from .lidar import SensorError

logger = logging.getLogger(__name__)

MIN_DEPTH = 1e-6
OCCLUSION_ALPHA = 0.5

# world (x forward, y left, z up) -> camera (x right, y down, z forward)
_WORLD_TO_CAMERA_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int
    rotation: Tuple[Tuple[float, ...], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    near: float = 0.1
    far: float = 131.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise SensorError(f"Focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise SensorError(f"Principal point ({self.cx}, {self.cy}) outside {self.height}x{self.width} image")
        object.__setattr__(self, "rotation", tuple(tuple(float(x) for x in row) for row in self.rotation))
        object.__setattr__(self, "translation", tuple(float(x) for x in self.translation))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    @property
    def R(self) -> np.ndarray:
        return np.array(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    @property
    def position(self) -> np.ndarray:
        """Camera centre in the world frame."""
        return -self.R.T @ self.t

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.t

    def pixel_rays(self) -> np.ndarray:
        """Unit world-frame directions through every pixel centre, (H, W, 3)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64) + 0.5
        cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        world = cam @ self.R
        return world / np.linalg.norm(world, axis=-1, keepdims=True)

    def scaled(self, factor: float) -> "CameraModel":
        """Same extrinsics with intrinsics for an image resized by ``factor``."""
        return CameraModel(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                           int(round(self.height * factor)), int(round(self.width * factor)),
                           self.rotation, self.translation, self.near, self.far)

    @classmethod
    def forward_facing(cls, focal: float, height: int, width: int, position: Sequence[float],
                       heading: float = 0.0, near: float = 0.1, far: float = 131.0) -> "CameraModel":
        """Level camera at ``position`` looking along world heading ``heading``."""
        rot = _WORLD_TO_CAMERA_AXES @ rotation_z(-heading)
        trans = -rot @ np.asarray(position, dtype=np.float64)
        return cls(focal, focal, width / 2.0, height / 2.0, height, width,
                   tuple(map(tuple, rot)), tuple(trans), near, far)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "height": self.height, "width": self.width,
            "rotation": [list(r) for r in self.rotation], "translation": list(self.translation),
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CameraModel":
        return cls(data["fx"], data["fy"], data["cx"], data["cy"], int(data["height"]), int(data["width"]),
                   tuple(map(tuple, data["rotation"])), tuple(data["translation"]),
                   data.get("near", 0.1), data.get("far", 131.0))


@dataclass
class CameraImage:
    pixels: Value
    dense_depth: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.pixels = T.as_value(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise SensorError(f"Image pixels must be (H, W, 3), got {self.pixels.shape}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def detached(self) -> "CameraImage":
        return CameraImage(self.pixels.detach(), self.dense_depth)


@dataclass(frozen=True)
class DirectionalLight:
    """Sun-like light at infinity; ``direction`` points from the light into the scene."""
    direction: Tuple[float, float, float] = (0.3, -0.2, -0.93)
    diffuse: float = 0.6
    ambient: float = 0.5

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if np.linalg.norm(d) == 0:
            raise SensorError("Light direction must be non-zero")
        object.__setattr__(self, "direction", tuple(d / np.linalg.norm(d)))
        if self.diffuse < 0 or self.ambient < 0 or self.diffuse + self.ambient > 1.5:
            raise SensorError(f"Invalid light intensities diffuse={self.diffuse} ambient={self.ambient}")

    def to_dict(self) -> dict:
        return {"direction": list(self.direction), "diffuse": self.diffuse, "ambient": self.ambient}

    @classmethod
    def from_dict(cls, data: dict) -> "DirectionalLight":
        return cls(tuple(data["direction"]), data["diffuse"], data["ambient"])


@dataclass(frozen=True)
class SoftRasterConfig:
    sigma: float = 1e-4
    gamma: float = 1e-4
    background: Optional[Tuple[float, float, float]] = None
    max_faces_per_pixel: int = 16

    def __post_init__(self):
        if self.sigma <= 0 or self.gamma <= 0:
            raise SensorError(f"sigma and gamma must be positive, got {self.sigma}, {self.gamma}")


def project_points(points, cam: CameraModel) -> Tuple[Value, Value, np.ndarray]:
    """World points (K, 3) -> pixel coords (K, 2), camera depth (K,), valid mask.

    Points at depth <= 1e-6 are flagged invalid and their pixel coordinates are
    meaningless (they are projected at unit depth to stay finite).
    """
    points = T.as_value(points).reshape(-1, 3)
    cam_pts = T.matmul(points, Value(cam.R.T)) + cam.t
    depth = cam_pts[:, 2]
    valid = depth.data > MIN_DEPTH
    safe = T.where(valid, depth, 1.0)
    u = cam_pts[:, 0] * cam.fx / safe + cam.cx
    v = cam_pts[:, 1] * cam.fy / safe + cam.cy
    return T.stack([u, v], axis=1), depth, valid


def shade_factor(normals: Value, light: DirectionalLight) -> Value:
    """clamp(ambient + diffuse * max(0, -n.l), 0, 1) for (..., 3) normals."""
    facing = T.relu(-(T.as_value(normals) * np.asarray(light.direction)).sum(axis=-1))
    return T.clamp(light.ambient + light.diffuse * facing, 0.0, 1.0)


def shade_directional(base_color, normal, light: DirectionalLight) -> Value:
    factor = shade_factor(normal, light)
    return T.as_value(base_color) * T.reshape(factor, factor.shape + (1,))


def composite_image(original: CameraImage, rgb, alpha, rendered_depth: np.ndarray,
                    scene_depth: np.ndarray) -> CameraImage:
    """Blend rendered pixels over ``original`` where they are confident and unoccluded."""
    rgb, alpha = T.as_value(rgb), T.as_value(alpha)
    if rgb.shape != original.pixels.shape or alpha.shape != original.shape:
        raise SensorError(f"Render {rgb.shape}/{alpha.shape} does not match image {original.pixels.shape}")
    if np.shape(rendered_depth) != original.shape or np.shape(scene_depth) != original.shape:
        raise SensorError("Depth maps must match the image size")
    keep = (alpha.data > OCCLUSION_ALPHA) & (np.asarray(rendered_depth) < np.asarray(scene_depth))
    if not keep.any():
        return CameraImage(original.pixels, original.dense_depth)
    a = T.reshape(alpha, alpha.shape + (1,))
    blended = a * rgb + (1.0 - a) * original.pixels
    pixels = T.where(np.broadcast_to(keep[..., None], rgb.shape), blended, original.pixels)
    return CameraImage(T.clamp(pixels, 0.0, 1.0), original.dense_depth)
