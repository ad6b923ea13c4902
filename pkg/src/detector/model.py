"""Small two-branch BEV detector with point-wise image-to-BEV feature fusion.

LiDAR points are voxelised into a soft BEV occupancy grid and processed by a
strided conv stack. Camera pixels go through a residual conv stack at 1/4
resolution; each LiDAR point samples the image features at its projection and
scatters them into its BEV cell. A dense anchor head scores and regresses boxes
on the fused map.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..autodiff import tensor as T
from ..autodiff.tensor import ShapeError, Value
from ..evaluation.iou import rotated_iou
from ..sensors.camera import CameraImage, CameraModel, project_points
from ..sensors.lidar import LidarSweep
from ..utils.config import ConfigError, dataclass_from_dict
from .boxes import DetectionBox, decode_boxes, make_anchors

logger = logging.getLogger(__name__)

BACKBONE_STRIDE = 4
IMAGE_STRIDE = 4


@dataclass
class DetectorConfig:
    seed: int = 0
    x_range: Tuple[float, float] = (0.0, 72.0)
    y_range: Tuple[float, float] = (-40.0, 40.0)
    z_range: Tuple[float, float] = (-0.25, 2.75)
    cell_size: float = 0.25
    height_slices: int = 6
    image_size: Tuple[int, int] = (192, 640)
    image_channels: Tuple[int, int] = (8, 16)
    bev_channels: Tuple[int, int] = (16, 32)
    head_channels: int = 32
    anchor_size: Tuple[float, float] = (4.3, 1.8)
    anchor_headings: Tuple[float, ...] = (0.0, np.pi / 2)
    score_threshold: float = 0.5
    nms_iou: float = 0.1
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    use_image: bool = True
    denoise: bool = False
    denoise_subsample: int = 2
    learning_rate: float = 0.002
    train_steps: int = 2000
    batch_size: int = 2
    log_every: int = 50

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range", "image_size", "image_channels", "bev_channels",
                     "anchor_size", "anchor_headings"):
            setattr(self, name, tuple(getattr(self, name)))
        self.image_size = tuple(int(s) for s in self.image_size)
        if self.cell_size <= 0:
            raise ConfigError(f"cell_size must be positive, got {self.cell_size}")
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if hi <= lo:
                raise ConfigError(f"{name} must be increasing, got {(lo, hi)}")
        for name in ("x_range", "y_range"):
            lo, hi = getattr(self, name)
            cells = (hi - lo) / self.cell_size
            if abs(cells - round(cells)) > 1e-9 or round(cells) % BACKBONE_STRIDE:
                raise ConfigError(f"cell_size {self.cell_size} must divide {name} into a multiple of "
                                  f"{BACKBONE_STRIDE} cells")
        if self.image_size[0] % IMAGE_STRIDE or self.image_size[1] % IMAGE_STRIDE:
            raise ConfigError(f"image_size {self.image_size} must be divisible by {IMAGE_STRIDE}")
        if self.height_slices < 1 or self.head_channels < 1:
            raise ConfigError("height_slices and head_channels must be positive")
        if not 0.0 <= self.neg_iou <= self.pos_iou <= 1.0:
            raise ConfigError(f"Need 0 <= neg_iou <= pos_iou <= 1, got {self.neg_iou}, {self.pos_iou}")
        if self.denoise_subsample < 1:
            raise ConfigError("denoise_subsample must be >= 1")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DetectorConfig":
        return dataclass_from_dict(cls, data)

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return (int(round((self.x_range[1] - self.x_range[0]) / self.cell_size)),
                int(round((self.y_range[1] - self.y_range[0]) / self.cell_size)))

    @property
    def head_cell(self) -> float:
        return self.cell_size * BACKBONE_STRIDE

    @property
    def head_shape(self) -> Tuple[int, int]:
        nx, ny = self.grid_shape
        return nx // BACKBONE_STRIDE, ny // BACKBONE_STRIDE

    @property
    def num_anchor_headings(self) -> int:
        return len(self.anchor_headings)

    def anchors(self) -> np.ndarray:
        hx, hy = self.head_shape
        cx = self.x_range[0] + (np.arange(hx) + 0.5) * self.head_cell
        cy = self.y_range[0] + (np.arange(hy) + 0.5) * self.head_cell
        return make_anchors(cx, cy, self.anchor_size, self.anchor_headings)


@dataclass
class DetectorParams:
    """Named weights; iteration order is sorted by name."""
    tensors: Dict[str, Value] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Value:
        return self.tensors[name]

    def __setitem__(self, name: str, value: Value) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> List[str]:
        return sorted(self.tensors)

    def values(self) -> List[Value]:
        return [self.tensors[n] for n in self.names()]

    def leaves(self) -> "DetectorParams":
        """Gradient-tracking copies"""
        return DetectorParams({n: Value(v.data.copy(), requires_grad=True) for n, v in self.tensors.items()})

    def frozen(self) -> "DetectorParams":
        """Constant view for attacks: same data, no gradients into the weights"""
        return DetectorParams({n: v.detach() for n, v in self.tensors.items()})

    def copy(self) -> "DetectorParams":
        return DetectorParams({n: Value(v.data.copy(), requires_grad=v.requires_grad)
                               for n, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v.data)) for v in self.tensors.values())

    def equals(self, other: "DetectorParams") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[n].data, other[n].data) for n in self.names())


def _conv_init(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    fan_in = in_c * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, k, k))


def init_params(cfg: DetectorConfig, rng: Optional[np.random.Generator] = None) -> DetectorParams:
    """He-initialised weights for every layer; the score bias starts at the 1% prior."""
    rng = rng or np.random.default_rng(cfg.seed)
    p: Dict[str, np.ndarray] = {}
    s = cfg.height_slices
    b0, b1 = cfg.bev_channels
    p["bev.conv1.w"], p["bev.conv1.b"] = _conv_init(rng, b0, s, 3), np.zeros(b0)
    p["bev.conv2.w"], p["bev.conv2.b"] = _conv_init(rng, b0, b0, 3), np.zeros(b0)
    p["bev.conv3.w"], p["bev.conv3.b"] = _conv_init(rng, b1, b0, 3), np.zeros(b1)
    head_in = b1
    if cfg.use_image:
        i0, i1 = cfg.image_channels
        p["img.stem.w"], p["img.stem.b"] = _conv_init(rng, i0, 3, 3), np.zeros(i0)
        p["img.stage.w"], p["img.stage.b"] = _conv_init(rng, i1, i0, 3), np.zeros(i1)
        p["img.res1.w"], p["img.res1.b"] = _conv_init(rng, i1, i1, 3), np.zeros(i1)
        p["img.res2.w"], p["img.res2.b"] = _conv_init(rng, i1, i1, 3) * 0.1, np.zeros(i1)
        head_in += i1
        if cfg.denoise:
            from ..defense.denoise import init_nonlocal_params
            p.update(init_nonlocal_params(i1, rng, prefix="img.nl"))
    a = cfg.num_anchor_headings
    p["head.conv.w"], p["head.conv.b"] = _conv_init(rng, cfg.head_channels, head_in, 3), np.zeros(cfg.head_channels)
    p["head.cls.w"] = _conv_init(rng, a, cfg.head_channels, 1) * 0.01
    p["head.cls.b"] = np.full(a, -np.log(99.0))
    p["head.reg.w"] = _conv_init(rng, 5 * a, cfg.head_channels, 1) * 0.01
    p["head.reg.b"] = np.zeros(5 * a)
    return DetectorParams({name: Value(arr, requires_grad=True) for name, arr in p.items()})


def zero_params(cfg: DetectorConfig) -> DetectorParams:
    params = init_params(cfg, np.random.default_rng(0))
    return DetectorParams({n: Value(np.zeros_like(v.data), requires_grad=True) for n, v in params.tensors.items()})


def voxelize_bev(sweep: LidarSweep, cfg: DetectorConfig) -> Value:
    """Soft occupancy (height_slices, Nx, Ny): bilinear in x/y around cell centres, hard in z."""
    nx, ny = cfg.grid_shape
    slices = cfg.height_slices
    size = slices * nx * ny
    if len(sweep) == 0:
        return Value(np.zeros((slices, nx, ny)))
    pts = sweep.points
    xyz = pts.data
    dz = (cfg.z_range[1] - cfg.z_range[0]) / slices
    sl = np.floor((xyz[:, 2] - cfg.z_range[0]) / dz).astype(np.int64)
    gx_np = (xyz[:, 0] - cfg.x_range[0]) / cfg.cell_size - 0.5
    gy_np = (xyz[:, 1] - cfg.y_range[0]) / cfg.cell_size - 0.5
    keep = (sl >= 0) & (sl < slices) & (gx_np > -1.0) & (gx_np < nx) & (gy_np > -1.0) & (gy_np < ny)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return Value(np.zeros((slices, nx, ny)))
    sel = T.index(pts, idx)
    gx = (sel[:, 0] - cfg.x_range[0]) / cfg.cell_size - 0.5
    gy = (sel[:, 1] - cfg.y_range[0]) / cfg.cell_size - 0.5
    i0 = np.floor(gx.data).astype(np.int64)
    j0 = np.floor(gy.data).astype(np.int64)
    fx, fy = gx - i0, gy - j0
    base = sl[idx] * nx * ny
    total = None
    for di, dj, w in ((0, 0, (1.0 - fx) * (1.0 - fy)), (1, 0, fx * (1.0 - fy)),
                      (0, 1, (1.0 - fx) * fy), (1, 1, fx * fy)):
        ci, cj = i0 + di, j0 + dj
        ok = np.flatnonzero((ci >= 0) & (ci < nx) & (cj >= 0) & (cj < ny))
        if ok.size == 0:
            continue
        part = T.scatter_add(T.index(w, ok), base[ok] + ci[ok] * ny + cj[ok], size)
        total = part if total is None else total + part
    if total is None:
        return Value(np.zeros((slices, nx, ny)))
    return T.reshape(total, (slices, nx, ny))


def bev_features(occupancy: Value, params: DetectorParams) -> Value:
    x = T.relu(T.conv2d(occupancy, params["bev.conv1.w"], params["bev.conv1.b"], padding=1))
    x = T.relu(T.conv2d(x, params["bev.conv2.w"], params["bev.conv2.b"], stride=2, padding=1))
    return T.relu(T.conv2d(x, params["bev.conv3.w"], params["bev.conv3.b"], stride=2, padding=1))


def image_features(image: CameraImage, params: DetectorParams, cfg: DetectorConfig) -> Value:
    """Residual conv stack at 1/4 resolution: (C_img, H/4, W/4)."""
    if tuple(image.shape) != tuple(cfg.image_size):
        raise ShapeError(f"Image size {image.shape} does not match detector input {cfg.image_size}")
    x = T.transpose(image.pixels, (2, 0, 1)) - 0.5
    x = T.relu(T.conv2d(x, params["img.stem.w"], params["img.stem.b"], stride=2, padding=1))
    x = T.relu(T.conv2d(x, params["img.stage.w"], params["img.stage.b"], stride=2, padding=1))
    r = T.relu(T.conv2d(x, params["img.res1.w"], params["img.res1.b"], padding=1))
    r = T.conv2d(r, params["img.res2.w"], params["img.res2.b"], padding=1)
    x = T.relu(x + r)
    if cfg.denoise:
        from ..defense.denoise import nonlocal_block
        x = nonlocal_block(x, params, prefix="img.nl", subsample=cfg.denoise_subsample)
    return x


def point_cells(xyz: np.ndarray, cfg: DetectorConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Flat head-grid cell per point and the mask of points inside the BEV range."""
    hx, hy = cfg.head_shape
    ci = np.floor((xyz[:, 0] - cfg.x_range[0]) / cfg.head_cell).astype(np.int64)
    cj = np.floor((xyz[:, 1] - cfg.y_range[0]) / cfg.head_cell).astype(np.int64)
    inside = (ci >= 0) & (ci < hx) & (cj >= 0) & (cj < hy)
    return ci * hy + cj, inside


def project_fuse(img_feats: Value, sweep: LidarSweep, cam: CameraModel, bev_feats: Value,
                 cfg: DetectorConfig) -> Value:
    """Concatenate BEV features with image features gathered through LiDAR points.

    Each point in the BEV range and in front of the camera samples the image
    feature map bilinearly at its projection and adds the sample to its BEV
    cell; samples outside the image read zero.
    """
    channels = img_feats.shape[0]
    hx, hy = cfg.head_shape
    if bev_feats.shape[1:] != (hx, hy):
        raise ShapeError(f"BEV features {bev_feats.shape} do not match head grid {(hx, hy)}")
    fused_img = Value(np.zeros((channels, hx, hy)))
    if len(sweep):
        cells, inside = point_cells(sweep.xyz, cfg)
        uv, _, valid = project_points(sweep.points, cam)
        idx = np.flatnonzero(inside & valid)
        if idx.size:
            coords = T.index(uv, idx) / float(IMAGE_STRIDE) - 0.5
            samples = T.bilinear_sample(img_feats, coords)
            per_cell = T.scatter_add(samples, cells[idx], hx * hy)
            fused_img = T.reshape(T.transpose(per_cell), (channels, hx, hy))
    return T.concat([bev_feats, fused_img], axis=0)


@dataclass
class Proposals:
    """Dense head output, one row per anchor."""
    logits: Value
    scores: Value
    regression: Value
    anchors: np.ndarray

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def decoded(self) -> np.ndarray:
        return decode_boxes(self.regression.data, self.anchors)

    def boxes(self, indices: Optional[np.ndarray] = None) -> List[DetectionBox]:
        decoded = self.decoded
        scores = np.clip(self.scores.data, 0.0, 1.0)
        indices = np.arange(len(decoded)) if indices is None else np.asarray(indices)
        return [DetectionBox(*decoded[i], score=float(scores[i])) for i in indices]

    def above(self, threshold: float) -> np.ndarray:
        return np.flatnonzero(self.scores.data > threshold)


def head(fused: Value, params: DetectorParams, cfg: DetectorConfig) -> Proposals:
    a = cfg.num_anchor_headings
    hx, hy = cfg.head_shape
    x = T.relu(T.conv2d(fused, params["head.conv.w"], params["head.conv.b"], padding=1))
    cls = T.conv2d(x, params["head.cls.w"], params["head.cls.b"])
    reg = T.conv2d(x, params["head.reg.w"], params["head.reg.b"])
    logits = T.reshape(T.transpose(cls, (1, 2, 0)), (-1,))
    regression = T.reshape(T.transpose(T.reshape(reg, (a, 5, hx, hy)), (2, 3, 0, 1)), (-1, 5))
    return Proposals(logits, T.sigmoid(logits), regression, cfg.anchors())


def detect(image: CameraImage, sweep: LidarSweep, params: DetectorParams, cfg: DetectorConfig,
           camera: CameraModel) -> Proposals:
    """Pre-NMS proposals for every anchor; differentiable w.r.t. inputs and weights."""
    bev = bev_features(voxelize_bev(sweep, cfg), params)
    if cfg.use_image:
        fused = project_fuse(image_features(image, params, cfg), sweep, camera, bev, cfg)
    else:
        fused = bev
    return head(fused, params, cfg)


def nms(boxes: List[DetectionBox], iou_threshold: float) -> List[DetectionBox]:
    """Greedy rotated NMS, highest score first."""
    order = sorted(boxes, key=lambda b: -b.score)
    kept: List[DetectionBox] = []
    for box in order:
        if all(rotated_iou(box, k) <= iou_threshold for k in kept):
            kept.append(box)
    return kept


def postprocess(proposals: Proposals, cfg: DetectorConfig,
                score_threshold: Optional[float] = None) -> List[DetectionBox]:
    """Final detections: score filter then rotated NMS."""
    threshold = cfg.score_threshold if score_threshold is None else score_threshold
    return nms(proposals.boxes(proposals.above(threshold)), cfg.nms_iou)
