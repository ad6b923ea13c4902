"""BEV boxes, anchors and the residual box coding used by the detection head."""
from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np

from ..geometry.mesh import normalize_angle


@dataclass(frozen=True)
class DetectionBox:
    """BEV box: centre (x, y), length ``h`` along the heading, width ``w``, heading ``alpha``."""
    x: float
    y: float
    h: float
    w: float
    alpha: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.h > 0 and self.w > 0):
            raise ValueError(f"Box extents must be positive, got h={self.h} w={self.w}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"Box score must lie in [0, 1], got {self.score}")
        object.__setattr__(self, "alpha", normalize_angle(self.alpha))

    @property
    def area(self) -> float:
        return self.h * self.w

    def corners(self) -> np.ndarray:
        """Counter-clockwise (4, 2) corners."""
        c, s = np.cos(self.alpha), np.sin(self.alpha)
        local = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]]) * [self.h, self.w]
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + [self.x, self.y]

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points)[..., :2] - [self.x, self.y]
        c, s = np.cos(self.alpha), np.sin(self.alpha)
        lx = pts[..., 0] * c + pts[..., 1] * s
        ly = -pts[..., 0] * s + pts[..., 1] * c
        return (np.abs(lx) <= self.h / 2) & (np.abs(ly) <= self.w / 2)

    def with_score(self, score: float) -> "DetectionBox":
        return DetectionBox(self.x, self.y, self.h, self.w, self.alpha, score)

    def to_list(self) -> List[float]:
        return [self.x, self.y, self.h, self.w, self.alpha, self.score]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "DetectionBox":
        score = values[5] if len(values) > 5 else 1.0
        return cls(float(values[0]), float(values[1]), float(values[2]), float(values[3]),
                   float(values[4]), float(score))


def boxes_to_array(boxes: Iterable[DetectionBox]) -> np.ndarray:
    """(K, 6) array of (x, y, h, w, alpha, score)."""
    rows = [b.to_list() for b in boxes]
    return np.array(rows, dtype=np.float64).reshape(-1, 6)


def array_to_boxes(arr: np.ndarray) -> List[DetectionBox]:
    """Rows of (x, y, h, w, alpha[, score])."""
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    return [DetectionBox.from_list(row) for row in arr]


def make_anchors(centers_x: np.ndarray, centers_y: np.ndarray, size: Sequence[float],
                 headings: Sequence[float]) -> np.ndarray:
    """Anchors (A_cells * n_headings, 5) ordered by cell row, cell column, then heading."""
    gx, gy = np.meshgrid(centers_x, centers_y, indexing="ij")
    cells = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    n_head = len(headings)
    anchors = np.zeros((len(cells), n_head, 5))
    anchors[:, :, 0] = cells[:, None, 0]
    anchors[:, :, 1] = cells[:, None, 1]
    anchors[:, :, 2] = size[0]
    anchors[:, :, 3] = size[1]
    anchors[:, :, 4] = np.asarray(headings)[None, :]
    return anchors.reshape(-1, 5)


def heading_residual(alpha: np.ndarray, anchor_alpha: np.ndarray) -> np.ndarray:
    """Heading difference folded into [-pi/2, pi/2); BEV boxes are symmetric under a half turn."""
    return np.mod(np.asarray(alpha) - anchor_alpha + np.pi / 2, np.pi) - np.pi / 2


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Residual targets (dx/d, dy/d, log h/ha, log w/wa, dalpha) with d the anchor diagonal."""
    diag = np.hypot(anchors[:, 2], anchors[:, 3])
    return np.stack([
        (boxes[:, 0] - anchors[:, 0]) / diag,
        (boxes[:, 1] - anchors[:, 1]) / diag,
        np.log(boxes[:, 2] / anchors[:, 2]),
        np.log(boxes[:, 3] / anchors[:, 3]),
        heading_residual(boxes[:, 4], anchors[:, 4]),
    ], axis=1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of ``encode_boxes``; returns (K, 5) boxes."""
    diag = np.hypot(anchors[:, 2], anchors[:, 3])
    return np.stack([
        deltas[:, 0] * diag + anchors[:, 0],
        deltas[:, 1] * diag + anchors[:, 1],
        np.exp(np.clip(deltas[:, 2], -5.0, 5.0)) * anchors[:, 2],
        np.exp(np.clip(deltas[:, 3], -5.0, 5.0)) * anchors[:, 3],
        deltas[:, 4] + anchors[:, 4],
    ], axis=1)
