"""Adversarial objectives: suppress the host's proposals and promote false positives."""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Sequence, Tuple

import numpy as np

from ..autodiff import tensor as T
from ..autodiff.tensor import Value
from ..detector.boxes import DetectionBox
from ..detector.model import Proposals
from ..evaluation.iou import iou_with_arrays
from ..geometry.mesh import BoxConstraint
from ..utils.config import ConfigError, dataclass_from_dict

logger = logging.getLogger(__name__)

SCORE_EPS = 1e-7
MODALITIES = ("lidar", "image")


class AttackError(RuntimeError):
    """The attack cannot run with the given inputs"""
    pass


@dataclass
class AttackConfig:
    seed: int = 0
    lambda_fp: float = 1.0
    lambda_lap: float = 0.001
    lr_texture: float = 0.004
    lr_vertex: float = 0.001
    box: BoxConstraint = field(default_factory=BoxConstraint)
    target_modalities: FrozenSet[str] = frozenset(MODALITIES)
    steps: int = 500
    batch_size: int = 4
    relevance_score_min: float = 0.1
    relevance_requires_overlap: bool = True
    subdivisions: int = 2
    texture_res: int = 5
    init_radius: float = 0.3
    val_every: int = 50
    val_scenes: int = 8
    use_band_centroid: bool = True

    def __post_init__(self):
        if not isinstance(self.box, BoxConstraint):
            self.box = BoxConstraint(*self.box)
        if isinstance(self.target_modalities, str):
            self.target_modalities = [self.target_modalities]
        self.target_modalities = frozenset(self.target_modalities)
        unknown = self.target_modalities - set(MODALITIES)
        if unknown:
            raise ConfigError(f"Unknown target modalities {sorted(unknown)}; expected a subset of {MODALITIES}")
        for name in ("lambda_fp", "lambda_lap", "lr_texture", "lr_vertex", "relevance_score_min"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.steps <= 0 or self.batch_size <= 0:
            raise ConfigError(f"steps and batch_size must be positive, got {self.steps}, {self.batch_size}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AttackConfig":
        return dataclass_from_dict(cls, data)

    def to_dict(self) -> Dict[str, Any]:
        data = dict(self.__dict__)
        data["box"] = self.box.as_array().tolist()
        data["target_modalities"] = sorted(self.target_modalities)
        return data


def relevant_proposals(proposals: Proposals, host_box: DetectionBox, score_min: float = 0.1,
                       requires_overlap: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Indices of proposals scoring above ``score_min`` that overlap the host, and their IoUs."""
    candidates = proposals.above(score_min)
    ious = iou_with_arrays(proposals.decoded[candidates], host_box)
    keep = ious > 0.0 if requires_overlap else np.ones(len(candidates), dtype=bool)
    return candidates[keep], ious[keep]


def false_positive_candidates(proposals: Proposals, ground_truth: Sequence[DetectionBox],
                              score_min: float = 0.0) -> np.ndarray:
    """Proposals above ``score_min`` with zero IoU against every ground-truth box."""
    candidates = proposals.above(score_min)
    if not ground_truth:
        return candidates
    decoded = proposals.decoded[candidates]
    touches = np.zeros(len(candidates), dtype=bool)
    for gt in ground_truth:
        touches |= iou_with_arrays(decoded, gt) > 0.0
    return candidates[~touches]


def clip_scores(scores: Value) -> Value:
    saturated = int(np.sum(scores.data >= 1.0 - SCORE_EPS))
    if saturated:
        logger.warning(f"{saturated} proposal scores clipped to 1 - {SCORE_EPS:g}")
    return T.clamp(scores, SCORE_EPS, 1.0 - SCORE_EPS)


def loss_fn(scores: Value, ious: np.ndarray) -> Value:
    """Sum of -IoU * log(1 - score); IoU is a constant weight."""
    if scores.size == 0:
        return Value(0.0)
    weights = np.asarray(ious, dtype=np.float64)
    return T.reduce_sum(-weights * T.log(1.0 - clip_scores(scores)))


def loss_fp(scores: Value) -> Value:
    """Sum of log(1 - score) over false-positive candidates; minimising raises their scores."""
    if scores.size == 0:
        return Value(0.0)
    return T.reduce_sum(T.log(1.0 - clip_scores(scores)))
