"""Attack success rates, host recall and average precision."""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..detector.boxes import DetectionBox
from ..utils.config import ConfigError, dataclass_from_dict
from .iou import rotated_iou

logger = logging.getLogger(__name__)

AP_RECALL_POINTS = 41


class EvaluationError(ValueError):
    """Metric inputs are missing or inconsistent"""
    pass


@dataclass
class EvalConfig:
    detect_iou: float = 0.7
    fp_max_iou: float = 0.3
    recall_thresholds: Tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    ap_thresholds: Tuple[float, ...] = (0.5, 0.7)
    inclusive_threshold: bool = True
    workers: int = 1

    def __post_init__(self):
        self.recall_thresholds = tuple(float(t) for t in self.recall_thresholds)
        self.ap_thresholds = tuple(float(t) for t in self.ap_thresholds)
        if list(self.recall_thresholds) != sorted(self.recall_thresholds):
            raise ConfigError(f"recall_thresholds must be ascending, got {self.recall_thresholds}")
        for name in ("detect_iou", "fp_max_iou"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalConfig":
        return dataclass_from_dict(cls, data)


def passes(iou: float, threshold: float, inclusive: bool = True) -> bool:
    return iou >= threshold if inclusive else iou > threshold


def best_iou(boxes: Sequence[DetectionBox], target: DetectionBox) -> float:
    return max((rotated_iou(b, target) for b in boxes), default=0.0)


def is_false_positive(box: DetectionBox, ground_truth: Sequence[DetectionBox],
                      pre_detections: Sequence[DetectionBox], fp_max_iou: float = 0.3) -> bool:
    """Far from every truth box and disjoint from every detection made before the attack."""
    if best_iou(ground_truth, box) >= fp_max_iou:
        return False
    return all(rotated_iou(box, pre) <= 0.0 for pre in pre_detections)


@dataclass
class EvalRecord:
    """Before/after bookkeeping for one attack sample (scene, host)."""
    scene_index: int
    host: int
    host_box: DetectionBox
    ground_truth: List[DetectionBox]
    pre_detections: List[DetectionBox]
    post_detections: List[DetectionBox]
    detected_before: bool = False
    detected_after: bool = False
    false_positives: List[int] = field(default_factory=list)
    fp_distances: List[float] = field(default_factory=list)

    @classmethod
    def from_detections(cls, scene_index: int, host: int, host_box: DetectionBox,
                        ground_truth: Sequence[DetectionBox], pre: Sequence[DetectionBox],
                        post: Sequence[DetectionBox], cfg: Optional[EvalConfig] = None) -> "EvalRecord":
        record = cls(scene_index, host, host_box, list(ground_truth), list(pre), list(post))
        return record.derive_flags(cfg or EvalConfig())

    def derive_flags(self, cfg: EvalConfig) -> "EvalRecord":
        """Recompute every flag from the stored detections."""
        self.detected_before = passes(best_iou(self.pre_detections, self.host_box), cfg.detect_iou,
                                      cfg.inclusive_threshold)
        self.detected_after = passes(best_iou(self.post_detections, self.host_box), cfg.detect_iou,
                                     cfg.inclusive_threshold)
        self.false_positives = [i for i, box in enumerate(self.post_detections)
                                if is_false_positive(box, self.ground_truth, self.pre_detections, cfg.fp_max_iou)]
        self.fp_distances = [float(np.hypot(self.post_detections[i].x - self.host_box.x,
                                            self.post_detections[i].y - self.host_box.y))
                             for i in self.false_positives]
        return self

    @property
    def false_negative(self) -> bool:
        return self.detected_before and not self.detected_after

    @property
    def has_false_positive(self) -> bool:
        return bool(self.false_positives)

    @property
    def post_host_iou(self) -> float:
        return best_iou(self.post_detections, self.host_box)

    def to_dict(self) -> dict:
        return {
            "scene_index": self.scene_index,
            "host": self.host,
            "host_box": self.host_box.to_list(),
            "ground_truth": [b.to_list() for b in self.ground_truth],
            "pre_detections": [b.to_list() for b in self.pre_detections],
            "post_detections": [b.to_list() for b in self.post_detections],
            "detected_before": self.detected_before,
            "detected_after": self.detected_after,
            "false_positives": list(self.false_positives),
            "fp_distances": list(self.fp_distances),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalRecord":
        return cls(
            scene_index=int(data["scene_index"]),
            host=int(data["host"]),
            host_box=DetectionBox.from_list(data["host_box"]),
            ground_truth=[DetectionBox.from_list(b) for b in data["ground_truth"]],
            pre_detections=[DetectionBox.from_list(b) for b in data["pre_detections"]],
            post_detections=[DetectionBox.from_list(b) for b in data["post_detections"]],
            detected_before=bool(data["detected_before"]),
            detected_after=bool(data["detected_after"]),
            false_positives=[int(i) for i in data["false_positives"]],
            fp_distances=[float(d) for d in data["fp_distances"]],
        )


def recall_curve(records: Sequence[EvalRecord], iou_thresholds: Sequence[float]) -> List[Tuple[float, float]]:
    """Fraction of hosts with a post-attack detection at IoU >= t, per threshold."""
    if not records:
        raise EvaluationError("recall_curve needs at least one record")
    thresholds = [float(t) for t in iou_thresholds]
    if thresholds != sorted(thresholds):
        raise EvaluationError(f"IoU thresholds must be ascending, got {thresholds}")
    ious = np.array([r.post_host_iou for r in records])
    return [(t, float(np.mean(ious >= t))) for t in thresholds]


@dataclass
class AttackSuccessRates:
    """Percentages; None where the denominator is zero."""
    fn_asr: Optional[float]
    fp_asr: Optional[float]
    asr: Optional[float]
    detected_before: int
    samples: int

    def as_row(self) -> List[Optional[float]]:
        return [self.fn_asr, self.fp_asr, self.asr]


def _percent(numerator: int, denominator: int, name: str) -> Optional[float]:
    if denominator == 0:
        logger.warning(f"{name} is undefined: zero denominator")
        return None
    return 100.0 * numerator / denominator


def attack_success_rates(records: Sequence[EvalRecord]) -> AttackSuccessRates:
    detected = [r for r in records if r.detected_before]
    fn = sum(r.false_negative for r in detected)
    fp = sum(r.has_false_positive for r in records)
    either = sum(r.false_negative or r.has_false_positive for r in records)
    return AttackSuccessRates(
        fn_asr=_percent(fn, len(detected), "FN ASR"),
        fp_asr=_percent(fp, len(records), "FP ASR"),
        asr=_percent(either, len(records), "ASR"),
        detected_before=len(detected),
        samples=len(records),
    )


def average_precision(detections: Sequence[Sequence[DetectionBox]], ground_truth: Sequence[Sequence[DetectionBox]],
                      iou_threshold: float, inclusive: bool = True) -> Optional[float]:
    """41-point interpolated AP over frames with greedy score-ordered matching.

    ``detections[i]`` and ``ground_truth[i]`` belong to frame ``i``.
    """
    if len(detections) != len(ground_truth):
        raise EvaluationError(f"{len(detections)} detection frames vs {len(ground_truth)} truth frames")
    total_truth = sum(len(g) for g in ground_truth)
    if total_truth == 0:
        logger.warning("AP is undefined without ground truth")
        return None
    flat = [(box.score, frame, box) for frame, boxes in enumerate(detections) for box in boxes]
    if not flat:
        return 0.0
    flat.sort(key=lambda item: -item[0])
    taken = [np.zeros(len(g), dtype=bool) for g in ground_truth]
    tp = np.zeros(len(flat))
    for k, (_, frame, box) in enumerate(flat):
        truths = ground_truth[frame]
        best, best_j = -1.0, -1
        for j, gt in enumerate(truths):
            if taken[frame][j]:
                continue
            iou = rotated_iou(box, gt)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and passes(best, iou_threshold, inclusive):
            taken[frame][best_j] = True
            tp[k] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / total_truth
    precision = cum_tp / np.arange(1, len(flat) + 1)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, AP_RECALL_POINTS):
        reach = precision[recall >= r - 1e-12]
        ap += reach.max() if reach.size else 0.0
    return float(ap / AP_RECALL_POINTS)


def summarize(records: Sequence[EvalRecord], cfg: EvalConfig) -> Dict[str, Any]:
    """Aggregate table for one evaluated attack."""
    rates = attack_success_rates(records)
    distances = [d for r in records for d in r.fp_distances]
    return {
        "samples": rates.samples,
        "detected_before": rates.detected_before,
        "fn_asr": rates.fn_asr,
        "fp_asr": rates.fp_asr,
        "asr": rates.asr,
        "recall": recall_curve(records, cfg.recall_thresholds) if records else [],
        "fp_distance_mean": float(np.mean(distances)) if distances else None,
        "fp_distance_max": float(np.max(distances)) if distances else None,
    }
