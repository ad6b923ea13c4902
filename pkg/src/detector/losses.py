"""Detection task loss: focal classification plus smooth-L1 box regression."""
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..autodiff import tensor as T
from ..autodiff.tensor import Value
from ..evaluation.iou import iou_with_arrays
from .boxes import DetectionBox, boxes_to_array, encode_boxes
from .model import DetectorConfig, Proposals

logger = logging.getLogger(__name__)

SMOOTH_L1_BETA = 1.0 / 9.0


@dataclass
class AnchorAssignment:
    positive: np.ndarray
    negative: np.ndarray
    matched: np.ndarray
    max_iou: np.ndarray

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def assign_anchors(anchors: np.ndarray, ground_truth: Sequence[DetectionBox],
                   pos_iou: float, neg_iou: float) -> AnchorAssignment:
    """IoU-threshold labels; each truth's best anchor is forced positive."""
    n = len(anchors)
    if not ground_truth:
        return AnchorAssignment(np.zeros(n, dtype=bool), np.ones(n, dtype=bool),
                                np.full(n, -1), np.zeros(n))
    ious = np.stack([iou_with_arrays(anchors, gt) for gt in ground_truth], axis=1)
    matched = ious.argmax(axis=1)
    max_iou = ious.max(axis=1)
    positive = max_iou >= pos_iou
    for g in range(len(ground_truth)):
        best = int(ious[:, g].argmax())
        if ious[best, g] > 0.0:
            positive[best] = True
            matched[best] = g
    negative = (max_iou <= neg_iou) & ~positive
    return AnchorAssignment(positive, negative, matched, max_iou)


def focal_loss(logits: Value, labels: np.ndarray, alpha: float, gamma: float) -> Value:
    """Summed sigmoid focal loss over ``logits`` with 0/1 ``labels``."""
    p = T.sigmoid(logits)
    pos = alpha * T.power(1.0 - p, gamma) * T.softplus(-logits)
    neg = (1.0 - alpha) * T.power(p, gamma) * T.softplus(logits)
    return T.reduce_sum(T.where(labels.astype(bool), pos, neg))


def smooth_l1(diff: Value, beta: float = SMOOTH_L1_BETA) -> Value:
    absd = T.maximum(diff, -diff)
    return T.reduce_sum(T.where(absd.data < beta, 0.5 * diff * diff / beta, absd - 0.5 * beta))


def task_loss(proposals: Proposals, ground_truth: Sequence[DetectionBox], cfg: DetectorConfig) -> Value:
    """Focal loss on assigned anchors plus smooth-L1 on positives, both per positive anchor."""
    assign = assign_anchors(proposals.anchors, ground_truth, cfg.pos_iou, cfg.neg_iou)
    norm = float(max(1, assign.num_positive))
    cared = np.flatnonzero(assign.positive | assign.negative)
    cls = focal_loss(T.index(proposals.logits, cared), assign.positive[cared],
                     cfg.focal_alpha, cfg.focal_gamma)
    loss = cls / norm
    pos = np.flatnonzero(assign.positive)
    if pos.size:
        truth = boxes_to_array(ground_truth)[assign.matched[pos], :5]
        targets = encode_boxes(truth, proposals.anchors[pos])
        reg = smooth_l1(T.index(proposals.regression, pos) - targets)
        loss = loss + reg / norm
    return loss
