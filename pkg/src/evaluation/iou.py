"""Exact rotated-box IoU by convex polygon clipping."""
from typing import Sequence

import numpy as np

from ..detector.boxes import DetectionBox

AREA_EPS = 1e-12


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _side(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland–Hodgman: part of ``subject`` inside the convex CCW polygon ``clip``."""
    output = list(subject)
    for i in range(len(clip)):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % len(clip)]
        inputs, output = output, []
        for j in range(len(inputs)):
            cur, nxt = inputs[j], inputs[(j + 1) % len(inputs)]
            cur_in, nxt_in = _side(cur, a, b) >= 0, _side(nxt, a, b) >= 0
            if cur_in:
                output.append(cur)
            if cur_in != nxt_in:
                sc, sn = _side(cur, a, b), _side(nxt, a, b)
                t = sc / (sc - sn)
                output.append(cur + t * (nxt - cur))
    return np.array(output).reshape(-1, 2)


def intersection_area(a: DetectionBox, b: DetectionBox) -> float:
    return abs(polygon_area(clip_polygon(a.corners(), b.corners())))


def rotated_iou(a: DetectionBox, b: DetectionBox) -> float:
    """IoU in [0, 1]; zero-area boxes give 0."""
    area_a, area_b = a.area, b.area
    if area_a <= AREA_EPS or area_b <= AREA_EPS:
        return 0.0
    # circumscribed circles apart -> disjoint
    reach = 0.5 * (np.hypot(a.h, a.w) + np.hypot(b.h, b.w))
    if np.hypot(a.x - b.x, a.y - b.y) >= reach:
        return 0.0
    inter = intersection_area(a, b)
    union = area_a + area_b - inter
    if union <= AREA_EPS:
        return 0.0
    return float(np.clip(inter / union, 0.0, 1.0))


def iou_matrix(boxes_a: Sequence[DetectionBox], boxes_b: Sequence[DetectionBox]) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = rotated_iou(a, b)
    return out


def iou_with_arrays(boxes: np.ndarray, target: DetectionBox) -> np.ndarray:
    """IoU of each (x, y, h, w, alpha) row against one box, skipping far-apart rows."""
    boxes = np.asarray(boxes).reshape(-1, boxes.shape[-1] if np.ndim(boxes) > 1 else 5)
    out = np.zeros(len(boxes))
    reach = 0.5 * (np.hypot(boxes[:, 2], boxes[:, 3]) + np.hypot(target.h, target.w))
    near = np.flatnonzero(np.hypot(boxes[:, 0] - target.x, boxes[:, 1] - target.y) < reach)
    for i in near:
        row = boxes[i]
        if row[2] <= 0 or row[3] <= 0:
            continue
        out[i] = rotated_iou(DetectionBox(row[0], row[1], row[2], row[3], row[4]), target)
    return out
