"""Plain-array box utilities shared by matching, evaluation and metrics.

Boxes come in two layouts: absolute corner form (x, y, w, h) with (x, y)
the top-left corner, used by annotation files; and normalized center
form (cx, cy, w, h), used by predictions. Everything here is vectorized
over a trailing axis of 4.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def xywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    out = b.copy()
    out[..., 2] = b[..., 0] + b[..., 2]
    out[..., 3] = b[..., 1] + b[..., 3]
    return out


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2.0
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def iou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of paired boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def giou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise generalized IoU; raises on degenerate boxes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    if np.any(area_a <= 0) or np.any(area_b <= 0):
        raise ContractError("generalized IoU requires boxes with positive area")
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    lt_c = np.minimum(a[..., :2], b[..., :2])
    rb_c = np.maximum(a[..., 2:], b[..., 2:])
    wh_c = rb_c - lt_c
    enclosing = wh_c[..., 0] * wh_c[..., 1]
    return inter / union - (enclosing - union) / enclosing


def pair_min_iou(pred_h, pred_o, gt_h, gt_o) -> np.ndarray:
    """min(IoU of human boxes, IoU of object boxes) in xyxy form."""
    return np.minimum(iou_xyxy(pred_h, gt_h), iou_xyxy(pred_o, gt_o))
