"""Detection head and training losses.

The head maps HOI embeddings to <human box, object box, object logits,
verb logits> with the initial anchor as the base point for both box
centers. Training matches predictions to ground truths with the
Hungarian algorithm over a weighted cost and applies focal, L1 and
generalized-IoU terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .boxes import cxcywh_to_xyxy, giou_xyxy
from .config import RunConfig
from .data import HoiAnnotation
from .errors import CapacityError, ContractError
from .params import ParamStore
from .tensor import Tensor


@dataclass
class HoiPrediction:
    human_boxes: Tensor    # (B, N_q, 4) normalized cx, cy, w, h
    object_boxes: Tensor   # (B, N_q, 4)
    object_logits: Tensor  # (B, N_q, num_o)
    verb_logits: Tensor    # (B, N_q, num_v)


@dataclass
class Matching:
    """prediction-index/ground-truth-index pairs for one image; every
    ground truth appears exactly once."""

    pred_idx: np.ndarray
    gt_idx: np.ndarray


class MlpHead:
    """Three linear layers with relus between them."""

    def __init__(self, store: ParamStore, name: str, d: int, d_out: int):
        self.l1 = store.linear(f"{name}.l1", d, d)
        self.l2 = store.linear(f"{name}.l2", d, d)
        self.l3 = store.linear(f"{name}.l3", d, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.l3(T.relu(self.l2(T.relu(self.l1(x)))))


class DetectionHead:
    def __init__(self, store: ParamStore, cfg: RunConfig):
        d = cfg.model_dim
        self.human_box = MlpHead(store, "head.human_box", d, 4)
        self.object_box = MlpHead(store, "head.object_box", d, 4)
        self.object_class = store.linear("head.object_class", d, cfg.num_objects)
        self.verb_class = store.linear("head.verb_class", d, cfg.num_verbs)

    def __call__(self, embeddings: Tensor, anchors: Tensor) -> HoiPrediction:
        """embeddings: (B, N_q, C_d); anchors: (N_q, 2) in (0, 1)."""
        anchor_logit = T.log(anchors) - T.log(Tensor(1.0) - anchors)
        return HoiPrediction(
            human_boxes=self._boxes(self.human_box(embeddings), anchor_logit),
            object_boxes=self._boxes(self.object_box(embeddings), anchor_logit),
            object_logits=self.object_class(embeddings),
            verb_logits=self.verb_class(embeddings))

    @staticmethod
    def _boxes(raw: Tensor, anchor_logit: Tensor) -> Tensor:
        # anchor added to the center outputs in logit space: a zero head
        # output puts the center exactly on the anchor
        centers = T.sigmoid(raw[..., 0:2] + anchor_logit)
        sizes = T.sigmoid(raw[..., 2:4])
        return T.concat([centers, sizes], axis=-1)


# ---------------------------------------------------------------------------
# differentiable box terms


def giou(boxes_a: Tensor, boxes_b: Tensor) -> Tensor:
    """Generalized IoU of paired (..., 4) center-form boxes, in (-1, 1]."""
    if np.any(boxes_a.data[..., 2:] <= 0) or np.any(boxes_b.data[..., 2:] <= 0):
        raise ContractError("generalized IoU requires positive box sizes")
    a1 = _to_corners(boxes_a)
    b1 = _to_corners(boxes_b)
    area_a = (a1[..., 2] - a1[..., 0]) * (a1[..., 3] - a1[..., 1])
    area_b = (b1[..., 2] - b1[..., 0]) * (b1[..., 3] - b1[..., 1])
    lt = T.maximum(a1[..., 0:2], b1[..., 0:2])
    rb = T.minimum(a1[..., 2:4], b1[..., 2:4])
    wh = T.relu(rb - lt)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    lt_c = T.minimum(a1[..., 0:2], b1[..., 0:2])
    rb_c = T.maximum(a1[..., 2:4], b1[..., 2:4])
    enclosing = (rb_c[..., 0] - lt_c[..., 0]) * (rb_c[..., 1] - lt_c[..., 1])
    return inter / union - (enclosing - union) / enclosing


def _to_corners(b: Tensor) -> Tensor:
    half = b[..., 2:4] * 0.5
    return T.concat([b[..., 0:2] - half, b[..., 0:2] + half], axis=-1)


# ---------------------------------------------------------------------------
# focal losses


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha: float | None = 0.25,
                       gamma: float = 2.0) -> Tensor:
    """Mean of -alpha_t (1 - p_t)^gamma log(p_t) over all elements, with
    alpha_t = alpha for positives and 1 - alpha for negatives. Pass
    ``alpha=None`` to drop the alpha weighting entirely."""
    t = Tensor(np.asarray(targets, dtype=np.float64))
    p = T.sigmoid(logits)
    p_t = p * t + (Tensor(1.0) - p) * (Tensor(1.0) - t)
    log_p_t = t * T.log_sigmoid(logits) + (Tensor(1.0) - t) * T.log_sigmoid(-logits)
    focal = T.power(Tensor(1.0) - p_t, gamma) * (-log_p_t)
    if alpha is not None:
        alpha_t = Tensor(alpha * np.asarray(targets) + (1.0 - alpha) * (1.0 - np.asarray(targets)))
        focal = alpha_t * focal
    return T.reduce_mean(focal)


def modified_focal_loss(logits: Tensor, targets: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Penalty-reduced focal loss on hard {0,1} targets: with no soft
    negatives the reduction term is 1, leaving plain focal with no alpha."""
    return sigmoid_focal_loss(logits, targets, alpha=None, gamma=gamma)


# ---------------------------------------------------------------------------
# matching


def match_cost(pred: HoiPrediction, batch_idx: int, gts: list[HoiAnnotation],
               cfg: RunConfig) -> np.ndarray:
    """(N_q, #GT) matching cost mirroring the loss terms: object-class
    probability gap, mean positive-verb probability gap, and L1 + GIoU
    distances for both boxes."""
    n_q = pred.human_boxes.shape[1]
    if len(gts) > n_q:
        raise CapacityError(f"{len(gts)} ground truths exceed {n_q} queries")
    if not gts:
        return np.zeros((n_q, 0))

    obj_prob = _np_sigmoid(pred.object_logits.data[batch_idx])
    verb_prob = _np_sigmoid(pred.verb_logits.data[batch_idx])
    bh = pred.human_boxes.data[batch_idx]
    bo = pred.object_boxes.data[batch_idx]

    cost = np.zeros((n_q, len(gts)))
    for j, gt in enumerate(gts):
        cost[:, j] += cfg.lambda_obj * (1.0 - obj_prob[:, gt.object_class])
        pos = gt.verb_vector > 0
        cost[:, j] += cfg.lambda_verb * (1.0 - verb_prob[:, pos].mean(axis=1))
        for pred_box, gt_box in ((bh, gt.human_box), (bo, gt.object_box)):
            cost[:, j] += cfg.lambda_box * np.abs(pred_box - gt_box).sum(axis=1)
            cost[:, j] += cfg.lambda_giou * (1.0 - giou_xyxy(
                cxcywh_to_xyxy(pred_box), cxcywh_to_xyxy(gt_box[None])))
    return cost


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def hungarian_match(costs: np.ndarray) -> Matching:
    """Minimum-total-cost assignment covering every ground-truth column."""
    costs = np.asarray(costs, dtype=np.float64)
    if not np.isfinite(costs).all():
        raise ContractError("cost matrix contains non-finite entries")
    if costs.shape[1] > costs.shape[0]:
        raise CapacityError(f"more ground truths than predictions: {costs.shape}")
    rows, cols = linear_sum_assignment(costs)
    order = np.argsort(cols)
    return Matching(pred_idx=rows[order], gt_idx=cols[order])


# ---------------------------------------------------------------------------
# composite loss


def composite_loss(pred: HoiPrediction, gts_per_image: list[list[HoiAnnotation]],
                   matchings: list[Matching], cfg: RunConfig) -> tuple[Tensor, dict]:
    """Weighted sum of classification and matched-box terms.

    Classification runs over every query, with all-zero targets for
    unmatched queries; box terms average over matched pairs only.
    Returns the scalar loss and a float breakdown per term.
    """
    batch, n_q, num_o = pred.object_logits.shape
    num_v = pred.verb_logits.shape[-1]

    obj_targets = np.zeros((batch, n_q, num_o))
    verb_targets = np.zeros((batch, n_q, num_v))
    rows, cols = [], []
    gt_h, gt_o = [], []
    for b, (gts, matching) in enumerate(zip(gts_per_image, matchings)):
        for q, g in zip(matching.pred_idx, matching.gt_idx):
            gt = gts[g]
            obj_targets[b, q, gt.object_class] = 1.0
            verb_targets[b, q] = gt.verb_vector
            rows.append(b)
            cols.append(q)
            gt_h.append(gt.human_box)
            gt_o.append(gt.object_box)

    loss_obj = sigmoid_focal_loss(pred.object_logits, obj_targets)
    loss_verb = modified_focal_loss(pred.verb_logits, verb_targets)

    n_matched = len(rows)
    if n_matched:
        rows_a = np.asarray(rows)
        cols_a = np.asarray(cols)
        terms = {}
        for key, boxes, gt_stack in (("h", pred.human_boxes, np.stack(gt_h)),
                                     ("o", pred.object_boxes, np.stack(gt_o))):
            matched = T.take_pairs(boxes, rows_a, cols_a)
            gt_t = Tensor(gt_stack)
            terms[f"l1_{key}"] = T.reduce_sum(T.absolute(matched - gt_t)) * (1.0 / n_matched)
            terms[f"giou_{key}"] = T.reduce_sum(Tensor(1.0) - giou(matched, gt_t)) * (1.0 / n_matched)
        loss_box = terms["l1_h"] + terms["l1_o"]
        loss_giou = terms["giou_h"] + terms["giou_o"]
    else:
        loss_box = Tensor(0.0)
        loss_giou = Tensor(0.0)

    total = (cfg.lambda_obj * loss_obj + cfg.lambda_verb * loss_verb
             + cfg.lambda_box * loss_box + cfg.lambda_giou * loss_giou)
    breakdown = {
        "total": total.item(),
        "loss_obj": loss_obj.item(),
        "loss_verb": loss_verb.item(),
        "loss_box": loss_box.item(),
        "loss_giou": loss_giou.item(),
    }
    return total, breakdown


def match_batch(pred: HoiPrediction, gts_per_image: list[list[HoiAnnotation]],
                cfg: RunConfig) -> list[Matching]:
    return [hungarian_match(match_cost(pred, b, gts, cfg))
            for b, gts in enumerate(gts_per_image)]
