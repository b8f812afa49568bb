"""Post-processing of head outputs into scored HOI triplets.

Each query contributes one candidate per verb, scored by the product of
its verb probability and its best object-class probability. The top
candidates by object confidence are kept, then near-duplicate triplets
of the same (object, verb) class are suppressed by a combined-IoU test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import cxcywh_to_xyxy, pair_min_iou
from .heads import HoiPrediction, _np_sigmoid


@dataclass
class ScoredTriplet:
    human_box: np.ndarray    # (4,) normalized cx, cy, w, h
    object_box: np.ndarray
    object_class: int
    verb: int
    score: float
    query: int

    def to_dict(self) -> dict:
        return {"hbox": [float(v) for v in self.human_box],
                "obox": [float(v) for v in self.object_box],
                "object": int(self.object_class),
                "verb": int(self.verb),
                "score": float(self.score),
                "query": int(self.query)}


def triplet_from_dict(d: dict) -> ScoredTriplet:
    return ScoredTriplet(
        human_box=np.asarray(d["hbox"], dtype=np.float64),
        object_box=np.asarray(d["obox"], dtype=np.float64),
        object_class=int(d["object"]), verb=int(d["verb"]),
        score=float(d["score"]), query=int(d.get("query", -1)))


def compose_triplets(pred: HoiPrediction, batch_idx: int = 0, top_k: int = 100,
                     iou_filter: float = 0.5,
                     score_threshold: float = 0.0) -> list[ScoredTriplet]:
    """Build the ranked triplet list for one image.

    Selection keeps the ``top_k`` (query, verb) candidates by object
    confidence; suppression then removes any triplet whose class matches
    a higher-scored survivor with min(IoU_h, IoU_o) above ``iou_filter``.
    Ties break on query then verb index, so the output is deterministic.
    """
    obj_prob = _np_sigmoid(pred.object_logits.data[batch_idx])
    verb_prob = _np_sigmoid(pred.verb_logits.data[batch_idx])
    bh = pred.human_boxes.data[batch_idx]
    bo = pred.object_boxes.data[batch_idx]
    n_q, num_v = verb_prob.shape

    obj_cls = obj_prob.argmax(axis=1)
    obj_score = obj_prob[np.arange(n_q), obj_cls]

    candidates = []
    for q in range(n_q):
        for v in range(num_v):
            score = float(verb_prob[q, v] * obj_score[q])
            if score > score_threshold:
                candidates.append(ScoredTriplet(
                    human_box=bh[q], object_box=bo[q],
                    object_class=int(obj_cls[q]), verb=v,
                    score=score, query=q))

    candidates.sort(key=lambda t: (-obj_score[t.query], -t.score, t.query, t.verb))
    candidates = candidates[:top_k]

    candidates.sort(key=lambda t: (-t.score, t.query, t.verb))
    kept: list[ScoredTriplet] = []
    for cand in candidates:
        duplicate = False
        for prev in kept:
            if (prev.object_class, prev.verb) != (cand.object_class, cand.verb):
                continue
            overlap = pair_min_iou(
                cxcywh_to_xyxy(cand.human_box), cxcywh_to_xyxy(cand.object_box),
                cxcywh_to_xyxy(prev.human_box), cxcywh_to_xyxy(prev.object_box))
            if overlap > iou_filter:
                duplicate = True
                break
        if not duplicate:
            kept.append(cand)
    return kept
