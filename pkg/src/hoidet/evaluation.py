"""Role mean-average-precision evaluation.

A prediction is a true positive when its (object class, verb) matches a
ground truth in the same image and min(IoU of the human boxes, IoU of
the object boxes) exceeds 0.5. Each ground truth is consumed at most
once, greedily in descending prediction score. Per-class AP integrates
the precision/recall curve (all-point interpolation by default,
11-point as an option); reported aggregates are unweighted means over
the Full / Rare / Non-Rare class sets.

Two settings: "default" scores each class over every image; "known"
restricts each class to images whose ground truth contains that class's
object category.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import cxcywh_to_xyxy, pair_min_iou
from .data import HoiAnnotation
from .errors import ConfigError, DataError
from .inference import ScoredTriplet, triplet_from_dict

IOU_THRESHOLD = 0.5


@dataclass
class EvalReport:
    setting: str                                   # "default" | "known"
    per_class: dict[tuple[int, int], float]        # (object, verb) -> AP
    num_gt: dict[tuple[int, int], int]
    rare_classes: set[tuple[int, int]] = field(default_factory=set)

    @property
    def full_map(self) -> float:
        return _mean([ap for ap in self.per_class.values()])

    @property
    def rare_map(self) -> float:
        return _mean([ap for cls, ap in self.per_class.items() if cls in self.rare_classes])

    @property
    def non_rare_map(self) -> float:
        return _mean([ap for cls, ap in self.per_class.items()
                      if cls not in self.rare_classes])

    def to_dict(self) -> dict:
        return {
            "setting": self.setting,
            "full_map": self.full_map,
            "rare_map": self.rare_map,
            "non_rare_map": self.non_rare_map,
            "classes": [
                {"object": o, "verb": v, "ap": ap, "num_gt": self.num_gt[(o, v)],
                 "set": "rare" if (o, v) in self.rare_classes else "non-rare"}
                for (o, v), ap in sorted(self.per_class.items())
            ],
        }

    def to_text(self) -> str:
        lines = [f"setting: {self.setting}",
                 f"{'class':>12} {'ap':>10} {'num_gt':>7}  set",
                 "-" * 40]
        for (o, v), ap in sorted(self.per_class.items()):
            tag = "rare" if (o, v) in self.rare_classes else "non-rare"
            lines.append(f"{f'({o},{v})':>12} {ap:>10.6f} {self.num_gt[(o, v)]:>7}  {tag}")
        lines += ["-" * 40,
                  f"full mAP:     {self.full_map:.6f}",
                  f"rare mAP:     {self.rare_map:.6f}",
                  f"non-rare mAP: {self.non_rare_map:.6f}"]
        return "\n".join(lines) + "\n"


def _mean(vals) -> float:
    return float(np.mean(vals)) if vals else 0.0


def ap_from_ranked(flags, num_gt: int, interpolation: str = "all") -> float:
    """AP of an ordered true/false-positive list.

    ``flags`` is ordered by descending score. All-point interpolation
    sums recall steps times the running max precision to the right;
    11-point averages the interpolated precision at recalls 0, 0.1, ...
    """
    if interpolation not in ("all", "11point"):
        raise ConfigError(f"unknown interpolation {interpolation!r}")
    if num_gt <= 0:
        return 0.0
    flags = np.asarray(list(flags), dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)

    if interpolation == "11point":
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t
            ap += (precision[mask].max() if mask.any() else 0.0) / 11.0
        return float(ap)

    # all-point: running max of precision from the right, then sum
    # precision at each recall step
    best = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for i in range(flags.size):
        if flags[i]:
            ap += (recall[i] - prev_recall) * best[i]
            prev_recall = recall[i]
    return float(ap)


def _class_of(gt: HoiAnnotation) -> list[tuple[int, int]]:
    return [(int(gt.object_class), int(v)) for v in np.flatnonzero(gt.verb_vector)]


def evaluate_role_map(preds_by_image: dict[int, list[ScoredTriplet]],
                      gts_by_image: dict[int, list[HoiAnnotation]],
                      rare_classes: set[tuple[int, int]] | None = None,
                      setting: str = "default",
                      interpolation: str = "all") -> EvalReport:
    if setting not in ("default", "known"):
        raise ConfigError(f"unknown setting {setting!r}")

    # ground-truth bookkeeping per class
    num_gt: dict[tuple[int, int], int] = {}
    images_with_object: dict[int, set] = {}
    for image_id, gts in gts_by_image.items():
        for gt in gts:
            images_with_object.setdefault(gt.object_class, set()).add(image_id)
            for cls in _class_of(gt):
                num_gt[cls] = num_gt.get(cls, 0) + 1

    # rank all predictions per class: score desc, then image id, then query
    by_class: dict[tuple[int, int], list[tuple[int, ScoredTriplet]]] = {}
    for image_id in sorted(preds_by_image):
        for t in preds_by_image[image_id]:
            by_class.setdefault((t.object_class, t.verb), []).append((image_id, t))

    per_class_ap: dict[tuple[int, int], float] = {}
    for cls in sorted(num_gt):
        entries = by_class.get(cls, [])
        if setting == "known":
            eligible = images_with_object.get(cls[0], set())
            entries = [(i, t) for i, t in entries if i in eligible]
        entries.sort(key=lambda it: (-it[1].score, it[0], it[1].query))

        matched: dict[int, set] = {}
        flags = []
        for image_id, t in entries:
            gts = gts_by_image.get(image_id, [])
            used = matched.setdefault(image_id, set())
            best_iou = 0.0
            best_gt = -1
            for j, gt in enumerate(gts):
                if j in used or cls not in _class_of(gt):
                    continue
                overlap = float(pair_min_iou(
                    cxcywh_to_xyxy(t.human_box), cxcywh_to_xyxy(t.object_box),
                    cxcywh_to_xyxy(gt.human_box), cxcywh_to_xyxy(gt.object_box)))
                if overlap > best_iou:
                    best_iou = overlap
                    best_gt = j
            if best_gt >= 0 and best_iou > IOU_THRESHOLD:
                used.add(best_gt)
                flags.append(True)
            else:
                flags.append(False)
        per_class_ap[cls] = ap_from_ranked(flags, num_gt[cls], interpolation)

    return EvalReport(setting=setting, per_class=per_class_ap, num_gt=num_gt,
                      rare_classes=rare_classes or set())


def pair_is_tp(pred: ScoredTriplet, gt: HoiAnnotation) -> bool:
    """min-IoU rule for a same-class pair, strict at the threshold."""
    overlap = pair_min_iou(
        cxcywh_to_xyxy(pred.human_box), cxcywh_to_xyxy(pred.object_box),
        cxcywh_to_xyxy(gt.human_box), cxcywh_to_xyxy(gt.object_box))
    return bool(overlap > IOU_THRESHOLD)


def rare_classes_from_counts(counts: dict[tuple[int, int], int],
                             threshold: int = 10) -> set[tuple[int, int]]:
    """Classes with fewer than ``threshold`` training instances."""
    return {cls for cls, n in counts.items() if n < threshold}


# ---------------------------------------------------------------------------
# file formats


def predictions_to_doc(preds_by_image: dict[int, list[ScoredTriplet]]) -> list:
    return [{"image_id": image_id,
             "triplets": [t.to_dict() for t in preds_by_image[image_id]]}
            for image_id in sorted(preds_by_image)]


def predictions_from_doc(doc) -> dict[int, list[ScoredTriplet]]:
    out: dict[int, list[ScoredTriplet]] = {}
    for rec in doc:
        out[int(rec["image_id"])] = [triplet_from_dict(d) for d in rec["triplets"]]
    return out


def ground_truth_to_doc(gts_by_image: dict[int, list[HoiAnnotation]]) -> list:
    return [{
        "image_id": image_id,
        "triplets": [
            {"hbox": [float(v) for v in gt.human_box],
             "obox": [float(v) for v in gt.object_box],
             "object": int(gt.object_class),
             "verbs": [int(v) for v in np.flatnonzero(gt.verb_vector)]}
            for gt in gts_by_image[image_id]
        ],
    } for image_id in sorted(gts_by_image)]


def ground_truth_from_doc(doc, num_verbs: int) -> dict[int, list[HoiAnnotation]]:
    out: dict[int, list[HoiAnnotation]] = {}
    for rec in doc:
        gts = []
        for d in rec["triplets"]:
            verbs = d["verbs"]
            if not verbs:
                raise DataError(f"image {rec['image_id']}: ground truth with no verbs")
            vec = np.zeros(num_verbs)
            vec[verbs] = 1.0
            gts.append(HoiAnnotation(
                human_box=np.asarray(d["hbox"], dtype=np.float64),
                object_box=np.asarray(d["obox"], dtype=np.float64),
                object_class=int(d["object"]), verb_vector=vec))
        out[int(rec["image_id"])] = gts
    return out


def write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")
