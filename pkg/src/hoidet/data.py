"""Annotation records, file I/O, difficulty-stratified splits, and the
synthetic scene generator used for desk-scale training.

The on-disk annotation document is::

    {"images": [{"id": int, "width": int, "height": int,
                 "pairs": [{"hbox": [x, y, w, h], "obox": [x, y, w, h],
                            "object": int, "verbs": [int, ...]}]}],
     "meta": {"num_o": int, "num_v": int, "class_names": [...]?}}

Boxes are absolute pixels with a top-left corner. Scene images live next
to the annotation file as ``images/<id>.npy`` float64 (H, W, 3) arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, GenerationError
from .metrics import PairGeometry, compute_ar, compute_lr, interval_index


@dataclass
class PairRecord:
    hbox: tuple[float, float, float, float]
    obox: tuple[float, float, float, float]
    object_class: int
    verbs: tuple[int, ...]

    def __post_init__(self):
        self.hbox = tuple(float(v) for v in self.hbox)
        self.obox = tuple(float(v) for v in self.obox)
        self.verbs = tuple(int(v) for v in self.verbs)

    def geometry(self) -> PairGeometry:
        return PairGeometry.from_boxes(self.hbox, self.obox)


@dataclass
class ImageRecord:
    image_id: int
    width: int
    height: int
    pairs: list[PairRecord]


@dataclass
class AnnotationSet:
    images: list[ImageRecord]
    num_objects: int
    num_verbs: int
    class_names: list[str] | None = None

    def to_dict(self) -> dict:
        meta = {"num_o": self.num_objects, "num_v": self.num_verbs}
        if self.class_names is not None:
            meta["class_names"] = self.class_names
        return {
            "images": [
                {
                    "id": img.image_id,
                    "width": img.width,
                    "height": img.height,
                    "pairs": [
                        {"hbox": list(p.hbox), "obox": list(p.obox),
                         "object": p.object_class, "verbs": list(p.verbs)}
                        for p in img.pairs
                    ],
                }
                for img in self.images
            ],
            "meta": meta,
        }


@dataclass
class HoiAnnotation:
    """One ground-truth pair in normalized center form, ready for
    matching and evaluation."""

    human_box: np.ndarray        # (4,) cx, cy, w, h in [0, 1]
    object_box: np.ndarray
    object_class: int
    verb_vector: np.ndarray      # (num_verbs,) multi-hot with >= 1 bit


def _to_normalized(box, width: int, height: int) -> np.ndarray:
    x, y, w, h = box
    return np.array([(x + w / 2) / width, (y + h / 2) / height,
                     w / width, h / height], dtype=np.float64)


def normalized_pairs(img: ImageRecord, num_verbs: int) -> list[HoiAnnotation]:
    out = []
    for p in img.pairs:
        vec = np.zeros(num_verbs, dtype=np.float64)
        vec[list(p.verbs)] = 1.0
        out.append(HoiAnnotation(
            human_box=_to_normalized(p.hbox, img.width, img.height),
            object_box=_to_normalized(p.obox, img.width, img.height),
            object_class=p.object_class,
            verb_vector=vec))
    return out


# ---------------------------------------------------------------------------
# validation and I/O


def _check_box(box, width, height, image_id, label) -> tuple[float, ...]:
    if len(box) != 4:
        raise DataError(f"image {image_id}: {label} must have 4 entries, got {box}")
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise DataError(f"image {image_id}: {label} has non-positive size {box}")
    if x < 0 or y < 0 or x + w > width or y + h > height:
        raise DataError(f"image {image_id}: {label} {box} outside {width}x{height} bounds")
    return (x, y, w, h)


def annotations_from_dict(doc: dict) -> AnnotationSet:
    try:
        meta = doc["meta"]
        num_o = int(meta["num_o"])
        num_v = int(meta["num_v"])
        raw_images = doc["images"]
    except (KeyError, TypeError) as e:
        raise DataError(f"annotation document missing required field: {e}") from e

    images = []
    seen_ids = set()
    for raw in raw_images:
        image_id = raw.get("id")
        if image_id is None or image_id in seen_ids:
            raise DataError(f"missing or duplicate image id {image_id!r}")
        seen_ids.add(image_id)
        width, height = int(raw["width"]), int(raw["height"])
        pairs = []
        for p in raw.get("pairs", []):
            hbox = _check_box(p["hbox"], width, height, image_id, "hbox")
            obox = _check_box(p["obox"], width, height, image_id, "obox")
            obj = int(p["object"])
            if not 0 <= obj < num_o:
                raise DataError(f"image {image_id}: object class {obj} out of range")
            verbs = tuple(int(v) for v in p["verbs"])
            if not verbs:
                raise DataError(f"image {image_id}: pair has no verbs set")
            if any(not 0 <= v < num_v for v in verbs):
                raise DataError(f"image {image_id}: verb index out of range in {verbs}")
            pairs.append(PairRecord(hbox=hbox, obox=obox, object_class=obj, verbs=verbs))
        images.append(ImageRecord(image_id=int(image_id), width=width,
                                  height=height, pairs=pairs))
    names = meta.get("class_names")
    return AnnotationSet(images=images, num_objects=num_o, num_verbs=num_v,
                         class_names=names)


def load_annotations(path) -> AnnotationSet:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: not valid JSON ({e})") from e
    return annotations_from_dict(doc)


def save_annotations(path, annotations: AnnotationSet):
    Path(path).write_text(json.dumps(annotations.to_dict(), indent=1) + "\n")


def image_path(dataset_dir, image_id: int) -> Path:
    return Path(dataset_dir) / "images" / f"{image_id}.npy"


def load_image(dataset_dir, image_id: int) -> np.ndarray:
    p = image_path(dataset_dir, image_id)
    if not p.exists():
        raise DataError(f"missing image file {p}")
    return np.load(p)


# ---------------------------------------------------------------------------
# difficulty-stratified split


@dataclass
class SplitSelector:
    """Which metric and which intervals form the test side, plus the
    minimum per-class instance count kept in the corpus."""

    metric: str = "ar"                  # "ar" | "lr"
    test_intervals: tuple[int, ...] = (0,)
    edges: tuple[float, ...] | None = None
    min_instances: int = 0


def generate_split(annotations: AnnotationSet,
                   selector: SplitSelector) -> tuple[AnnotationSet, AnnotationSet]:
    """Deterministic difficulty split: an image goes to the test side when
    every one of its pairs falls in the selected intervals. HOI classes
    rarer than ``min_instances`` are dropped from both sides first."""
    from .metrics import DEFAULT_EDGES

    if not selector.test_intervals:
        raise ConfigError("empty test interval selection")
    if selector.metric not in ("ar", "lr"):
        raise ConfigError(f"unknown metric {selector.metric!r}")
    edges = selector.edges or DEFAULT_EDGES[selector.metric]
    measure = compute_ar if selector.metric == "ar" else compute_lr

    counts: dict[tuple[int, int], int] = {}
    for img in annotations.images:
        for p in img.pairs:
            for v in p.verbs:
                key = (p.object_class, v)
                counts[key] = counts.get(key, 0) + 1
    kept_classes = {k for k, c in counts.items() if c >= selector.min_instances}

    test_set = set(selector.test_intervals)
    train_imgs, test_imgs = [], []
    for img in annotations.images:
        pairs = [
            PairRecord(hbox=p.hbox, obox=p.obox, object_class=p.object_class,
                       verbs=tuple(v for v in p.verbs
                                   if (p.object_class, v) in kept_classes))
            for p in img.pairs
        ]
        pairs = [p for p in pairs if p.verbs]
        if not pairs:
            continue
        kept_img = ImageRecord(image_id=img.image_id, width=img.width,
                               height=img.height, pairs=pairs)
        bins = [interval_index(measure(p.geometry()), edges) for p in pairs]
        if all(b in test_set for b in bins):
            test_imgs.append(kept_img)
        else:
            train_imgs.append(kept_img)

    def subset(imgs):
        return AnnotationSet(images=imgs, num_objects=annotations.num_objects,
                             num_verbs=annotations.num_verbs,
                             class_names=annotations.class_names)

    return subset(train_imgs), subset(test_imgs)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SceneSpec:
    """Knobs for the synthetic corpus. Verbs map to spatial arrangements
    (0: object right of the human, 1: object below, 2: overlapping; higher
    indices rotate through intermediate directions), object classes map to
    brightness steps, so both are decodable from pixels."""

    image_size: int = 64
    num_objects: int = 3
    num_verbs: int = 3
    pairs_per_scene: int = 1
    ar_range: tuple[float, float] = (0.0, 1.0)
    lr_range: tuple[float, float] = (0.0, 2.0)
    min_box: int = 14
    max_box: int = 26
    noise: float = 0.02
    max_tries: int = 200

    def __post_init__(self):
        if self.num_objects > 8 or self.num_verbs > 8:
            raise ConfigError("synthetic corpus supports at most 8 object and verb classes")
        if self.image_size % 32 != 0:
            raise ConfigError("scene size must divide by 32 for the feature pyramid")


_VERB_ANGLES = [0.0, 0.5 * math.pi, None, 0.25 * math.pi,
                0.75 * math.pi, math.pi, 1.25 * math.pi, 1.5 * math.pi]


def _sample_pair_boxes(rng: np.random.Generator, spec: SceneSpec, verb: int):
    size = spec.image_size
    for _ in range(spec.max_tries):
        hw, hh = rng.integers(spec.min_box, spec.max_box + 1, size=2)
        ow, oh = rng.integers(spec.min_box, spec.max_box + 1, size=2)
        angle = _VERB_ANGLES[verb % len(_VERB_ANGLES)]
        if angle is None:  # overlap arrangement
            dist = 0.35 * float(min(hw, hh))
            angle = rng.uniform(0, 2 * math.pi)
        else:
            dist = rng.uniform(0.7, 1.6) * float(max(hw, hh, ow, oh))
        hx = rng.uniform(1, size - hw - 1)
        hy = rng.uniform(1, size - hh - 1)
        ox = hx + hw / 2 + dist * math.cos(angle) - ow / 2
        oy = hy + hh / 2 + dist * math.sin(angle) - oh / 2
        if ox < 0 or oy < 0 or ox + ow > size or oy + oh > size:
            continue
        hbox = (float(hx), float(hy), float(hw), float(hh))
        obox = (float(ox), float(oy), float(ow), float(oh))
        g = PairGeometry.from_boxes(hbox, obox)
        ar, lr = compute_ar(g), compute_lr(g)
        if not (spec.ar_range[0] <= ar <= spec.ar_range[1]):
            continue
        if not (spec.lr_range[0] <= lr <= spec.lr_range[1]):
            continue
        return hbox, obox
    raise GenerationError(
        f"could not place a pair for verb {verb} within {spec.max_tries} tries; "
        f"ar_range={spec.ar_range} lr_range={spec.lr_range} may be infeasible")


def _paint_human(image: np.ndarray, box):
    x, y, w, h = (int(round(v)) for v in box)
    third_w, third_h = max(1, w // 3), max(1, h // 3)
    cx, cy = x + w // 2, y + h // 2
    image[y:y + h, cx - third_w // 2:cx - third_w // 2 + third_w, 0] = 1.0
    image[cy - third_h // 2:cy - third_h // 2 + third_h, x:x + w, 0] = 1.0


def _paint_object(image: np.ndarray, box, object_class: int, num_objects: int):
    x, y, w, h = (int(round(v)) for v in box)
    level = (object_class + 1) / num_objects
    image[y:y + h, x:x + w, 1] = level
    if object_class % 2 == 1:  # stripes give adjacent brightness levels texture
        image[y:y + h:2, x:x + w, 2] = level


def synth_scene(rng: np.random.Generator, spec: SceneSpec,
                image_id: int = 0) -> tuple[np.ndarray, ImageRecord]:
    """Render one scene and its annotation record. Identical rng state
    yields identical bytes."""
    size = spec.image_size
    image = rng.uniform(0.0, spec.noise, size=(size, size, 3))
    pairs = []
    for _ in range(spec.pairs_per_scene):
        verb = int(rng.integers(spec.num_verbs))
        obj = int(rng.integers(spec.num_objects))
        hbox, obox = _sample_pair_boxes(rng, spec, verb)
        _paint_human(image, hbox)
        _paint_object(image, obox, obj, spec.num_objects)
        pairs.append(PairRecord(hbox=hbox, obox=obox, object_class=obj, verbs=(verb,)))
    record = ImageRecord(image_id=image_id, width=size, height=size, pairs=pairs)
    return image, record


def synth_dataset(seed: int, n_scenes: int, spec: SceneSpec,
                  first_id: int = 0) -> tuple[AnnotationSet, dict[int, np.ndarray]]:
    rng = np.random.default_rng(seed)
    images = {}
    records = []
    for i in range(n_scenes):
        image, record = synth_scene(rng, spec, image_id=first_id + i)
        images[record.image_id] = image
        records.append(record)
    annotations = AnnotationSet(images=records, num_objects=spec.num_objects,
                                num_verbs=spec.num_verbs)
    return annotations, images


def write_dataset(dataset_dir, annotations: AnnotationSet,
                  images: dict[int, np.ndarray]):
    d = Path(dataset_dir)
    (d / "images").mkdir(parents=True, exist_ok=True)
    save_annotations(d / "annotations.json", annotations)
    for image_id, arr in sorted(images.items()):
        np.save(image_path(d, image_id), arr)


def load_dataset(dataset_dir) -> tuple[AnnotationSet, dict[int, np.ndarray]]:
    d = Path(dataset_dir)
    anns = load_annotations(d / "annotations.json")
    images = {img.image_id: load_image(d, img.image_id) for img in anns.images}
    return anns, images
