"""Operation handlers behind both the HTTP service and the CLI.

Each handler takes a request model and returns a response model; all
randomness flows from the request seed, so re-running a handler with the
same inputs writes bit-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import __version__, evaluation, gradcheck, schemas
from .config import PAPER_PRESET, RunConfig
from .data import (AnnotationSet, SceneSpec, SplitSelector, annotations_from_dict,
                   generate_split, load_annotations, load_dataset, load_image,
                   normalized_pairs, save_annotations, synth_dataset, write_dataset)
from .errors import ConfigError
from .inference import compose_triplets
from .metrics import DEFAULT_EDGES, compute_ar, compute_lr, bin_intervals
from .model import HoiModel, load_checkpoint
from .training import train


def run_gradcheck(req: schemas.GradcheckRequest) -> schemas.GradcheckResponse:
    report = gradcheck.run_suite(seed=req.seed, corrupt=req.corrupt)
    return schemas.GradcheckResponse(**report)


def run_synth(req: schemas.SynthRequest) -> schemas.SynthResponse:
    spec = SceneSpec(**req.spec.model_dump())
    annotations, images = synth_dataset(seed=req.seed, n_scenes=req.n_scenes, spec=spec)
    write_dataset(req.out_dir, annotations, images)
    return schemas.SynthResponse(
        out_dir=req.out_dir,
        annotation_path=str(Path(req.out_dir) / "annotations.json"),
        n_images=len(annotations.images),
        n_pairs=sum(len(img.pairs) for img in annotations.images))


def _build_config(model: schemas.ConfigModel, annotations: AnnotationSet | None = None,
                  ) -> RunConfig:
    overrides = dict(model.overrides)
    if annotations is not None:
        overrides.setdefault("num_objects", annotations.num_objects)
        overrides.setdefault("num_verbs", annotations.num_verbs)
    return RunConfig(seed=model.seed, **overrides)


def run_train(req: schemas.TrainRequest) -> schemas.TrainResponse:
    annotations, images = load_dataset(req.data_dir)
    cfg = _build_config(req.config, annotations)
    model = HoiModel(cfg)
    result = train(model, annotations, images, strategy=req.strategy,
                   out_dir=req.out_dir)
    rows = [schemas.EpochRow(epoch=e.epoch, stage=e.stage, total=e.totals["total"],
                             loss_obj=e.totals["loss_obj"], loss_verb=e.totals["loss_verb"],
                             loss_box=e.totals["loss_box"], loss_giou=e.totals["loss_giou"])
            for e in result.epochs]
    return schemas.TrainResponse(
        checkpoints=result.checkpoints,
        loss_log_path=str(Path(req.out_dir) / "loss_log.csv"),
        initial_loss=result.initial_loss, final_loss=result.final_loss,
        epochs=rows)


def worker_count() -> int:
    """Worker cap from FGA_THREADS (default 1)."""
    import os

    try:
        return max(1, int(os.environ.get("FGA_THREADS", "1")))
    except ValueError:
        return 1


def predict_dataset(model: HoiModel, annotations: AnnotationSet,
                    images: dict[int, np.ndarray], top_k: int | None = None,
                    iou_filter: float | None = None) -> dict[int, list]:
    """Per-image scored triplets for a whole annotation set.

    Weights are read-only here, so images can run on FGA_THREADS workers;
    results merge keyed by image id, keeping the output deterministic.
    """
    cfg = model.cfg
    k = top_k if top_k is not None else cfg.top_k
    flt = iou_filter if iou_filter is not None else cfg.iou_filter
    ids = sorted(r.image_id for r in annotations.images)

    def one(image_id: int):
        pred, _, _ = model.forward(images[image_id][None])
        return compose_triplets(pred, 0, top_k=k, iou_filter=flt)

    workers = worker_count()
    if workers == 1:
        return {i: one(i) for i in ids}
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, ids))
    return dict(zip(ids, results))


def _class_counts(annotations: AnnotationSet) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for img in annotations.images:
        for p in img.pairs:
            for v in p.verbs:
                counts[(p.object_class, v)] = counts.get((p.object_class, v), 0) + 1
    return counts


def run_eval(req: schemas.EvalRequest) -> schemas.EvalResponse:
    model, _ = load_checkpoint(req.checkpoint)
    annotations, images = load_dataset(req.data_dir)
    if annotations.num_objects != model.cfg.num_objects or \
            annotations.num_verbs != model.cfg.num_verbs:
        raise ConfigError(
            f"class-count mismatch: checkpoint expects "
            f"{model.cfg.num_objects} objects/{model.cfg.num_verbs} verbs, dataset has "
            f"{annotations.num_objects}/{annotations.num_verbs}")

    rare = set()
    if req.train_data_dir is not None:
        train_anns = load_annotations(Path(req.train_data_dir) / "annotations.json")
        rare = evaluation.rare_classes_from_counts(_class_counts(train_anns),
                                                   req.rare_threshold)

    preds = predict_dataset(model, annotations, images)
    gts = {img.image_id: normalized_pairs(img, annotations.num_verbs)
           for img in annotations.images}
    report = evaluation.evaluate_role_map(preds, gts, rare_classes=rare,
                                          setting=req.setting,
                                          interpolation=req.interpolation)

    json_path = text_path = preds_path = None
    if req.out_prefix:
        prefix = Path(req.out_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        json_path = str(prefix) + ".json"
        text_path = str(prefix) + ".txt"
        preds_path = str(prefix) + ".predictions.json"
        evaluation.write_json(json_path, report.to_dict())
        Path(text_path).write_text(report.to_text())
        evaluation.write_json(preds_path, evaluation.predictions_to_doc(preds))
    return schemas.EvalResponse(
        setting=report.setting, full_map=report.full_map, rare_map=report.rare_map,
        non_rare_map=report.non_rare_map, n_classes=len(report.per_class),
        report_json=json_path, report_text=text_path, predictions_path=preds_path)


def run_eval_files(req: schemas.EvalFilesRequest) -> schemas.EvalResponse:
    preds_doc = req.predictions if req.predictions is not None else \
        json.loads(Path(req.predictions_path).read_text())
    gt_doc = req.ground_truth if req.ground_truth is not None else \
        json.loads(Path(req.ground_truth_path).read_text())
    preds = evaluation.predictions_from_doc(preds_doc)
    gts = evaluation.ground_truth_from_doc(gt_doc, req.num_verbs)
    report = evaluation.evaluate_role_map(
        preds, gts, rare_classes={tuple(c) for c in req.rare_classes},
        setting=req.setting, interpolation=req.interpolation)
    return schemas.EvalResponse(
        setting=report.setting, full_map=report.full_map, rare_map=report.rare_map,
        non_rare_map=report.non_rare_map, n_classes=len(report.per_class))


def _load_annotation_source(path: str | None, doc: dict | None) -> AnnotationSet:
    if doc is not None:
        return annotations_from_dict(doc)
    return load_annotations(path)


def run_metrics(req: schemas.MetricsRequest) -> schemas.MetricsResponse:
    annotations = _load_annotation_source(req.annotations_path, req.annotations)
    measure = compute_ar if req.metric == "ar" else compute_lr
    edges = req.edges if req.edges is not None else list(DEFAULT_EDGES[req.metric])

    values = []
    rows = []
    for img in annotations.images:
        for i, p in enumerate(img.pairs):
            v = measure(p.geometry())
            values.append(v)
            rows.append({"image_id": img.image_id, "pair": i, "value": v})
    hist = bin_intervals(values, edges, metric=req.metric)

    json_path = csv_path = None
    if req.out_prefix:
        prefix = Path(req.out_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        json_path = str(prefix) + ".json"
        csv_path = str(prefix) + ".csv"
        payload = hist.to_dict()
        payload["total"] = len(values)
        if req.per_instance:
            payload["instances"] = rows
        evaluation.write_json(json_path, payload)
        Path(csv_path).write_text(hist.to_csv())
    return schemas.MetricsResponse(
        metric=req.metric, edges=list(hist.edges), counts=list(hist.counts),
        total=len(values), json_path=json_path, csv_path=csv_path,
        per_instance=rows if req.per_instance else None)


def run_split(req: schemas.SplitRequest) -> schemas.SplitResponse:
    annotations = _load_annotation_source(req.annotations_path, req.annotations)
    selector = SplitSelector(
        metric=req.metric, test_intervals=tuple(req.test_intervals),
        edges=tuple(req.edges) if req.edges is not None else None,
        min_instances=req.min_instances)
    train_set, test_set = generate_split(annotations, selector)

    train_path = test_path = train_doc = test_doc = None
    if req.out_prefix:
        prefix = Path(req.out_prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        train_path = str(prefix) + ".train.json"
        test_path = str(prefix) + ".test.json"
        save_annotations(train_path, train_set)
        save_annotations(test_path, test_set)
    else:
        train_doc = train_set.to_dict()
        test_doc = test_set.to_dict()
    return schemas.SplitResponse(
        train_images=len(train_set.images), test_images=len(test_set.images),
        train_path=train_path, test_path=test_path,
        train_doc=train_doc, test_doc=test_doc)


def anchor_dump_doc(model: HoiModel, image: np.ndarray) -> list:
    """Per-layer fine-grained anchors as plain JSON, query id mapping to
    {level, head, point, x, y, weight} entries."""
    _, _, traces = model.forward(image[None])
    layers = []
    for layer_idx, trace in enumerate(traces):
        anchors = trace.fga_anchors[0]   # (N_q, H, L, K, 2)
        weights = trace.fga_weights[0]   # (N_q, H, L, K)
        queries = {}
        n_q, n_h, n_l, n_k, _ = anchors.shape
        for q in range(n_q):
            entries = []
            for h in range(n_h):
                for l in range(n_l):
                    for k in range(n_k):
                        entries.append({
                            "level": l, "head": h, "point": k,
                            "x": float(anchors[q, h, l, k, 0]),
                            "y": float(anchors[q, h, l, k, 1]),
                            "weight": float(weights[q, h, l, k])})
            queries[str(q)] = entries
        layers.append({"layer": layer_idx, "queries": queries})
    return layers


def run_dump_anchors(req: schemas.DumpAnchorsRequest) -> schemas.DumpAnchorsResponse:
    model, _ = load_checkpoint(req.checkpoint)
    if req.image_path is not None:
        image = np.load(req.image_path)
    else:
        image = load_image(req.data_dir, req.image_id)
    doc = anchor_dump_doc(model, image)
    out_path = None
    if req.out_path:
        Path(req.out_path).parent.mkdir(parents=True, exist_ok=True)
        evaluation.write_json(req.out_path, doc)
        out_path = req.out_path
    return schemas.DumpAnchorsResponse(
        n_layers=len(doc), n_queries=model.cfg.n_queries, out_path=out_path,
        anchors=None if out_path else doc)


def run_predict(req: schemas.PredictRequest) -> schemas.PredictResponse:
    model, _ = load_checkpoint(req.checkpoint)
    image = load_image(req.data_dir, req.image_id)
    pred, _, _ = model.forward(image[None])
    triplets = compose_triplets(pred, 0, top_k=req.top_k, iou_filter=req.iou_filter)
    return schemas.PredictResponse(image_id=req.image_id,
                                   triplets=[t.to_dict() for t in triplets])


def info() -> schemas.InfoResponse:
    toy = RunConfig(seed=0).to_dict()
    toy.pop("seed")
    return schemas.InfoResponse(name="hoidet", version=__version__,
                                toy_defaults=toy, paper_preset=PAPER_PRESET)
