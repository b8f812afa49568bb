"""Request/response models shared by the HTTP service and the CLI.

The CLI builds these models from flags and calls the same handlers the
FastAPI routes call; file-producing operations take paths inside the
host's filesystem, while the pure-JSON operations (metrics, splits,
evaluation from prediction files) also accept inline documents.
"""

from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, Field, model_validator


class GradcheckRequest(BaseModel):
    seed: int = 0
    corrupt: bool = False  # negative control: force a wrong gradient


class GradcheckResponse(BaseModel):
    passed: bool
    max_op_rel_err: float
    max_model_rel_err: float
    op_target: float
    model_target: float
    param_count: int
    runtime_s: float
    ops: dict[str, float]
    model: dict[str, float]


class SceneSpecModel(BaseModel):
    image_size: int = 64
    num_objects: int = 3
    num_verbs: int = 3
    pairs_per_scene: int = 1
    ar_range: tuple[float, float] = (0.0, 1.0)
    lr_range: tuple[float, float] = (0.0, 2.0)
    min_box: int = 14
    max_box: int = 26
    noise: float = 0.02


class SynthRequest(BaseModel):
    seed: int
    n_scenes: int = Field(gt=0)
    out_dir: str
    spec: SceneSpecModel = SceneSpecModel()


class SynthResponse(BaseModel):
    out_dir: str
    annotation_path: str
    n_images: int
    n_pairs: int


class ConfigModel(BaseModel):
    """Overrides applied on top of the toy defaults."""

    seed: int
    overrides: dict[str, Any] = {}


class TrainRequest(BaseModel):
    data_dir: str
    out_dir: str
    strategy: Literal["stagewise", "end2end"] = "stagewise"
    config: ConfigModel


class EpochRow(BaseModel):
    epoch: int
    stage: int
    total: float
    loss_obj: float
    loss_verb: float
    loss_box: float
    loss_giou: float


class TrainResponse(BaseModel):
    checkpoints: list[str]
    loss_log_path: str
    initial_loss: float
    final_loss: float
    epochs: list[EpochRow]


class EvalRequest(BaseModel):
    checkpoint: str
    data_dir: str
    setting: Literal["default", "known"] = "default"
    out_prefix: str | None = None
    train_data_dir: str | None = None  # source of rare-class counts
    rare_threshold: int = 10
    interpolation: Literal["all", "11point"] = "all"


class EvalResponse(BaseModel):
    setting: str
    full_map: float
    rare_map: float
    non_rare_map: float
    n_classes: int
    report_json: str | None = None
    report_text: str | None = None
    predictions_path: str | None = None


class EvalFilesRequest(BaseModel):
    """Evaluate prediction/ground-truth documents directly."""

    predictions_path: str | None = None
    predictions: list | None = None
    ground_truth_path: str | None = None
    ground_truth: list | None = None
    num_verbs: int
    setting: Literal["default", "known"] = "default"
    interpolation: Literal["all", "11point"] = "all"
    rare_classes: list[tuple[int, int]] = []

    @model_validator(mode="after")
    def _exactly_one_source(self):
        if (self.predictions is None) == (self.predictions_path is None):
            raise ValueError("provide exactly one of predictions / predictions_path")
        if (self.ground_truth is None) == (self.ground_truth_path is None):
            raise ValueError("provide exactly one of ground_truth / ground_truth_path")
        return self


class MetricsRequest(BaseModel):
    annotations_path: str | None = None
    annotations: dict | None = None
    metric: Literal["ar", "lr"] = "ar"
    edges: list[float] | None = None
    out_prefix: str | None = None
    per_instance: bool = False

    @model_validator(mode="after")
    def _exactly_one_source(self):
        if (self.annotations is None) == (self.annotations_path is None):
            raise ValueError("provide exactly one of annotations / annotations_path")
        return self


class MetricsResponse(BaseModel):
    metric: str
    edges: list[float]
    counts: list[int]
    total: int
    json_path: str | None = None
    csv_path: str | None = None
    per_instance: list[dict] | None = None


class SplitRequest(BaseModel):
    annotations_path: str | None = None
    annotations: dict | None = None
    metric: Literal["ar", "lr"] = "ar"
    test_intervals: list[int] = [0]
    edges: list[float] | None = None
    min_instances: int = 0
    out_prefix: str | None = None

    @model_validator(mode="after")
    def _exactly_one_source(self):
        if (self.annotations is None) == (self.annotations_path is None):
            raise ValueError("provide exactly one of annotations / annotations_path")
        return self


class SplitResponse(BaseModel):
    train_images: int
    test_images: int
    train_path: str | None = None
    test_path: str | None = None
    train_doc: dict | None = None
    test_doc: dict | None = None


class DumpAnchorsRequest(BaseModel):
    checkpoint: str
    image_path: str | None = None
    data_dir: str | None = None
    image_id: int | None = None
    out_path: str | None = None

    @model_validator(mode="after")
    def _image_source(self):
        from_file = self.image_path is not None
        from_dataset = self.data_dir is not None and self.image_id is not None
        if from_file == from_dataset:
            raise ValueError("provide either image_path or data_dir + image_id")
        return self


class DumpAnchorsResponse(BaseModel):
    n_layers: int
    n_queries: int
    out_path: str | None = None
    anchors: list | None = None


class PredictRequest(BaseModel):
    checkpoint: str
    data_dir: str
    image_id: int
    top_k: int = 100
    iou_filter: float = 0.5


class PredictResponse(BaseModel):
    image_id: int
    triplets: list[dict]


class InfoResponse(BaseModel):
    name: str
    version: str
    toy_defaults: dict
    paper_preset: dict
