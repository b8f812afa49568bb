"""Full detector: encoder, fine-grained-anchor decoder, detection head,
plus checkpoint round-tripping.

Checkpoints are plain JSON (config + flat parameter lists). Python
serializes floats with shortest-round-trip repr, so values survive a
save/load cycle bit-exactly and identical runs produce identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .decoder import DecoderTrace, FgaDecoder
from .encoder import EncodedMemory, MultiScaleEncoder
from .heads import DetectionHead, HoiPrediction
from .params import ParamStore
from .tensor import Tensor


class HoiModel:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.store = ParamStore(np.random.default_rng(cfg.seed))
        self.encoder = MultiScaleEncoder(self.store, cfg)
        self.decoder = FgaDecoder(self.store, cfg)
        self.head = DetectionHead(self.store, cfg)

    # stage toggles default to the full model
    def forward(self, images: np.ndarray, use_hsam: bool = True, use_tam: bool = True,
                ) -> tuple[HoiPrediction, Tensor, list[DecoderTrace]]:
        """images: (B, H, W, 3) float64. Returns (predictions, initial
        anchors, per-layer decoder traces)."""
        memory = self.encoder(Tensor(np.asarray(images, dtype=np.float64)))
        embeddings, anchors, traces = self.decoder(memory, use_hsam=use_hsam,
                                                   use_tam=use_tam)
        return self.head(embeddings, anchors), anchors, traces

    def encode(self, images: np.ndarray) -> EncodedMemory:
        return self.encoder(Tensor(np.asarray(images, dtype=np.float64)))

    def parameters(self) -> dict[str, T.Parameter]:
        return self.store.params

    def parameter_groups(self) -> dict[str, list[T.Parameter]]:
        """Parameters bucketed by top-level component, for gradient
        reports."""
        groups: dict[str, list[T.Parameter]] = {}
        for name, p in self.store.params.items():
            groups.setdefault(name.split(".")[0], []).append(p)
        return groups

    def param_count(self) -> int:
        return sum(p.data.size for p in self.store.params.values())

    # ------------------------------------------------------------------
    # checkpoints

    def save_checkpoint(self, path, extra: dict | None = None):
        doc = {
            "config": self.cfg.to_dict(),
            "extra": extra or {},
            "params": {k: [v.data.shape, v.data.reshape(-1).tolist()]
                       for k, v in sorted(self.store.params.items())},
        }
        Path(path).write_text(json.dumps(doc) + "\n")

    def load_checkpoint_params(self, doc: dict):
        state = {k: np.array(flat, dtype=np.float64).reshape(shape)
                 for k, (shape, flat) in doc["params"].items()}
        self.store.load_state(state)


def load_checkpoint(path) -> tuple[HoiModel, dict]:
    doc = json.loads(Path(path).read_text())
    cfg_dict = doc["config"]
    cfg_dict["sampling_sizes"] = tuple(cfg_dict["sampling_sizes"])
    cfg_dict["stage_epochs"] = tuple(cfg_dict["stage_epochs"])
    model = HoiModel(RunConfig.from_dict(cfg_dict))
    model.load_checkpoint_params(doc)
    return model, doc.get("extra", {})
