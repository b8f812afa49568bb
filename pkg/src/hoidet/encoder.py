"""Multi-scale feature extraction: a small patch-embedding backbone, a
sine positional encoding with learnable level embeddings, and a stack of
deformable self-attention encoder layers over the flattened pyramid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig
from .deform import deformable_read, scale_offsets_to_levels
from .errors import ConfigError
from .params import ParamStore
from .tensor import Tensor


@dataclass
class FeaturePyramid:
    """Per-level feature maps with their spatial shapes and valid ratios."""

    levels: list[Tensor]                 # each (B, H_l, W_l, C_l)
    shapes: list[tuple[int, int]]
    valid_ratios: list[tuple[float, float]]

    @property
    def n_levels(self) -> int:
        return len(self.levels)


@dataclass
class EncodedMemory:
    """Flattened multi-scale encoded features plus their layout."""

    memory: Tensor                       # (B, N_s, C_d)
    pos: Tensor                          # (N_s, C_d)
    shapes: list[tuple[int, int]]
    level_offsets: list[int]
    valid_ratios: list[tuple[float, float]]

    @property
    def n_rows(self) -> int:
        return self.memory.shape[1]


def pyramid_shapes(height: int, width: int, n_levels: int) -> list[tuple[int, int]]:
    """Spatial shapes at strides 8, 16, 32, ... The input must divide by
    the largest stride."""
    top_stride = 8 * 2 ** (n_levels - 1)
    if height % top_stride or width % top_stride:
        raise ConfigError(
            f"image size {height}x{width} not divisible by stride {top_stride}")
    return [(height // (8 * 2 ** i), width // (8 * 2 ** i)) for i in range(n_levels)]


def level_offsets(shapes) -> list[int]:
    offs = [0]
    for h, w in shapes[:-1]:
        offs.append(offs[-1] + h * w)
    return offs


class PatchBackbone:
    """Three-ish stage toy backbone: an 8x8 patch embedding followed by
    2x2 strided merges, each projection followed by a relu. Channel width
    doubles per stage from ``backbone_dim``."""

    def __init__(self, store: ParamStore, cfg: RunConfig):
        c = cfg.backbone_dim
        self.widths = [c * 2 ** i for i in range(cfg.n_levels)]
        self.embed = store.linear("backbone.embed", 8 * 8 * 3, c)
        self.merges = [
            store.linear(f"backbone.merge{i}", 4 * self.widths[i - 1], self.widths[i])
            for i in range(1, cfg.n_levels)
        ]
        self.n_levels = cfg.n_levels

    def __call__(self, image: Tensor) -> FeaturePyramid:
        if image.ndim != 4 or image.shape[-1] != 3:
            raise ConfigError(f"expected (B, H, W, 3) image, got {image.shape}")
        batch, height, width, _ = image.shape
        shapes = pyramid_shapes(height, width, self.n_levels)

        x = T.relu(self.embed(_space_to_depth(image, 8)))
        levels = [x]
        for merge in self.merges:
            x = T.relu(merge(_space_to_depth(x, 2)))
            levels.append(x)
        ratios = [(1.0, 1.0)] * self.n_levels  # uniform-size batches, no padding
        return FeaturePyramid(levels=levels, shapes=shapes, valid_ratios=ratios)


def _space_to_depth(x: Tensor, patch: int) -> Tensor:
    batch, height, width, ch = x.shape
    hp, wp = height // patch, width // patch
    y = T.reshape(x, (batch, hp, patch, wp, patch, ch))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (batch, hp, wp, patch * patch * ch))


def sine_positional_encoding(shapes, valid_ratios, dim: int) -> np.ndarray:
    """2-D sine/cosine encoding per flattened location, (N_s, dim).

    Each axis gets dim/2 features; frequency pairs share an argument so
    sin^2 + cos^2 sums to a position-independent norm. Level embeddings
    are added separately (they are learnable).
    """
    if dim % 4 != 0:
        raise ConfigError(f"positional dim {dim} must divide by 4")
    half = dim // 2
    temperature = 10000.0
    dim_t = temperature ** (2 * (np.arange(half) // 2) / half)

    chunks = []
    for (h, w), (rh, rw) in zip(shapes, valid_ratios):
        ys = (np.arange(h) + 0.5) / h * rh * 2 * math.pi
        xs = (np.arange(w) + 0.5) / w * rw * 2 * math.pi
        grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
        py = grid_y[..., None] / dim_t
        px = grid_x[..., None] / dim_t
        py = _interleave_sin_cos(py)
        px = _interleave_sin_cos(px)
        chunks.append(np.concatenate([py, px], axis=-1).reshape(h * w, dim))
    return np.concatenate(chunks, axis=0)


def _interleave_sin_cos(angles: np.ndarray) -> np.ndarray:
    out = np.empty_like(angles)
    out[..., 0::2] = np.sin(angles[..., 0::2])
    out[..., 1::2] = np.cos(angles[..., 1::2])
    return out


def reference_points(shapes) -> np.ndarray:
    """Normalized (x, y) pixel centers for every flattened row, (N_s, 2)."""
    pts = []
    for h, w in shapes:
        ys = (np.arange(h) + 0.5) / h
        xs = (np.arange(w) + 0.5) / w
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        pts.append(np.stack([gx, gy], axis=-1).reshape(h * w, 2))
    return np.concatenate(pts, axis=0)


class EncoderLayer:
    """Deformable self-attention followed by a feed-forward sublayer, each
    with residual and normalization."""

    def __init__(self, store: ParamStore, cfg: RunConfig, name: str):
        d = cfg.model_dim
        n_off = cfg.n_heads * cfg.n_levels * cfg.n_points
        self.cfg = cfg
        # zero offsets at initialization: sampling starts at the reference points
        self.offset_proj = store.linear(f"{name}.offsets", d, n_off * 2, zero=True)
        self.weight_proj = store.linear(f"{name}.weights", d, n_off, scale=0.01)
        self.w_value = store.matrix(f"{name}.value", d, d)
        self.w_out = store.matrix(f"{name}.out", d, d)
        self.norm1 = T.LayerNorm(store.ones(f"{name}.norm1.g", d), store.zeros(f"{name}.norm1.b", d))
        self.ffn1 = store.linear(f"{name}.ffn1", d, cfg.ffn_dim)
        self.ffn2 = store.linear(f"{name}.ffn2", cfg.ffn_dim, d)
        self.norm2 = T.LayerNorm(store.ones(f"{name}.norm2.g", d), store.zeros(f"{name}.norm2.b", d))
        self.last_weights: np.ndarray | None = None

    def __call__(self, memory: Tensor, pos: Tensor, shapes, offsets, refs: np.ndarray) -> Tensor:
        cfg = self.cfg
        batch, n_rows, d = memory.shape
        h, l, k = cfg.n_heads, cfg.n_levels, cfg.n_points

        query = memory + pos
        raw_off = T.reshape(self.offset_proj(query), (batch, n_rows, h, l, k, 2))
        anchors = Tensor(refs[None, :, None, None, None, :]) + scale_offsets_to_levels(raw_off, shapes)
        logits = T.reshape(self.weight_proj(query), (batch, n_rows, h, l * k))
        weights = T.reshape(T.softmax(logits, axis=-1), (batch, n_rows, h, l, k))
        self.last_weights = weights.data

        attended = deformable_read(memory, shapes, offsets, anchors, weights,
                                   self.w_value, self.w_out)
        x = self.norm1(memory + attended)
        y = self.ffn2(T.relu(self.ffn1(x)))
        return self.norm2(x + y)


class MultiScaleEncoder:
    """Backbone + projection to the shared model width + encoder stack.

    With zero encoder layers the memory equals the projected, flattened
    pyramid exactly.
    """

    def __init__(self, store: ParamStore, cfg: RunConfig):
        self.cfg = cfg
        self.backbone = PatchBackbone(store, cfg)
        self.projections = [
            store.linear(f"encoder.project{i}", w, cfg.model_dim)
            for i, w in enumerate(self.backbone.widths)
        ]
        self.level_embed = store.uniform("encoder.level_embed",
                                         (cfg.n_levels, cfg.model_dim), 0.5)
        self.layers = [EncoderLayer(store, cfg, f"encoder.layer{i}")
                       for i in range(cfg.encoder_layers)]

    def __call__(self, image: Tensor) -> EncodedMemory:
        pyramid = self.backbone(image)
        return self.encode(pyramid)

    def encode(self, pyramid: FeaturePyramid) -> EncodedMemory:
        cfg = self.cfg
        batch = pyramid.levels[0].shape[0]
        flat = []
        for lvl, (fmap, (h, w)) in enumerate(zip(pyramid.levels, pyramid.shapes)):
            rows = T.reshape(fmap, (batch, h * w, fmap.shape[-1]))
            flat.append(self.projections[lvl](rows))
        memory = T.concat(flat, axis=1)

        sine = sine_positional_encoding(pyramid.shapes, pyramid.valid_ratios, cfg.model_dim)
        embed_rows = []
        for lvl, (h, w) in enumerate(pyramid.shapes):
            chunk = Tensor(sine[_row_slice(pyramid.shapes, lvl)]) + self.level_embed[lvl]
            embed_rows.append(chunk)
        pos = T.concat(embed_rows, axis=0)

        shapes = pyramid.shapes
        offsets = level_offsets(shapes)
        refs = reference_points(shapes)
        for layer in self.layers:
            memory = layer(memory, pos, shapes, offsets, refs)
        return EncodedMemory(memory=memory, pos=pos, shapes=shapes,
                             level_offsets=offsets, valid_ratios=pyramid.valid_ratios)


def _row_slice(shapes, lvl: int) -> slice:
    offs = level_offsets(shapes)
    h, w = shapes[lvl]
    return slice(offs[lvl], offs[lvl] + h * w)
