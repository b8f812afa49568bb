"""Query decoding with fine-grained anchors.

Each decoder layer runs, in order: a self-attention content update, grid
sampling of the multi-scale memory around the initial anchors, spatial
and task merging of the sampled features into the content stream, and a
deformable cross-attention read at generated fine-grained anchor
positions. Merging can be degraded to plain averaging/summation, which
the stage-wise trainer uses for its base-network stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig
from .deform import deformable_read, scale_offsets_to_levels, split_levels
from .encoder import EncodedMemory
from .errors import ConfigError, NumericError
from .params import ParamStore
from .tensor import MultiHeadAttention, Tensor


@dataclass
class QuerySet:
    """Learnable content/positional embeddings and their initial anchors."""

    content: Tensor      # (N_q, C_d)
    positional: Tensor   # (N_q, C_d)
    anchors: Tensor      # (N_q, 2) in (0, 1)^2


@dataclass
class FineGrainedAnchorSet:
    anchors: Tensor      # (B, N_q, N_H, N_L, N_A, 2)
    weights: Tensor      # (B, N_q, N_H, N_L, N_A), head rows sum to 1


@dataclass
class DecoderTrace:
    """Intermediates of one layer, kept for tests and anchor dumps."""

    content_updated: np.ndarray
    merged_levels: np.ndarray | None     # X_m (B, N_q, N_L, N_hd) when spatial merging ran
    scale_merged: np.ndarray             # X_u (B, N_q, N_hd)
    stacked: np.ndarray | None           # (B, N_q, 2, N_hd) when task merging ran
    switch: np.ndarray | None            # (B, N_q, 2, 2)
    task_merged: np.ndarray              # U (B, N_q, N_hd)
    fga_anchors: np.ndarray
    fga_weights: np.ndarray


def sampling_grid(size: int, shape: tuple[int, int]) -> np.ndarray:
    """(size^2, 2) normalized offsets with one-cell spacing at this level,
    row-major over (dy, dx), centered on the anchor."""
    if size % 2 == 0 or size < 1:
        raise ConfigError(f"sampling size must be odd and positive, got {size}")
    h, w = shape
    half = (size - 1) / 2.0
    ds = np.arange(size) - half
    dy, dx = np.meshgrid(ds, ds, indexing="ij")
    return np.stack([dx.reshape(-1) / w, dy.reshape(-1) / h], axis=-1)


def multi_scale_sample(memory: EncodedMemory, anchors: Tensor,
                       sizes: tuple[int, ...]) -> list[Tensor]:
    """Grid bilinear reads of every level around each anchor.

    Returns one (B, N_q, size_l^2, C_d) tensor per level: small grids on
    shallow levels, large grids on deep ones.
    """
    if len(sizes) != len(memory.shapes):
        raise ConfigError(f"{len(sizes)} sampling sizes for {len(memory.shapes)} levels")
    batch = memory.memory.shape[0]
    n_q = anchors.shape[0]
    dim = memory.memory.shape[-1]
    maps = split_levels(memory.memory, memory.shapes, memory.level_offsets)

    sampled = []
    for lvl, (size, shape) in enumerate(zip(sizes, memory.shapes)):
        grid = sampling_grid(size, shape)
        tokens = size * size
        pts = T.reshape(anchors, (n_q, 1, 2)) + Tensor(grid[None])
        pts = T.reshape(pts, (n_q * tokens, 2))
        feats = T.bilinear_sample(maps[lvl], pts)
        sampled.append(T.reshape(feats, (batch, n_q, tokens, dim)))
    return sampled


class DecoderLayer:
    def __init__(self, store: ParamStore, cfg: RunConfig, name: str):
        d = cfg.model_dim
        self.cfg = cfg

        def mha(tag: str) -> MultiHeadAttention:
            return MultiHeadAttention(
                cfg.n_heads,
                store.matrix(f"{name}.{tag}.wq", d, d),
                store.matrix(f"{name}.{tag}.wk", d, d),
                store.matrix(f"{name}.{tag}.wv", d, d),
                store.matrix(f"{name}.{tag}.wo", d, d))

        def norm(tag: str) -> T.LayerNorm:
            return T.LayerNorm(store.ones(f"{name}.{tag}.g", d),
                               store.zeros(f"{name}.{tag}.b", d))

        self.self_attn = mha("self_attn")
        self.norm_content = norm("norm_content")
        # one per-level merge block, shared across levels
        self.level_merge = mha("level_merge")
        self.scale_merge = mha("scale_merge")
        self.slot_attn = mha("slot_attn")
        self.switch_hidden = store.linear(f"{name}.switch_hidden", d, d)
        # biased so the switch starts near (1,0)/(0,0): pass the scale-merged
        # features through a relu-like gate while keeping gradients alive
        self.switch_out = store.linear(f"{name}.switch_out", d, 4,
                                       bias_init=(2.5, -2.5, -2.5, -2.5))
        self.norm_merged = norm("norm_merged")

        n_off = cfg.n_heads * cfg.n_levels * cfg.n_points
        self.fga_offsets = store.linear(f"{name}.fga_offsets", d, n_off * 2, zero=True)
        self.fga_weights = store.linear(f"{name}.fga_weights", d, n_off, scale=0.01)
        self.w_value = store.matrix(f"{name}.value", d, d)
        self.w_out = store.matrix(f"{name}.out", d, d)
        self.norm_cross = norm("norm_cross")
        self.ffn1 = store.linear(f"{name}.ffn1", d, cfg.ffn_dim)
        self.ffn2 = store.linear(f"{name}.ffn2", cfg.ffn_dim, d)
        self.norm_ffn = norm("norm_ffn")

    # positional embeddings enter queries and keys only; the residual
    # comes from the raw content and normalization is applied by the
    # caller so this stays an exact residual update
    def update_content(self, content: Tensor, positional: Tensor) -> Tensor:
        qk = content + positional
        return content + self.self_attn(qk, qk, content)

    def merge_spatial(self, sampled: list[Tensor], content_u: Tensor) -> tuple[Tensor, Tensor]:
        """Per-level merge of each query's own sampled tokens, then a
        cross-attention merge over the level axis. Returns (X_m, X_u)."""
        batch, n_q, dim = content_u.shape
        query = T.reshape(content_u, (batch, n_q, 1, dim))
        merged = []
        for feats in sampled:
            out = self.level_merge(query, feats, feats)
            merged.append(T.reshape(out, (batch, n_q, 1, dim)))
        levels = T.concat(merged, axis=2)               # (B, N_q, N_L, N_hd)
        scale = self.scale_merge(query, levels, levels)
        return levels, T.reshape(scale, (batch, n_q, dim))

    def merge_task(self, content_u: Tensor, scale_merged: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Switch-gated fusion of the merged features into the content
        stream. Returns (X stacked, Switch, U)."""
        batch, n_q, dim = content_u.shape
        stacked = T.stack([content_u, scale_merged], axis=2)   # (B, N_q, 2, N_hd)
        query = T.reshape(content_u, (batch, n_q, 1, dim))
        x_switch = T.reshape(self.slot_attn(query, stacked, stacked), (batch, n_q, dim))
        raw = self.switch_out(T.relu(self.switch_hidden(x_switch)))
        switch = T.reshape(T.hard_sigmoid(raw), (batch, n_q, 2, 2))
        terms = [switch[:, :, i, 0:1] * scale_merged + switch[:, :, i, 1:2]
                 for i in range(2)]
        fused = T.reduce_max(T.stack(terms, axis=2), axis=2)
        return stacked, switch, fused + content_u

    def generate_fine_grained(self, task_merged: Tensor, anchors: Tensor,
                              shapes) -> FineGrainedAnchorSet:
        cfg = self.cfg
        batch, n_q, _ = task_merged.shape
        h, l, k = cfg.n_heads, cfg.n_levels, cfg.n_points
        raw = T.reshape(self.fga_offsets(task_merged), (batch, n_q, h, l, k, 2))
        base = T.reshape(anchors, (1, n_q, 1, 1, 1, 2))
        fga_anchors = base + scale_offsets_to_levels(raw, shapes)
        logits = T.reshape(self.fga_weights(task_merged), (batch, n_q, h, l * k))
        weights = T.reshape(T.softmax(logits, axis=-1), (batch, n_q, h, l, k))
        return FineGrainedAnchorSet(anchors=fga_anchors, weights=weights)

    def aggregate(self, memory: EncodedMemory, fga: FineGrainedAnchorSet,
                  content_u: Tensor, layer_name: str = "") -> Tensor:
        if not np.isfinite(fga.anchors.data).all():
            raise NumericError(f"non-finite fine-grained anchors in {layer_name or 'decoder layer'}")
        pooled = deformable_read(memory.memory, memory.shapes, memory.level_offsets,
                                 fga.anchors, fga.weights, self.w_value, self.w_out)
        x = self.norm_cross(content_u + pooled)
        y = self.ffn2(T.relu(self.ffn1(x)))
        return self.norm_ffn(x + y)

    def __call__(self, content: Tensor, positional: Tensor, anchors: Tensor,
                 memory: EncodedMemory, use_hsam: bool = True,
                 use_tam: bool = True, name: str = "") -> tuple[Tensor, DecoderTrace]:
        cfg = self.cfg
        content_u = self.norm_content(self.update_content(content, positional))
        sampled = multi_scale_sample(memory, anchors, cfg.sampling_sizes)

        if use_hsam:
            merged_levels, scale_merged = self.merge_spatial(sampled, content_u)
            levels_np = merged_levels.data
        else:
            # base-network merging: average tokens per level, average levels
            means = [T.reduce_mean(feats, axis=2) for feats in sampled]
            scale_merged = T.reduce_mean(T.stack(means, axis=2), axis=2)
            levels_np = None

        if use_tam:
            stacked, switch, task_merged = self.merge_task(content_u, scale_merged)
            stacked_np, switch_np = stacked.data, switch.data
        else:
            task_merged = content_u + scale_merged  # direct summation
            stacked_np = switch_np = None

        task_merged = self.norm_merged(task_merged)
        fga = self.generate_fine_grained(task_merged, anchors, memory.shapes)
        out = self.aggregate(memory, fga, content_u, layer_name=name)
        trace = DecoderTrace(
            content_updated=content_u.data, merged_levels=levels_np,
            scale_merged=scale_merged.data, stacked=stacked_np, switch=switch_np,
            task_merged=task_merged.data, fga_anchors=fga.anchors.data,
            fga_weights=fga.weights.data)
        return out, trace


class FgaDecoder:
    """Stack of decoder layers sharing the initial anchors."""

    def __init__(self, store: ParamStore, cfg: RunConfig):
        self.cfg = cfg
        self.content_embed = store.uniform("query.content", (cfg.n_queries, cfg.model_dim), 0.5)
        self.pos_embed = store.uniform("query.positional", (cfg.n_queries, cfg.model_dim), 0.5)
        self.anchor_proj = store.linear("query.anchor_proj", cfg.model_dim, 2)
        self.layers = [DecoderLayer(store, cfg, f"decoder.layer{i}")
                       for i in range(cfg.decoder_layers)]

    def init_queries(self) -> QuerySet:
        anchors = T.sigmoid(self.anchor_proj(self.pos_embed))
        return QuerySet(content=self.content_embed, positional=self.pos_embed,
                        anchors=anchors)

    def __call__(self, memory: EncodedMemory, use_hsam: bool = True,
                 use_tam: bool = True) -> tuple[Tensor, Tensor, list[DecoderTrace]]:
        """Decode into HOI embeddings.

        Returns (H, initial anchors, per-layer traces); H is
        (B, N_q, C_d).
        """
        cfg = self.cfg
        batch = memory.memory.shape[0]
        queries = self.init_queries()
        content = T.reshape(queries.content, (1, cfg.n_queries, cfg.model_dim))
        if batch > 1:
            content = T.concat([content] * batch, axis=0)
        traces = []
        for i, layer in enumerate(self.layers):
            content, trace = layer(content, queries.positional, queries.anchors,
                                   memory, use_hsam=use_hsam, use_tam=use_tam,
                                   name=f"decoder.layer{i}")
            traces.append(trace)
        return content, queries.anchors, traces
