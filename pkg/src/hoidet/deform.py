"""Deformable attention core: weighted bilinear reads of per-level value
maps at per-head anchor positions.

Shared by the encoder's self-attention (anchors predicted as offsets from
each row's own pixel) and the decoder's aggregation step (anchors and
weights supplied by the fine-grained generator).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


def split_levels(memory: Tensor, shapes, level_offsets) -> list[Tensor]:
    """Slice flattened per-level rows back into (B, H_l, W_l, D) maps."""
    batch = memory.shape[0]
    dim = memory.shape[-1]
    maps = []
    for (h, w), off in zip(shapes, level_offsets):
        rows = memory[:, off:off + h * w, :]
        maps.append(T.reshape(rows, (batch, h, w, dim)))
    return maps


def deformable_read(memory: Tensor, shapes, level_offsets,
                    anchors: Tensor, weights: Tensor,
                    w_value: Parameter, w_out: Parameter) -> Tensor:
    """Aggregate value features at fine-grained anchor positions.

    memory   -- (B, N_s, D) encoded rows
    anchors  -- (B, N, H, L, K, 2) normalized sampling positions
    weights  -- (B, N, H, L, K) attention weights (callers normalize them)
    returns  -- (B, N, D): per-head weighted sums, heads concatenated,
                projected by ``w_out``
    """
    batch, n, heads, n_levels, n_points, _ = anchors.shape
    dim = memory.shape[-1]
    d_head = dim // heads

    value = T.matmul(memory, w_value)
    value_maps = split_levels(value, shapes, level_offsets)

    acc = None
    for lvl, (h, w) in enumerate(shapes):
        # (B, H_l, W_l, D) -> (B*heads, H_l, W_l, d_head)
        vmap = T.reshape(value_maps[lvl], (batch, h, w, heads, d_head))
        vmap = T.transpose(vmap, (0, 3, 1, 2, 4))
        vmap = T.reshape(vmap, (batch * heads, h, w, d_head))

        pts = anchors[:, :, :, lvl, :, :]                   # (B, N, H, K, 2)
        pts = T.transpose(pts, (0, 2, 1, 3, 4))
        pts = T.reshape(pts, (batch * heads, n * n_points, 2))

        sampled = T.bilinear_sample(vmap, pts)              # (B*H, N*K, d_head)
        sampled = T.reshape(sampled, (batch, heads, n, n_points, d_head))

        wl = weights[:, :, :, lvl, :]                       # (B, N, H, K)
        wl = T.transpose(wl, (0, 2, 1, 3))
        wl = T.reshape(wl, (batch, heads, n, n_points, 1))
        term = T.reduce_sum(sampled * wl, axis=3)           # (B, H, N, d_head)
        acc = term if acc is None else acc + term

    merged = T.transpose(acc, (0, 2, 1, 3))                 # (B, N, H, d_head)
    merged = T.reshape(merged, (batch, n, dim))
    return T.matmul(merged, w_out)


def scale_offsets_to_levels(offsets: Tensor, shapes) -> Tensor:
    """Divide raw (..., L, K, 2) offsets by each level's (W_l, H_l) so one
    offset unit spans one feature cell of that level."""
    n_levels = offsets.shape[-3]
    inv = np.ones(offsets.shape[-3:])
    for lvl, (h, w) in enumerate(shapes):
        inv[lvl, :, 0] = 1.0 / w
        inv[lvl, :, 1] = 1.0 / h
    assert n_levels == len(shapes)
    return offsets * Tensor(inv)
