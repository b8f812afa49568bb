"""Decoder tests: anchor initialization, grid sampling, the merging
mechanisms at engineered switch settings, fine-grained anchor generation,
and deformable aggregation degeneracies."""

import numpy as np
import pytest

from hoidet import tensor as T
from hoidet.config import RunConfig, TINY_PRESET
from hoidet.decoder import FgaDecoder, multi_scale_sample, sampling_grid
from hoidet.encoder import MultiScaleEncoder
from hoidet.errors import ConfigError, NumericError
from hoidet.params import ParamStore
from hoidet.tensor import Tensor


def build(seed=3, **kw):
    base = dict(TINY_PRESET)
    base.update(kw)
    cfg = RunConfig(seed=seed, **base)
    store = ParamStore(np.random.default_rng(cfg.seed))
    encoder = MultiScaleEncoder(store, cfg)
    decoder = FgaDecoder(store, cfg)
    return cfg, store, encoder, decoder


def encoded(encoder, cfg, seed=0, batch=1):
    side = 8 * 2 ** (cfg.n_levels - 1) * 2
    rng = np.random.default_rng(seed)
    return encoder(Tensor(rng.uniform(size=(batch, side, side, 3))))


class TestInitAnchors:
    def test_zero_everything_gives_center(self):
        cfg, store, _, decoder = build()
        decoder.pos_embed.data = np.zeros_like(decoder.pos_embed.data)
        decoder.anchor_proj.w.data[:] = 0.0
        anchors = decoder.init_queries().anchors
        np.testing.assert_allclose(anchors.data, 0.5, atol=0)

    def test_shape_and_range(self):
        cfg, _, _, decoder = build()
        anchors = decoder.init_queries().anchors
        assert anchors.shape == (cfg.n_queries, 2)
        assert np.all(anchors.data > 0) and np.all(anchors.data < 1)


class TestMultiScaleSample:
    def test_token_counts(self):
        cfg, _, encoder, _ = build(n_levels=3, sampling_sizes=(1, 3, 5))
        mem = encoded(encoder, cfg)
        anchors = Tensor(np.full((cfg.n_queries, 2), 0.4))
        sampled = multi_scale_sample(mem, anchors, (1, 3, 5))
        assert [s.shape[2] for s in sampled] == [1, 9, 25]

    def test_even_size_rejected(self):
        with pytest.raises(ConfigError):
            sampling_grid(2, (4, 4))

    def test_grid_spacing_one_cell(self):
        grid = sampling_grid(3, (4, 8))
        assert grid.shape == (9, 2)
        # x spacing 1/8, y spacing 1/4, row-major over (dy, dx)
        np.testing.assert_allclose(grid[0], [-1 / 8, -1 / 4])
        np.testing.assert_allclose(grid[4], [0, 0])
        np.testing.assert_allclose(grid[8], [1 / 8, 1 / 4])

    def test_size_one_at_cell_center_reads_cell(self):
        cfg, _, encoder, _ = build(n_levels=2, sampling_sizes=(1, 1))
        mem = encoded(encoder, cfg)
        h, w = mem.shapes[0]
        anchors = Tensor(np.array([[(1 + 0.5) / w, (2 + 0.5) / h]]))
        sampled = multi_scale_sample(mem, anchors, (1, 1))
        want = mem.memory.data[:, mem.level_offsets[0] + 2 * w + 1, :]
        assert np.abs(sampled[0].data[:, 0, 0, :] - want).max() < 1e-9

    def test_constant_memory_preserved(self):
        # image large enough that every grid point stays in bounds, where
        # zero padding cannot attenuate the constant
        cfg, _, encoder, _ = build(n_levels=2, sampling_sizes=(1, 3))
        mem = encoder(Tensor(np.zeros((1, 64, 64, 3))))
        mem.memory.data[:] = 3.25
        anchors = Tensor(np.full((cfg.n_queries, 2), 0.5))
        for s in multi_scale_sample(mem, anchors, (1, 3)):
            np.testing.assert_allclose(s.data, 3.25, atol=1e-12)


class TestContentUpdate:
    def test_zero_output_projection_passthrough(self):
        cfg, _, _, decoder = build()
        layer = decoder.layers[0]
        layer.self_attn.wo.data = np.zeros_like(layer.self_attn.wo.data)
        rng = np.random.default_rng(1)
        content = Tensor(rng.normal(size=(2, cfg.n_queries, cfg.model_dim)))
        out = layer.update_content(content, decoder.pos_embed)
        np.testing.assert_array_equal(out.data, content.data)

    def test_positional_gradient_flows_via_qk(self):
        cfg, store, _, decoder = build()
        layer = decoder.layers[0]
        rng = np.random.default_rng(2)
        content = Tensor(rng.normal(size=(1, cfg.n_queries, cfg.model_dim)))
        pos = decoder.pos_embed
        with T.Tape() as tape:
            out = layer.update_content(content, pos)
            loss = T.reduce_sum(out * Tensor(rng.normal(size=out.shape)))
        tape.backward(loss)
        assert np.abs(pos.grad).max() > 0


class TestSpatialMerge:
    def test_single_token_level_is_projection_of_it(self):
        # one sampled token: the attention weight is forced to 1, so the
        # level merge is W_o(W_v(token)) regardless of the query
        cfg, _, encoder, decoder = build(n_levels=2, sampling_sizes=(1, 3))
        layer = decoder.layers[0]
        mem = encoded(encoder, cfg)
        anchors = decoder.init_queries().anchors
        sampled = multi_scale_sample(mem, anchors, cfg.sampling_sizes)
        rng = np.random.default_rng(3)
        content_u = Tensor(rng.normal(size=(1, cfg.n_queries, cfg.model_dim)))
        _, _ = layer.merge_spatial(sampled, content_u)
        tok = sampled[0].data  # (1, N_q, 1, D)
        want = (tok @ layer.level_merge.wv.data) @ layer.level_merge.wo.data
        x_m, _ = layer.merge_spatial(sampled, content_u)
        np.testing.assert_allclose(x_m.data[:, :, 0, :], want[:, :, 0, :], atol=1e-9)

    def test_merged_levels_shape(self):
        cfg, _, encoder, decoder = build(n_levels=3, sampling_sizes=(1, 3, 5))
        mem = encoded(encoder, cfg, batch=2)
        layer = decoder.layers[0]
        anchors = decoder.init_queries().anchors
        sampled = multi_scale_sample(mem, anchors, cfg.sampling_sizes)
        content_u = Tensor(np.zeros((2, cfg.n_queries, cfg.model_dim)))
        x_m, x_u = layer.merge_spatial(sampled, content_u)
        assert x_m.shape == (2, cfg.n_queries, 3, cfg.model_dim)
        assert x_u.shape == (2, cfg.n_queries, cfg.model_dim)

    def test_attention_rows_sum_to_one(self):
        cfg, _, encoder, decoder = build()
        mem = encoded(encoder, cfg)
        layer = decoder.layers[0]
        anchors = decoder.init_queries().anchors
        sampled = multi_scale_sample(mem, anchors, cfg.sampling_sizes)
        rng = np.random.default_rng(4)
        content_u = Tensor(rng.normal(size=(1, cfg.n_queries, cfg.model_dim)))
        layer.merge_spatial(sampled, content_u)
        for mha in (layer.level_merge, layer.scale_merge):
            np.testing.assert_allclose(mha.last_weights.sum(axis=-1), 1.0, atol=1e-6)


class TestTaskMerge:
    def rand_inputs(self, cfg, seed=5):
        rng = np.random.default_rng(seed)
        c = Tensor(rng.normal(size=(2, cfg.n_queries, cfg.model_dim)))
        x = Tensor(rng.normal(size=(2, cfg.n_queries, cfg.model_dim)))
        return c, x

    def test_switch_all_zero_returns_content(self):
        cfg, _, _, decoder = build()
        layer = decoder.layers[0]
        layer.switch_out.w.data[:] = 0.0
        layer.switch_out.b.data = np.full(4, -60.0)  # deep in the clamp
        c, x = self.rand_inputs(cfg)
        _, switch, fused = layer.merge_task(c, x)
        np.testing.assert_array_equal(switch.data, 0.0)
        np.testing.assert_array_equal(fused.data, c.data)

    def test_relu_like_switch_rows(self):
        # rows (1,0) and (0,0): fused = max(X_u, 0) + C_u
        cfg, _, _, decoder = build()
        layer = decoder.layers[0]
        layer.switch_out.w.data[:] = 0.0
        layer.switch_out.b.data = np.array([60.0, -60.0, -60.0, -60.0])
        c, x = self.rand_inputs(cfg, seed=6)
        _, switch, fused = layer.merge_task(c, x)
        np.testing.assert_array_equal(switch.data[0, 0], [[1.0, 0.0], [0.0, 0.0]])
        np.testing.assert_allclose(fused.data, np.maximum(x.data, 0.0) + c.data, atol=1e-12)

    def test_switch_range_and_shapes(self):
        cfg, _, _, decoder = build()
        layer = decoder.layers[0]
        c, x = self.rand_inputs(cfg, seed=7)
        stacked, switch, fused = layer.merge_task(c, x)
        assert stacked.shape == (2, cfg.n_queries, 2, cfg.model_dim)
        assert switch.shape == (2, cfg.n_queries, 2, 2)
        assert np.all(switch.data >= 0.0) and np.all(switch.data <= 1.0)
        assert fused.shape == c.shape


class TestFineGrainedAnchors:
    def test_zero_offsets_equal_initial_anchor(self):
        cfg, _, encoder, decoder = build()
        layer = decoder.layers[0]
        np.testing.assert_array_equal(layer.fga_offsets.w.data, 0.0)
        mem = encoded(encoder, cfg)
        anchors = decoder.init_queries().anchors
        rng = np.random.default_rng(8)
        u = Tensor(rng.normal(size=(1, cfg.n_queries, cfg.model_dim)))
        fga = layer.generate_fine_grained(u, anchors, mem.shapes)
        broadcast = np.broadcast_to(anchors.data[None, :, None, None, None, :],
                                    fga.anchors.shape)
        assert np.abs(fga.anchors.data - broadcast).max() < 1e-9

    def test_shapes(self):
        cfg, _, encoder, decoder = build(n_levels=3, sampling_sizes=(1, 3, 5))
        mem = encoded(encoder, cfg, batch=2)
        layer = decoder.layers[0]
        anchors = decoder.init_queries().anchors
        u = Tensor(np.zeros((2, cfg.n_queries, cfg.model_dim)))
        fga = layer.generate_fine_grained(u, anchors, mem.shapes)
        assert fga.anchors.shape == (2, cfg.n_queries, cfg.n_heads, 3, cfg.n_points, 2)
        assert fga.weights.shape == (2, cfg.n_queries, cfg.n_heads, 3, cfg.n_points)

    def test_weights_sum_to_one_per_head(self):
        cfg, _, encoder, decoder = build()
        mem = encoded(encoder, cfg)
        layer = decoder.layers[0]
        anchors = decoder.init_queries().anchors
        rng = np.random.default_rng(9)
        u = Tensor(rng.normal(size=(1, cfg.n_queries, cfg.model_dim)))
        fga = layer.generate_fine_grained(u, anchors, mem.shapes)
        sums = fga.weights.data.sum(axis=(-1, -2))
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)


class TestDeformableAggregate:
    def test_constant_memory_independent_of_anchor_positions(self):
        cfg, _, encoder, decoder = build()
        layer = decoder.layers[0]
        mem = encoded(encoder, cfg)
        mem.memory.data[:] = 0.42
        rng = np.random.default_rng(10)
        content_u = Tensor(rng.normal(size=(1, cfg.n_queries, cfg.model_dim)))
        outs = []
        from hoidet.decoder import FineGrainedAnchorSet
        for draw in range(3):
            # interior anchors: all bilinear neighbors stay in bounds
            a = rng.uniform(0.3, 0.7, size=(1, cfg.n_queries, cfg.n_heads,
                                            cfg.n_levels, cfg.n_points, 2))
            w = rng.uniform(0.1, 1.0, size=(1, cfg.n_queries, cfg.n_heads,
                                            cfg.n_levels, cfg.n_points))
            w = w / w.sum(axis=(-1, -2), keepdims=True)
            fga = FineGrainedAnchorSet(anchors=Tensor(a), weights=Tensor(w))
            outs.append(layer.aggregate(mem, fga, content_u).data)
        assert np.abs(outs[0] - outs[1]).max() < 1e-9
        assert np.abs(outs[0] - outs[2]).max() < 1e-9

    def test_far_outside_anchors_contribute_zero(self):
        cfg, _, encoder, decoder = build()
        layer = decoder.layers[0]
        mem = encoded(encoder, cfg)
        rng = np.random.default_rng(11)
        content_u = Tensor(rng.normal(size=(1, cfg.n_queries, cfg.model_dim)))
        from hoidet.decoder import FineGrainedAnchorSet
        a = np.full((1, cfg.n_queries, cfg.n_heads, cfg.n_levels, cfg.n_points, 2), 7.5)
        w = np.full((1, cfg.n_queries, cfg.n_heads, cfg.n_levels, cfg.n_points),
                    1.0 / (cfg.n_levels * cfg.n_points))
        fga = FineGrainedAnchorSet(anchors=Tensor(a), weights=Tensor(w))
        out_far = layer.aggregate(mem, fga, content_u).data
        mem_zero = encoded(encoder, cfg)
        mem_zero.memory.data[:] = 0.0
        interior = np.full_like(a, 0.5)
        out_zero = layer.aggregate(mem_zero, FineGrainedAnchorSet(
            anchors=Tensor(interior), weights=Tensor(w)), content_u).data
        np.testing.assert_allclose(out_far, out_zero, atol=1e-12)

    def test_delta_weight_constant_map_is_head_projection_sum(self):
        cfg, _, encoder, decoder = build()
        layer = decoder.layers[0]
        mem = encoded(encoder, cfg)
        const = 1.3
        mem.memory.data[:] = const
        from hoidet.deform import deformable_read
        rng = np.random.default_rng(12)
        a = rng.uniform(0.35, 0.65, size=(1, cfg.n_queries, cfg.n_heads,
                                          cfg.n_levels, cfg.n_points, 2))
        w = np.zeros((1, cfg.n_queries, cfg.n_heads, cfg.n_levels, cfg.n_points))
        w[..., 0, 0] = 1.0  # delta on (level 0, point 0) for every head
        pooled = deformable_read(mem.memory, mem.shapes, mem.level_offsets,
                                 Tensor(a), Tensor(w), layer.w_value, layer.w_out).data
        want = (np.full((1, cfg.model_dim), const) @ layer.w_value.data) @ layer.w_out.data
        np.testing.assert_allclose(pooled[0], np.broadcast_to(want, pooled[0].shape), atol=1e-9)

    def test_non_finite_anchors_rejected(self):
        cfg, _, encoder, decoder = build()
        layer = decoder.layers[0]
        mem = encoded(encoder, cfg)
        from hoidet.decoder import FineGrainedAnchorSet
        a = np.full((1, cfg.n_queries, cfg.n_heads, cfg.n_levels, cfg.n_points, 2), np.nan)
        w = np.full((1, cfg.n_queries, cfg.n_heads, cfg.n_levels, cfg.n_points), 0.25)
        content_u = Tensor(np.zeros((1, cfg.n_queries, cfg.model_dim)))
        with pytest.raises(NumericError, match="layer"):
            layer.aggregate(mem, FineGrainedAnchorSet(anchors=Tensor(a), weights=Tensor(w)),
                            content_u, layer_name="decoder.layer0")


class TestDecode:
    def test_zero_offset_delta_weight_reduces_to_anchor_reads(self):
        # engineered fine-grained generation: zero offsets (default init)
        # and a delta on (level 0, point 0); the pooled feature equals a
        # direct bilinear read of the value-projected memory at the
        # initial anchors
        cfg, _, encoder, decoder = build()
        layer = decoder.layers[0]
        mem = encoded(encoder, cfg)
        anchors = decoder.init_queries().anchors
        rng = np.random.default_rng(13)
        u = Tensor(rng.normal(size=(1, cfg.n_queries, cfg.model_dim)))
        layer.fga_weights.w.data[:] = 0.0
        bias = np.full(cfg.n_heads * cfg.n_levels * cfg.n_points, -1e4)
        bias.reshape(cfg.n_heads, cfg.n_levels, cfg.n_points)[:, 0, 0] = 0.0
        layer.fga_weights.b.data = bias
        fga = layer.generate_fine_grained(u, anchors, mem.shapes)

        from hoidet.deform import deformable_read
        pooled = deformable_read(mem.memory, mem.shapes, mem.level_offsets,
                                 fga.anchors, fga.weights,
                                 layer.w_value, layer.w_out).data

        value = mem.memory.data @ layer.w_value.data
        h0, w0 = mem.shapes[0]
        vmap = value[:, :h0 * w0, :].reshape(1, h0, w0, cfg.model_dim)
        direct = T.bilinear_sample(Tensor(vmap), anchors).data  # (1, N_q, D)
        want = direct @ layer.w_out.data
        np.testing.assert_allclose(pooled, want, atol=1e-9)

    def test_decode_shapes_and_determinism(self):
        cfg, _, encoder, decoder = build(decoder_layers=2)
        mem = encoded(encoder, cfg)
        out1, anchors1, traces1 = decoder(mem)
        out2, anchors2, traces2 = decoder(mem)
        assert out1.shape == (1, cfg.n_queries, cfg.model_dim)
        assert len(traces1) == 2
        np.testing.assert_array_equal(out1.data, out2.data)
        np.testing.assert_array_equal(anchors1.data, anchors2.data)

    def test_seeded_rebuild_bit_identical(self):
        cfg1, _, enc1, dec1 = build(seed=21)
        cfg2, _, enc2, dec2 = build(seed=21)
        img = np.random.default_rng(0).uniform(size=(1, 32, 32, 3))
        m1 = enc1(Tensor(img))
        m2 = enc2(Tensor(img))
        h1, _, _ = dec1(m1)
        h2, _, _ = dec2(m2)
        assert h1.data.tobytes() == h2.data.tobytes()

    def test_stage_toggles(self):
        cfg, _, encoder, decoder = build()
        mem = encoded(encoder, cfg)
        base, _, traces_base = decoder(mem, use_hsam=False, use_tam=False)
        hsam, _, traces_hsam = decoder(mem, use_hsam=True, use_tam=False)
        full, _, traces_full = decoder(mem, use_hsam=True, use_tam=True)
        assert traces_base[0].merged_levels is None
        assert traces_base[0].switch is None
        assert traces_hsam[0].merged_levels is not None
        assert traces_hsam[0].switch is None
        assert traces_full[0].switch is not None
        assert np.abs(base.data - full.data).max() > 1e-9
