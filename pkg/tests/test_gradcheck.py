"""Gradient-suite harness tests: pass/fail behavior, the negative
control, and the parameter cap."""

import pytest

from hoidet import gradcheck
from hoidet.config import RunConfig
from hoidet.errors import ConfigError


class TestOpSuite:
    def test_all_ops_below_target(self):
        errors = gradcheck.check_ops(seed=0)
        assert errors, "suite must cover the registered ops"
        for name, err in errors.items():
            assert err < gradcheck.PER_OP_TARGET, f"{name}: {err}"

    def test_covers_core_primitives(self):
        names = set(gradcheck.check_ops(seed=1))
        required = {"matmul", "softmax", "hard_sigmoid", "bilinear_sample",
                    "multi_head_attention", "relu", "sigmoid", "log",
                    "maximum", "max", "concat", "layer_norm", "take_pairs"}
        assert required <= names

    def test_seeded_determinism(self):
        a = gradcheck.check_ops(seed=2)
        b = gradcheck.check_ops(seed=2)
        assert a == b


class TestModelSuite:
    def test_tiny_model_below_target(self):
        errors, n_params = gradcheck.check_model(seed=0, coords_per_group=2)
        assert n_params < gradcheck.PARAM_CAP
        assert set(errors) == {"backbone", "encoder", "query", "decoder", "head"}
        assert max(errors.values()) < gradcheck.MODEL_TARGET

    def test_parameter_cap_refused(self):
        big = RunConfig(seed=0, n_queries=64, model_dim=256, n_heads=8,
                        encoder_layers=4, decoder_layers=4, backbone_dim=64,
                        ffn_dim=1024)
        with pytest.raises(ConfigError, match="cap"):
            gradcheck.check_model(seed=0, cfg=big)


class TestNegativeControl:
    def test_corrupted_gradient_detected(self):
        report = gradcheck.run_suite(seed=0, corrupt=True)
        assert report["passed"] is False

    def test_clean_suite_passes_within_budget(self):
        report = gradcheck.run_suite(seed=0)
        assert report["passed"] is True
        assert report["runtime_s"] < 120.0
