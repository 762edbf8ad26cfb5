import math

import numpy as np
import pytest

from vit5 import model as M
from vit5 import tensor as T
from vit5.config import (PRESETS, ConfigError, ModelConfig, count_parameter_groups, count_parameters,
                         preset)
from vit5.gradcheck import run_gradcheck
from vit5.rng import Rng

TOGGLE_FLIPS = {
    "layerscale": "off",
    "norm": "layernorm",
    "mlp": "swiglu",
    "rope": "off",
    "ape": "off",
    "qk_norm": "off",
    "qkv_bias": "on",
}

# parameter-name fragments each toggle is allowed to touch
TOGGLE_GROUPS = {
    "layerscale": ("scale1", "scale2"),
    "norm": ("norm",),
    "mlp": ("mlp.",),
    "rope": (),
    "ape": ("ape",),
    "qk_norm": ("q_norm", "k_norm"),
    "qkv_bias": ("attn.q.bias", "attn.k.bias", "attn.v.bias"),
}


class TestConfig:
    @pytest.mark.parametrize("name,expected", [("vit5-s", (12, 384, 6, 4)), ("vit5-b", (12, 768, 12, 4)),
                                               ("vit5-l", (24, 1024, 16, 4)), ("vit5-xl", (28, 1152, 16, 4))])
    def test_presets(self, name, expected):
        cfg = preset(name)
        assert (cfg.layers, cfg.dim, cfg.heads, cfg.registers) == expected

    def test_violations_listed(self):
        with pytest.raises(ConfigError) as exc:
            ModelConfig(dim=30, heads=4, registers=-1)
        assert any("divisible" in v for v in exc.value.violations)
        assert any("registers" in v for v in exc.value.violations)

    def test_rope_needs_d_head_multiple_of_4(self):
        with pytest.raises(ConfigError):
            ModelConfig(dim=12, heads=2)
        ModelConfig(dim=12, heads=2, rope="off")

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"dim": 64, "depth": 3})

    def test_roundtrip_dict(self):
        cfg = ModelConfig(rope_bases=(1e-5, 0.2))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestParameterCounts:
    @pytest.mark.parametrize("name", sorted(PRESETS) + ["vit5-tiny"])
    def test_closed_form_matches_builder_specs(self, name):
        cfg = preset(name)
        specs = M.param_specs(cfg)
        assert sum(math.prod(s.shape) for s in specs) == count_parameters(cfg)
        assert len(specs) == count_parameter_groups(cfg)

    def test_vit5_base_size(self):
        # about 86M parameters at base scale, in line with standard ViT-B
        assert 80e6 < count_parameters(preset("vit5-b")) < 92e6

    @pytest.mark.parametrize("field,value", list(TOGGLE_FLIPS.items()) + [("layerscale", "postnorm")])
    def test_counter_for_variants(self, field, value):
        cfg = ModelConfig().replace(**{field: value})
        assert sum(math.prod(s.shape) for s in M.param_specs(cfg)) == count_parameters(cfg)
        assert M.build(cfg, 0).num_parameters() == count_parameters(cfg)

    def test_gelu_swiglu_within_two_percent(self):
        a = count_parameters(preset("vit5-s"))
        b = count_parameters(preset("vit5-s", mlp="swiglu"))
        assert abs(a - b) / a < 0.02


class TestBuild:
    def test_init_values(self):
        m = M.build(ModelConfig(), 0)
        p = m.params
        assert np.all(p["blocks.0.scale1.lambda"].data == np.float32(1e-4))
        assert np.all(p["blocks.1.attn.q_norm.weight"].data == 1)
        assert not p["head.weight"].data.any() and not p["head.bias"].data.any()
        w = p["blocks.0.attn.q.weight"].data
        assert np.abs(w).max() <= 0.04 + 1e-7
        assert abs(float(w.std()) - 0.02) < 0.004

    def test_no_qkv_bias_buffers(self):
        names = M.build(ModelConfig(qkv_bias="off"), 0).params
        assert not [n for n in names if n.endswith(("q.bias", "k.bias", "v.bias"))]

    def test_postnorm_has_no_lambda(self):
        names = M.build(ModelConfig(layerscale="postnorm"), 0).params
        assert not [n for n in names if n.endswith(".lambda")]
        assert "blocks.0.scale1.postnorm_gain" in names

    def test_same_seed_same_params(self):
        a, b = M.build(ModelConfig(), 3), M.build(ModelConfig(), 3)
        assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)

    @pytest.mark.parametrize("field", sorted(TOGGLE_FLIPS))
    def test_toggle_isolation(self, field):
        base = M.build(ModelConfig(), Rng(5))
        flip = M.build(ModelConfig().replace(**{field: TOGGLE_FLIPS[field]}), Rng(5))
        touched = set(base.params) ^ set(flip.params)
        for name in set(base.params) & set(flip.params):
            a, b = base.params[name].data, flip.params[name].data
            if a.shape != b.shape or not np.array_equal(a, b):
                touched.add(name)
        allowed = TOGGLE_GROUPS[field]
        assert all(any(frag in n for frag in allowed) for n in touched), sorted(touched)


class TestForward:
    def test_token_count_8x8(self):
        m = M.build(ModelConfig(image_size=8), 0)
        x, grid = M.embed(m, np.zeros((1, 1, 8, 8), dtype=np.float32))
        assert grid == (2, 2) and x.shape == (1, 4 + 4 + 1, 64)
        m2 = M.build(ModelConfig(image_size=8, readout="mean_pool"), 0)
        assert M.embed(m2, np.zeros((1, 1, 8, 8), dtype=np.float32))[0].shape[1] == 8

    def test_zero_image_uniform_loss(self):
        m = M.build(ModelConfig(), 0)
        logits = M.forward(m, np.zeros((2, 1, 32, 32), dtype=np.float32))
        assert np.all(logits.data == logits.data[0, 0])
        loss = T.cross_entropy_with_logits(logits, [0, 3])
        assert float(loss.data) == pytest.approx(math.log(4), abs=1e-6)

    def test_non_divisible_resolution(self):
        m = M.build(ModelConfig(), 0)
        with pytest.raises(T.ShapeError):
            M.forward(m, np.zeros((1, 1, 30, 30), dtype=np.float32))

    def test_zero_lambda_blocks_are_identity(self, f64, rng):
        m = M.build(ModelConfig(), 0)
        for name, p in m.params.items():
            if name.endswith(".lambda"):
                p.data[:] = 0.0
            if name.startswith("head."):
                p.data[:] = rng.normal(size=p.shape)
        images = rng.uniform(size=(3, 1, 32, 32))
        x, _ = M.embed(m, images)
        from vit5 import nn

        pooled = nn.norm(x, m.final_norm).data[:, 0]
        ref = pooled @ m.params["head.weight"].data + m.params["head.bias"].data
        assert np.array_equal(M.forward(m, images).data, ref)

    def test_mean_pool_permutation_invariant(self, f64, rng):
        cfg = ModelConfig(rope="off", ape="off", readout="mean_pool")
        m = M.build(cfg, 1)
        for name, p in m.params.items():
            if name.startswith("head.") or name.endswith(".lambda"):
                p.data[:] = rng.normal(size=p.shape)
        images = rng.uniform(size=(2, 1, 32, 32))
        perm = rng.permutation(64)
        tiles = images.reshape(2, 1, 8, 4, 8, 4).transpose(0, 1, 2, 4, 3, 5).reshape(2, 1, 64, 4, 4)
        shuffled = tiles[:, :, perm].reshape(2, 1, 8, 8, 4, 4).transpose(0, 1, 2, 4, 3, 5).reshape(2, 1, 32, 32)
        np.testing.assert_allclose(M.forward(m, images).data, M.forward(m, shuffled).data, atol=1e-6)

    def test_ape_resize_identity_and_rows(self):
        assert np.allclose(M.ape_resize_matrix((8, 8), (8, 8)), np.eye(64))
        r = M.ape_resize_matrix((8, 8), (12, 12))
        assert r.shape == (144, 64) and np.allclose(r.sum(axis=1), 1.0)

    def test_other_resolution_runs(self):
        m = M.build(ModelConfig(), 0)
        for res in (24, 48, 64):
            assert M.forward(m, np.zeros((1, 1, res, res), dtype=np.float32)).shape == (1, 4)


class TestAttentionMaps:
    def test_map_mass(self, f64, rng):
        m = M.build(ModelConfig(), 2)
        img = rng.uniform(size=(1, 32, 32))
        row, grid = M.attention_row(m, img, 1, 0, "register_2")
        assert np.all(row >= 0) and abs(row.sum() - 1) < 1e-6
        amap = M.attention_maps(m, img, 1, 0, "register_2")
        assert amap.shape == (8, 8)
        assert abs(amap.sum() + row[:m.num_prefix].sum() - 1) < 1e-6

    def test_single_patch_image(self, f64):
        m = M.build(ModelConfig(image_size=4, patch=4), 0)
        amap = M.attention_maps(m, np.ones((1, 4, 4)), 0, 0, "class")
        assert amap.shape == (1, 1) and 0 <= amap[0, 0] <= 1

    def test_out_of_range(self):
        m = M.build(ModelConfig(), 0)
        with pytest.raises(ValueError):
            M.attention_maps(m, np.zeros((1, 32, 32)), 5, 0, "class")
        with pytest.raises(ValueError):
            M.attention_maps(m, np.zeros((1, 32, 32)), 0, 2, "class")
        with pytest.raises(ValueError):
            M.attention_maps(m, np.zeros((1, 32, 32)), 0, 0, "register_9")

    def test_query_names(self):
        m = M.build(ModelConfig(), 0)
        assert M.query_index(m, "class", (8, 8)) == 0
        assert M.query_index(m, "register_0", (8, 8)) == 1
        assert M.query_index(m, "patch_1_2", (8, 8)) == 5 + 8 + 2
        assert M.query_index(m, (1, 2), (8, 8)) == 5 + 8 + 2


def test_model_gradcheck_registry():
    items = run_gradcheck(["model"])
    assert items and all(i.passed for i in items), [(i.name, i.max_rel_error) for i in items]
