import zlib

import numpy as np
import pytest

import skipgate as sg
from skipgate import tensor as T
from skipgate.errors import CapacityError, ConfigError
from skipgate.model import attn_delta_infer, mlp_delta_infer, rms_np

from conftest import moe_config, small_config


class TestConfig:
    def test_head_dims_must_factor(self):
        with pytest.raises(ConfigError):
            sg.ModelConfig(d_model=30, n_heads=4, head_dim=8).validate()

    def test_moe_topk_bounds(self):
        with pytest.raises(ConfigError):
            moe_config(moe=sg.MoESettings(n_experts=2, top_k=3)).validate()


class TestDenseForward:
    def test_single_token_regression_pinned(self):
        # Frozen output of the seeded init; guards against silent numeric drift.
        model = sg.build_model(small_config(), seed=1234)
        logits = sg.forward_dense(model, [7])
        assert logits.shape == (1, 64)
        expected = [
            0.05006870999932289, 0.02968597039580345, 0.03732601925730705,
            0.23151284456253052, -0.10345470905303955, 0.023124897852540016,
            0.04898665100336075, -0.09513484686613083,
        ]
        assert np.abs(logits[0, :8] - np.array(expected, dtype=np.float32)).max() == 0.0
        assert zlib.crc32(logits.tobytes()) == 599805594

    def test_all_zero_parameters_give_zero_logits(self):
        model = sg.build_model(small_config(), seed=0)
        for t in model.params.values():
            t.data[...] = 0.0
        logits = sg.forward_dense(model, [1, 2, 3])
        assert np.array_equal(logits, np.zeros_like(logits))

    def test_prefill_plus_step_matches_full_forward(self):
        model = sg.build_model(small_config(), seed=5)
        toks = np.random.default_rng(0).integers(0, 64, size=6)
        full = sg.forward_dense(model, toks)
        cache = sg.KVCache(model.cfg)
        pre = sg.forward_dense(model, toks[:5], cache)
        step = sg.forward_dense(model, toks[5:6], cache)
        inc = np.concatenate([pre, step], axis=0)
        assert np.abs(full - inc).max() < 1e-5

    def test_cache_appends_one_position_per_call(self):
        model = sg.build_model(small_config(), seed=5)
        cache = sg.KVCache(model.cfg)
        sg.forward_dense(model, [1, 2, 3], cache)
        assert cache.layers[0].length == 3
        sg.forward_dense(model, [4], cache)
        assert all(kv.length == 4 for kv in cache.layers.values())

    def test_max_seq_len_overflow(self):
        model = sg.build_model(small_config(max_seq_len=8), seed=0)
        with pytest.raises(CapacityError):
            sg.forward_dense(model, list(range(9)) + [0] * 3)

    def test_token_out_of_vocab(self):
        model = sg.build_model(small_config(), seed=0)
        with pytest.raises(IndexError):
            sg.forward_dense(model, [100])

    def test_causality(self):
        model = sg.build_model(small_config(), seed=6)
        rng = np.random.default_rng(1)
        toks = rng.integers(0, 64, size=12)
        base = sg.forward_dense(model, toks)
        for t in (3, 7, 11):
            mutated = toks.copy()
            mutated[t] = (mutated[t] + 1) % 64
            out = sg.forward_dense(model, mutated)
            assert np.array_equal(base[:t], out[:t]), f"position {t} leaked backwards"

    def test_gelu_variant_runs(self):
        model = sg.build_model(small_config(mlp_act="gelu"), seed=0)
        logits = sg.forward_dense(model, [1, 2])
        assert np.isfinite(logits).all()


class TestSublayers:
    def test_single_token_attention_equals_value_path(self):
        # softmax over one key is 1, so attention reduces to W_o(V) on that row
        model = sg.build_model(small_config(), seed=7)
        cfg = model.cfg
        x = np.random.default_rng(2).normal(size=(1, cfg.d_model)).astype(np.float32)
        out = sg.attention_layer(model, 0, x)
        xn = rms_np(x, model.p("layers.0.attn_norm").data, cfg.norm_eps)
        v = xn @ model.p("layers.0.attn.wv").data
        expected = x + v @ model.p("layers.0.attn.wo").data
        assert np.abs(out - expected).max() < 1e-6

    def test_mlp_layer_residual(self):
        model = sg.build_model(small_config(), seed=7)
        x = np.random.default_rng(3).normal(size=(4, 32)).astype(np.float32)
        out = sg.mlp_layer(model, 1, x)
        assert np.array_equal(out, x + mlp_delta_infer(model, 1, x))

    def test_train_and_infer_kernels_agree_bitwise(self):
        model = sg.build_model(small_config(), seed=8)
        x = np.random.default_rng(4).normal(size=(2, 6, 32)).astype(np.float32)
        pos = np.arange(6)
        infer = attn_delta_infer(model, 0, x, pos)
        from skipgate.model import attn_delta_train
        train = attn_delta_train(model, 0, T.Tensor(x), pos)
        assert np.array_equal(infer, train.data)
        rows = x.reshape(12, 32)
        from skipgate.model import mlp_delta_train
        assert np.array_equal(
            mlp_delta_infer(model, 1, rows), mlp_delta_train(model, 1, T.Tensor(rows)).data
        )


class TestMoELayer:
    def test_hand_selection_weights(self):
        # craft gate logits [2,1,0] for a one-hot row: softmax top-2 picks
        # experts 0 and 1 with the known weights
        model = sg.build_model(moe_config(moe=sg.MoESettings(3, 2, 16)), seed=9)
        gate = model.p("layers.0.moe.gate")
        gate.data[...] = 0.0
        gate.data[0, :3] = [2.0, 1.0, 0.0]
        x = np.zeros((1, 32), dtype=np.float32)
        x[0, 0] = 1.0
        y = sg.moe_layer_dense(model, 0, x)
        from skipgate.moe import _expert_infer
        w = np.exp([2.0, 1.0, 0.0])
        w /= w.sum()
        expected = w[0] * _expert_infer(model, 0, 0, x) + w[1] * _expert_infer(model, 0, 1, x)
        assert np.abs(y - expected).max() < 1e-6
        assert abs(w[0] - 0.6652) < 1e-4 and abs(w[1] - 0.2447) < 1e-4

    def test_topk_equals_n_experts_uses_all(self):
        cfg = moe_config(moe=sg.MoESettings(n_experts=3, top_k=3, expert_hidden=16))
        model = sg.build_model(cfg, seed=10)
        x = np.random.default_rng(5).normal(size=(4, 32)).astype(np.float32)
        y = sg.moe_layer_dense(model, 0, x)
        from skipgate.model import softmax_np
        from skipgate.moe import _expert_infer
        probs = softmax_np(x @ model.p("layers.0.moe.gate").data, axis=-1)
        expected = sum(
            probs[:, e : e + 1] * _expert_infer(model, 0, e, x) for e in range(3)
        )
        assert np.abs(y - expected).max() < 1e-5

    def test_moe_forward_finite(self):
        model = sg.build_model(moe_config(), seed=11)
        logits = sg.forward_dense(model, [1, 2, 3, 4])
        assert np.isfinite(logits).all()


class TestKVCacheAccounting:
    def test_byte_formula(self):
        cfg = small_config()
        model = sg.build_model(cfg, seed=0)
        cache = sg.KVCache(cfg)
        sg.forward_dense(model, [1, 2, 3, 4, 5], cache)
        per_layer = 2 * cfg.n_heads * 5 * cfg.head_dim * 4
        assert cache.nbytes() == cfg.n_layers * per_layer

    def test_absent_layers_count_zero(self):
        cfg = small_config()
        cache = sg.KVCache(cfg)
        assert cache.nbytes() == 0
