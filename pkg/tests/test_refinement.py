"""Refinement blocks, projection head, and the multi-scale descriptor."""

import numpy as np
import pytest

from tokagg import tensor as T
from tokagg.aggregation import FeatureMap, TokenSet
from tokagg.errors import ConfigurationError, ShapeMismatchError
from tokagg.refinement import (
    HeadParams,
    ModelConfig,
    RefinementBlockParams,
    forward_descriptor,
    head_project,
    init_block,
    init_model,
    mha_cross,
    mha_self,
    multiscale_descriptor,
    refine_stack,
)
from tokagg.tensor import Tensor


def zero_block(channels, head_count=2):
    zeros = lambda: Tensor(np.zeros((channels, channels)), requires_grad=True)
    return RefinementBlockParams(
        self_wq=zeros(), self_wk=zeros(), self_wv=zeros(), self_wm=zeros(),
        self_ln_gain=Tensor(np.ones(channels), requires_grad=True),
        self_ln_bias=Tensor(np.zeros(channels), requires_grad=True),
        cross_wq=zeros(), cross_wk=zeros(), cross_wv=zeros(), cross_wm=zeros(),
        cross_ln_gain=Tensor(np.ones(channels), requires_grad=True),
        cross_ln_bias=Tensor(np.zeros(channels), requires_grad=True),
        head_count=head_count,
    )


class TestMhaSelf:
    def test_zero_branch_is_identity(self, rng):
        tokens = TokenSet(Tensor(rng.normal(size=(4, 8))))
        out = mha_self(tokens, zero_block(8))
        np.testing.assert_array_equal(out.values.data, tokens.values.data)

    def test_single_token_softmax_is_one(self, rng):
        block = init_block(8, 2, rng)
        tokens = TokenSet(Tensor(rng.normal(size=(1, 8))))
        out = mha_self(tokens, block)
        # S = [[1]] per head, so the branch is LayerNorm((v @ wm)-pathway) of the token
        v = tokens.values.data @ block.self_wv.data
        branch_in = Tensor(v @ block.self_wm.data)
        expected = tokens.values.data + T.layer_norm_rows(
            branch_in, block.self_ln_gain, block.self_ln_bias).data
        np.testing.assert_allclose(out.values.data, expected, atol=1e-12)

    def test_attention_rows_sum_to_one(self, rng):
        from tokagg.refinement import _attention_scale, _multi_head

        tok = Tensor(rng.normal(size=(4, 8)))
        block = init_block(8, 2, rng)
        q = T.matmul(tok, block.self_wq)
        k = T.matmul(tok, block.self_wk)
        v = T.matmul(tok, block.self_wv)
        _, scores = _multi_head(q, k, v, block.self_wm, 2, _attention_scale(8, 2, False),
                                0.0, None, False)
        for s in scores:
            np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-9)

    def test_bad_head_count_rejected(self, rng):
        with pytest.raises(ConfigurationError):
            init_block(8, 3, rng)

    def test_vjp_against_finite_differences(self, rng):
        block = init_block(16, 2, rng)
        tokens = rng.normal(size=(4, 16))
        weights = rng.normal(size=(4, 16))

        def f(t):
            out = mha_self(TokenSet(t), block, train_mode=False)
            return T.sum_all(T.mul_const(out.values, weights))

        assert T.vjp_check(f, tokens) < 1e-5

        def g(t):
            p = RefinementBlockParams(
                self_wq=t, self_wk=block.self_wk, self_wv=block.self_wv,
                self_wm=block.self_wm, self_ln_gain=block.self_ln_gain,
                self_ln_bias=block.self_ln_bias, cross_wq=block.cross_wq,
                cross_wk=block.cross_wk, cross_wv=block.cross_wv,
                cross_wm=block.cross_wm, cross_ln_gain=block.cross_ln_gain,
                cross_ln_bias=block.cross_ln_bias, head_count=2)
            out = mha_self(TokenSet(Tensor(tokens)), p, train_mode=False)
            return T.sum_all(T.mul_const(out.values, weights))

        assert T.vjp_check(g, block.self_wq.data) < 1e-5


class TestMhaCross:
    def test_zero_branch_is_identity(self, rng):
        tokens = TokenSet(Tensor(rng.normal(size=(4, 8))))
        fmap = FeatureMap.from_array(rng.normal(size=(8, 3, 3)))
        out, _ = mha_cross(tokens, fmap, zero_block(8))
        np.testing.assert_array_equal(out.values.data, tokens.values.data)

    def test_single_position(self, rng):
        block = init_block(8, 2, rng)
        tokens = TokenSet(Tensor(rng.normal(size=(3, 8))))
        fmap = FeatureMap.from_array(rng.normal(size=(8, 1, 1)))
        out, maps = mha_cross(tokens, fmap, block)
        np.testing.assert_allclose(maps.values.data, 1.0, atol=0)
        # every token receives the same single feature vector through V
        feat = fmap.values.data[:, 0, 0]
        branch_in = Tensor(np.tile(feat @ block.cross_wv.data, (3, 1)) @ block.cross_wm.data)
        expected = tokens.values.data + T.layer_norm_rows(
            branch_in, block.cross_ln_gain, block.cross_ln_bias).data
        np.testing.assert_allclose(out.values.data, expected, atol=1e-12)

    def test_duplicated_positions_leave_tokens_unchanged(self, rng):
        block = init_block(8, 2, rng)
        tokens = TokenSet(Tensor(rng.normal(size=(4, 8))))
        base = rng.normal(size=(8, 2, 1))  # 2 positions
        doubled = np.concatenate([base, base], axis=1)  # each position twice
        out1, _ = mha_cross(tokens, FeatureMap.from_array(base), block)
        out2, _ = mha_cross(tokens, FeatureMap.from_array(doubled), block)
        np.testing.assert_allclose(out1.values.data, out2.values.data, atol=1e-12)

    def test_spatial_permutation_leaves_tokens_unchanged(self, rng):
        block = init_block(8, 2, rng)
        tokens = TokenSet(Tensor(rng.normal(size=(4, 8))))
        fmap = rng.normal(size=(8, 4, 3))
        perm = rng.permutation(12)
        shuffled = fmap.reshape(8, -1)[:, perm].reshape(8, 4, 3)
        out1, _ = mha_cross(tokens, FeatureMap.from_array(fmap), block)
        out2, _ = mha_cross(tokens, FeatureMap.from_array(shuffled), block)
        np.testing.assert_allclose(out1.values.data, out2.values.data, atol=1e-12)

    def test_attention_rows_sum_to_one(self, rng):
        block = init_block(8, 2, rng)
        tokens = TokenSet(Tensor(rng.normal(size=(4, 8))))
        fmap = FeatureMap.from_array(rng.normal(size=(8, 3, 5)))
        _, maps = mha_cross(tokens, fmap, block)
        np.testing.assert_allclose(maps.values.data.reshape(4, -1).sum(axis=1), 1.0, atol=1e-9)

    def test_vjp_against_finite_differences(self, rng):
        block = init_block(16, 2, rng)
        tokens = rng.normal(size=(4, 16))
        fmap = rng.normal(size=(16, 3, 3))
        weights = rng.normal(size=(4, 16))

        def f(t):
            out, _ = mha_cross(TokenSet(Tensor(tokens)), FeatureMap(t), block)
            return T.sum_all(T.mul_const(out.values, weights))

        assert T.vjp_check(f, fmap) < 1e-5

        def g(t):
            out, _ = mha_cross(TokenSet(t), FeatureMap(Tensor(fmap)), block)
            return T.sum_all(T.mul_const(out.values, weights))

        assert T.vjp_check(g, tokens) < 1e-5


class TestRefineStack:
    def test_single_block_equals_composition(self, rng):
        block = init_block(8, 2, rng)
        tokens = TokenSet(Tensor(rng.normal(size=(4, 8))))
        fmap = FeatureMap.from_array(rng.normal(size=(8, 3, 3)))
        stacked = refine_stack(tokens, fmap, [block])
        manual, _ = mha_cross(mha_self(tokens, block), fmap, block)
        np.testing.assert_array_equal(stacked.values.data, manual.values.data)

    def test_two_blocks_equal_manual_composition(self, rng):
        blocks = [init_block(8, 2, rng) for _ in range(2)]
        tokens = TokenSet(Tensor(rng.normal(size=(4, 8))))
        fmap = FeatureMap.from_array(rng.normal(size=(8, 3, 3)))
        stacked = refine_stack(tokens, fmap, blocks)
        step1, _ = mha_cross(mha_self(tokens, blocks[0]), fmap, blocks[0])
        step2, _ = mha_cross(mha_self(step1, blocks[1]), fmap, blocks[1])
        np.testing.assert_array_equal(stacked.values.data, step2.values.data)

    def test_output_shape(self, rng):
        for n in (1, 2, 3):
            blocks = [init_block(8, 2, rng) for _ in range(n)]
            tokens = TokenSet(Tensor(rng.normal(size=(5, 8))))
            fmap = FeatureMap.from_array(rng.normal(size=(8, 3, 3)))
            assert refine_stack(tokens, fmap, blocks).values.shape == (5, 8)

    def test_empty_blocks_rejected(self, rng):
        tokens = TokenSet(Tensor(rng.normal(size=(4, 8))))
        fmap = FeatureMap.from_array(rng.normal(size=(8, 3, 3)))
        with pytest.raises(ConfigurationError):
            refine_stack(tokens, fmap, [])

    def test_identity_with_all_zero_blocks(self, rng):
        tokens = TokenSet(Tensor(rng.normal(size=(4, 8))))
        fmap = FeatureMap.from_array(rng.normal(size=(8, 3, 3)))
        out = refine_stack(tokens, fmap, [zero_block(8), zero_block(8)])
        np.testing.assert_array_equal(out.values.data, tokens.values.data)


class TestHeadProject:
    def test_identity_projection_is_concatenation(self, rng):
        tokens = TokenSet(Tensor(rng.normal(size=(3, 4))))
        head = HeadParams(weight=Tensor(np.eye(12)))
        out = head_project(tokens, head)
        np.testing.assert_array_equal(out.data, tokens.values.data.reshape(-1))

    def test_one_hot_column_selects_channel(self, rng):
        tokens = TokenSet(Tensor(rng.normal(size=(2, 3))))
        weight = np.zeros((6, 1))
        weight[4, 0] = 1.0  # token 1, channel 1
        out = head_project(tokens, HeadParams(weight=Tensor(weight)))
        np.testing.assert_allclose(out.data, [tokens.values.data[1, 1]], atol=1e-15)

    def test_shape_mismatch_rejected(self, rng):
        tokens = TokenSet(Tensor(rng.normal(size=(3, 4))))
        with pytest.raises(ShapeMismatchError):
            head_project(tokens, HeadParams(weight=Tensor(np.eye(8))))

    def test_vjp_against_finite_differences(self, rng):
        tokens = rng.normal(size=(3, 4))
        head = HeadParams(weight=Tensor(rng.normal(size=(12, 5))),
                          bias=Tensor(rng.normal(size=5)))
        weights = rng.normal(size=5)

        def f(t):
            return T.sum_all(T.mul_const(head_project(TokenSet(t), head), weights))

        assert T.vjp_check(f, tokens) < 1e-6

        def g(t):
            return T.sum_all(T.mul_const(
                head_project(TokenSet(Tensor(tokens)), HeadParams(weight=t, bias=head.bias)),
                weights))

        assert T.vjp_check(g, head.weight.data) < 1e-6


class TestMultiscale:
    def desk_config(self):
        return ModelConfig(channels=8, token_count=2, descriptor_dim=6,
                           block_count=1, head_count=2, scales=(1.0,))

    def test_identical_scales_reduce_to_single_scale(self, rng):
        params = init_model(self.desk_config(), None, seed=0)
        fmap = FeatureMap.from_array(rng.normal(size=(8, 4, 4)))
        single = multiscale_descriptor([fmap], params)
        triple = multiscale_descriptor([fmap, fmap, fmap], params)
        np.testing.assert_allclose(single, triple, atol=1e-12)

    def test_single_scale_is_normalized_projection(self, rng):
        params = init_model(self.desk_config(), None, seed=0)
        fmap = FeatureMap.from_array(rng.normal(size=(8, 4, 4)))
        desc = forward_descriptor(fmap, params)
        expected = desc.data / np.linalg.norm(desc.data)
        np.testing.assert_allclose(multiscale_descriptor([fmap], params), expected, atol=1e-12)

    def test_three_scales_unit_norm(self, rng):
        params = init_model(self.desk_config(), None, seed=0)
        maps = [FeatureMap.from_array(rng.normal(size=(8, h, h))) for h in (3, 4, 6)]
        out = multiscale_descriptor(maps, params)
        assert abs(np.linalg.norm(out) - 1.0) < 1e-9

    def test_three_scales_match_naive_recomputation(self, rng):
        params = init_model(self.desk_config(), None, seed=0)
        maps = [FeatureMap.from_array(rng.normal(size=(8, h, h))) for h in (3, 4, 6)]
        acc = np.zeros(6)
        for fmap in maps:
            d = forward_descriptor(fmap, params).data
            acc += d / np.linalg.norm(d)
        acc /= 3.0
        expected = acc / np.linalg.norm(acc)
        np.testing.assert_allclose(multiscale_descriptor(maps, params), expected, atol=1e-12)

    def test_empty_scale_list_rejected(self, rng):
        params = init_model(self.desk_config(), None, seed=0)
        with pytest.raises(ConfigurationError):
            multiscale_descriptor([], params)


class TestModelConfig:
    def test_paper_defaults(self):
        cfg = ModelConfig(channels=2048)
        assert cfg.token_count == 4
        assert cfg.block_count == 2
        assert cfg.descriptor_dim == 1024
        np.testing.assert_allclose(
            cfg.scales, [1.0 / np.sqrt(2.0), 1.0, np.sqrt(2.0)], atol=1e-15)

    def test_head_count_must_divide_channels(self):
        with pytest.raises(ConfigurationError):
            ModelConfig(channels=10, head_count=4)

    def test_round_trip_dict(self):
        cfg = ModelConfig(channels=16, head_count=2, descriptor_dim=8)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg
