"""
Tests for the GMA block: segment split, aggregators, attention kernels,
token ensemble and the full block.
"""
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from groupmix.analysis.bench import fit_loglog_slope
from groupmix.core import ops
from groupmix.core.errors import ConfigurationError, DimensionError
from groupmix.core.gradcheck import check_gradients
from groupmix.core.tensor import Tensor
from groupmix.models.configs import AggregatorKind, AggregatorSpec, AttentionKind, GmaConfig
from groupmix.models.gma import (
    aggregate_non_attention,
    aggregate_pre_attention,
    attention_macs,
    conv_group_forward,
    factorized_attention,
    gma_forward,
    gma_param_count,
    gma_param_specs,
    split_segments,
    token_ensemble,
    vanilla_attention,
)
from groupmix.models.params import ParamStore, materialize

IDENTITY = AggregatorSpec.identity()


def _hardswish(x):
    return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0


def _channel_norm(x, gamma, beta, axis=1, eps=1e-6):
    mu = x.mean(axis=axis, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axis, keepdims=True)
    shape = [1] * x.ndim
    shape[axis] = -1
    return (x - mu) / np.sqrt(var + eps) * gamma.reshape(shape) + beta.reshape(shape)


def _store(**arrays):
    return ParamStore({name.replace("__", "."): Tensor(value) for name, value in arrays.items()}).scope("")


class TestSplitSegments:
    @pytest.mark.parametrize("dim,width", [(40, 8), (200, 40)])
    def test_five_equal_segments(self, dim, width):
        parts = split_segments(Tensor(np.zeros((3, dim, 2, 2))), dim)
        assert len(parts) == 5
        assert all(p.shape == (3, width, 2, 2) for p in parts)

    def test_round_trip(self, tensor_factory):
        x = tensor_factory(6, 20, 3, 3)
        assert_array_equal(ops.concat(split_segments(x, 20), axis=1).data, x.data)

    def test_segment_order_is_channel_contiguous(self):
        x = Tensor(np.arange(10, dtype=float).reshape(1, 10, 1, 1))
        parts = split_segments(x, 10)
        assert [p.data.ravel().tolist() for p in parts] == [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]

    def test_indivisible_dim(self):
        with pytest.raises(ConfigurationError):
            split_segments(Tensor(np.zeros((3, 12, 2, 2))), 12)


class TestPreAttentionAggregator:
    def test_identity_on_zeros(self):
        params = _store(norm__weight=np.ones(4), norm__bias=np.zeros(4))
        out = aggregate_pre_attention(Tensor(np.zeros((3, 4, 5, 5))), IDENTITY, params)
        assert_array_equal(out.data, 0.0)

    def test_delta_conv_with_identity_mapping_passes_through(self, rng):
        s, k = 3, 5
        kernel = np.zeros((s, k, k))
        kernel[:, k // 2, k // 2] = 1.0
        params = _store(agg__weight=kernel, agg__bias=np.zeros(s), pw__weight=np.eye(s), pw__bias=np.zeros(s),
                        norm__weight=np.ones(s), norm__bias=np.zeros(s))
        # hardswish is the identity above 3
        x = Tensor(rng.uniform(3.5, 5.0, size=(3, s, 6, 6)))
        out = aggregate_pre_attention(x, AggregatorSpec.conv(k), params, bypass_norm=True)
        assert_allclose(out.data, x.data, atol=1e-12)

    @pytest.mark.parametrize("k", [3, 5, 7])
    def test_resolution_preserved(self, k, gma_block, tensor_factory):
        config, store = gma_block
        seg = tensor_factory(3, config.segment, 5, 6)
        spec = AggregatorSpec.conv(k)
        scope = ParamStore({
            "agg.weight": Tensor(np.ones((config.segment, k, k)) / k ** 2),
            "agg.bias": Tensor(np.zeros(config.segment)),
            "pw.weight": store["branch1.pw.weight"],
            "pw.bias": store["branch1.pw.bias"],
            "norm.weight": store["branch1.norm.weight"],
            "norm.bias": store["branch1.norm.bias"],
        }).scope("")
        assert aggregate_pre_attention(seg, spec, scope).shape == seg.shape

    @pytest.mark.parametrize("kind", [AggregatorKind.MIN_POOL, AggregatorKind.MAX_POOL, AggregatorKind.AVG_POOL])
    def test_pool_kinds_need_no_mapping(self, kind, tensor_factory):
        params = _store(norm__weight=np.ones(2), norm__bias=np.zeros(2))
        out = aggregate_pre_attention(tensor_factory(3, 2, 4, 4), AggregatorSpec(kind, 3), params)
        assert out.shape == (3, 2, 4, 4)


class TestNonAttentionAggregator:
    def _params(self, s, rng, k=3):
        return _store(
            agg__weight=rng.normal(size=(3 * s, k, k)), agg__bias=rng.normal(size=3 * s),
            pw__weight=rng.normal(size=(s, 3 * s)), pw__bias=rng.normal(size=s),
            norm__weight=np.ones(s), norm__bias=np.zeros(s),
        )

    def test_zero_input_zero_output(self, rng):
        s = 4
        params = _store(
            agg__weight=rng.normal(size=(3 * s, 3, 3)), agg__bias=np.zeros(3 * s),
            pw__weight=rng.normal(size=(s, 3 * s)), pw__bias=np.zeros(s),
            norm__weight=np.ones(s), norm__bias=np.zeros(s),
        )
        out = aggregate_non_attention(Tensor(np.zeros((6, s, 3, 3))), params)
        assert_array_equal(out.data, 0.0)

    def test_output_shape(self, rng, tensor_factory):
        out = aggregate_non_attention(tensor_factory(6, 8, 7, 7), self._params(8, rng))
        assert out.shape == (2, 8, 7, 7)

    def test_matches_nested_loop_oracle(self, rng, tensor_factory):
        s, b, h, w = 2, 2, 4, 5
        params = self._params(s, rng)
        seg4 = tensor_factory(3 * b, s, h, w)
        out = aggregate_non_attention(seg4, params, bypass_norm=True).data

        x = seg4.data.reshape(3, b, s, h, w).transpose(1, 0, 2, 3, 4).reshape(b, 3 * s, h, w)
        kernel, kbias = params["agg.weight"].data, params["agg.bias"].data
        dw = np.zeros_like(x)
        for n in range(b):
            for c in range(3 * s):
                for i in range(h):
                    for j in range(w):
                        acc = kbias[c]
                        for di in range(3):
                            for dj in range(3):
                                ii, jj = i + di - 1, j + dj - 1
                                if 0 <= ii < h and 0 <= jj < w:
                                    acc += kernel[c, di, dj] * x[n, c, ii, jj]
                        dw[n, c, i, j] = acc
        pw_weight, pw_bias = params["pw.weight"].data, params["pw.bias"].data
        expected = np.zeros((b, s, h, w))
        for n in range(b):
            for o in range(s):
                expected[n, o] = pw_bias[o] + sum(pw_weight[o, c] * dw[n, c] for c in range(3 * s))
        assert_allclose(out, _hardswish(expected), atol=1e-10)

    def test_batch_must_hold_three_maps(self, rng, tensor_factory):
        with pytest.raises(DimensionError):
            aggregate_non_attention(tensor_factory(4, 2, 3, 3), self._params(2, rng))


class TestFactorizedAttention:
    def test_single_position_follows_formula(self):
        q = Tensor(np.array([1.0, 0.0]).reshape(1, 1, 1, 2))
        k = Tensor(np.array([2.0, 0.0]).reshape(1, 1, 1, 2))
        v = Tensor(np.array([0.0, 3.0]).reshape(1, 1, 1, 2))
        out = factorized_attention(q, k, v, 1.0 / math.sqrt(2.0)).data.ravel()
        # softmax over one position maps every key feature to 1, so the context is [[0, 3], [0, 3]]
        assert_allclose(out, [0.0, 3.0 / math.sqrt(2.0)], atol=1e-12)

    def test_matches_dense_oracle(self, tensor_factory):
        q, k, v = (tensor_factory(2, 3, 7, 4) for _ in range(3))
        scale = 0.5
        out = factorized_attention(q, k, v, scale).data
        ks = np.exp(k.data - k.data.max(axis=2, keepdims=True))
        ks /= ks.sum(axis=2, keepdims=True)
        context = np.einsum("bhnd,bhne->bhde", ks, v.data)
        assert_allclose(out, np.einsum("bhnd,bhde->bhne", q.data * scale, context), atol=1e-12)

    def test_constant_keys_average_values(self, tensor_factory):
        n = 6
        q, v = tensor_factory(1, 1, n, 3), tensor_factory(1, 1, n, 3)
        k = Tensor(np.tile(np.array([0.3, -1.0, 2.0]), (1, 1, n, 1)))
        out = factorized_attention(q, k, v, 1.0).data[0, 0]
        context = np.ones((3, 1)) @ v.data[0, 0].mean(axis=0, keepdims=True)
        assert_allclose(out, q.data[0, 0] @ context, atol=1e-12)

    def test_permuting_queries_permutes_output(self, tensor_factory, rng):
        q, k, v = (tensor_factory(1, 2, 9, 4) for _ in range(3))
        perm = rng.permutation(9)
        out = factorized_attention(q, k, v, 0.5).data
        permuted = factorized_attention(Tensor(q.data[:, :, perm]), k, v, 0.5).data
        assert_allclose(permuted, out[:, :, perm], atol=1e-12)

    def test_softmax_on_context_variant(self, tensor_factory):
        q, k, v = (tensor_factory(1, 1, 5, 3) for _ in range(3))
        out = factorized_attention(q, k, v, 1.0, softmax_on_context=True).data[0, 0]
        context = k.data[0, 0].T @ v.data[0, 0]
        context = np.exp(context - context.max(axis=1, keepdims=True))
        context /= context.sum(axis=1, keepdims=True)
        assert_allclose(out, q.data[0, 0] @ context, atol=1e-12)

    def test_shape_mismatch(self, tensor_factory):
        with pytest.raises(DimensionError):
            factorized_attention(tensor_factory(1, 1, 4, 2), tensor_factory(1, 1, 5, 2), tensor_factory(1, 1, 4, 2), 1.0)


class TestVanillaAttention:
    def test_single_position_returns_values(self, tensor_factory):
        q, k, v = (tensor_factory(2, 2, 1, 3) for _ in range(3))
        assert_allclose(vanilla_attention(q, k, v, 0.7).data, v.data, atol=1e-15)

    def test_identical_tokens(self):
        row = np.array([0.5, -1.0, 2.0])
        x = Tensor(np.tile(row, (1, 1, 4, 1)))
        out = vanilla_attention(x, x, x, 1.0).data[0, 0]
        assert_allclose(out, np.tile(row, (4, 1)), atol=1e-12)

    def test_attention_rows_sum_to_one(self, tensor_factory):
        q, k = tensor_factory(1, 2, 6, 3), tensor_factory(1, 2, 6, 3)
        ones = Tensor(np.ones((1, 2, 6, 3)))
        assert_allclose(vanilla_attention(q, k, ones, 1.0).data, 1.0, atol=1e-9)


class TestAttentionCost:
    def test_exact_ratios(self):
        assert attention_macs(256, 64, 1, AttentionKind.VANILLA) / attention_macs(64, 64, 1, AttentionKind.VANILLA) == 16
        assert attention_macs(256, 64, 1, AttentionKind.FACTORIZED) / attention_macs(64, 64, 1, AttentionKind.FACTORIZED) == 4

    def test_fitted_exponents(self):
        tokens = [16, 64, 256, 1024]
        linear = [attention_macs(n, 64, 8, AttentionKind.FACTORIZED) for n in tokens]
        quadratic = [attention_macs(n, 64, 8, AttentionKind.VANILLA) for n in tokens]
        assert fit_loglog_slope(tokens, linear) == pytest.approx(1.0, abs=0.15)
        assert fit_loglog_slope(tokens, quadratic) == pytest.approx(2.0, abs=0.15)


class TestTokenEnsemble:
    def test_identity_weight_passes_concat_through_activation(self, tensor_factory):
        b, h, w = 2, 3, 3
        x_att, x_non = tensor_factory(b, 8, h, w), tensor_factory(b, 2, h, w)
        params = _store(weight=np.eye(10), bias=np.zeros(10), norm__weight=np.ones(10), norm__bias=np.zeros(10))
        out = token_ensemble(x_att, x_non, params, bypass_norm=True).data
        tokens = np.concatenate([x_att.data, x_non.data], axis=1).reshape(b, 10, h * w).transpose(0, 2, 1)
        assert out.shape == (b, h * w, 10)
        assert_allclose(out, _hardswish(tokens), atol=1e-12)

    def test_channel_sum_must_match(self, tensor_factory):
        params = _store(weight=np.eye(10), bias=np.zeros(10), norm__weight=np.ones(10), norm__bias=np.zeros(10))
        with pytest.raises(DimensionError):
            token_ensemble(tensor_factory(1, 8, 2, 2), tensor_factory(1, 3, 2, 2), params)

    def test_gradient(self, tensor_factory, rng):
        x_att, x_non = tensor_factory(1, 8, 2, 2), tensor_factory(1, 2, 2, 2)
        params = _store(weight=rng.normal(size=(10, 10)), bias=rng.normal(size=10),
                        norm__weight=rng.uniform(0.5, 1.5, size=10), norm__bias=rng.normal(size=10))
        direction = tensor_factory(1, 4, 10)
        report = check_gradients(
            lambda: ops.sum_all(ops.mul(token_ensemble(x_att, x_non, params), direction)),
            {"x_att": x_att, "x_non": x_non, "weight": params["weight"]},
        )
        assert report.passed


def _reference_identity_block(x, height, width, config, store):
    """Plain-numpy composition of a block whose aggregators are all identities."""
    p = {name: t.data for name, t in store.items()}
    b, n, d = x.shape
    s, heads, hd = config.segment, config.heads, config.head_dim
    qkv = x.reshape(b * n, d) @ p["qkv.weight"] + p["qkv.bias"]
    qkv = qkv.reshape(b, n, 3, d).transpose(2, 0, 3, 1).reshape(3 * b, d, height, width)
    branches = [
        _hardswish(_channel_norm(qkv[:, i * s:(i + 1) * s], p[f"branch{i}.norm.weight"], p[f"branch{i}.norm.bias"]))
        for i in range(4)
    ]
    seg4 = qkv[:, 4 * s:].reshape(3, b, s, height, width).transpose(1, 0, 2, 3, 4).reshape(b, 3 * s, height, width)
    non = np.einsum("oc,bchw->bohw", p["non_attention.pw.weight"], seg4) + p["non_attention.pw.bias"][None, :, None, None]
    non = _hardswish(_channel_norm(non, p["non_attention.norm.weight"], p["non_attention.norm.bias"]))
    mixed = np.concatenate(branches, axis=1).reshape(3, b, heads, hd, n).transpose(0, 1, 2, 4, 3)
    q, k, v = mixed
    ks = np.exp(k - k.max(axis=2, keepdims=True))
    ks /= ks.sum(axis=2, keepdims=True)
    att = (q * config.scale) @ (np.swapaxes(ks, -1, -2) @ v)
    att = att.transpose(0, 1, 3, 2).reshape(b, 4 * s, height, width)
    tokens = np.concatenate([att, non], axis=1).reshape(b, d, n).transpose(0, 2, 1)
    tokens = tokens @ p["ensemble.weight"] + p["ensemble.bias"]
    return _hardswish(_channel_norm(tokens, p["ensemble.norm.weight"], p["ensemble.norm.bias"], axis=-1))


class TestGmaForward:
    def test_output_shape(self, tensor_factory):
        config = GmaConfig(dim=40)
        store = materialize(gma_param_specs(config), seed=0)
        out = gma_forward(tensor_factory(1, 49, 40), 7, 7, config, store.scope(""))
        assert out.shape == (1, 49, 40)

    def test_token_grid_mismatch(self, gma_block, tensor_factory):
        config, store = gma_block
        with pytest.raises(DimensionError):
            gma_forward(tensor_factory(1, 15, 10), 4, 4, config, store.scope(""))

    def test_all_identity_block_matches_reference(self, tensor_factory):
        config = GmaConfig(dim=10, heads=2, pre_attention=(IDENTITY,) * 4, non_attention=IDENTITY)
        store = materialize(gma_param_specs(config), seed=5)
        jitter = np.random.default_rng(5)
        for _, t in store.items():
            t.data += jitter.normal(0.0, 0.2, size=t.shape)
        x = tensor_factory(2, 12, 10)
        out = gma_forward(x, 3, 4, config, store.scope("")).data
        assert_allclose(out, _reference_identity_block(x.data, 3, 4, config, store), atol=1e-10)

    def test_adjacent_token_swap_breaks_equivariance(self, gma_block, tensor_factory):
        config, store = gma_block
        x = tensor_factory(1, 16, 10)
        perm = np.arange(16)
        perm[[5, 6]] = perm[[6, 5]]
        out = gma_forward(x, 4, 4, config, store.scope("")).data
        swapped = gma_forward(Tensor(x.data[:, perm]), 4, 4, config, store.scope("")).data
        assert not np.allclose(swapped, out[:, perm], atol=1e-8)

    @pytest.mark.parametrize("variant", [
        {"softmax_on_context": True},
        {"attention": AttentionKind.VANILLA},
        {"pre_attention": (IDENTITY, AggregatorSpec(AggregatorKind.MIN_POOL, 3),
                           AggregatorSpec(AggregatorKind.MAX_POOL, 5), AggregatorSpec(AggregatorKind.AVG_POOL, 7))},
    ])
    def test_variants_preserve_shape(self, variant, tensor_factory):
        config = GmaConfig(dim=20, heads=2, **variant)
        store = materialize(gma_param_specs(config), seed=1)
        assert gma_forward(tensor_factory(2, 20, 20), 4, 5, config, store.scope("")).shape == (2, 20, 20)

    def test_block_gradient(self, gma_block, tensor_factory, rng):
        config, store = gma_block
        x = tensor_factory(1, 16, 10)
        direction = tensor_factory(1, 16, 10)
        inputs = dict(store.items())
        inputs["x"] = x
        report = check_gradients(
            lambda: ops.sum_all(ops.mul(gma_forward(x, 4, 4, config, store.scope("")), direction)), inputs,
            max_elements=12, rng=rng,
        )
        assert report.passed, (report.worst_tensor, report.max_rel_err)


class TestConvGroup:
    config = GmaConfig(dim=10, heads=2, pre_attention=(IDENTITY,) * 4, non_attention=IDENTITY,
                       conv_before_attention=True)

    def test_group_parameters_precede_projection(self):
        names = [spec.name for spec in gma_param_specs(self.config)]
        assert names.index("conv_group.branch1.agg.weight") < names.index("qkv.weight")
        assert "conv_group.branch3.pw.weight" in names
        assert not any(name.startswith("conv_group.branch4") for name in names)
        plain = GmaConfig(dim=10, heads=2, pre_attention=(IDENTITY,) * 4, non_attention=IDENTITY)
        assert not any(spec.name.startswith("conv_group") for spec in gma_param_specs(plain))

    def test_last_segment_passes_through(self, tensor_factory):
        store = materialize(gma_param_specs(self.config), seed=2)
        x = tensor_factory(1, 12, 10)
        out = conv_group_forward(x, 3, 4, store.scope("conv_group")).data
        assert out.shape == (1, 12, 10)
        assert_array_equal(out[..., 8:], x.data[..., 8:])
        assert not np.allclose(out[..., :8], x.data[..., :8])

    def test_block_output_changes(self, tensor_factory):
        plain = GmaConfig(dim=10, heads=2, pre_attention=(IDENTITY,) * 4, non_attention=IDENTITY)
        store = materialize(gma_param_specs(self.config), seed=3)
        x = tensor_factory(2, 16, 10)
        with_group = gma_forward(x, 4, 4, self.config, store.scope("")).data
        without = gma_forward(x, 4, 4, plain, store.scope("")).data
        assert with_group.shape == (2, 16, 10)
        assert not np.allclose(with_group, without)

    def test_block_gradient(self, tensor_factory, rng):
        store = materialize(gma_param_specs(self.config), seed=4)
        x = tensor_factory(1, 16, 10)
        weights = tensor_factory(1, 16, 10)
        inputs = dict(store.items())
        inputs["x"] = x
        report = check_gradients(
            lambda: ops.sum_all(ops.mul(gma_forward(x, 4, 4, self.config, store.scope("")), weights)), inputs,
            max_elements=12, rng=rng,
        )
        assert report.passed, (report.worst_tensor, report.max_rel_err)


class TestGmaConfig:
    def test_dim_must_divide_by_five(self):
        with pytest.raises(ConfigurationError):
            GmaConfig(dim=42, heads=2).validate()

    def test_heads_must_divide_attention_width(self):
        with pytest.raises(ConfigurationError):
            GmaConfig(dim=40, heads=5).validate()

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            GmaConfig(dim=40, pre_attention=(IDENTITY, AggregatorSpec.conv(4), AggregatorSpec.conv(5),
                                             AggregatorSpec.conv(7))).validate()

    def test_kernel_one_reserved_for_identity(self):
        with pytest.raises(ConfigurationError):
            AggregatorSpec.conv(1).validate()

    def test_head_dim_and_scale(self):
        config = GmaConfig(dim=80, heads=8)
        assert config.segment == 16
        assert config.head_dim == 8
        assert config.scale == pytest.approx(1 / math.sqrt(8))

    def test_param_count_is_pure_and_drops_with_identity_branch(self):
        full = GmaConfig(dim=40)
        assert gma_param_count(full) == gma_param_count(GmaConfig(dim=40))
        assert gma_param_count(full) == sum(int(np.prod(s.shape)) for s in gma_param_specs(full))
        for index in (1, 2, 3):
            plan = list(full.pre_attention)
            plan[index] = IDENTITY
            assert gma_param_count(GmaConfig(dim=40, pre_attention=tuple(plan))) < gma_param_count(full)
