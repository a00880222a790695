"""
Tests for the GroupMixFormer backbone: embeddings, FFN, stochastic depth,
encoder blocks and the full model.
"""
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from groupmix.core import ops
from groupmix.core.errors import ConfigurationError, DimensionError
from groupmix.core.gradcheck import check_gradients
from groupmix.core.rng import make_rng
from groupmix.core.tensor import Tensor
from groupmix.models.backbone import (
    EVAL,
    TRAIN,
    build_model,
    drop_path,
    encoder_block_forward,
    ffn_forward,
    model_forward,
    patch_embed_2x,
    patch_embed_4x,
)
from groupmix.models.configs import FfnActivation, PatchEmbedKind, StageConfig
from groupmix.models.params import ParamStore, bias, materialize, weight
from groupmix.models.presets import get_preset
from groupmix.training.losses import cross_entropy


def _zeroed(store: ParamStore) -> ParamStore:
    for _, tensor in store.items():
        tensor.data[...] = 0.0
    return store


class TestPatchEmbedding:
    def test_stem_downsamples_by_four(self, tiny_config, tensor_factory):
        store, _ = build_model(tiny_config, seed=0)
        out = patch_embed_4x(tensor_factory(2, 3, 32, 48), store.scope("stem"))
        assert out.shape == (2, 10, 8, 12)

    def test_stem_rejects_indivisible_input(self, tiny_config, tensor_factory):
        store, _ = build_model(tiny_config, seed=0)
        with pytest.raises(ConfigurationError):
            patch_embed_4x(tensor_factory(1, 3, 30, 32), store.scope("stem"))

    @pytest.mark.parametrize("kind", [PatchEmbedKind.SEPARABLE, PatchEmbedKind.DENSE])
    def test_stage_embedding_halves_resolution(self, kind, tensor_factory):
        config = get_preset("tiny").replace(patch_embed=kind)
        store, _ = build_model(config, seed=0)
        out = patch_embed_2x(tensor_factory(2, 10, 8, 6), store.scope("stages.1.embed"), kind)
        assert out.shape == (2, 10, 4, 3)

    def test_stage_embedding_rejects_odd_size(self, tiny_config, tensor_factory):
        store, _ = build_model(tiny_config, seed=0)
        with pytest.raises(ConfigurationError):
            patch_embed_2x(tensor_factory(1, 10, 7, 8), store.scope("stages.1.embed"))

    def test_four_pixel_shift_moves_interior_tokens_by_one(self, tiny_config, rng):
        store, _ = build_model(tiny_config, seed=2)
        img = rng.normal(size=(1, 3, 32, 64))
        out = patch_embed_4x(Tensor(img), store.scope("stem")).data
        shifted = patch_embed_4x(Tensor(np.roll(img, 4, axis=3)), store.scope("stem")).data
        # columns whose receptive field touches neither the wrapped pixels nor the padding
        assert_allclose(shifted[..., 4:14], out[..., 3:13], atol=1e-12)


class TestFeedForward:
    @pytest.mark.parametrize("dim,ratio,hidden", [(40, 4, 160), (200, 2, 400)])
    def test_hidden_width(self, dim, ratio, hidden):
        assert StageConfig(dim=dim, ffn_ratio=ratio, depth=1).hidden_dim == hidden

    @pytest.mark.parametrize("activation", [FfnActivation.GELU, FfnActivation.HARDSWISH])
    def test_zero_weights_give_zero_output(self, activation, tensor_factory):
        specs = [weight("fc1.weight", 8, 32), bias("fc1.bias", 32), weight("fc2.weight", 32, 8), bias("fc2.bias", 8)]
        store = _zeroed(materialize(specs, seed=0))
        out = ffn_forward(tensor_factory(2, 5, 8), store.scope(""), activation)
        assert out.shape == (2, 5, 8)
        assert_array_equal(out.data, 0.0)


class TestDropPath:
    @pytest.mark.parametrize("mode", [TRAIN, EVAL])
    def test_zero_rate_is_plain_residual(self, mode, tensor_factory, rng):
        x, residual = tensor_factory(4, 3, 2), tensor_factory(4, 3, 2)
        assert_array_equal(drop_path(x, residual, 0.0, mode, rng).data, x.data + residual.data)

    def test_eval_mode_is_deterministic(self, tensor_factory):
        x, residual = tensor_factory(4, 3), tensor_factory(4, 3)
        assert_array_equal(drop_path(x, residual, 0.5, EVAL).data, x.data + residual.data)

    def test_train_mode_expectation(self):
        samples = 10_000
        x = Tensor(np.zeros((samples, 2)))
        residual = Tensor(np.ones((samples, 2)))
        out = drop_path(x, residual, 0.3, TRAIN, make_rng(0, "dropout", 0)).data
        kept = out[:, 0] > 0
        assert_allclose(out[kept], 1.0 / 0.7)
        assert out.mean() == pytest.approx(1.0, rel=0.05)

    def test_mask_is_per_sample(self):
        out = drop_path(Tensor(np.zeros((64, 3, 3))), Tensor(np.ones((64, 3, 3))), 0.5, TRAIN,
                        make_rng(1, "dropout", 0)).data
        per_sample = out.reshape(64, -1)
        assert np.all(per_sample.min(axis=1) == per_sample.max(axis=1))

    @pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
    def test_invalid_rate(self, rate, tensor_factory):
        with pytest.raises(ConfigurationError):
            drop_path(tensor_factory(2, 2), tensor_factory(2, 2), rate, EVAL)

    def test_train_mode_needs_generator(self, tensor_factory):
        with pytest.raises(ConfigurationError):
            drop_path(tensor_factory(2, 2), tensor_factory(2, 2), 0.2, TRAIN)


class TestEncoderBlock:
    def test_shape_preserved(self, tiny_config, tensor_factory):
        store, _ = build_model(tiny_config, seed=0)
        x = tensor_factory(2, 16, 10)
        out = encoder_block_forward(x, 4, 4, store.scope("stages.0.blocks.0"), tiny_config.gma_config(0))
        assert out.shape == x.shape

    def test_zero_weights_reduce_to_shortcut(self, tiny_config, tensor_factory):
        store, _ = build_model(tiny_config, seed=0)
        _zeroed(store)
        x = tensor_factory(2, 16, 10)
        out = encoder_block_forward(x, 4, 4, store.scope("stages.0.blocks.0"), tiny_config.gma_config(0))
        assert_array_equal(out.data, x.data)

    def test_grid_mismatch(self, tiny_config, tensor_factory):
        store, _ = build_model(tiny_config, seed=0)
        with pytest.raises(DimensionError):
            encoder_block_forward(tensor_factory(1, 12, 10), 4, 4, store.scope("stages.0.blocks.0"),
                                  tiny_config.gma_config(0))

    def test_gradient(self, tiny_config, tensor_factory, rng):
        store, _ = build_model(tiny_config, seed=4)
        scope = store.scope("stages.0.blocks.0")
        x = tensor_factory(1, 16, 10)
        direction = tensor_factory(1, 16, 10)
        inputs = {name: t for name, t in store.items() if name.startswith("stages.0.blocks.0.")}
        inputs["x"] = x
        report = check_gradients(
            lambda: ops.sum_all(ops.mul(encoder_block_forward(x, 4, 4, scope, tiny_config.gma_config(0)), direction)),
            inputs, max_elements=8, rng=rng,
        )
        assert report.passed, (report.worst_tensor, report.max_rel_err)


class TestModel:
    def test_pyramid_on_64px_input(self, tiny_config, tensor_factory):
        _, model = build_model(tiny_config, seed=0)
        logits, features = model_forward(model, tensor_factory(2, 3, 64, 64))
        assert logits.shape == (2, 2)
        assert [f.shape for f in features.as_list()] == [(2, 10, 16, 16), (2, 10, 8, 8), (2, 10, 4, 4), (2, 10, 2, 2)]

    def test_rebuild_is_bit_identical(self, tiny_config):
        first, _ = build_model(tiny_config, seed=9)
        second, _ = build_model(tiny_config, seed=9)
        assert first.names() == second.names()
        for name in first.names():
            assert_array_equal(first[name].data, second[name].data)

    def test_different_seeds_differ(self, tiny_config):
        first, _ = build_model(tiny_config, seed=1)
        second, _ = build_model(tiny_config, seed=2)
        assert not np.array_equal(first["head.fc.weight"].data, second["head.fc.weight"].data)

    def test_eval_forward_is_deterministic(self, tiny_config, tensor_factory):
        _, model = build_model(tiny_config, seed=0)
        img = tensor_factory(2, 3, 32, 32)
        assert_array_equal(model(img)[0].data, model(img)[0].data)

    def test_train_forward_is_deterministic_given_generator(self, tensor_factory):
        config = get_preset("tiny").replace(drop_path_rate=0.3)
        _, model = build_model(config, seed=0)
        img = tensor_factory(4, 3, 32, 32)
        first = model(img, TRAIN, make_rng(0, "dropout", 7))[0].data
        second = model(img, TRAIN, make_rng(0, "dropout", 7))[0].data
        assert_array_equal(first, second)

    def test_train_forward_without_generator_draws_fresh_masks(self, tensor_factory):
        config = get_preset("tiny").replace(drop_path_rate=0.5)
        _, model = build_model(config, seed=0)
        img = tensor_factory(8, 3, 32, 32)
        first = model(img, TRAIN)[0].data
        second = model(img, TRAIN)[0].data
        assert not np.array_equal(first, second)
        _, fresh = build_model(config, seed=0)
        assert_array_equal(fresh(img, TRAIN)[0].data, first)

    def test_param_count_independent_of_resolution(self, tiny_config, tensor_factory):
        _, model = build_model(tiny_config, seed=0)
        before = model.num_params()
        model(tensor_factory(1, 3, 64, 96))
        assert model.num_params() == before

    @pytest.mark.parametrize("size", [(48, 64), (64, 40)])
    def test_indivisible_input(self, size, tiny_config, tensor_factory):
        _, model = build_model(tiny_config, seed=0)
        with pytest.raises(ConfigurationError):
            model(tensor_factory(1, 3, *size))

    def test_wrong_channel_count(self, tiny_config, tensor_factory):
        _, model = build_model(tiny_config, seed=0)
        with pytest.raises(DimensionError):
            model(tensor_factory(1, 1, 32, 32))

    def test_invalid_stage_is_named(self, tiny_config):
        stages = list(tiny_config.stages)
        stages[2] = StageConfig(dim=12, ffn_ratio=4, depth=1, heads=2)
        with pytest.raises(ConfigurationError, match="stage 3"):
            build_model(tiny_config.replace(stages=tuple(stages)))

    def test_cross_entropy_gradient_on_parameter_subset(self, tiny_config, rng):
        store, model = build_model(tiny_config, seed=11)
        img = Tensor(rng.normal(size=(2, 3, 64, 64)))
        labels = np.array([0, 1])
        inputs = dict(store.items())
        report = check_gradients(lambda: cross_entropy(model(img)[0], labels), inputs, max_elements=1, rng=rng)
        assert report.checked >= 20
        assert report.passed, (report.worst_tensor, report.max_rel_err)

    @pytest.mark.slow
    def test_preset_t_at_224(self, rng):
        config = get_preset("T")
        store, model = build_model(config, seed=0)
        logits, features = model(Tensor(rng.normal(size=(1, 3, 224, 224))))
        assert logits.shape == (1, 1000)
        assert [f.shape[1:] for f in features.as_list()] == [(80, 56, 56), (160, 28, 28), (200, 14, 14), (240, 7, 7)]
        assert store.num_params() == pytest.approx(10.9e6, rel=0.05)
