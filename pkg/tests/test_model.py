"""Tests for the full detector: variant wiring, reference anchoring,
and end-to-end gradients."""

import numpy as np
import pytest

from mstr import autodiff as ad
from mstr.autodiff import Tensor
from mstr.errors import ConfigurationError
from mstr.model import (DecoderVariant, ModelConfig, MSTRModel, paper_scale,
                        split_levels, token_references)

TINY = ModelConfig(channels=8, num_levels=2, num_encoder_layers=1,
                   num_decoder_layers=1, num_queries=2, num_heads=2,
                   num_points=1, ffn_hidden=16, head_hidden=16)


def _image(rng, size=32):
    return Tensor(rng.normal(size=(1, size, size)))


def _variant_config(variant, **kwargs):
    base = dict(channels=8, num_levels=2, num_encoder_layers=1,
                num_decoder_layers=2, num_queries=3, num_heads=2,
                num_points=1, ffn_hidden=16, head_hidden=16, variant=variant)
    base.update(kwargs)
    return ModelConfig(**base)


class TestModelConfig:
    def test_default_is_valid(self):
        ModelConfig().validate()

    def test_context_requires_dual_entity(self):
        cfg = _variant_config(DecoderVariant.MSTR_MERGE_OUTPUT,
                              use_dual_entity=False, use_context=True)
        with pytest.raises(ConfigurationError, match="EC requires DE"):
            cfg.validate()

    def test_dual_entity_requires_deformable(self):
        cfg = _variant_config(DecoderVariant.MSTR_MERGE_OUTPUT,
                              use_deformable=False, use_context=False)
        with pytest.raises(ConfigurationError, match="DE requires DA"):
            cfg.validate()

    def test_naive_variant_must_drop_dual_entity(self):
        cfg = _variant_config(DecoderVariant.NAIVE_DEFORMABLE)
        with pytest.raises(ConfigurationError, match="dual-entity toggle"):
            cfg.validate()

    def test_double_stream_rejects_context(self):
        cfg = _variant_config(DecoderVariant.DOUBLE_STREAM)
        with pytest.raises(ConfigurationError, match="context"):
            cfg.validate()

    def test_standard_context_requires_context(self):
        cfg = _variant_config(DecoderVariant.STANDARD_CONTEXT, use_context=False)
        with pytest.raises(ConfigurationError, match="EC enabled"):
            cfg.validate()

    def test_paper_scale_counts(self):
        cfg = paper_scale(ModelConfig())
        assert (cfg.num_heads, cfg.num_points, cfg.num_queries) == (8, 4, 100)


class TestTokenReferences:
    def test_centers_of_two_by_two(self):
        refs = token_references([(2, 2)])
        expected = np.array([[0.25, 0.25], [0.75, 0.25],
                             [0.25, 0.75], [0.75, 0.75]])
        np.testing.assert_allclose(refs, expected)

    def test_level_major_concatenation(self):
        refs = token_references([(2, 2), (1, 1)])
        assert refs.shape == (5, 2)
        np.testing.assert_allclose(refs[4], [0.5, 0.5])

    def test_split_levels_round_trip(self):
        x = Tensor(np.arange(10.0).reshape(5, 2))
        parts = split_levels(x, [(2, 2), (1, 1)])
        assert [p.shape[0] for p in parts] == [4, 1]
        np.testing.assert_allclose(parts[1].data, x.data[4:])


class TestForwardShapes:
    def test_output_count_and_shapes(self):
        rng = np.random.default_rng(0)
        model = MSTRModel(_variant_config(DecoderVariant.MSTR_MERGE_OUTPUT), rng)
        outs = model(_image(rng))
        assert len(outs) == 2
        final = outs[-1]
        assert final.boxes_h.shape == (3, 4)
        assert final.boxes_o.shape == (3, 4)
        assert final.cls.shape == (3, 3)
        assert final.act.shape == (3, 3)

    def test_outputs_in_unit_interval(self):
        rng = np.random.default_rng(1)
        model = MSTRModel(_variant_config(DecoderVariant.MSTR_MERGE_OUTPUT), rng)
        final = model(_image(rng))[-1]
        for t in (final.boxes_h, final.boxes_o, final.cls, final.act):
            assert (t.data > 0.0).all() and (t.data < 1.0).all()

    @pytest.mark.parametrize("variant,toggles", [
        (DecoderVariant.MSTR_MERGE_OUTPUT, {}),
        (DecoderVariant.MERGE_INPUT, {}),
        (DecoderVariant.STANDARD_CONTEXT, {}),
        (DecoderVariant.MSTR_MERGE_OUTPUT, {"use_context": False}),
        (DecoderVariant.DOUBLE_STREAM, {"use_context": False}),
        (DecoderVariant.NAIVE_DEFORMABLE, {"use_dual_entity": False,
                                           "use_context": False}),
        (DecoderVariant.NAIVE_DEFORMABLE, {"use_deformable": False,
                                           "use_dual_entity": False,
                                           "use_context": False}),
    ])
    def test_every_variant_runs(self, variant, toggles):
        rng = np.random.default_rng(2)
        model = MSTRModel(_variant_config(variant, **toggles), rng)
        final = model(_image(rng))[-1]
        assert final.boxes_h.shape == (3, 4)
        assert np.isfinite(final.act.data).all()

    def test_determinism_across_builds(self):
        a = MSTRModel(TINY, np.random.default_rng(5))
        b = MSTRModel(TINY, np.random.default_rng(5))
        img = _image(np.random.default_rng(6))
        out_a = a(img)[-1]
        out_b = b(img)[-1]
        assert np.array_equal(out_a.boxes_h.data, out_b.boxes_h.data)
        assert np.array_equal(out_a.act.data, out_b.act.data)


class TestReferences:
    def test_references_fixed_across_layers(self):
        rng = np.random.default_rng(3)
        model = MSTRModel(_variant_config(DecoderVariant.MSTR_MERGE_OUTPUT), rng)
        outs = model(_image(rng))
        assert outs[0].ref_h is outs[1].ref_h
        assert outs[0].ref_o is outs[1].ref_o

    def test_context_reference_is_midpoint(self):
        rng = np.random.default_rng(4)
        model = MSTRModel(_variant_config(DecoderVariant.MSTR_MERGE_OUTPUT), rng)
        final = model(_image(rng))[-1]
        mid = 0.5 * (final.ref_h.data + final.ref_o.data)
        np.testing.assert_allclose(final.ref_c.data, mid, rtol=0, atol=1e-12)

    def test_standard_context_reference_is_not_midpoint(self):
        rng = np.random.default_rng(4)
        model = MSTRModel(_variant_config(DecoderVariant.STANDARD_CONTEXT), rng)
        final = model(_image(rng))[-1]
        mid = 0.5 * (final.ref_h.data + final.ref_o.data)
        assert np.abs(final.ref_c.data - mid).max() > 1e-4

    def test_naive_shares_one_reference(self):
        rng = np.random.default_rng(4)
        cfg = _variant_config(DecoderVariant.NAIVE_DEFORMABLE,
                              use_dual_entity=False, use_context=False)
        model = MSTRModel(cfg, rng)
        final = model(_image(rng))[-1]
        assert final.ref_h is final.ref_o


class TestZeroHeadAnchoring:
    def test_zero_box_head_reproduces_references(self):
        rng = np.random.default_rng(7)
        model = MSTRModel(_variant_config(DecoderVariant.MSTR_MERGE_OUTPUT), rng)
        for head in (model.heads.hbox, model.heads.obox):
            last = head.layers[-1]
            last.weight.data[:] = 0.0
            last.bias.data[:] = 0.0
        final = model(_image(rng))[-1]
        np.testing.assert_allclose(final.boxes_h.data[:, :2], final.ref_h.data,
                                   rtol=0, atol=1e-12)
        np.testing.assert_allclose(final.boxes_o.data[:, :2], final.ref_o.data,
                                   rtol=0, atol=1e-12)

    def test_zero_box_head_halves_sizes(self):
        rng = np.random.default_rng(8)
        model = MSTRModel(_variant_config(DecoderVariant.MSTR_MERGE_OUTPUT), rng)
        last = model.heads.hbox.layers[-1]
        last.weight.data[:] = 0.0
        last.bias.data[:] = 0.0
        final = model(_image(rng))[-1]
        np.testing.assert_allclose(final.boxes_h.data[:, 2:], 0.5, atol=1e-12)


class TestEncoder:
    def test_zero_layers_is_identity(self):
        rng = np.random.default_rng(9)
        cfg = _variant_config(DecoderVariant.MSTR_MERGE_OUTPUT,
                              num_encoder_layers=0)
        model = MSTRModel(cfg, rng)
        tokens = [Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(1, 8)))]
        out = model.encode(tokens, [(2, 2), (1, 1)])
        for before, after in zip(tokens, out):
            np.testing.assert_array_equal(before.data, after.data)

    def test_encoder_changes_tokens(self):
        rng = np.random.default_rng(10)
        model = MSTRModel(_variant_config(DecoderVariant.MSTR_MERGE_OUTPUT), rng)
        tokens = [Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(1, 8)))]
        out = model.encode(tokens, [(2, 2), (1, 1)])
        assert np.abs(out[0].data - tokens[0].data).max() > 1e-3


class TestVariantSemantics:
    def test_merge_output_differs_from_merge_input(self):
        img = _image(np.random.default_rng(12))
        out_a = MSTRModel(_variant_config(DecoderVariant.MSTR_MERGE_OUTPUT),
                          np.random.default_rng(11))(img)[-1]
        out_b = MSTRModel(_variant_config(DecoderVariant.MERGE_INPUT),
                          np.random.default_rng(11))(img)[-1]
        assert np.abs(out_a.cls.data - out_b.cls.data).max() > 1e-6

    def test_naive_layer_is_plain_deformable_composition(self):
        """The baseline decoder layer must be exactly self-attention,
        one deformable cross-attention, and the feed-forward block."""
        rng = np.random.default_rng(13)
        cfg = _variant_config(DecoderVariant.NAIVE_DEFORMABLE,
                              use_dual_entity=False, use_context=False,
                              num_decoder_layers=1)
        model = MSTRModel(cfg, rng)
        layer = model.decoder_layers[0]
        values = [Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(1, 8)))]
        shapes = [(2, 2), (1, 1)]
        f = Tensor(rng.normal(size=(3, 8)))
        refs = Tensor(rng.uniform(0.2, 0.8, size=(3, 2)))

        out = layer({"q": f}, {"q": refs}, values, shapes)["q"]

        z = layer.norm_sa(f + layer.self_attn(f, f))
        fx = layer.norm_x(z + layer.cross_attn(z, refs, values, shapes))
        expected = layer.norm_ffn(fx + layer.ffn(fx))
        np.testing.assert_allclose(out.data, expected.data, rtol=0, atol=1e-10)

    def test_query_permutation_equivariance(self):
        rng = np.random.default_rng(14)
        model = MSTRModel(_variant_config(DecoderVariant.MSTR_MERGE_OUTPUT), rng)
        img = _image(np.random.default_rng(15))
        base = model(img)[-1]
        perm = np.array([2, 0, 1])
        model.query_embed.data = model.query_embed.data[perm]
        permuted = model(img)[-1]
        np.testing.assert_allclose(permuted.boxes_h.data, base.boxes_h.data[perm],
                                   rtol=0, atol=1e-12)
        np.testing.assert_allclose(permuted.act.data, base.act.data[perm],
                                   rtol=0, atol=1e-12)

    def test_collect_exposes_final_layer_grids(self):
        rng = np.random.default_rng(16)
        model = MSTRModel(_variant_config(DecoderVariant.MSTR_MERGE_OUTPUT), rng)
        collect = {}
        model(_image(rng), collect=collect)
        assert set(collect) == {"h", "o", "c", "refs"}
        grid = collect["h"]
        assert grid.offsets.shape == (3, 2, 2, 1, 2)
        np.testing.assert_allclose(grid.weights.data.sum(axis=(2, 3)), 1.0)
        np.testing.assert_allclose(collect["refs"]["c"],
                                   0.5 * (collect["refs"]["h"]
                                          + collect["refs"]["o"]))


class TestGradients:
    def test_loss_reaches_all_live_parameters(self):
        rng = np.random.default_rng(17)
        model = MSTRModel(TINY, rng)
        outs = model(_image(rng))
        loss = sum((o.boxes_h.sum() + o.boxes_o.sum() + o.cls.sum() + o.act.sum()
                    for o in outs), start=Tensor(0.0))
        loss.backward()
        missing = [n for n, p in model.named_parameters() if p.grad is None]
        assert missing == []

    def test_end_to_end_gradient_matches_finite_difference(self):
        """Spot-check analytic gradients through backbone, encoder,
        decoder, and heads against central differences."""
        rng = np.random.default_rng(18)
        model = MSTRModel(TINY, rng)
        img = _image(np.random.default_rng(19))
        probe = rng.normal(size=(2, 4))

        def loss_value(m):
            outs = m(img)
            total = Tensor(0.0)
            for o in outs:
                total = total + (o.boxes_h * Tensor(probe)).sum() \
                    + o.boxes_o.sum() + o.cls.sum() + o.act.sum()
            return total

        loss = loss_value(model)
        loss.backward()
        params = dict(model.named_parameters())
        for name in ("query_embed", "ref_head_h.weight",
                     "decoder_layers.0.cross.attn_h.offset_proj.bias",
                     "heads.act.layers.0.bias"):
            p = params[name]
            base = p.data.copy()
            analytic = p.grad.copy()
            flat = base.reshape(-1)
            picks = np.linspace(0, flat.size - 1, min(6, flat.size)).astype(int)
            for i in picks:
                h = 1e-6
                fd = 0.0
                for s, sign in ((h, 1.0), (-h, -1.0)):
                    p.data = base.copy()
                    p.data.reshape(-1)[i] += s
                    fd += sign * loss_value(model).item()
                fd /= 2.0 * h
                p.data = base.copy()
                err = abs(analytic.reshape(-1)[i] - fd) / max(
                    abs(analytic.reshape(-1)[i]), abs(fd), 1.0)
                assert err < 1e-4, (name, i, err)
