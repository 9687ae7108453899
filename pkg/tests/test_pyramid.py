"""Tests for coordinate conventions, bilinear sampling, and the toy backbone."""

import numpy as np
import pytest

from mstr import autodiff as ad
from mstr import pyramid as pyr
from mstr.autodiff import Tensor
from mstr.errors import ConfigurationError


def _level(rng, h, w, c=4, index=1):
    return pyr.FeatureLevel(index, h, w, Tensor(rng.normal(size=(c, h, w))))


class TestNormalizedPoint:
    def test_clamps_on_construction(self):
        p = pyr.NormalizedPoint(-0.2, 1.7)
        assert (p.x, p.y) == (0.0, 1.0)

    def test_preserves_interior(self):
        p = pyr.NormalizedPoint(0.25, 0.75)
        assert (p.x, p.y) == (0.25, 0.75)


class TestRescale:
    """The normalized-to-pixel map under the centers-at-half convention."""

    def test_center_of_four_by_four(self):
        level = _level(np.random.default_rng(0), 4, 4)
        assert pyr.rescale_to_level(pyr.NormalizedPoint(0.5, 0.5), level) == (1.5, 1.5)

    def test_origin(self):
        level = _level(np.random.default_rng(0), 4, 4)
        assert pyr.rescale_to_level(pyr.NormalizedPoint(0.0, 0.0), level) == (-0.5, -0.5)

    def test_rectangular(self):
        level = _level(np.random.default_rng(0), 4, 8)
        assert pyr.rescale_to_level(pyr.NormalizedPoint(0.25, 0.75), level) == (1.5, 2.5)

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(1)
        level = _level(rng, 6, 10)
        for _ in range(20):
            p = pyr.NormalizedPoint(rng.uniform(), rng.uniform())
            px, py = pyr.rescale_to_level(p, level)
            q = pyr.level_to_normalized(px, py, level)
            assert abs(q.x - p.x) <= 1e-12 and abs(q.y - p.y) <= 1e-12

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(2)
        level = _level(rng, 6, 10)
        pts = rng.uniform(size=(7, 2))
        xs, ys = pyr.rescale_points(Tensor(pts), level.width, level.height)
        for i, (x, y) in enumerate(pts):
            px, py = pyr.rescale_to_level(pyr.NormalizedPoint(x, y), level)
            assert xs.data[i] == pytest.approx(px) and ys.data[i] == pytest.approx(py)


class TestBilinearSample:
    def test_pixel_center_returns_pixel(self):
        rng = np.random.default_rng(3)
        level = _level(rng, 5, 7)
        got = pyr.bilinear_sample(level, (3.0, 2.0)).data
        np.testing.assert_allclose(got, level.features.data[:, 2, 3], atol=1e-12)

    def test_horizontal_midpoint_averages(self):
        rng = np.random.default_rng(4)
        level = _level(rng, 5, 7)
        got = pyr.bilinear_sample(level, (3.5, 2.0)).data
        want = 0.5 * (level.features.data[:, 2, 3] + level.features.data[:, 2, 4])
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_far_outside_is_zero(self):
        level = _level(np.random.default_rng(5), 5, 7)
        np.testing.assert_array_equal(pyr.bilinear_sample(level, (-10.0, -10.0)).data,
                                      np.zeros(4))

    def test_linear_between_centers(self):
        rng = np.random.default_rng(6)
        level = _level(rng, 5, 7)
        a = level.features.data[:, 1, 2]
        b = level.features.data[:, 1, 3]
        for t in (0.1, 0.35, 0.8):
            got = pyr.bilinear_sample(level, (2.0 + t, 1.0)).data
            np.testing.assert_allclose(got, (1 - t) * a + t * b, atol=1e-10)

    def test_border_blend_uses_zero_padding(self):
        rng = np.random.default_rng(7)
        level = _level(rng, 4, 4)
        got = pyr.bilinear_sample(level, (-0.25, 0.0)).data
        np.testing.assert_allclose(got, 0.75 * level.features.data[:, 0, 0], atol=1e-12)

    def test_gradient_wrt_coordinates(self):
        rng = np.random.default_rng(8)
        feats = rng.normal(size=(3, 6, 6))
        weights = rng.normal(size=3)
        # offsets chosen at least 1e-3 from every pixel-center kink
        coords0 = np.array([1.3, 2.71, 4.25, 0.4])

        def f(c):
            level = pyr.FeatureLevel(1, 6, 6, Tensor(feats))
            out = pyr.bilinear_gather(level.flat_features(), 6, 6,
                                      c[:2], c[2:])
            return (out @ Tensor(weights)).sum()

        c = Tensor(coords0, requires_grad=True)
        f(c).backward()
        numeric = ad.finite_diff_grad(f, c)
        assert ad.relative_error(c.grad, numeric) <= 1e-4

    def test_gradient_wrt_features(self):
        rng = np.random.default_rng(9)
        feats0 = rng.normal(size=(2, 4, 4))
        xs = Tensor(np.array([0.3, 2.6, -0.2]))
        ys = Tensor(np.array([1.1, 3.4, 0.9]))

        def f(t):
            level = pyr.FeatureLevel(1, 4, 4, t.reshape(2, 4, 4))
            return (pyr.bilinear_gather(level.flat_features(), 4, 4, xs, ys) ** 2.0).sum()

        t = Tensor(feats0.reshape(-1), requires_grad=True)
        f(t).backward()
        numeric = ad.finite_diff_grad(f, t)
        assert ad.relative_error(t.grad, numeric) <= 1e-4


class TestPositionalEncoding:
    def test_distinct_locations_differ(self):
        pos = pyr.sinusoidal_encoding(8, 8, 32)
        assert np.abs(pos[:, 1, 2] - pos[:, 5, 6]).max() > 1e-3

    def test_shape_and_bounds(self):
        pos = pyr.sinusoidal_encoding(4, 6, 16)
        assert pos.shape == (16, 4, 6)
        assert np.all(np.abs(pos) <= 1.0 + 1e-12)

    def test_rejects_odd_channels(self):
        with pytest.raises(ConfigurationError):
            pyr.sinusoidal_encoding(4, 4, 30)


class TestBackbone:
    def test_level_shapes(self):
        rng = np.random.default_rng(10)
        bb = pyr.Backbone(pyr.BackboneConfig(channels=8), rng)
        pyramid = bb(Tensor(rng.normal(size=(1, 64, 64))))
        shapes = [(lev.height, lev.width) for lev in pyramid.levels]
        assert shapes == [(16, 16), (8, 8), (4, 4)]
        assert all(lev.channels == 8 for lev in pyramid.levels)

    def test_zero_image_zero_conv(self):
        rng = np.random.default_rng(11)
        bb = pyr.Backbone(pyr.BackboneConfig(channels=8), rng)
        for p in bb.parameters():
            if p is not bb.level_embedding:
                p.data = np.zeros_like(p.data)
        pyramid = bb(Tensor(np.zeros((1, 64, 64))))
        for lev, pos in zip(pyramid.levels, pyramid.positional_encodings):
            np.testing.assert_array_equal(lev.features.data, 0.0)
            assert np.abs(pos).max() > 0.0

    def test_rejects_indivisible_image(self):
        rng = np.random.default_rng(12)
        bb = pyr.Backbone(pyr.BackboneConfig(channels=8), rng)
        with pytest.raises(ConfigurationError):
            bb(Tensor(np.zeros((1, 60, 64))))

    def test_level_embedding_addition(self):
        rng = np.random.default_rng(13)
        bb = pyr.Backbone(pyr.BackboneConfig(channels=8), rng)
        pyramid = bb(Tensor(rng.normal(size=(1, 32, 32))))
        inputs = pyramid.encoder_inputs()
        for l, (lev, pos, x) in enumerate(zip(pyramid.levels,
                                              pyramid.positional_encodings, inputs)):
            base = lev.flat_features().data + pos.reshape(8, -1).T
            delta = x.data - base
            np.testing.assert_allclose(
                delta, np.tile(bb.level_embedding.data[l], (delta.shape[0], 1)),
                atol=1e-12)

    def test_backbone_is_differentiable(self):
        rng = np.random.default_rng(14)
        bb = pyr.Backbone(pyr.BackboneConfig(channels=4, base_stride=2, num_levels=2), rng)
        image = Tensor(rng.normal(size=(1, 8, 8)))
        loss = sum((x * x).sum() for x in bb(image).encoder_inputs())
        loss.backward()
        assert all(p.grad is not None for p in bb.parameters())

    def test_patchify_matches_direct_convolution(self):
        rng = np.random.default_rng(15)
        conv = pyr.PatchConv(2, 3, 2, rng)
        x = rng.normal(size=(2, 4, 4))
        y = conv(Tensor(x)).data
        w = conv.proj.weight.data  # (3, 2*2*2)
        for i in range(2):
            for j in range(2):
                patch = x[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2].reshape(-1)
                np.testing.assert_allclose(y[:, i, j], w @ patch + conv.proj.bias.data,
                                           atol=1e-12)


class TestDump:
    def test_pgm_files_written(self, tmp_path):
        rng = np.random.default_rng(16)
        bb = pyr.Backbone(pyr.BackboneConfig(channels=8), rng)
        pyramid = bb(Tensor(rng.normal(size=(1, 32, 32))))
        files = pyr.dump_pyramid(pyramid, str(tmp_path), channel_stride=4)
        assert len(files) == 3 * 2
        first = tmp_path / "level-1-chan-0.pgm"
        assert first.exists()
        header = first.read_bytes()[:2]
        assert header == b"P5"
