"""Tests for layers, parameter discovery, and checkpoint round-trips."""

import numpy as np
import pytest

from mstr import autodiff as ad
from mstr import nn
from mstr.autodiff import Tensor


class TestLinearLayer:
    def test_shapes_and_forward(self):
        rng = np.random.default_rng(0)
        layer = nn.Linear(4, 3, rng)
        y = layer(Tensor(rng.normal(size=(5, 4))))
        assert y.shape == (5, 3)

    def test_matches_manual_affine(self):
        rng = np.random.default_rng(1)
        layer = nn.Linear(3, 2, rng)
        x = rng.normal(size=(4, 3))
        expected = x @ layer.weight.data.T + layer.bias.data
        np.testing.assert_allclose(layer(Tensor(x)).data, expected)

    def test_init_scale_tracks_fan_in(self):
        rng = np.random.default_rng(2)
        wide = nn.Linear(1024, 8, rng)
        narrow = nn.Linear(4, 8, rng)
        assert np.abs(wide.weight.data).max() < np.abs(narrow.weight.data).max()

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        layer = nn.Linear(3, 2, rng)
        x0 = rng.normal(size=(2, 3))

        def f(w):
            saved = layer.weight
            layer.weight = w
            try:
                return (layer(Tensor(x0)) ** 2.0).sum()
            finally:
                layer.weight = saved

        out = (layer(Tensor(x0)) ** 2.0).sum()
        out.backward()
        numeric = ad.finite_diff_grad(f, layer.weight)
        assert ad.relative_error(layer.weight.grad, numeric) <= 1e-4


class TestLayerNorm:
    def test_normalizes_last_axis(self):
        rng = np.random.default_rng(4)
        ln = nn.LayerNorm(8)
        y = ln(Tensor(rng.normal(loc=3.0, scale=2.0, size=(5, 8)))).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-3)

    def test_gradcheck_through_input(self):
        rng = np.random.default_rng(5)
        ln = nn.LayerNorm(4)
        ln.weight.data = rng.normal(size=4)
        ln.bias.data = rng.normal(size=4)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        (ln(x) ** 2.0).sum().backward()
        numeric = ad.finite_diff_grad(lambda t: (ln(t) ** 2.0).sum(), x)
        assert ad.relative_error(x.grad, numeric) <= 1e-4


class TestFFN:
    def test_single_layer_is_linear(self):
        rng = np.random.default_rng(6)
        head = nn.FFN(4, 16, 2, num_layers=1, rng=rng)
        assert len(head.layers) == 1
        x = rng.normal(size=(3, 4))
        expected = x @ head.layers[0].weight.data.T + head.layers[0].bias.data
        np.testing.assert_allclose(head(Tensor(x)).data, expected)

    def test_three_layer_shapes(self):
        rng = np.random.default_rng(7)
        head = nn.FFN(8, 32, 4, num_layers=3, rng=rng)
        assert head(Tensor(rng.normal(size=(5, 8)))).shape == (5, 4)
        dims = [(l.in_features, l.out_features) for l in head.layers]
        assert dims == [(8, 32), (32, 32), (32, 4)]


class TestModuleDiscovery:
    def test_named_parameters_walks_nested_lists(self):
        rng = np.random.default_rng(8)

        class Net(nn.Module):
            def __init__(self):
                self.ffn = nn.FFN(2, 4, 2, num_layers=2, rng=rng)
                self.norms = [nn.LayerNorm(2), nn.LayerNorm(2)]
                self.scale = nn.Parameter(np.ones(1))

        names = {name for name, _ in Net().named_parameters()}
        assert "ffn.layers.0.weight" in names
        assert "norms.1.bias" in names
        assert "scale" in names

    def test_zero_grad_clears(self):
        rng = np.random.default_rng(9)
        layer = nn.Linear(2, 2, rng)
        (layer(Tensor(np.ones((1, 2)))) ** 2.0).sum().backward()
        assert layer.weight.grad is not None
        layer.zero_grad()
        assert layer.weight.grad is None

    def test_load_state_dict_rejects_mismatch(self):
        rng = np.random.default_rng(10)
        layer = nn.Linear(2, 2, rng)
        with pytest.raises(ValueError):
            layer.load_state_dict({"weight": np.zeros((2, 2))})


class TestCheckpointIO:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        state = {
            "a.weight": rng.normal(size=(3, 4)),
            "a.bias": rng.normal(size=4),
            "scalarish": rng.normal(size=(1,)),
        }
        path = str(tmp_path / "model.ckpt")
        nn.save_checkpoint(path, state, metadata={"step": 7})
        loaded, meta = nn.load_checkpoint(path)
        assert meta == {"step": 7}
        assert set(loaded) == set(state)
        for k in state:
            assert loaded[k].dtype == np.float64
            assert np.array_equal(loaded[k], state[k])
            assert loaded[k].tobytes() == state[k].astype("<f8").tobytes()

    def test_module_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        net = nn.FFN(3, 8, 2, num_layers=2, rng=rng)
        path = str(tmp_path / "ffn.ckpt")
        nn.save_checkpoint(path, net.state_dict())
        twin = nn.FFN(3, 8, 2, num_layers=2, rng=np.random.default_rng(99))
        twin.load_state_dict(nn.load_checkpoint(path)[0])
        x = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(net(Tensor(x)).data, twin(Tensor(x)).data)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            nn.load_checkpoint(str(path))
