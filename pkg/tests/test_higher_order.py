import numpy as np
import pytest

from dualflow.config import BankConfig
from dualflow.errors import ShapeError
from dualflow.higher_order import FusionLayer, HigherOrderChannel, fuse_channels, hoc_forward
from dualflow.stage1 import MotionEnergyMap, divisive_normalize
from dualflow.tensor_core import Tensor

SMALL_BANK = BankConfig(n_units=4, n_scales=1, kernel_size=5, radius=2.5)


@pytest.fixture
def channel():
    return HigherOrderChannel.initialize(4, SMALL_BANK, np.random.default_rng(7))


def zero_channel(channel: HigherOrderChannel) -> HigherOrderChannel:
    for w, b in zip(channel.weights, channel.biases):
        w.data[...] = 0.0
        b.data[...] = 0.0
    return channel


class TestCNN:
    def test_layout(self):
        hoc = HigherOrderChannel.initialize(16, SMALL_BANK, np.random.default_rng(0))
        assert hoc.widths == (3, 16, 16, 16, 16, 1)
        assert [hoc.has_skip(i) for i in range(5)] == [False, True, True, True, False]
        assert len(hoc.parameters()) == 10 + len(hoc.bank.parameters())

    def test_wrong_layer_count(self, channel):
        with pytest.raises(ShapeError, match="5 layers"):
            HigherOrderChannel(channel.weights[:4], channel.biases[:4], channel.bank)

    def test_zero_layer_with_skip_is_identity(self, channel, rng):
        channel.weights[2].data[...] = 0.0
        channel.biases[2].data[...] = 0.0
        x = Tensor(rng.normal(size=(4, 3, 5, 5)))
        np.testing.assert_array_equal(channel.layer(2, x).data, x.data)

    def test_features_shape(self, channel, rng):
        out = channel.features(Tensor(rng.uniform(size=(5, 3, 6, 6))))
        assert out.shape == (5, 6, 6)

    def test_features_reject_gray(self, channel):
        with pytest.raises(ShapeError):
            channel.features(Tensor(np.zeros((5, 6, 6))))

    def test_feature_gradients(self, rng, gradcheck):
        hoc = HigherOrderChannel.initialize(2, SMALL_BANK, np.random.default_rng(3))
        for b in hoc.biases:
            b.data[...] = 0.1
        rgb = Tensor(rng.uniform(size=(3, 3, 4, 4)))
        w = Tensor(rng.normal(size=(3, 4, 4)))
        params = [hoc.weights[0], hoc.biases[1], hoc.weights[4], hoc.biases[4]]
        gradcheck(lambda: (hoc.features(rgb) * w).sum(), params, atol=1e-6)


class TestHigherOrderEnergy:
    def test_zero_network_gives_zero_energy(self, channel, rng):
        e2 = hoc_forward(Tensor(rng.uniform(size=(15, 3, 32, 32))), zero_channel(channel))
        assert e2.provenance == "E2"
        assert e2.values.shape == (4, 4, 4)
        np.testing.assert_array_equal(e2.values.data, 0.0)

    def test_needs_fifteen_frames(self, channel):
        with pytest.raises(ShapeError, match="15 frames"):
            hoc_forward(Tensor(np.zeros((14, 3, 32, 32))), channel)

    def test_uses_the_central_fifteen_frames(self, channel, rng):
        central = rng.uniform(size=(15, 3, 32, 32))
        padded = np.concatenate([np.ones((1, 3, 32, 32)), central, np.zeros((1, 3, 32, 32))])
        a = hoc_forward(Tensor(central), channel).values.data
        b = hoc_forward(Tensor(padded), channel).values.data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestFusion:
    def test_identity_initialization_sums_maps(self, rng):
        fusion = FusionLayer.initialize(3)
        e1, e2 = rng.uniform(size=(3, 2, 2)), rng.uniform(size=(3, 2, 2))
        np.testing.assert_allclose(fusion.linear(Tensor(e1), Tensor(e2)).data, e1 + e2)

    def test_zero_second_block_passes_first_channel(self, rng):
        fusion = FusionLayer.initialize(3, second=0.0)
        e1, e2 = rng.uniform(size=(3, 2, 2)), rng.uniform(size=(3, 2, 2))
        np.testing.assert_allclose(fusion.linear(Tensor(e1), Tensor(e2)).data, e1)

    def test_fused_map_is_normalized(self, rng):
        fusion = FusionLayer.initialize(3)
        e1 = MotionEnergyMap(Tensor(rng.uniform(size=(3, 2, 2))), "E1")
        e2 = MotionEnergyMap(Tensor(rng.uniform(size=(3, 2, 2))), "E2")
        fused = fuse_channels(e1, e2, fusion)
        expected = divisive_normalize(Tensor(e1.values.data + e2.values.data), 1.0, 0.05).data
        assert fused.provenance == "fused"
        np.testing.assert_allclose(fused.values.data, expected)

    def test_clamp_keeps_weights_nonnegative(self):
        fusion = FusionLayer.initialize(2)
        fusion.weight.data[0, 1] = -0.5
        fusion.clamp()
        assert fusion.weight.data.min() == 0.0

    def test_shape_checks(self):
        with pytest.raises(ShapeError):
            FusionLayer(Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            FusionLayer.initialize(2).linear(Tensor(np.ones((2, 2, 2))), Tensor(np.ones((2, 3, 2))))
        with pytest.raises(ShapeError, match="channels per map"):
            FusionLayer.initialize(2).linear(Tensor(np.ones((3, 2, 2))), Tensor(np.ones((3, 2, 2))))
