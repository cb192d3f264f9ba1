import numpy as np
import pytest

from dualflow.convolution import bilinear_matrix, conv2d, conv3d, conv_temporal, resize_bilinear
from dualflow.errors import ShapeError
from dualflow.tensor_core import Tensor


def correlate2d(x: np.ndarray, k: np.ndarray, pad: int) -> np.ndarray:
    """Direct multi-channel cross-correlation by explicit loops."""
    _, h, w = x.shape
    n_out, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    out = np.zeros((n_out, ho, wo))
    for o in range(n_out):
        for y in range(ho):
            for x_ in range(wo):
                out[o, y, x_] = np.sum(xp[:, y : y + kh, x_ : x_ + kw] * k[o])
    return out


def correlate2d_hw(x: np.ndarray, k: np.ndarray, pad: tuple[int, int]) -> np.ndarray:
    ph, pw = pad
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    return correlate2d(xp, k, 0)


class TestConv2d:
    def test_matches_direct_correlation(self, rng):
        x = rng.normal(size=(2, 7, 6))
        k = rng.normal(size=(3, 2, 3, 5))
        out = conv2d(Tensor(x), Tensor(k), padding=(1, 2))
        np.testing.assert_allclose(out.data, correlate2d_hw(x, k, (1, 2)), atol=1e-12)

    def test_same_padding_keeps_size(self, rng):
        out = conv2d(Tensor(rng.normal(size=(1, 9, 9))), Tensor(rng.normal(size=(4, 1, 5, 5))), padding=2)
        assert out.shape == (4, 9, 9)

    def test_batched_input(self, rng):
        x = rng.normal(size=(3, 2, 6, 6))
        k = rng.normal(size=(2, 2, 3, 3))
        batched = conv2d(Tensor(x), Tensor(k), padding=1)
        for b in range(3):
            np.testing.assert_allclose(batched.data[b], correlate2d(x[b], k, 1), atol=1e-12)

    def test_even_kernel_rejected(self, rng):
        with pytest.raises(ShapeError, match="odd"):
            conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 2, 2))))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(Tensor(np.ones((2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))

    def test_gradients(self, rng, gradcheck):
        x = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 5, 4)))
        gradcheck(lambda: (conv2d(x, k, padding=1) * w).sum(), [x, k])

    def test_large_kernels_match_direct_correlation(self, rng):
        x = rng.normal(size=(2, 12, 11))
        k = rng.normal(size=(3, 2, 7, 5))
        out = conv2d(Tensor(x), Tensor(k), padding=(3, 2))
        np.testing.assert_allclose(out.data, correlate2d_hw(x, k, (3, 2)), atol=1e-10)

    def test_large_kernel_gradients(self, rng, gradcheck):
        x = Tensor(rng.normal(size=(2, 1, 8, 7)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 1, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 8, 7)))
        gradcheck(lambda: (conv2d(x, k, padding=2) * w).sum(), [x, k], atol=1e-6)


class TestConv3d:
    def test_matches_direct_correlation(self, rng):
        x = rng.normal(size=(2, 4, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3, 3))
        out = conv3d(Tensor(x), Tensor(k), padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
        expected = np.zeros((3, 4, 5, 5))
        for o in range(3):
            for t in range(4):
                for y in range(5):
                    for x_ in range(5):
                        expected[o, t, y, x_] = np.sum(xp[:, t : t + 3, y : y + 3, x_ : x_ + 3] * k[o])
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_gradients(self, rng, gradcheck):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
        k = Tensor(rng.normal(size=(2, 2, 3, 3, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 4, 4)))
        gradcheck(lambda: (conv3d(x, k, padding=1) * w).sum(), [x, k])

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            conv3d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 1, 3, 3, 3))))


class TestConvTemporal:
    def test_entry_zero_weights_last_frame(self, rng):
        x = rng.normal(size=(5, 2, 3, 3))
        k = rng.normal(size=(2, 3))
        out = conv_temporal(Tensor(x), Tensor(k)).data
        expected = sum(x[4 - lag] * k[:, lag][:, None, None] for lag in range(3))
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_kernel_longer_than_sequence(self):
        with pytest.raises(ShapeError):
            conv_temporal(Tensor(np.ones((2, 1, 3, 3))), Tensor(np.ones((1, 4))))

    def test_gradients(self, rng, gradcheck):
        x = Tensor(rng.normal(size=(6, 2, 3, 3)), requires_grad=True)
        k = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 3)))
        gradcheck(lambda: (conv_temporal(x, k) * w).sum(), [x, k])


class TestResize:
    def test_same_size_is_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 5, 5)))
        assert resize_bilinear(x, (5, 5)) is x
        np.testing.assert_array_equal(bilinear_matrix(4, 4), np.eye(4))

    def test_rows_are_stochastic(self):
        for n_in, n_out in ((64, 8), (8, 64), (15, 11)):
            np.testing.assert_allclose(bilinear_matrix(n_in, n_out).sum(axis=1), 1.0)

    def test_constant_image_stays_constant(self):
        out = resize_bilinear(Tensor(np.full((1, 32, 24), 0.7)), (8, 6))
        np.testing.assert_allclose(out.data, 0.7)

    def test_downscale_by_two_averages_pairs(self):
        row = np.arange(8.0)
        weights = bilinear_matrix(8, 4)
        np.testing.assert_allclose(weights[1:3] @ row, [2.5, 4.5])

    def test_gradients(self, rng, gradcheck):
        x = Tensor(rng.normal(size=(2, 6, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 9)))
        gradcheck(lambda: (resize_bilinear(x, (3, 9)) * w).sum(), [x])

    def test_rejects_non_channel_input(self):
        with pytest.raises(ShapeError):
            resize_bilinear(Tensor(np.ones((4, 4))), (2, 2))
