import numpy as np
import pytest

from vesselseg import tensor as T
from vesselseg.errors import GraphError
from vesselseg.gradcheck import gradcheck
from vesselseg.tensor import Tensor


def rand(shape, seed, dtype=np.float64, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor((rng.uniform(-1, 1, size=shape) * scale).astype(dtype),
                  requires_grad=True)


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = rand((2, 3, 4, 5), 0)
        T.tsum(x).backward()
        assert np.array_equal(x.grad, np.ones_like(x.data))

    def test_square_grad(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        T.tsum(x * x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_nonscalar_backward_rejected(self):
        x = rand((1, 1, 2, 2), 0)
        with pytest.raises(GraphError):
            (x * x).backward()

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        T.tsum(x + x).backward()
        assert x.grad == pytest.approx(2.0)


class TestGradcheck:
    def test_conv_1x2x5x5_seed0(self):
        x = rand((1, 2, 5, 5), 0)
        w = rand((3, 2, 3, 3), 1, scale=0.5)
        b = rand((3,), 2, scale=0.1)
        report = gradcheck(
            lambda x, w, b: T.tmean(T.conv2d(x, w, b, padding=(1, 1))),
            [x, w, b])
        assert report.passed
        assert report.max_rel_err < 1e-3

    def test_pure_add_is_exact(self):
        a = rand((1, 1, 3, 3), 3)
        b = rand((1, 1, 3, 3), 4)
        report = gradcheck(lambda a, b: T.tsum(T.add(a, b)), [a, b])
        # linear op: finite differences agree up to float rounding
        assert max(i.max_abs_err for i in report.inputs) < 1e-9

    def test_sigmoid_chain(self):
        x = rand((1, 2, 4, 4), 5)
        report = gradcheck(
            lambda x: T.tmean(T.sigmoid(T.sigmoid(x) * 2.0 - 0.5)), [x])
        assert report.passed
        assert report.max_rel_err < 1e-3

    def test_composite_conv_relu_sum(self):
        x = rand((1, 2, 6, 6), 6)
        w = rand((2, 2, 3, 3), 7, scale=0.5)
        report = gradcheck(
            lambda x, w: T.tsum(T.relu(T.conv2d(x, w, None, padding=(1, 1),
                                                dilation=2))),
            [x, w])
        assert report.passed

    def test_nondeterministic_fn_rejected(self):
        x = rand((2,), 8)
        rng = np.random.default_rng()

        def noisy(x):
            return T.tsum(x * float(rng.random()))

        with pytest.raises(GraphError, match="deterministic"):
            gradcheck(noisy, [x])

    def test_pool_upsample_bn_path(self):
        x = rand((2, 3, 6, 6), 9)
        g = rand((3,), 10, scale=0.5)
        b = rand((3,), 11, scale=0.5)

        def fn(x, g, b):
            y = T.batchnorm2d(x, g, b, T.BNStats.identity(3), train=True,
                              update_stats=False)
            y = T.adaptive_avg_pool2d(y, (3, 3))
            return T.tmean(T.upsample_bilinear(y, (6, 6)))

        report = gradcheck(fn, [x, g, b])
        assert report.passed

    def test_maxpool_and_concat(self):
        a = rand((1, 2, 4, 4), 12)
        b = rand((1, 1, 4, 4), 13)
        report = gradcheck(
            lambda a, b: T.tmean(T.maxpool2d(T.concat_channels(a, b))),
            [a, b])
        assert report.passed

    def test_hardtanh_and_clip(self):
        # stay away from the kinks so finite differences are valid
        x = Tensor(np.array([-0.5, -0.1, 0.2, 0.6]), requires_grad=True)
        report = gradcheck(lambda x: T.tsum(T.hardtanh(x, -0.25, 0.25)), [x],
                           h=1e-4)
        assert report.passed

    def test_crop_pad(self):
        x = rand((1, 1, 4, 4), 14)
        report = gradcheck(
            lambda x: T.tmean(T.crop2d(T.pad2d(x, (1, 1, 2, 0)), 1, 1, 4, 4)),
            [x])
        assert max(i.max_abs_err for i in report.inputs) < 1e-9
