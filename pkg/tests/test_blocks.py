import numpy as np
import pytest

from vesselseg import tensor as T
from vesselseg.blocks import (
    SA, CBlock, DBlock, DDPP, EBlock, receptive_field,
)
from vesselseg.errors import ConfigError, ShapeError
from vesselseg.gradcheck import gradcheck
from vesselseg.tensor import Tensor


def rand(shape, seed, dtype=np.float32, rg=False):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-1, 1, size=shape).astype(dtype), requires_grad=rg)


def randomize(module, seed, std=0.3, dtype=np.float32):
    rng = np.random.default_rng(seed)
    for name, p in sorted(module.named_parameters()):
        if name.endswith(".gamma"):
            p.data = rng.uniform(0.5, 1.5, p.shape).astype(dtype)
        else:
            p.data = rng.normal(0, std, p.shape).astype(dtype)
        p.requires_grad = True
    for _, st in module.named_bn_stats():
        st.mean = st.mean.astype(dtype)
        st.var = st.var.astype(dtype)


# -- independent oracles (double precision, loop-based) -----------------------


def loop_conv(x, w, b, padding, dilation):
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64),
                ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, oc, h, wd))
    for o in range(oc):
        for i in range(kh):
            for j in range(kw):
                ys = i * dilation
                xs = j * dilation
                out[:, o] += (w[o, :, i, j][None, :, None, None]
                              * xp[:, :, ys:ys + h, xs:xs + wd]).sum(axis=1)
        out[:, o] += b[o]
    return out


def loop_pool(x, grid):
    n, c, h, w = x.shape
    out = np.zeros((n, c, grid, grid))
    for i in range(grid):
        for j in range(grid):
            y0, y1 = (i * h) // grid, ((i + 1) * h) // grid
            x0, x1 = (j * w) // grid, ((j + 1) * w) // grid
            out[:, :, i, j] = x[:, :, y0:y1, x0:x1].astype(np.float64).mean(axis=(2, 3))
    return out


def loop_upsample(x, oh, ow):
    n, c, h, w = x.shape
    out = np.zeros((n, c, oh, ow))
    for yo in range(oh):
        for xo in range(ow):
            sy = min(max((yo + 0.5) * h / oh - 0.5, 0), h - 1)
            sx = min(max((xo + 0.5) * w / ow - 0.5, 0), w - 1)
            y0, x0 = int(sy), int(sx)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[:, :, yo, xo] = (
                x[:, :, y0, x0] * (1 - fy) * (1 - fx)
                + x[:, :, y0, x1] * (1 - fy) * fx
                + x[:, :, y1, x0] * fy * (1 - fx)
                + x[:, :, y1, x1] * fy * fx
            )
    return out


class TestDDPP:
    def test_zero_params_is_identity(self):
        ddpp = DDPP(channels=3, dilation=2)
        x = rand((2, 3, 8, 8), 0)
        assert np.array_equal(ddpp(x).data, x.data)

    def test_bias_only_adds_constant(self):
        # zero weights reduce every branch to its bias, so the block
        # becomes x plus the sum of the three (upsampled) bias maps
        ddpp = DDPP(channels=2, dilation=1)
        rng = np.random.default_rng(1)
        total = np.zeros(2)
        for conv in ddpp.branches:
            conv.bias.data = rng.normal(0, 1, 2).astype(np.float32)
            total += conv.bias.data
        x = rand((1, 2, 8, 8), 1)
        want = x.data + total.astype(np.float32)[None, :, None, None]
        assert np.allclose(ddpp(x).data, want, atol=1e-6)

    def test_matches_loop_oracle(self):
        ddpp = DDPP(channels=3, dilation=2)
        randomize(ddpp, 2)
        x = rand((1, 3, 8, 8), 3)
        want = np.array(x.data, dtype=np.float64)
        acc = np.zeros_like(want)
        for conv, grid in zip(ddpp.branches, ddpp.pool_grids):
            branch = loop_upsample(
                loop_conv(loop_pool(x.data, grid), conv.weight.data,
                          conv.bias.data, padding=2, dilation=2), 8, 8)
            acc += branch
        assert np.allclose(ddpp(x).data, acc + want, atol=1e-4)

    def test_small_input_rejected(self):
        ddpp = DDPP(channels=1, dilation=1)
        with pytest.raises(ShapeError, match="pad the input or reduce"):
            ddpp(rand((1, 1, 5, 5), 0))

    def test_spatial_preservation_random_sizes(self):
        rng = np.random.default_rng(4)
        ddpp = DDPP(channels=2, dilation=3)
        randomize(ddpp, 5)
        for _ in range(8):
            h, w = int(rng.integers(6, 65)), int(rng.integers(6, 65))
            x = rand((1, 2, h, w), int(rng.integers(1000)))
            assert ddpp(x).shape == (1, 2, h, w)

    def test_bad_dilation_rejected(self):
        with pytest.raises(ConfigError):
            DDPP(channels=1, dilation=5)


class TestSA:
    def test_combine_algebra(self):
        r = rand((1, 4, 6, 6), 6)
        zeros = Tensor(np.zeros_like(r.data))
        ones = Tensor(np.ones_like(r.data))
        a = rand((1, 4, 6, 6), 7)
        assert np.array_equal(SA.combine(zeros, r).data, np.zeros_like(r.data))
        assert np.array_equal(SA.combine(ones, r).data, r.data + 1.0)
        assert np.array_equal(SA.combine(a, r).data, a.data * r.data + a.data)

    def test_forward_matches_straightline(self):
        sa = SA(3, 5)
        randomize(sa, 8)
        x = rand((1, 3, 8, 8), 9)
        res = sa.main(x, train=True)
        attn = sa.attention_map(x, train=True)
        want = attn.data * res.data + attn.data
        got = sa(x, train=True).data
        assert np.allclose(got, want, atol=1e-6)

    def test_odd_size_padded(self):
        sa = SA(2, 2)
        randomize(sa, 10)
        x = rand((1, 2, 7, 9), 11)
        assert sa(x, train=True).shape == (1, 2, 7, 9)

    def test_spatial_preservation_random_sizes(self):
        rng = np.random.default_rng(12)
        sa = SA(2, 3)
        randomize(sa, 13)
        for _ in range(8):
            h, w = int(rng.integers(6, 65)), int(rng.integers(6, 65))
            x = rand((1, 2, h, w), int(rng.integers(1000)))
            assert sa(x, train=True).shape == (1, 3, h, w)


class TestCBlock:
    def test_zero_params_zero_output(self):
        cb = CBlock(3, 4)
        x = rand((1, 3, 6, 6), 14)
        assert np.array_equal(cb(x, train=True).data, np.zeros((1, 4, 6, 6),
                                                               np.float32))

    def test_spatial_preserved(self):
        cb = CBlock(2, 3)
        randomize(cb, 15)
        for h, w in [(1, 1), (3, 7), (16, 16)]:
            x = rand((1, 2, h, w), 16)
            assert cb(x, train=True).shape == (1, 3, h, w)

    def test_param_count(self):
        # independent count: conv1 w+b, conv2 w+b, two BN affine pairs
        want = (3 * 3 * 16 * 64 + 64) + (3 * 3 * 64 * 64 + 64) + 2 * (2 * 64)
        assert want == 46464
        assert CBlock(16, 64).param_count() == want


class TestEBlock:
    def test_both_disabled_rejected(self):
        with pytest.raises(ConfigError):
            EBlock(2, 4, level=1, enable_ddpp=False, enable_sa=False)

    def test_composition_matches_branch_sum(self):
        blk = EBlock(2, 4, level=2)
        randomize(blk, 17)
        x = rand((1, 2, 8, 8), 18)
        out, ddpp_tap, sa_tap = blk(x, train=True)
        y = blk.entry(x, train=True)
        assert np.array_equal(ddpp_tap.data, blk.ddpp(y, train=True).data)
        assert np.allclose(sa_tap.data, blk.sa(y, train=True).data, atol=1e-6)
        assert np.array_equal(out.data, (ddpp_tap + sa_tap).data)

    def test_disabled_branch_is_identity_tap(self):
        blk = EBlock(2, 4, level=1, enable_ddpp=False)
        randomize(blk, 19)
        x = rand((1, 2, 8, 8), 20)
        out, ddpp_tap, sa_tap = blk(x, train=True)
        y = blk.entry(x, train=True)
        assert np.array_equal(ddpp_tap.data, y.data)
        assert np.array_equal(out.data, (y + sa_tap).data)

    def test_ablation_preserves_shapes(self):
        x = rand((1, 2, 8, 8), 21)
        shapes = []
        for dd, sa in [(True, True), (True, False), (False, True)]:
            blk = EBlock(2, 4, level=1, enable_ddpp=dd, enable_sa=sa)
            randomize(blk, 22)
            out, dt, st = blk(x, train=True)
            shapes.append((out.shape, dt.shape, st.shape))
        assert len(set(shapes)) == 1


class TestDBlock:
    def test_output_matches_skip_size(self):
        blk = DBlock(4, 2, 3)
        randomize(blk, 23)
        x = rand((1, 4, 4, 4), 24)
        skip = rand((1, 2, 8, 8), 25)
        out, tap = blk(x, skip, train=True)
        assert out.shape == (1, 3, 8, 8)
        assert tap is out

    def test_zero_params_give_half(self):
        # zero weights: residual path is 0, attention gate is sigmoid(0),
        # so the combined output is 0.5 * 0 + 0.5 everywhere
        blk = DBlock(2, 2, 2)
        x = Tensor(np.zeros((1, 2, 4, 4), np.float32))
        skip = Tensor(np.zeros((1, 2, 8, 8), np.float32))
        out, _ = blk(x, skip, train=True)
        assert np.array_equal(out.data, np.full((1, 2, 8, 8), 0.5, np.float32))

    def test_skip_mismatch_rejected(self):
        blk = DBlock(2, 2, 2)
        with pytest.raises(ShapeError):
            blk(rand((1, 2, 4, 4), 0), rand((1, 2, 10, 8), 1))


class TestReceptiveField:
    @pytest.mark.parametrize("level,want", [(1, 3), (2, 5), (3, 7), (4, 9)])
    def test_values(self, level, want):
        assert receptive_field(level) == want

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            receptive_field(5)


class TestBlockGradients:
    def _f64(self, module):
        randomize(module, 30, dtype=np.float64)

    def test_ddpp_gradcheck(self):
        ddpp = DDPP(channels=4, dilation=2)
        self._f64(ddpp)
        x = rand((1, 4, 8, 8), 31, dtype=np.float64, rg=True)
        r = gradcheck(lambda x: T.tmean(ddpp(x)), [x])
        assert r.passed

    def test_sa_gradcheck(self):
        sa = SA(4, 4)
        self._f64(sa)
        x = rand((1, 4, 8, 8), 32, dtype=np.float64, rg=True)
        r = gradcheck(lambda x: T.tmean(sa(x, train=True)), [x])
        assert r.passed

    def test_eblock_gradcheck(self):
        blk = EBlock(4, 4, level=2)
        self._f64(blk)
        x = rand((1, 4, 8, 8), 33, dtype=np.float64, rg=True)
        r = gradcheck(lambda x: T.tmean(blk(x, train=True)[0]), [x])
        assert r.passed

    def test_dblock_gradcheck(self):
        blk = DBlock(4, 2, 4)
        self._f64(blk)
        x = rand((1, 4, 4, 4), 34, dtype=np.float64, rg=True)
        skip = rand((1, 2, 8, 8), 35, dtype=np.float64, rg=True)
        r = gradcheck(lambda x, s: T.tmean(blk(x, s, train=True)[0]), [x, skip])
        assert r.passed
