"""Network building blocks: dilated pyramid pooling, squeeze-attention,
encoder and decoder blocks.

All blocks preserve spatial size and are pure functions of (input, params);
batch-norm running stats mutate only when forward runs in train mode.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import BNStats, Tensor


class Module:
    """Minimal parameter/submodule container with stable naming."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_stats", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, BNStats):
            self._stats[name] = value
        elif isinstance(value, (list, tuple)) and value and all(
            isinstance(v, Module) for v in value
        ):
            for i, v in enumerate(value):
                self._children[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_bn_stats(self, prefix: str = ""):
        for name, s in self._stats.items():
            yield prefix + name, s
        for cname, child in self._children.items():
            yield from child.named_bn_stats(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel=3, stride=1,
                 padding=0, dilation=1, bias=True):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.stride = (stride, stride) if isinstance(stride, int) else stride
        self.padding = (padding, padding) if isinstance(padding, int) else padding
        self.dilation = dilation
        self.weight = Tensor(
            np.zeros((out_channels, in_channels, kh, kw), dtype=np.float32),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=np.float32),
                           requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, dilation=self.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.stats = BNStats(
            mean=np.zeros(channels, dtype=np.float32),
            var=np.ones(channels, dtype=np.float32),
        )

    def init_stats_identity(self):
        self.stats.mean[:] = 0.0
        self.stats.var[:] = 1.0
        self.stats.initialized = True

    def __call__(self, x: Tensor, train: bool = False,
                 update_stats: bool = True) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.stats, train,
                             momentum=self.momentum, eps=self.eps,
                             update_stats=update_stats and train)


class ConvBNReLU(Module):
    """3x3 conv (same padding) -> batch norm -> ReLU."""

    def __init__(self, in_channels, out_channels, dilation=1):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel=3,
                           padding=dilation, dilation=dilation)
        self.bn = BatchNorm2d(out_channels)

    def __call__(self, x, train=False):
        return T.relu(self.bn(self.conv(x), train=train))


class CBlock(Module):
    """Two successive (3x3 conv -> BN -> ReLU) stages; size preserving."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.stage1 = ConvBNReLU(in_channels, out_channels)
        self.stage2 = ConvBNReLU(out_channels, out_channels)

    def __call__(self, x, train=False):
        return self.stage2(self.stage1(x, train), train)


class DDPP(Module):
    """Dilated pyramid pooling with a residual add.

    Each branch pools the input to a coarse grid, applies a 3x3 dilated
    convolution (same dilation for the whole pyramid, fixed per network
    level), and bilinearly upsamples back to the input size.  The branch
    sums plus the input form the output, so zero parameters give the
    identity map.
    """

    POOL_GRIDS = (1, 3, 6)

    def __init__(self, channels, dilation, pool_grids=POOL_GRIDS):
        super().__init__()
        if dilation not in (1, 2, 3, 4):
            raise ConfigError(f"DDPP dilation must be in 1..4, got {dilation}")
        grids = tuple(int(g) for g in pool_grids)
        if len(grids) != 3 or any(g < 1 for g in grids) or list(grids) != sorted(grids):
            raise ConfigError(f"DDPP pool grids must be 3 ascending positive ints, got {grids}")
        self.dilation = dilation
        self.pool_grids = grids
        self.branches = [
            Conv2d(channels, channels, kernel=3, padding=dilation,
                   dilation=dilation)
            for _ in grids
        ]

    def __call__(self, x, train=False, pool_grids=None):
        grids = self.pool_grids if pool_grids is None else tuple(pool_grids)
        n, c, h, w = x.shape
        for g in grids:
            if g > min(h, w):
                raise ShapeError(
                    f"DDPP pool grid {g} does not fit input {h}x{w};"
                    " pad the input or reduce the pool grid"
                )
        acc = None
        for conv, g in zip(self.branches, grids):
            branch = T.upsample_bilinear(conv(T.adaptive_avg_pool2d(x, (g, g))), (h, w))
            acc = branch if acc is None else acc + branch
        return acc + x


class SA(Module):
    """Squeeze-and-attention block.

    Main path: C-block on the input.  Attention path: 2x2 average pool,
    C-block, sigmoid, bilinear upsample back to input size.  Output is
    attn * main + attn.  Odd spatial sizes are zero-padded by one
    row/column before the attention pool.
    """

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.main = CBlock(in_channels, out_channels)
        self.attn = CBlock(in_channels, out_channels)

    @staticmethod
    def combine(attn: Tensor, res: Tensor) -> Tensor:
        return attn * res + attn

    def attention_map(self, x, train=False):
        n, c, h, w = x.shape
        xa = x
        hp, wp = h, w
        if h % 2 or w % 2:
            hp, wp = h + h % 2, w + w % 2
            xa = T.pad2d(x, (0, hp - h, 0, wp - w))
        squeezed = T.adaptive_avg_pool2d(xa, (hp // 2, wp // 2))
        return T.upsample_bilinear(T.sigmoid(self.attn(squeezed, train)), (h, w))

    def __call__(self, x, train=False):
        res = self.main(x, train)
        attn = self.attention_map(x, train)
        return self.combine(attn, res)


class EBlock(Module):
    """Encoder block: entry conv expands channels, then D-DPP and SA run in
    parallel on the shared features and their outputs are summed.

    Returns (output, ddpp_tap, sa_tap); a disabled branch contributes the
    shared features unchanged, both as branch output and as tap.
    """

    def __init__(self, in_channels, out_channels, level,
                 enable_ddpp=True, enable_sa=True):
        super().__init__()
        if not (enable_ddpp or enable_sa):
            raise ConfigError("EBlock needs at least one of D-DPP / SA enabled")
        self.enable_ddpp = enable_ddpp
        self.enable_sa = enable_sa
        self.entry = ConvBNReLU(in_channels, out_channels)
        if enable_ddpp:
            self.ddpp = DDPP(out_channels, dilation=level)
        if enable_sa:
            self.sa = SA(out_channels, out_channels)

    def __call__(self, x, train=False, pool_grids=None):
        y = self.entry(x, train)
        ddpp_tap = self.ddpp(y, train, pool_grids=pool_grids) if self.enable_ddpp else y
        sa_tap = self.sa(y, train) if self.enable_sa else y
        return ddpp_tap + sa_tap, ddpp_tap, sa_tap


class DBlock(Module):
    """Decoder block: bilinear x2 upsample, concat with the skip, SA."""

    def __init__(self, in_channels, skip_channels, out_channels):
        super().__init__()
        self.sa = SA(in_channels + skip_channels, out_channels)

    def __call__(self, x, skip, train=False):
        n, c, h, w = x.shape
        up = T.upsample_bilinear(x, (2 * h, 2 * w))
        if up.shape[2:] != skip.shape[2:]:
            raise ShapeError(
                f"DBlock: upsampled input {up.shape[2:]} does not match skip"
                f" {skip.shape[2:]}"
            )
        out = self.sa(T.concat_channels(up, skip), train)
        return out, out


def receptive_field(level: int) -> int:
    """Side length of the dilated 3x3 kernel's span at a network level."""
    if level not in (1, 2, 3, 4):
        raise ConfigError(f"level must be in 1..4, got {level}")
    return 2 * level + 1
