"""Dense NCHW tensors with reverse-mode automatic differentiation.

Everything above this module (blocks, model, losses) is written against the
ops defined here.  Arrays are float32 by default; float64 is supported so
gradient checks can run at higher precision.  Gradients are accumulated into
``Tensor.grad`` by ``Tensor.backward()`` on a scalar loss.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphError, NumericsError, ShapeError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _finite_checks_enabled() -> bool:
    return getattr(_state, "finite_checks", True)


class no_grad:
    """Context manager: skip graph construction (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class finite_checks:
    """Context manager toggling per-op NaN/Inf output checks."""

    def __init__(self, enabled: bool):
        self._enabled = enabled

    def __enter__(self):
        self._prev = _finite_checks_enabled()
        _state.finite_checks = self._enabled
        return self

    def __exit__(self, *exc):
        _state.finite_checks = self._prev
        return False


class Tensor:
    """A numpy array plus optional gradient tracking.

    Network ops expect 4-D (N, C, H, W) float arrays; reductions produce
    0-D scalars.  ``grad`` is populated by ``backward()`` and always matches
    ``data`` in shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def backward(self):
        """Accumulate dSelf/dX into every reachable tensor's ``grad``.

        Only valid on scalar (single-element) tensors.
        """
        if self.data.size != 1:
            raise GraphError(
                f"backward() requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __repr__(self):
        return (
            f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype},"
            f" requires_grad={self.requires_grad})"
        )


@dataclass
class ConvSpec:
    """Geometry of a 2-D convolution; validates the output-size arithmetic."""

    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    dilation: int = 1

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "dilation"):
            if getattr(self, name) < 1:
                raise ShapeError(f"ConvSpec.{name} must be positive, got {getattr(self, name)}")
        for name in ("kernel", "stride", "padding"):
            pair = tuple(int(v) for v in getattr(self, name))
            if len(pair) != 2:
                raise ShapeError(f"ConvSpec.{name} must be a 2-tuple")
            setattr(self, name, pair)
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError("ConvSpec kernel/stride/padding out of range")

    def out_hw(self, h: int, w: int) -> tuple:
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        d = self.dilation
        oh = (h + 2 * ph - d * (kh - 1) - 1) // sh + 1
        ow = (w + 2 * pw - d * (kw - 1) - 1) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv output size {oh}x{ow} invalid for input {h}x{w} with {self}"
            )
        return oh, ow

    def receptive_field(self) -> tuple:
        """Effective kernel span per axis: d*(k-1)+1."""
        kh, kw = self.kernel
        d = self.dilation
        return d * (kh - 1) + 1, d * (kw - 1) + 1


@dataclass
class BNStats:
    """Running batch-norm statistics (per channel)."""

    mean: np.ndarray
    var: np.ndarray
    initialized: bool = False

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "BNStats":
        return cls(
            mean=np.zeros(channels, dtype=dtype),
            var=np.ones(channels, dtype=dtype),
            initialized=True,
        )


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    if _finite_checks_enabled() and not np.all(np.isfinite(data)):
        raise NumericsError("forward op produced non-finite values")
    rg = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = tuple(p for p in parents)
        out._backward_fn = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _check_same_shape(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ops -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")

    def backward(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    def backward(g):
        _accum(x, g * s)

    return _make(x.data * x.data.dtype.type(s), (x,), backward)


def shift(x: Tensor, s: float) -> Tensor:
    def backward(g):
        _accum(x, g)

    return _make(x.data + x.data.dtype.type(s), (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0

    def backward(g):
        _accum(x, g * mask)

    return _make(np.where(mask, x.data, 0), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(x, g * out * (1.0 - out))

    return _make(out, (x,), backward)


def hardtanh(x: Tensor, lo: float = -1.0, hi: float = 1.0) -> Tensor:
    """Clamp to [lo, hi]; gradient 1 strictly inside the band, 0 outside."""
    inside = (x.data > lo) & (x.data < hi)

    def backward(g):
        _accum(x, g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data > lo) & (x.data < hi)

    def backward(g):
        _accum(x, g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        _accum(x, g / x.data)

    return _make(np.log(x.data), (x,), backward)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d scalar tensor."""

    def backward(g):
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward)


def tmean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.size)


# -- structural ops --------------------------------------------------------


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects 4-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: N/H/W mismatch {a.shape} vs {b.shape}"
        )
    ca = a.shape[1]

    def backward(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), backward)


def pad2d(x: Tensor, pad: tuple) -> Tensor:
    """Zero-pad spatial dims; pad = (top, bottom, left, right)."""
    t, b, l, r = pad
    if min(pad) < 0:
        raise ShapeError(f"pad2d: negative padding {pad}")
    h, w = x.shape[2], x.shape[3]

    def backward(g):
        _accum(x, g[:, :, t : t + h, l : l + w])

    data = np.pad(x.data, ((0, 0), (0, 0), (t, b), (l, r)))
    return _make(data, (x,), backward)


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    if top + height > x.shape[2] or left + width > x.shape[3]:
        raise ShapeError(
            f"crop2d: window {height}x{width}+{top}+{left} exceeds {x.shape}"
        )

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, :, top : top + height, left : left + width] = g
        _accum(x, full)

    return _make(
        np.ascontiguousarray(x.data[:, :, top : top + height, left : left + width]),
        (x,),
        backward,
    )


# -- convolution and pooling ------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=(1, 1), padding=(0, 0), dilation: int = 1) -> Tensor:
    """2-D convolution (cross-correlation) with stride/padding/dilation."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-D, got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-D, got {weight.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if ic != c:
        raise ShapeError(
            f"conv2d: input has {c} channels but weight expects {ic}"
        )
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(
            f"conv2d: bias shape {bias.shape} != ({oc},)"
        )
    spec = ConvSpec(c, oc, (kh, kw), tuple(stride), tuple(padding), dilation)
    oh, ow = spec.out_hw(h, w)
    sh, sw = spec.stride
    ph, pw = spec.padding
    d = dilation
    eh = d * (kh - 1) + 1
    ew = d * (kw - 1) + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    # (N, C, oh, ow, kh, kw) view over the padded input
    win = sliding_window_view(xp, (eh, ew), axis=(2, 3))[:, :, ::sh, ::sw, ::d, ::d]
    win = win[:, :, :oh, :ow]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        if weight.requires_grad:
            dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            _accum(weight, dw)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                rs = slice(i * d, i * d + (oh - 1) * sh + 1, sh)
                for j in range(kw):
                    cs = slice(j * d, j * d + (ow - 1) * sw + 1, sw)
                    contrib = np.tensordot(g, weight.data[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, rs, cs] += contrib.transpose(0, 3, 1, 2)
            if ph or pw:
                gxp = gxp[:, :, ph : ph + h, pw : pw + w]
            _accum(x, gxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; requires even spatial dims."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {h}x{w}")
    oh, ow = h // 2, w // 2
    windows = x.data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, oh, ow, 4)
    idx = windows.argmax(axis=-1)  # ties resolve to the first max
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        _accum(x, np.ascontiguousarray(gx.reshape(n, c, h, w)))

    return _make(np.ascontiguousarray(out), (x,), backward)


def _adaptive_bounds(n_in: int, n_out: int):
    starts = [(i * n_in) // n_out for i in range(n_out)]
    ends = [((i + 1) * n_in) // n_out for i in range(n_out)]
    return starts, ends


def adaptive_avg_pool2d(x: Tensor, out_hw: tuple) -> Tensor:
    """Average-pool to an exact output grid (standard adaptive binning)."""
    oh, ow = out_hw
    n, c, h, w = x.shape
    if oh < 1 or ow < 1:
        raise ShapeError(f"adaptive_avg_pool2d: output size {oh}x{ow} invalid")
    if oh > h or ow > w:
        raise ShapeError(
            f"adaptive_avg_pool2d: output {oh}x{ow} exceeds input {h}x{w}"
        )
    ys, ye = _adaptive_bounds(h, oh)
    xs, xe = _adaptive_bounds(w, ow)
    out = np.empty((n, c, oh, ow), dtype=x.data.dtype)
    for i in range(oh):
        for j in range(ow):
            out[:, :, i, j] = x.data[:, :, ys[i] : ye[i], xs[j] : xe[j]].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros_like(x.data)
        for i in range(oh):
            for j in range(ow):
                cnt = (ye[i] - ys[i]) * (xe[j] - xs[j])
                gx[:, :, ys[i] : ye[i], xs[j] : xe[j]] += (
                    g[:, :, i, j][:, :, None, None] / cnt
                )
        _accum(x, gx)

    return _make(out, (x,), backward)


def _bilinear_axis(n_in: int, n_out: int, dtype):
    """Half-pixel-center source indices and fractions for one axis."""
    scl = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scl - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (src - i0).astype(dtype)
    return i0, i1, frac


def upsample_bilinear(x: Tensor, out_hw: tuple) -> Tensor:
    """Bilinear resize with half-pixel centers (align_corners=False)."""
    oh, ow = out_hw
    n, c, h, w = x.shape
    if oh < h or ow < w:
        raise ShapeError(
            f"upsample_bilinear: target {oh}x{ow} smaller than input {h}x{w}"
        )
    i0, i1, fy = _bilinear_axis(h, oh, x.data.dtype)
    j0, j1, fx = _bilinear_axis(w, ow, x.data.dtype)
    top = x.data[:, :, i0, :]
    bot = x.data[:, :, i1, :]
    v00 = top[:, :, :, j0]
    v01 = top[:, :, :, j1]
    v10 = bot[:, :, :, j0]
    v11 = bot[:, :, :, j1]
    wx = fx[None, None, None, :]
    wy = fy[None, None, :, None]
    # lerp form keeps constants bitwise-exact
    row0 = v00 + wx * (v01 - v00)
    row1 = v10 + wx * (v11 - v10)
    out = row0 + wy * (row1 - row0)

    def backward(g):
        gx = np.zeros_like(x.data)
        ii0 = np.broadcast_to(i0[:, None], (oh, ow))
        ii1 = np.broadcast_to(i1[:, None], (oh, ow))
        jj0 = np.broadcast_to(j0[None, :], (oh, ow))
        jj1 = np.broadcast_to(j1[None, :], (oh, ow))
        w11 = wy * wx
        w10 = wy * (1 - wx)
        w01 = (1 - wy) * wx
        w00 = (1 - wy) * (1 - wx)
        np.add.at(gx, (slice(None), slice(None), ii0, jj0), g * w00)
        np.add.at(gx, (slice(None), slice(None), ii0, jj1), g * w01)
        np.add.at(gx, (slice(None), slice(None), ii1, jj0), g * w10)
        np.add.at(gx, (slice(None), slice(None), ii1, jj1), g * w11)
        _accum(x, gx)

    return _make(np.ascontiguousarray(out), (x,), backward)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: BNStats,
                train: bool, momentum: float = 0.1, eps: float = 1e-5,
                update_stats: bool = True) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by batch statistics (biased variance) and, when
    ``update_stats``, folds them into the running stats with the given
    momentum.  Eval mode refuses to run until stats were recorded or
    explicitly initialized (``BNStats.identity``).
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm2d: gamma/beta must have shape ({c},), got"
            f" {gamma.shape}/{beta.shape}"
        )
    if train:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_stats:
            m = stats.mean.dtype.type(momentum)
            stats.mean[:] = (1 - m) * stats.mean + m * mean.astype(stats.mean.dtype)
            stats.var[:] = (1 - m) * stats.var + m * var.astype(stats.var.dtype)
            stats.initialized = True
    else:
        if not stats.initialized:
            raise GraphError(
                "batchnorm2d eval mode before any running stats were recorded;"
                " train first or initialize stats explicitly"
            )
        mean = stats.mean.astype(x.data.dtype)
        var = stats.var.astype(x.data.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            scl = (gamma.data * inv)[None, :, None, None]
            if train:
                gm = g.mean(axis=(0, 2, 3), keepdims=True)
                gxm = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
                _accum(x, scl * (g - gm - xhat * gxm))
            else:
                _accum(x, scl * g)

    return _make(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward)


def he_normal(shape: tuple, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Draw from Normal(0, sqrt(2/fan_in)); fan_in = in_c * kh * kw."""
    fan_in = int(np.prod(shape[1:]))
    std = math.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)
