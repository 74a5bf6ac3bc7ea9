"""Self-contained verification suite behind the ``verify`` CLI command.

Runs gradient checks, block re-evaluation oracles, and metric oracles;
each check prints one pass/fail line.  The oracles here are straight-line
numpy re-evaluations kept deliberately separate from the layer classes.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import metrics as M
from . import tensor as T
from .blocks import DDPP, SA
from .gradcheck import gradcheck
from .losses import LossConfig, bce_loss, dice_loss, ei_loss, smoothed_heaviside
from .model import NetworkConfig, init_he_normal
from .tensor import Tensor


def _rand(shape, seed, scale=1.0, dtype=np.float32, requires_grad=True):
    rng = np.random.default_rng(seed)
    return Tensor((rng.uniform(-1, 1, size=shape) * scale).astype(dtype),
                  requires_grad=requires_grad)


# -- straight-line oracles ----------------------------------------------------


def straightline_conv(x, w, b, padding, dilation):
    """Inline dilated same-padding conv on a raw array."""
    ph = pw = padding
    d = dilation
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    eh, ew = d * (kh - 1) + 1, d * (kw - 1) + 1
    win = sliding_window_view(xp, (eh, ew), axis=(2, 3))[:, :, :, :, ::d, ::d]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]


def straightline_pool(x, grid):
    n, c, h, w = x.shape
    out = np.empty((n, c, grid, grid), dtype=x.dtype)
    for i in range(grid):
        for j in range(grid):
            y0, y1 = (i * h) // grid, ((i + 1) * h) // grid
            x0, x1 = (j * w) // grid, ((j + 1) * w) // grid
            out[:, :, i, j] = x[:, :, y0:y1, x0:x1].mean(axis=(2, 3))
    return out


def straightline_upsample(x, out_hw):
    n, c, h, w = x.shape
    oh, ow = out_hw

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0).astype(x.dtype)

    i0, i1, fy = axis(h, oh)
    j0, j1, fx = axis(w, ow)
    v00 = x[:, :, i0][:, :, :, j0]
    v01 = x[:, :, i0][:, :, :, j1]
    v10 = x[:, :, i1][:, :, :, j0]
    v11 = x[:, :, i1][:, :, :, j1]
    wx = fx[None, None, None, :]
    wy = fy[None, None, :, None]
    row0 = v00 + wx * (v01 - v00)
    row1 = v10 + wx * (v11 - v10)
    return row0 + wy * (row1 - row0)


def straightline_ddpp(x, ddpp: DDPP):
    """Pool -> dilated conv -> upsample per grid, sum, plus residual."""
    h, w = x.shape[2], x.shape[3]
    acc = np.zeros_like(x)
    for conv, grid in zip(ddpp.branches, ddpp.pool_grids):
        pooled = straightline_pool(x, grid)
        conved = straightline_conv(pooled, conv.weight.data, conv.bias.data,
                                   padding=ddpp.dilation, dilation=ddpp.dilation)
        acc = acc + straightline_upsample(conved, (h, w))
    return acc + x


def reference_ei_value(d: np.ndarray, eps: float) -> float:
    """Double-loop spatial-domain evaluation of the spectral energy."""
    n, _, h, w = d.shape
    total = 0.0
    for b in range(n):
        field = d[b, 0].astype(np.float64)
        for u in range(h):
            ku = u if u <= h // 2 else u - h
            for v in range(w):
                kv = v if v <= w // 2 else v - w
                if u == 0 and v == 0:
                    continue
                acc = 0j
                for y in range(h):
                    for x in range(w):
                        acc += field[y, x] * np.exp(-2j * np.pi * (u * y / h + v * x / w))
                total += abs(acc) ** 2 / (2.0 * (np.hypot(ku, kv) + eps))
    return total / n


# -- checks -------------------------------------------------------------------


def check_gradients_layers():
    ok = True
    details = []
    for seed in (0, 1, 2):
        x = _rand((1, 2, 5, 5), seed)
        w = _rand((3, 2, 3, 3), seed + 10, scale=0.5)
        b = _rand((3,), seed + 20, scale=0.1)
        r = gradcheck(lambda x, w, b: T.tmean(
            T.relu(T.conv2d(x, w, b, padding=(1, 1), dilation=2))), [x, w, b])
        ok &= r.passed
        details.append(f"conv seed {seed}: max_rel={r.max_rel_err:.1e}")
        x2 = _rand((1, 2, 6, 6), seed)
        r = gradcheck(lambda x: T.tmean(T.sigmoid(
            T.upsample_bilinear(T.adaptive_avg_pool2d(x, (3, 3)), (6, 6)))), [x2])
        ok &= r.passed
        x3 = _rand((2, 3, 4, 4), seed)
        g = _rand((3,), seed + 1, scale=0.5)
        bb = _rand((3,), seed + 2, scale=0.5)
        r = gradcheck(lambda x, g, b: T.tmean(T.batchnorm2d(
            x, g, b, T.BNStats.identity(3), train=True, update_stats=False)),
            [x3, g, bb])
        ok &= r.passed
        x4 = _rand((1, 2, 4, 4), seed)
        r = gradcheck(lambda x: T.tmean(T.maxpool2d(x)), [x4])
        ok &= r.passed
    return ok, "; ".join(details)


def check_ddpp_oracle():
    ddpp = DDPP(channels=3, dilation=2)
    rng = np.random.default_rng(7)
    for conv in ddpp.branches:
        conv.weight.data[...] = rng.normal(0, 0.3, conv.weight.shape).astype(np.float32)
        conv.bias.data[...] = rng.normal(0, 0.1, conv.bias.shape).astype(np.float32)
    for seed in range(10):
        x = _rand((1, 3, 8, 8), seed, requires_grad=False)
        got = ddpp(x).data
        want = straightline_ddpp(x.data, ddpp)
        if not np.array_equal(got, want):
            return False, f"mismatch at seed {seed}"
    # zero parameters: identity map
    for conv in ddpp.branches:
        conv.weight.data[...] = 0
        conv.bias.data[...] = 0
    x = _rand((1, 3, 8, 8), 99, requires_grad=False)
    if not np.array_equal(ddpp(x).data, x.data):
        return False, "zero-parameter D-DPP is not the identity"
    return True, "10 random inputs bitwise equal; zero params = identity"


def check_sa_algebra():
    rng = np.random.default_rng(0)
    r = Tensor(rng.normal(size=(1, 4, 6, 6)).astype(np.float32))
    zero = Tensor(np.zeros_like(r.data))
    one = Tensor(np.ones_like(r.data))
    a = Tensor(rng.uniform(0, 1, size=r.shape).astype(np.float32))
    ok = (
        np.array_equal(SA.combine(zero, r).data, np.zeros_like(r.data))
        and np.array_equal(SA.combine(one, r).data, r.data + 1.0)
        and np.array_equal(SA.combine(a, r).data, a.data * r.data + a.data)
    )
    return ok, "attn=0 -> 0; attn=1 -> res+1; general A*R+A"


def check_metric_oracles():
    rng = np.random.default_rng(3)
    for _ in range(100):
        pred = rng.integers(0, 2, size=64)
        gt = rng.integers(0, 2, size=64)
        c = M.confusion(pred, gt)
        tp = sum(1 for p, g in zip(pred, gt) if p == 1 and g == 1)
        fn = sum(1 for p, g in zip(pred, gt) if p == 0 and g == 1)
        tn = sum(1 for p, g in zip(pred, gt) if p == 0 and g == 0)
        fp = sum(1 for p, g in zip(pred, gt) if p == 1 and g == 0)
        if (c.tp, c.fp, c.tn, c.fn) != (tp, fp, tn, fn):
            return False, "confusion recount mismatch"
    scores = np.array([0.9, 0.8, 0.7, 0.4, 0.3, 0.2])
    gt = np.array([1, 1, 0, 1, 0, 0])
    a = M.auroc(scores, gt)
    if abs(a - 8.0 / 9.0) > 1e-12:
        return False, f"6-pixel AUROC {a} != 8/9"
    # rank estimator vs exhaustive pair counting
    for seed in range(20):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 9))
        g = r.integers(0, 2, size=n)
        if g.min() == g.max():
            continue
        s = r.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=n)
        pos = s[g == 1]
        neg = s[g == 0]
        brute = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
        brute /= len(pos) * len(neg)
        if abs(M.auroc(s, g) - brute) > 1e-12:
            return False, f"AUROC pair-count mismatch at seed {seed}"
    return True, "Se/Sp/Acc recounts, 6-pixel fixture = 8/9, pair counting"


def check_losses():
    rng = np.random.default_rng(5)
    g = rng.integers(0, 2, size=(1, 1, 8, 8)).astype(np.float32)
    d = dice_loss(Tensor(g), g).item()
    bound = 1.0 / (2 * g.sum() + 1.0)
    if not 0 <= d <= bound + 1e-7:
        return False, f"dice(g,g)={d} above smoothing bound {bound}"
    cfg = LossConfig(kind="ei", alpha=1.0, beta=0.25)
    p = np.where(g > 0, 1.0, 0.0).astype(np.float32)  # saturated exact match
    if ei_loss(Tensor(p), g, cfg).item() != 0.0:
        return False, "EI loss nonzero on exact saturated match"
    cfg = LossConfig(kind="ei", alpha=0.5, beta=0.25)
    pr = Tensor(rng.uniform(0.05, 0.95, size=(1, 1, 8, 8)).astype(np.float64))
    hs = 0.5 * (np.clip((2 * pr.data - 1) / cfg.beta, -1, 1) + 1)
    want = reference_ei_value(cfg.alpha * hs - g, cfg.ei_epsilon)
    got = ei_loss(pr, g, cfg).item()
    if abs(got - want) > 1e-5 * max(1.0, abs(want)):
        return False, f"EI spectral value {got} != oracle {want}"
    # gradients of all three losses at 8x8
    p64 = Tensor(rng.uniform(0.1, 0.9, size=(1, 1, 8, 8)), requires_grad=True)
    checks = [
        gradcheck(lambda p: ei_loss(p, g, cfg), [p64]),
        gradcheck(lambda p: dice_loss(p, g), [p64]),
        gradcheck(lambda p: bce_loss(p, g), [p64]),
    ]
    if not all(c.passed for c in checks):
        return False, "loss gradcheck failed"
    return True, "dice bound, EI oracle within 1e-5, 3 loss gradchecks"


def check_aggregate_gradients():
    cfg = NetworkConfig(encoder_channels=(2, 4, 8, 16), bottleneck_channels=32,
                        aggregation_channels=2)
    model = init_he_normal(cfg, seed=0)
    taps = []
    hw = 16
    for i, c in enumerate(cfg.encoder_channels):
        t1 = _rand((1, c, hw >> i, hw >> i), 40 + i)
        t2 = _rand((1, c, hw >> i, hw >> i), 50 + i)
        taps.append((t1, t2))
    flat = [t for pair in taps for t in pair]

    def agg_loss(*inputs):
        pairs = [(inputs[2 * i], inputs[2 * i + 1]) for i in range(4)]
        return T.tmean(model.aggregate_encoder(pairs, (hw, hw)))

    r1 = gradcheck(agg_loss, flat, max_elements=40)
    dec_taps = [_rand((1, c, hw >> (3 - i), hw >> (3 - i)), 60 + i)
                for i, c in enumerate(cfg.decoder_channels)]
    r2 = gradcheck(
        lambda *ts: T.tmean(model.aggregate_decoder(list(ts), (hw, hw))),
        dec_taps, max_elements=40)
    ok = r1.passed and r2.passed
    return ok, f"encoder max_rel={r1.max_rel_err:.1e} decoder max_rel={r2.max_rel_err:.1e}"


def check_heaviside():
    x = Tensor(np.array([-1.0, -0.25, 0.0, 0.125, 0.25, 1.0], dtype=np.float32))
    got = smoothed_heaviside(x, beta=0.25).data
    want = np.array([0.0, 0.0, 0.5, 0.75, 1.0, 1.0], dtype=np.float32)
    return np.allclose(got, want), f"H_s values {got.tolist()}"


CHECKS = [
    ("layer gradients vs finite differences", check_gradients_layers),
    ("pyramid-pooling block oracle", check_ddpp_oracle),
    ("attention block output algebra", check_sa_algebra),
    ("aggregation path gradients", check_aggregate_gradients),
    ("metric oracles", check_metric_oracles),
    ("loss oracles and gradients", check_losses),
    ("smoothed heaviside values", check_heaviside),
]


def run_all(print_fn=print) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as e:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(e).__name__}: {e}"
        all_ok &= ok
        print_fn(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
