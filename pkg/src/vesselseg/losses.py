"""Training objectives: elastic-interaction loss plus Dice and BCE baselines.

The elastic-interaction loss builds a mismatch field
``d = alpha * H_s(2p - 1) - g`` from the prediction ``p`` and binary ground
truth ``g`` (``H_s`` is a Hardtanh-smoothed Heaviside with half-width
``beta``) and penalizes its spectral energy weighted by inverse radial
frequency:

    loss = mean_batch( sum_{k != 0} |FFT2(d)(k)|^2 / (2 * (|k| + eps)) )

with ``|k|`` the radial magnitude of integer frequency indices and the k=0
(pure area) term excluded.  The concrete formula lives behind ``LossConfig``
so it can be swapped without touching callers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor, _accum, _make

LOSS_KINDS = ("ei", "dice", "bce")


@dataclass
class LossConfig:
    kind: str = "ei"
    alpha: float = 0.50
    beta: float = 0.25
    ei_epsilon: float = 1e-8

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigError("loss alpha and beta must be positive")
        if self.ei_epsilon <= 0:
            raise ConfigError("ei_epsilon must be positive")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _check_binary(g: np.ndarray, name: str = "ground truth"):
    if not np.all((g == 0) | (g == 1)):
        raise ShapeError(f"{name} must be binary (0/1)")


def smoothed_heaviside(x: Tensor, beta: float) -> Tensor:
    """0.5 * (hardtanh(x / beta) + 1): 0 below -beta, 1 above +beta,
    linear with slope 1/(2*beta) in between."""
    if beta <= 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    return T.hardtanh(x * (1.0 / beta)) * 0.5 + 0.5


def spectral_weights(h: int, w: int, eps: float) -> np.ndarray:
    """1 / (2 * (|k| + eps)) over the 2-D integer frequency grid, k=0 zeroed."""
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    kmag = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)
    wgt = 1.0 / (2.0 * (kmag + eps))
    wgt[0, 0] = 0.0
    return wgt


def spectral_energy(d: Tensor, eps: float) -> Tensor:
    """Batch-averaged inverse-frequency-weighted spectral energy of ``d``."""
    arr = d.data
    if arr.ndim != 4:
        raise ShapeError(f"spectral_energy expects a 4-D field, got {arr.shape}")
    n = arr.shape[0]
    h, w = arr.shape[-2:]
    wgt = spectral_weights(h, w, eps)
    spec = np.fft.fft2(arr, axes=(-2, -1))
    val = float((wgt * (spec.real ** 2 + spec.imag ** 2)).sum() / n)

    def backward(g):
        gd = (2.0 * h * w / n) * np.real(
            np.fft.ifft2(wgt * spec, axes=(-2, -1))
        )
        _accum(d, float(g) * gd.astype(arr.dtype))

    return _make(np.asarray(val, dtype=arr.dtype), (d,), backward)


def ei_loss(p: Tensor, g, cfg: LossConfig) -> Tensor:
    gt = np.asarray(g.data if isinstance(g, Tensor) else g)
    if tuple(gt.shape) != tuple(p.shape):
        raise ShapeError(f"ei_loss: shape mismatch {p.shape} vs {gt.shape}")
    _check_binary(gt)
    hs = smoothed_heaviside(p * 2.0 - 1.0, cfg.beta)
    d = hs * cfg.alpha - Tensor(gt.astype(p.dtype))
    return spectral_energy(d, cfg.ei_epsilon)


def dice_loss(p: Tensor, g, smooth: float = 1.0) -> Tensor:
    gt = _as_tensor(g)
    if gt.shape != p.shape:
        raise ShapeError(f"dice_loss: shape mismatch {p.shape} vs {gt.shape}")
    inter = T.tsum(p * gt)
    denom = T.tsum(p) + T.tsum(gt)
    return 1.0 - (inter * 2.0 + smooth) / (denom + smooth)


def bce_loss(p: Tensor, g, clamp: float = 1e-7) -> Tensor:
    gt = _as_tensor(g)
    if gt.shape != p.shape:
        raise ShapeError(f"bce_loss: shape mismatch {p.shape} vs {gt.shape}")
    pc = T.clip(p, clamp, 1.0 - clamp)
    ll = gt * T.log(pc) + (1.0 - gt) * T.log(1.0 - pc)
    return -T.tmean(ll)


def make_loss(cfg: LossConfig):
    """Loss callable (p, g) -> scalar Tensor selected by config."""
    if cfg.kind == "ei":
        return lambda p, g: ei_loss(p, g, cfg)
    if cfg.kind == "dice":
        return dice_loss
    return bce_loss
