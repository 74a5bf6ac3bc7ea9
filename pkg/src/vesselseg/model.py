"""Full segmentation network: 4-level encoder, bottleneck, 4-level decoder,
multi-level aggregation from both sides, additive fusion, sigmoid head.

Checkpoints are a versioned binary format with self-describing tensor
records (name, shape, raw little-endian float32 data).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .blocks import CBlock, Conv2d, DBlock, EBlock, Module
from .errors import (
    CheckpointMismatchError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ShapeError,
)
from .tensor import Tensor, he_normal

_MAGIC = b"VSEG"
_FORMAT_VERSION = 1


@dataclass
class NetworkConfig:
    input_channels: int = 3
    encoder_channels: tuple = (16, 64, 128, 256)
    bottleneck_channels: int = 512
    aggregation_channels: int = 16
    enable_ddpp: bool = True
    enable_sa: bool = True

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if len(self.encoder_channels) != 4:
            raise ConfigError(
                f"exactly 4 encoder levels required, got {len(self.encoder_channels)}"
            )
        if min(self.encoder_channels) < 1 or self.bottleneck_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.aggregation_channels < 1:
            raise ConfigError("aggregation_channels must be positive")
        if not (self.enable_ddpp or self.enable_sa):
            raise ConfigError("at least one of enable_ddpp / enable_sa must be true")

    @property
    def decoder_channels(self) -> tuple:
        return tuple(reversed(self.encoder_channels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


class VesselNet(Module):
    """Encoder-decoder vessel segmentation network.

    Inputs are zero-padded on the bottom/right to a multiple of 16 (four
    pooling stages) and the output is cropped back, so output spatial size
    always equals input spatial size.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        enc = config.encoder_channels
        agg = config.aggregation_channels

        chans = [config.input_channels, *enc]
        self.encoder = [
            EBlock(chans[i], chans[i + 1], level=i + 1,
                   enable_ddpp=config.enable_ddpp, enable_sa=config.enable_sa)
            for i in range(4)
        ]
        self.bottleneck = CBlock(enc[-1], config.bottleneck_channels)

        dec_out = config.decoder_channels          # (256, 128, 64, 16) by default
        dec_in = [config.bottleneck_channels, *dec_out[:-1]]
        skips = tuple(reversed(enc))
        self.decoder = [
            DBlock(dec_in[i], skips[i], dec_out[i]) for i in range(4)
        ]

        self.enc_proj_ddpp = [Conv2d(c, agg, kernel=1) for c in enc]
        self.enc_proj_sa = [Conv2d(c, agg, kernel=1) for c in enc]
        self.dec_proj = [Conv2d(c, agg, kernel=1) for c in dec_out]
        self.fusion = Conv2d(agg, agg, kernel=3, padding=1)
        self.head = Conv2d(dec_out[-1], 1, kernel=1)
        if dec_out[-1] != agg:
            raise ConfigError(
                "last decoder channel count must equal aggregation_channels"
                f" for additive fusion ({dec_out[-1]} vs {agg})"
            )

    # -- aggregation -------------------------------------------------------

    def aggregate_encoder(self, taps, target_hw):
        """Project every per-level (ddpp, sa) tap pair to the aggregation
        width, upsample to full resolution, and sum all eight maps."""
        if len(taps) != 4:
            raise ShapeError(f"expected taps for 4 levels, got {len(taps)}")
        acc = None
        for (ddpp_tap, sa_tap), pd, ps in zip(taps, self.enc_proj_ddpp,
                                              self.enc_proj_sa):
            a = T.upsample_bilinear(pd(ddpp_tap), target_hw)
            b = T.upsample_bilinear(ps(sa_tap), target_hw)
            acc = a + b if acc is None else acc + a + b
        return acc

    def aggregate_decoder(self, sa_taps, target_hw):
        if len(sa_taps) != 4:
            raise ShapeError(f"expected taps for 4 levels, got {len(sa_taps)}")
        acc = None
        for tap, proj in zip(sa_taps, self.dec_proj):
            a = T.upsample_bilinear(proj(tap), target_hw)
            acc = a if acc is None else acc + a
        return acc

    # -- forward -----------------------------------------------------------

    def forward(self, x: Tensor, train: bool = False,
                parts: dict | None = None) -> Tensor:
        """Run the network; ``parts``, when given, collects intermediates
        (decoder_out, enc_agg, dec_agg) for inspection and tests."""
        n, c, h, w = x.shape
        if c != self.config.input_channels:
            raise ShapeError(
                f"expected {self.config.input_channels} input channels, got {c}"
            )
        if h < 16 or w < 16:
            raise ShapeError(f"input spatial size must be >= 16, got {h}x{w}")
        hp = -(-h // 16) * 16
        wp = -(-w // 16) * 16
        if (hp, wp) != (h, w):
            x = T.pad2d(x, (0, hp - h, 0, wp - w))

        cur = x
        skips = []
        enc_taps = []
        for blk in self.encoder:
            ch, cw = cur.shape[2], cur.shape[3]
            # small inputs: shrink pool grids so the pyramid still fits
            grids = tuple(min(g, ch, cw) for g in (1, 3, 6))
            out, ddpp_tap, sa_tap = blk(cur, train=train, pool_grids=grids)
            skips.append(out)
            enc_taps.append((ddpp_tap, sa_tap))
            cur = T.maxpool2d(out)

        cur = self.bottleneck(cur, train=train)

        dec_taps = []
        for blk, skip in zip(self.decoder, reversed(skips)):
            cur, tap = blk(cur, skip, train=train)
            dec_taps.append(tap)

        enc_agg = self.aggregate_encoder(enc_taps, (hp, wp))
        dec_agg = self.aggregate_decoder(dec_taps, (hp, wp))
        if parts is not None:
            parts["decoder_out"] = cur
            parts["enc_agg"] = enc_agg
            parts["dec_agg"] = dec_agg
        fused = cur + self.fusion(enc_agg + dec_agg)
        # clamp so outputs stay strictly inside (0,1) in float32
        out = T.clip(T.sigmoid(self.head(fused)), 1e-7, 1.0 - 1e-7)
        if (hp, wp) != (h, w):
            out = T.crop2d(out, 0, 0, h, w)
        return out

    __call__ = forward


def initialize_(model: VesselNet, seed: int) -> VesselNet:
    """He-Normal conv weights, zero biases, identity batch norm affine."""
    rng = np.random.default_rng(seed)
    params = dict(model.named_parameters())
    for name in sorted(params):
        p = params[name]
        if name.endswith(".weight") and p.ndim == 4:
            p.data[...] = he_normal(p.shape, rng, dtype=p.dtype)
        elif name.endswith(".gamma"):
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0
    model.init_seed = seed
    return model


def init_he_normal(config: NetworkConfig, seed: int) -> VesselNet:
    return initialize_(VesselNet(config), seed)


def param_count(model: Module):
    """Total trainable parameter count plus a per-submodule breakdown."""
    breakdown: dict[str, int] = {}
    total = 0
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        breakdown[top] = breakdown.get(top, 0) + p.size
        total += p.size
    return total, breakdown


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(model: VesselNet, path, seed: int | None = None):
    params = dict(model.named_parameters())
    stats = dict(model.named_bn_stats())
    records = []
    blobs = []
    for name in sorted(params):
        arr = params[name].data.astype("<f4")
        records.append({"name": name, "kind": "param", "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    for name in sorted(stats):
        st = stats[name]
        for part, arr in (("mean", st.mean), ("var", st.var)):
            arr = arr.astype("<f4")
            records.append({
                "name": f"{name}.{part}", "kind": f"bn_{part}",
                "shape": list(arr.shape), "initialized": bool(st.initialized),
            })
            blobs.append(arr.tobytes())
    header = {
        "format_version": _FORMAT_VERSION,
        "config": model.config.to_dict(),
        "seed": seed if seed is not None else getattr(model, "init_seed", None),
        "tensors": records,
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _FORMAT_VERSION))
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        for b in blobs:
            f.write(b)


def _read_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != _FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: unsupported format version {version}"
        )
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    header = json.loads(raw[16 : 16 + hlen])
    offset = 16 + hlen
    tensors = {}
    for rec in header["tensors"]:
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise CheckpointTruncatedError(
                f"{path}: truncated data for tensor {rec['name']}"
            )
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype="<f4")
        tensors[rec["name"]] = (rec, arr.reshape(rec["shape"]).copy())
        offset += nbytes
    return header, tensors


def load_state(model: VesselNet, path):
    """Strictly restore parameters and BN stats into an existing model."""
    header, tensors = _read_checkpoint(path)
    params = dict(model.named_parameters())
    stats = dict(model.named_bn_stats())
    expected = set(params)
    for name in stats:
        expected.add(f"{name}.mean")
        expected.add(f"{name}.var")
    got = set(tensors)
    if got != expected:
        unknown = sorted(got - expected)
        missing = sorted(expected - got)
        raise CheckpointMismatchError(
            f"{path}: tensor set mismatch; unknown={unknown[:5]}"
            f" missing={missing[:5]}"
        )
    for name, (rec, arr) in tensors.items():
        if rec["kind"] == "param":
            target = params[name]
            if tuple(arr.shape) != tuple(target.shape):
                raise CheckpointMismatchError(
                    f"{path}: shape mismatch for {name}:"
                    f" {arr.shape} vs {tuple(target.shape)}"
                )
            target.data[...] = arr.astype(target.dtype)
        else:
            base = name.rsplit(".", 1)[0]
            st = stats[base]
            dest = st.mean if rec["kind"] == "bn_mean" else st.var
            if arr.shape != dest.shape:
                raise CheckpointMismatchError(
                    f"{path}: shape mismatch for {name}"
                )
            dest[...] = arr
            st.initialized = bool(rec.get("initialized", True))
    return header.get("seed")


def load_checkpoint(path) -> VesselNet:
    """Rebuild a model from a checkpoint (config + parameters + BN stats)."""
    header, _ = _read_checkpoint(path)
    model = VesselNet(NetworkConfig.from_dict(header["config"]))
    seed = load_state(model, path)
    if seed is not None:
        model.init_seed = seed
    return model
