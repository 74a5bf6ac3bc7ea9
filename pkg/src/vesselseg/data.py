"""Dataset ingestion, normalization, augmentation, and patch machinery.

A dataset is described by a JSON manifest:

    {
      "name": "drive",
      "split": "train",
      "entries": [
        {"image": "images/21.png", "mask": "masks/21.png",
         "fov": "fov/21.png"}          # fov optional
      ]
    }

Paths are relative to the manifest file.  Images decode to float32 RGB in
[0,1]; masks (and FOV) are grayscale thresholded at 0.5 into strict 0/1.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError


@dataclass
class ManifestEntry:
    image_path: Path
    mask_path: Path
    fov_path: Path | None = None


@dataclass
class DatasetManifest:
    name: str
    split: str
    entries: list


@dataclass
class Sample:
    image: np.ndarray            # (3, H, W) float32 in [0, 1]
    mask: np.ndarray             # (1, H, W) uint8 in {0, 1}
    fov: np.ndarray | None = None

    @property
    def hw(self):
        return self.image.shape[1], self.image.shape[2]


@dataclass
class AugmentationConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    shift_frac: float = 0.1

    def __post_init__(self):
        if not (0 <= self.hflip_prob <= 1 and 0 <= self.vflip_prob <= 1):
            raise ConfigError("flip probabilities must be in [0, 1]")
        if not (0 <= self.shift_frac < 0.5):
            raise ConfigError("shift_frac must be in [0, 0.5)")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from e
    for key in ("name", "split", "entries"):
        if key not in doc:
            raise DataError(f"manifest {path} missing key {key!r}")
    if doc["split"] not in ("train", "test"):
        raise DataError(f"manifest split must be train|test, got {doc['split']!r}")
    base = path.parent
    entries = []
    for i, e in enumerate(doc["entries"]):
        if "image" not in e or "mask" not in e:
            raise DataError(f"manifest {path} entry {i} needs image and mask")
        entries.append(ManifestEntry(
            image_path=base / e["image"],
            mask_path=base / e["mask"],
            fov_path=base / e["fov"] if e.get("fov") else None,
        ))
    return DatasetManifest(doc["name"], doc["split"], entries)


def _decode_image(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DataError(f"cannot decode image {path}: {e}") from e
    return arr.transpose(2, 0, 1)


def _decode_binary(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"mask file not found: {path}")
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DataError(f"cannot decode mask {path}: {e}") from e
    return (arr >= 0.5).astype(np.uint8)[None, :, :]


def load_sample(entry: ManifestEntry) -> Sample:
    image = _decode_image(entry.image_path)
    mask = _decode_binary(entry.mask_path)
    if image.shape[1:] != mask.shape[1:]:
        raise DataError(
            f"{entry.image_path}: image size {image.shape[1:]} does not match"
            f" mask size {mask.shape[1:]} ({entry.mask_path})"
        )
    fov = None
    if entry.fov_path is not None:
        fov = _decode_binary(entry.fov_path)
        if fov.shape[1:] != image.shape[1:]:
            raise DataError(
                f"{entry.fov_path}: fov size {fov.shape[1:]} does not match"
                f" image size {image.shape[1:]}"
            )
    return Sample(image=image, mask=mask, fov=fov)


def load_dataset(manifest: DatasetManifest) -> list:
    return [load_sample(e) for e in manifest.entries]


# -- augmentation ------------------------------------------------------------


@dataclass
class AugmentDraw:
    hflip: bool
    vflip: bool
    shift_y: int
    shift_x: int


def draw_augmentation(cfg: AugmentationConfig, hw, rng: np.random.Generator) -> AugmentDraw:
    h, w = hw
    max_dy = int(cfg.shift_frac * h)
    max_dx = int(cfg.shift_frac * w)
    return AugmentDraw(
        hflip=bool(rng.random() < cfg.hflip_prob),
        vflip=bool(rng.random() < cfg.vflip_prob),
        shift_y=int(rng.integers(-max_dy, max_dy + 1)) if max_dy else 0,
        shift_x=int(rng.integers(-max_dx, max_dx + 1)) if max_dx else 0,
    )


def shift2d(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation; vacated pixels are zero, size is preserved."""
    out = np.zeros_like(arr)
    h, w = arr.shape[-2:]
    ys_src = slice(max(0, -dy), min(h, h - dy))
    ys_dst = slice(max(0, dy), min(h, h + dy))
    xs_src = slice(max(0, -dx), min(w, w - dx))
    xs_dst = slice(max(0, dx), min(w, w + dx))
    out[..., ys_dst, xs_dst] = arr[..., ys_src, xs_src]
    return out


def apply_augmentation(sample: Sample, draw: AugmentDraw) -> Sample:
    """Same flips/shift applied jointly to image, mask, and FOV."""
    def tf(a):
        if a is None:
            return None
        if draw.hflip:
            a = a[..., :, ::-1]
        if draw.vflip:
            a = a[..., ::-1, :]
        if draw.shift_y or draw.shift_x:
            a = shift2d(np.ascontiguousarray(a), draw.shift_y, draw.shift_x)
        return np.ascontiguousarray(a)

    return Sample(image=tf(sample.image), mask=tf(sample.mask), fov=tf(sample.fov))


def augment(sample: Sample, cfg: AugmentationConfig, rng: np.random.Generator) -> Sample:
    return apply_augmentation(sample, draw_augmentation(cfg, sample.hw, rng))


# -- normalization ------------------------------------------------------------

NORMALIZE_MODES = ("per_image_standardize", "none")


def normalize(sample: Sample, mode: str = "per_image_standardize") -> Sample:
    """Per-channel zero-mean unit-variance standardization (inside FOV when
    one is present).  Constant channels are left unchanged with a warning."""
    if mode not in NORMALIZE_MODES:
        raise ConfigError(f"normalize mode must be one of {NORMALIZE_MODES}")
    if mode == "none":
        return sample
    img = sample.image.copy()
    sel = sample.fov[0].astype(bool) if sample.fov is not None else np.ones(
        img.shape[1:], dtype=bool
    )
    for c in range(img.shape[0]):
        vals = img[c][sel]
        std = vals.std()
        if std == 0:
            warnings.warn(f"channel {c} has zero variance; left unchanged")
            continue
        img[c] = (img[c] - vals.mean()) / std
    return Sample(image=img, mask=sample.mask, fov=sample.fov)


# -- patches ------------------------------------------------------------------


@dataclass
class Patch:
    y: int
    x: int
    image: np.ndarray
    mask: np.ndarray | None = None
    fov: np.ndarray | None = None


def _positions(size: int, patch: int, stride: int):
    pos = list(range(0, size - patch + 1, stride))
    last = size - patch
    if pos[-1] != last:
        pos.append(last)  # align final patch to the border
    return pos


def extract_patches(sample: Sample, patch_hw, stride) -> list:
    ph, pw = patch_hw
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    h, w = sample.hw
    if ph > h or pw > w:
        raise DataError(f"patch {ph}x{pw} larger than image {h}x{w}")
    patches = []
    for y in _positions(h, ph, sh):
        for x in _positions(w, pw, sw):
            patches.append(Patch(
                y=y, x=x,
                image=sample.image[:, y : y + ph, x : x + pw].copy(),
                mask=sample.mask[:, y : y + ph, x : x + pw].copy(),
                fov=sample.fov[:, y : y + ph, x : x + pw].copy()
                if sample.fov is not None else None,
            ))
    return patches


def stitch(patches: list, predictions: list, out_hw) -> np.ndarray:
    """Average overlapping per-patch predictions into a full-size map."""
    h, w = out_hw
    c = predictions[0].shape[0]
    acc = np.zeros((c, h, w), dtype=np.float64)
    cnt = np.zeros((h, w), dtype=np.float64)
    for p, pred in zip(patches, predictions):
        ph, pw = pred.shape[-2:]
        acc[:, p.y : p.y + ph, p.x : p.x + pw] += pred
        cnt[p.y : p.y + ph, p.x : p.x + pw] += 1.0
    if np.any(cnt == 0):
        raise DataError("patch tiling does not cover the full image")
    return (acc / cnt[None]).astype(np.float32)
