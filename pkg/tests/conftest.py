import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from vesselseg import NetworkConfig


def synthetic_vessel(hw=64, seed=0):
    """A fundus-like test image: bright sinusoid curves on a dim background.

    Returns (image (3,hw,hw) float32 in [0,1], mask (1,hw,hw) uint8).
    """
    yy, xx = np.mgrid[0:hw, 0:hw]
    mask = np.zeros((hw, hw), bool)
    for k, (amp, freq, phase) in enumerate([(10, 1.7, 0.3), (18, 2.3, 1.1),
                                            (8, 1.1, 2.0)]):
        cy = hw / 2 + amp * np.sin(freq * 2 * np.pi * xx / hw + phase) + (k - 1) * 14
        mask |= np.abs(yy - cy) < 1.5
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.25, 0.45, (hw, hw)).astype(np.float32)
    img = np.empty((3, hw, hw), np.float32)
    for c, gain in enumerate((0.55, 0.45, 0.2)):
        img[c] = np.clip(base + gain * mask, 0, 1)
    return img, mask.astype(np.uint8)[None]


def reduced_config(agg=4):
    return NetworkConfig(encoder_channels=(4, 8, 16, 32),
                         bottleneck_channels=64, aggregation_channels=agg)


def tiny_config():
    return NetworkConfig(encoder_channels=(2, 4, 8, 16),
                         bottleneck_channels=32, aggregation_channels=2)


def write_png_dataset(root: Path, n=2, hw=64, with_fov=True, split="train",
                      seed=0):
    """Write a small synthetic PNG dataset plus its JSON manifest."""
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        img, mask = synthetic_vessel(hw, seed=seed + i)
        im = Image.fromarray((img.transpose(1, 2, 0) * 255).astype(np.uint8))
        im.save(root / f"img{i}.png")
        Image.fromarray((mask[0] * 255).astype(np.uint8)).save(root / f"mask{i}.png")
        entry = {"image": f"img{i}.png", "mask": f"mask{i}.png"}
        if with_fov:
            fov = np.zeros((hw, hw), np.uint8)
            fov[2:-2, 2:-2] = 255
            Image.fromarray(fov).save(root / f"fov{i}.png")
            entry["fov"] = f"fov{i}.png"
        entries.append(entry)
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps(
        {"name": "synthetic", "split": split, "entries": entries}
    ))
    return manifest


@pytest.fixture
def vessel_sample():
    return synthetic_vessel()


@pytest.fixture
def png_dataset(tmp_path):
    return write_png_dataset(tmp_path / "data")
