"""Run configuration: a strict YAML document covering network, loss,
training, data, and metric settings.

Unknown keys are rejected with their full path; every field has a default,
so an empty document is a valid config.  Parsing round-trips through
``to_yaml``/``from_yaml``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import NORMALIZE_MODES, AugmentationConfig
from .errors import ConfigError
from .losses import LossConfig
from .model import NetworkConfig
from .train import TrainConfig

_DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "network": {
        "input_channels": 3,
        "encoder_channels": [16, 64, 128, 256],
        "bottleneck_channels": 512,
        "aggregation_channels": 16,
        "enable_ddpp": True,
        "enable_sa": True,
    },
    "loss": {
        "kind": "ei",
        "alpha": 0.50,
        "beta": 0.25,
        "ei_epsilon": 1e-8,
    },
    "train": {
        "learning_rate": 1e-4,
        "batch_size": 22,
        "epochs": 70,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "eval_every": 10,
        "patch_size": None,
        "patches_per_image": 4,
    },
    "data": {
        "train_manifest": None,
        "eval_manifest": None,
        "normalize": "per_image_standardize",
        "augment": {
            "hflip_prob": 0.5,
            "vflip_prob": 0.5,
            "shift_frac": 0.1,
        },
    },
    "metrics": {
        "threshold": 0.5,
        "use_fov": True,
    },
}


def _merge(user, defaults, path=""):
    if not isinstance(user, dict):
        raise ConfigError(f"config section {path or '<root>'} must be a mapping")
    merged = {}
    for key, default in defaults.items():
        if key in user and isinstance(default, dict):
            merged[key] = _merge(user[key], default, f"{path}{key}.")
        elif key in user:
            merged[key] = user[key]
        else:
            merged[key] = default
    unknown = sorted(set(user) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s): {[path + k for k in unknown]}")
    return merged


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train_section: dict = field(default_factory=lambda: dict(_DEFAULTS["train"]))
    train_manifest: str | None = None
    eval_manifest: str | None = None
    normalize: str = "per_image_standardize"
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    threshold: float = 0.5
    use_fov: bool = True

    def __post_init__(self):
        if self.normalize not in NORMALIZE_MODES:
            raise ConfigError(
                f"data.normalize must be one of {NORMALIZE_MODES},"
                f" got {self.normalize!r}"
            )

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        merged = _merge(doc or {}, _DEFAULTS)
        try:
            network = NetworkConfig.from_dict(merged["network"])
            loss = LossConfig(**merged["loss"])
            aug = AugmentationConfig(**merged["data"]["augment"])
        except TypeError as e:
            raise ConfigError(str(e)) from e
        return cls(
            seed=int(merged["seed"]),
            output_dir=str(merged["output_dir"]),
            network=network,
            loss=loss,
            train_section=merged["train"],
            train_manifest=merged["data"]["train_manifest"],
            eval_manifest=merged["data"]["eval_manifest"],
            normalize=merged["data"]["normalize"],
            augment=aug,
            threshold=float(merged["metrics"]["threshold"]),
            use_fov=bool(merged["metrics"]["use_fov"]),
        )

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
        return cls.from_dict(doc or {})

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "network": self.network.to_dict(),
            "loss": {
                "kind": self.loss.kind,
                "alpha": self.loss.alpha,
                "beta": self.loss.beta,
                "ei_epsilon": self.loss.ei_epsilon,
            },
            "train": dict(self.train_section),
            "data": {
                "train_manifest": self.train_manifest,
                "eval_manifest": self.eval_manifest,
                "normalize": self.normalize,
                "augment": {
                    "hflip_prob": self.augment.hflip_prob,
                    "vflip_prob": self.augment.vflip_prob,
                    "shift_frac": self.augment.shift_frac,
                },
            },
            "metrics": {
                "threshold": self.threshold,
                "use_fov": self.use_fov,
            },
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def build_train_config(self) -> TrainConfig:
        t = self.train_section
        return TrainConfig(
            learning_rate=float(t["learning_rate"]),
            batch_size=int(t["batch_size"]),
            epochs=int(t["epochs"]),
            beta1=float(t["beta1"]),
            beta2=float(t["beta2"]),
            adam_eps=float(t["adam_eps"]),
            loss=self.loss,
            seed=self.seed,
            eval_every=int(t["eval_every"]),
            checkpoint_dir=str(Path(self.output_dir) / "checkpoints"),
            patch_size=None if t["patch_size"] is None else int(t["patch_size"]),
            patches_per_image=int(t["patches_per_image"]),
            threshold=self.threshold,
            use_fov=self.use_fov,
            augment=self.augment,
        )
