"""Training loop: Adam optimization, deterministic batching, checkpointing,
and evaluation scheduling.

Determinism contract: the parameter trajectory is a pure function of
(seed, config, data).  Every random draw comes from generators seeded with
(seed, epoch); resuming from the saved trainer state reproduces the exact
trajectory of an uninterrupted run.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import metrics as M
from . import tensor as T
from .data import AugmentationConfig, Sample, augment
from .errors import ConfigError, NumericsError, TrainAbort
from .losses import LossConfig, make_loss
from .model import VesselNet, save_checkpoint
from .tensor import Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 22
    epochs: int = 70
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    eval_every: int = 10
    checkpoint_dir: str = "checkpoints"
    patch_size: int | None = None      # None: full-image training
    patches_per_image: int = 4
    threshold: float = 0.5
    use_fov: bool = True
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


@dataclass
class TrainHistory:
    step_losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)

    def to_json(self) -> str:
        # wall-clock timings are excluded so reruns produce identical files
        return json.dumps(
            {"step_losses": self.step_losses, "evals": self.evals},
            sort_keys=True, indent=1,
        )


class Adam:
    """Standard bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise TrainAbort(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * (g * g)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self) -> dict:
        out = {"t": np.asarray(self.t)}
        for k in sorted(self.params):
            out[f"m::{k}"] = self.m[k]
            out[f"v::{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict):
        self.t = int(arrays["t"])
        for k in self.params:
            self.m[k][...] = arrays[f"m::{k}"]
            self.v[k][...] = arrays[f"v::{k}"]


def adam_step(params: dict, lr: float, state: Adam | None = None, **kw) -> Adam:
    """One Adam update from the gradients currently stored on ``params``."""
    if state is None:
        state = Adam(params, lr, **kw)
    state.lr = lr
    state.step()
    return state


def _epoch_items(samples, cfg: TrainConfig, epoch: int):
    """Deterministic sequence of (image, mask) training arrays for an epoch."""
    rng = np.random.default_rng([cfg.seed, epoch])
    items = []
    for sample in samples:
        aug = augment(sample, cfg.augment, rng)
        if cfg.patch_size is None:
            items.append((aug.image, aug.mask))
        else:
            ps = cfg.patch_size
            h, w = aug.hw
            if ps > h or ps > w:
                raise ConfigError(f"patch_size {ps} exceeds image {h}x{w}")
            for _ in range(cfg.patches_per_image):
                y = int(rng.integers(0, h - ps + 1))
                x = int(rng.integers(0, w - ps + 1))
                items.append((
                    aug.image[:, y : y + ps, x : x + ps],
                    aug.mask[:, y : y + ps, x : x + ps],
                ))
    order = rng.permutation(len(items))
    return [items[i] for i in order]


def _batches(items, batch_size: int):
    """Group consecutive same-shaped items into stacked batches."""
    i = 0
    while i < len(items):
        shape = items[i][0].shape
        j = i + 1
        while j < len(items) and j - i < batch_size and items[j][0].shape == shape:
            j += 1
        imgs = np.stack([it[0] for it in items[i:j]])
        masks = np.stack([it[1] for it in items[i:j]])
        yield imgs, masks
        i = j


def evaluate(model: VesselNet, samples, threshold: float = 0.5,
             use_fov: bool = True) -> dict:
    """Full-image eval-mode inference plus per-image and aggregate metrics."""
    if not samples:
        raise ConfigError("evaluate: dataset is empty")
    per_image = []
    with T.no_grad():
        for s in samples:
            x = Tensor(s.image[None].astype(np.float32))
            y = model.forward(x, train=False)
            scores = y.data[0, 0]
            fov = s.fov[0] if (use_fov and s.fov is not None) else None
            m = M.image_metrics(scores, s.mask[0], fov, threshold)
            per_image.append(m)
    report = M.dataset_report(per_image)
    report["per_image"] = [
        {k: (asdict(v) if isinstance(v, M.ConfusionCounts) else v)
         for k, v in m.items()}
        for m in per_image
    ]
    return report


def train(model: VesselNet, train_samples, cfg: TrainConfig,
          eval_samples=None, resume: bool = False):
    """Run the optimization loop; returns (model, TrainHistory).

    Writes ``last.ckpt`` after every epoch and ``best.ckpt`` whenever the
    eval accuracy improves; a NaN loss aborts with the last-good checkpoint
    left on disk.
    """
    if not train_samples:
        raise ConfigError("train: training set is empty")
    ckdir = Path(cfg.checkpoint_dir)
    ckdir.mkdir(parents=True, exist_ok=True)
    params = dict(model.named_parameters())
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    loss_fn = make_loss(cfg.loss)
    history = TrainHistory()
    start_epoch = 0
    best_acc = -1.0
    state_path = ckdir / "trainer_state.npz"
    if resume and state_path.exists():
        st = np.load(state_path, allow_pickle=False)
        opt.load_state_arrays(st)
        start_epoch = int(st["epoch"])
        best_acc = float(st["best_acc"])

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.monotonic()
        for imgs, masks in _batches(_epoch_items(train_samples, cfg, epoch),
                                    cfg.batch_size):
            x = Tensor(imgs.astype(np.float32))
            opt.zero_grad()
            try:
                pred = model.forward(x, train=True)
                loss = loss_fn(pred, masks.astype(np.float32))
            except NumericsError as e:
                raise TrainAbort(
                    f"non-finite values at epoch {epoch}: {e};"
                    " last-good checkpoint retained"
                ) from e
            val = loss.item()
            if not np.isfinite(val):
                raise TrainAbort(
                    f"loss became non-finite at epoch {epoch};"
                    " last-good checkpoint retained"
                )
            loss.backward()
            opt.step()
            history.step_losses.append(val)

        if eval_samples and ((epoch + 1) % cfg.eval_every == 0
                             or epoch + 1 == cfg.epochs):
            report = evaluate(model, eval_samples, cfg.threshold, cfg.use_fov)
            snap = {"epoch": epoch + 1,
                    "micro": report["micro"], "macro": report["macro"]}
            history.evals.append(snap)
            acc = report["micro"]["accuracy"]
            if acc is not None and acc > best_acc:
                best_acc = acc
                save_checkpoint(model, ckdir / "best.ckpt", seed=cfg.seed)

        save_checkpoint(model, ckdir / "last.ckpt", seed=cfg.seed)
        arrays = opt.state_arrays()
        arrays["epoch"] = np.asarray(epoch + 1)
        arrays["best_acc"] = np.asarray(best_acc)
        np.savez(state_path, **arrays)
        history.epoch_seconds.append(time.monotonic() - t0)

    return model, history
