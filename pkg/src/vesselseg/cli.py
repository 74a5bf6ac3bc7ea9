"""Command-line entry points: train, eval, predict, verify, inspect.

Exit codes: 0 success, 1 runtime failure, 2 configuration/usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import tensor as T
from . import verify as V
from .blocks import receptive_field
from .config import RunConfig
from .data import Sample, load_dataset, load_manifest, normalize, _decode_image
from .errors import (
    CheckpointError, ConfigError, DataError, TrainAbort, VesselSegError,
)
from .model import VesselNet, init_he_normal, load_checkpoint, param_count
from .tensor import Tensor
from .train import evaluate, train


def _load_samples(manifest_path, normalize_mode, what):
    if manifest_path is None:
        raise ConfigError(f"config is missing data.{what}")
    manifest = load_manifest(manifest_path)
    return [normalize(s, normalize_mode) for s in load_dataset(manifest)]


def cmd_train(config_path, resume: bool = False) -> int:
    cfg = RunConfig.from_yaml(config_path)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_samples = _load_samples(cfg.train_manifest, cfg.normalize, "train_manifest")
    eval_samples = (
        _load_samples(cfg.eval_manifest, cfg.normalize, "eval_manifest")
        if cfg.eval_manifest else None
    )
    model = init_he_normal(cfg.network, cfg.seed)
    tc = cfg.build_train_config()
    model, history = train(model, train_samples, tc, eval_samples, resume=resume)
    (out / "history.json").write_text(history.to_json())
    (out / "timing.json").write_text(
        json.dumps({"epoch_seconds": history.epoch_seconds})
    )
    if history.evals:
        (out / "final_report.json").write_text(
            json.dumps(history.evals[-1], sort_keys=True, indent=1)
        )
    print(f"training done: {len(history.step_losses)} steps,"
          f" outputs in {out}")
    return 0


def _fmt(v):
    return "undef" if v is None else f"{v:.4f}"


def cmd_eval(config_path, checkpoint_path) -> int:
    cfg = RunConfig.from_yaml(config_path)
    model = load_checkpoint(checkpoint_path)
    if model.config.to_dict() != cfg.network.to_dict():
        raise ConfigError(
            f"checkpoint {checkpoint_path} was built with a different network"
            " configuration than the config file"
        )
    samples = _load_samples(cfg.eval_manifest, cfg.normalize, "eval_manifest")
    report = evaluate(model, samples, cfg.threshold, cfg.use_fov)
    print("image\tSe\tSp\tAcc\tAUROC")
    for i, m in enumerate(report["per_image"]):
        print(f"{i}\t{_fmt(m['sensitivity'])}\t{_fmt(m['specificity'])}"
              f"\t{_fmt(m['accuracy'])}\t{_fmt(m['auroc'])}")
    for kind in ("micro", "macro"):
        r = report[kind]
        print(f"{kind}\t{_fmt(r['sensitivity'])}\t{_fmt(r['specificity'])}"
              f"\t{_fmt(r['accuracy'])}\t{_fmt(r.get('auroc'))}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(json.dumps(report, sort_keys=True, indent=1))
    return 0


def cmd_predict(config_path, checkpoint_path, image_paths) -> int:
    cfg = RunConfig.from_yaml(config_path)
    model = load_checkpoint(checkpoint_path)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    failed = 0
    for path in image_paths:
        path = Path(path)
        try:
            image = _decode_image(path)
        except DataError as e:
            print(f"error: {e}", file=sys.stderr)
            failed += 1
            continue
        sample = normalize(
            Sample(image=image, mask=np.zeros((1, *image.shape[1:]), np.uint8)),
            cfg.normalize,
        )
        with T.no_grad():
            prob = model.forward(Tensor(sample.image[None]), train=False).data[0, 0]
        prob16 = np.clip(np.round(prob * 65535.0), 0, 65535).astype(np.uint16)
        Image.fromarray(prob16).save(out / f"{path.stem}_prob.png")
        mask = prob >= cfg.threshold
        Image.fromarray(mask).save(out / f"{path.stem}_mask.png", bits=1)
        print(f"{path} -> {out / (path.stem + '_prob.png')},"
              f" {out / (path.stem + '_mask.png')}")
    return 1 if failed else 0


def cmd_verify() -> int:
    return 0 if V.run_all() else 1


def cmd_inspect(config_path, input_hw=(64, 64)) -> int:
    cfg = RunConfig.from_yaml(config_path)
    model = VesselNet(cfg.network)
    total, breakdown = param_count(model)
    h, w = input_hw
    hp, wp = -(-h // 16) * 16, -(-w // 16) * 16
    rows = []
    dd = cfg.network.enable_ddpp
    sa = cfg.network.enable_sa
    for i, c in enumerate(cfg.network.encoder_channels):
        lvl = i + 1
        rows.append((
            f"encoder{lvl}", str(c), str(lvl) if dd else "disabled",
            str(receptive_field(lvl)) if dd else "-",
            f"{hp >> i}x{wp >> i}",
            str(model.encoder[i].param_count()),
        ))
    rows.append(("bottleneck", str(cfg.network.bottleneck_channels), "-", "-",
                 f"{hp >> 4}x{wp >> 4}", str(model.bottleneck.param_count())))
    for i, c in enumerate(cfg.network.decoder_channels):
        rows.append((
            f"decoder{i + 1}", str(c), "-",
            "SA" if sa else "disabled",
            f"{hp >> (3 - i)}x{wp >> (3 - i)}",
            str(model.decoder[i].param_count()),
        ))
    agg_params = total - sum(int(r[5]) for r in rows)
    rows.append(("aggregation+head", str(cfg.network.aggregation_channels),
                 "-", "-", f"{hp}x{wp}", str(agg_params)))
    header = ("block", "channels", "dilation", "rf", "out_hw", "params")
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(6)]
    for r in [header, *rows]:
        print("  ".join(v.ljust(widths[i]) for i, v in enumerate(r)))
    print(f"ablation: ddpp={'on' if dd else 'off'} sa={'on' if sa else 'off'}")
    print(f"total parameters: {total}")
    assert total == sum(breakdown.values())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="vesselseg",
        description="Retinal vessel segmentation: train, evaluate, predict,"
                    " verify, inspect.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--resume", action="store_true",
                   help="continue from the saved trainer state")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-k", "--checkpoint", required=True)

    p = sub.add_parser("predict", help="write probability and mask images")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-k", "--checkpoint", required=True)
    p.add_argument("images", nargs="+")

    sub.add_parser("verify", help="run the built-in verification suite")

    p = sub.add_parser("inspect", help="print the architecture table")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--input-size", nargs=2, type=int, default=[64, 64],
                   metavar=("H", "W"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(args.config, args.checkpoint)
        if args.command == "predict":
            return cmd_predict(args.config, args.checkpoint, args.images)
        if args.command == "verify":
            return cmd_verify()
        if args.command == "inspect":
            return cmd_inspect(args.config, tuple(args.input_size))
    except (ConfigError, DataError, CheckpointError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (TrainAbort, VesselSegError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
