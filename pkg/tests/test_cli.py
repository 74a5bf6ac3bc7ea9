import json

import numpy as np
import pytest
import yaml
from PIL import Image

from vesselseg import cli
from vesselseg.config import RunConfig
from vesselseg.errors import ConfigError
from vesselseg.model import load_checkpoint

from conftest import write_png_dataset

SMALL_NET = {
    "encoder_channels": [2, 4, 8, 16],
    "bottleneck_channels": 32,
    "aggregation_channels": 2,
}


def write_config(path, manifest, out_dir, *, net=SMALL_NET, epochs=1,
                 extra=None):
    doc = {
        "seed": 0,
        "output_dir": str(out_dir),
        "network": net,
        "loss": {"kind": "dice"},
        "train": {"epochs": epochs, "batch_size": 2, "eval_every": 1,
                  "learning_rate": 1e-3},
        "data": {"train_manifest": str(manifest),
                 "eval_manifest": str(manifest)},
    }
    if extra:
        doc.update(extra)
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.fixture
def smoke(tmp_path):
    manifest = write_png_dataset(tmp_path / "data", n=2, hw=32)
    out = tmp_path / "run"
    cfg = write_config(tmp_path / "cfg.yaml", manifest, out)
    return cfg, out, manifest


class TestTrainCommand:
    def test_smoke_train(self, smoke, capsys):
        cfg, out, _ = smoke
        assert cli.main(["train", "-c", str(cfg)]) == 0
        assert (out / "history.json").exists()
        assert (out / "timing.json").exists()
        assert (out / "final_report.json").exists()
        assert (out / "checkpoints" / "last.ckpt").exists()
        hist = json.loads((out / "history.json").read_text())
        assert hist["step_losses"]
        assert "epoch_seconds" not in hist

    def test_rerun_produces_identical_artifacts(self, tmp_path):
        manifest = write_png_dataset(tmp_path / "data", n=2, hw=32)
        blobs = []
        for d in ("r1", "r2"):
            out = tmp_path / d
            cfg = write_config(tmp_path / f"{d}.yaml", manifest, out)
            assert cli.main(["train", "-c", str(cfg)]) == 0
            blobs.append((
                (out / "history.json").read_bytes(),
                (out / "checkpoints" / "last.ckpt").read_bytes(),
            ))
        assert blobs[0][0] == blobs[1][0]
        assert blobs[0][1] == blobs[1][1]

    def test_missing_manifest_is_usage_error(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.yaml",
                           tmp_path / "nowhere" / "manifest.json",
                           tmp_path / "out")
        assert cli.main(["train", "-c", str(cfg)]) == 2
        assert "manifest.json" in capsys.readouterr().err

    def test_missing_config_is_usage_error(self, tmp_path, capsys):
        assert cli.main(["train", "-c", str(tmp_path / "absent.yaml")]) == 2

    def test_unknown_config_key_is_usage_error(self, tmp_path, capsys):
        p = tmp_path / "cfg.yaml"
        p.write_text(yaml.safe_dump({"optimiser": "adam"}))
        assert cli.main(["train", "-c", str(p)]) == 2
        assert "optimiser" in capsys.readouterr().err


class TestEvalCommand:
    def test_eval_after_train(self, smoke, capsys):
        cfg, out, _ = smoke
        assert cli.main(["train", "-c", str(cfg)]) == 0
        capsys.readouterr()
        ckpt = out / "checkpoints" / "last.ckpt"
        assert cli.main(["eval", "-c", str(cfg), "-k", str(ckpt)]) == 0
        text = capsys.readouterr().out
        assert text.splitlines()[0].split("\t") == [
            "image", "Se", "Sp", "Acc", "AUROC"]
        assert "micro" in text and "macro" in text
        report = json.loads((out / "eval_report.json").read_text())
        assert report["n_images"] == 2

    def test_network_mismatch_is_usage_error(self, smoke, tmp_path, capsys):
        cfg, out, manifest = smoke
        assert cli.main(["train", "-c", str(cfg)]) == 0
        ckpt = out / "checkpoints" / "last.ckpt"
        other = write_config(tmp_path / "other.yaml", manifest, out,
                             net={"encoder_channels": [4, 8, 16, 32],
                                  "bottleneck_channels": 64,
                                  "aggregation_channels": 4})
        assert cli.main(["eval", "-c", str(other), "-k", str(ckpt)]) == 2
        assert "different network" in capsys.readouterr().err


class TestPredictCommand:
    def test_outputs_and_binarization(self, smoke, tmp_path, capsys):
        cfg, out, _ = smoke
        assert cli.main(["train", "-c", str(cfg)]) == 0
        ckpt = out / "checkpoints" / "last.ckpt"
        img = tmp_path / "data" / "img0.png"
        assert cli.main(["predict", "-c", str(cfg), "-k", str(ckpt),
                         str(img)]) == 0
        prob_path = out / "img0_prob.png"
        mask_path = out / "img0_mask.png"
        assert prob_path.exists() and mask_path.exists()
        prob = np.asarray(Image.open(prob_path)).astype(np.float64) / 65535.0
        mask = np.asarray(Image.open(mask_path)).astype(bool)
        assert prob.shape == (32, 32) and mask.shape == (32, 32)
        # 16-bit probabilities binarize back to the written mask
        threshold = RunConfig.from_yaml(cfg).threshold
        # quantization can flip pixels sitting exactly on the threshold
        margin = np.abs(prob - threshold) > 1e-4
        assert np.array_equal((prob >= threshold)[margin], mask[margin])

    def test_bad_image_continues_and_fails(self, smoke, tmp_path, capsys):
        cfg, out, _ = smoke
        assert cli.main(["train", "-c", str(cfg)]) == 0
        good = tmp_path / "data" / "img0.png"
        bad = tmp_path / "not_an_image.png"
        bad.write_text("plain text")
        ckpt = out / "checkpoints" / "last.ckpt"
        assert cli.main(["predict", "-c", str(cfg), "-k", str(ckpt),
                         str(bad), str(good)]) == 1
        # the good image was still processed
        assert (out / "img0_prob.png").exists()
        assert "not_an_image" in capsys.readouterr().err


class TestVerifyCommand:
    def test_verify_passes(self, capsys):
        assert cli.main(["verify"]) == 0
        out = capsys.readouterr().out
        assert "[PASS]" in out and "[FAIL]" not in out

    def test_verify_failure_exit_code(self, monkeypatch):
        monkeypatch.setattr(cli.V, "run_all", lambda: False)
        assert cli.main(["verify"]) == 1


class TestInspectCommand:
    def test_default_architecture_table(self, tmp_path, capsys):
        p = tmp_path / "cfg.yaml"
        p.write_text(yaml.safe_dump({"output_dir": str(tmp_path / "o")}))
        assert cli.main(["inspect", "-c", str(p)]) == 0
        out = capsys.readouterr().out
        lines = out.splitlines()
        enc = [ln for ln in lines if ln.startswith("encoder")]
        assert [ln.split()[2] for ln in enc] == ["1", "2", "3", "4"]
        assert [ln.split()[1] for ln in enc] == ["16", "64", "128", "256"]
        assert any(ln.startswith("bottleneck") and "512" in ln
                   for ln in lines)
        assert "total parameters: 15614961" in out
        assert "ablation: ddpp=on sa=on" in out

    def test_ablated_table_shows_disabled(self, tmp_path, capsys):
        p = tmp_path / "cfg.yaml"
        p.write_text(yaml.safe_dump({
            "output_dir": str(tmp_path / "o"),
            "network": {"enable_ddpp": False},
        }))
        assert cli.main(["inspect", "-c", str(p)]) == 0
        out = capsys.readouterr().out
        assert "disabled" in out
        assert "ablation: ddpp=off sa=on" in out

    def test_nonsquare_input_size(self, tmp_path, capsys):
        p = tmp_path / "cfg.yaml"
        p.write_text(yaml.safe_dump({"network": SMALL_NET}))
        assert cli.main(["inspect", "-c", str(p),
                         "--input-size", "584", "565"]) == 0
        out = capsys.readouterr().out
        assert "592x576" in out  # padded to the next multiple of 16


class TestConfigRoundtrip:
    def test_yaml_roundtrip(self, tmp_path):
        manifest = tmp_path / "m.json"
        cfg = write_config(tmp_path / "c.yaml", manifest, tmp_path / "o")
        parsed = RunConfig.from_yaml(cfg)
        again = RunConfig.from_dict(yaml.safe_load(parsed.to_yaml()))
        assert again == parsed

    def test_empty_document_is_valid(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("")
        cfg = RunConfig.from_yaml(p)
        assert cfg.network.encoder_channels == (16, 64, 128, 256)
        assert cfg.loss.kind == "ei"

    def test_nested_unknown_key_path(self):
        with pytest.raises(ConfigError, match=r"train\.momentum"):
            RunConfig.from_dict({"train": {"momentum": 0.9}})
