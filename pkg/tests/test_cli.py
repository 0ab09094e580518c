import json
from pathlib import Path

import numpy as np
import pytest

from styleaugment.cli import EXIT_OK, EXIT_USAGE, main
from styleaugment.stylizer import init_weights, save_weights
from styleaugment.trainer import TrainConfig


@pytest.fixture()
def folder_root(tmp_path):
    """Small 2-class train/test image-folder dataset at 16x16."""
    from PIL import Image

    rng = np.random.default_rng(40)
    for split, per_class in (("train", 12), ("test", 6)):
        for cls in ("left", "right"):
            d = tmp_path / "data" / split / cls
            d.mkdir(parents=True)
            for i in range(per_class):
                arr = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
                # class-dependent brightness so training can latch on
                if cls == "right":
                    arr = np.clip(arr.astype(int) + 80, 0, 255).astype(np.uint8)
                Image.fromarray(arr).save(d / f"{i}.png")
    return tmp_path / "data"


@pytest.fixture()
def weights_path(tmp_path):
    path = tmp_path / "stylizer.pt"
    save_weights(init_weights("small4", seed=0), path)
    return path


@pytest.fixture()
def smoke_config_path(tmp_path):
    cfg = TrainConfig(arch="small_resnet_cifar", epochs=1, batch_size=4,
                      base_lr=0.01, augment_mode="none", seed=1)
    path = tmp_path / "config.json"
    path.write_text(cfg.to_json())
    return path


def data_args(folder_root, extra=()):
    return ["--dataset", "folder", "--data-root", str(folder_root),
            "--resolution", "16", *extra]


class TestTrainCommand:
    def test_smoke_run(self, folder_root, smoke_config_path, tmp_path):
        out = tmp_path / "run"
        rc = main(["train", "--config", str(smoke_config_path),
                   "--out-dir", str(out), *data_args(folder_root)])
        assert rc == EXIT_OK
        assert list((out / "checkpoints").glob("model-*.pt"))
        assert list((out / "reports").glob("metrics-*.jsonl"))
        manifests = list((out / "manifests").glob("train-*.json"))
        assert len(manifests) == 1
        manifest = json.loads(manifests[0].read_text())
        assert manifest["command"] == "train"
        assert manifest["config_hash"]

    def test_malformed_config(self, folder_root, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"epochs": "not a number"')
        out = tmp_path / "run"
        rc = main(["train", "--config", str(bad), "--out-dir", str(out),
                   *data_args(folder_root)])
        assert rc != EXIT_OK
        assert not list((out / "checkpoints").glob("model-*.pt"))

    def test_styleaugment_needs_weights(self, folder_root, tmp_path):
        cfg = TrainConfig(epochs=1, batch_size=4, base_lr=0.01,
                          augment_mode="styleaugment", seed=1)
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(cfg.to_json())
        rc = main(["train", "--config", str(cfg_path), "--out-dir",
                   str(tmp_path / "run"), *data_args(folder_root)])
        assert rc == EXIT_USAGE

    def test_rerun_identical_metrics(self, folder_root, smoke_config_path, tmp_path):
        out = tmp_path / "run"
        args = ["train", "--config", str(smoke_config_path), "--out-dir", str(out),
                *data_args(folder_root)]
        assert main(args) == EXIT_OK
        metrics_file = next((out / "reports").glob("metrics-*.jsonl"))
        first = metrics_file.read_bytes()
        assert main(args) == EXIT_USAGE  # refuses to overwrite without --force
        assert main(args + ["--force"]) == EXIT_OK
        assert metrics_file.read_bytes() == first

    def test_env_var_data_root(self, folder_root, smoke_config_path, tmp_path, monkeypatch):
        monkeypatch.setenv("STYLEAUG_DATA_ROOT", str(folder_root))
        rc = main(["train", "--config", str(smoke_config_path),
                   "--out-dir", str(tmp_path / "run"),
                   "--dataset", "folder", "--resolution", "16"])
        assert rc == EXIT_OK


class TestEvalCommand:
    @pytest.fixture()
    def checkpoint(self, folder_root, smoke_config_path, tmp_path):
        out = tmp_path / "trainrun"
        assert main(["train", "--config", str(smoke_config_path),
                     "--out-dir", str(out), *data_args(folder_root)]) == EXIT_OK
        return next((out / "checkpoints").glob("model-*.pt"))

    def test_no_flags_clean_only(self, folder_root, checkpoint, tmp_path, capsys):
        out = tmp_path / "eval"
        rc = main(["eval", "--checkpoint", str(checkpoint), "--out-dir", str(out),
                   *data_args(folder_root)])
        assert rc == EXIT_OK
        report = json.loads(next((out / "reports").glob("eval-*.json")).read_text())
        assert report["clean_acc"] is not None
        assert report["corruption_mean"] is None
        assert report["occlusion_acc"] is None

    def test_full_flags(self, folder_root, checkpoint, weights_path, tmp_path):
        out = tmp_path / "eval"
        rc = main(["eval", "--checkpoint", str(checkpoint), "--out-dir", str(out),
                   "--suite", "--occlusion", "--unbiased", "--csv",
                   "--stylizer-weights", str(weights_path),
                   *data_args(folder_root)])
        assert rc == EXIT_OK
        report = json.loads(next((out / "reports").glob("eval-*.json")).read_text())
        assert report["clean_acc"] is not None
        assert report["corruption_mean"] is not None
        assert report["occlusion_acc"] is not None
        assert report["unbiased_acc"] is not None
        assert next((out / "reports").glob("eval-*.csv"))

    def test_missing_checkpoint(self, folder_root, tmp_path):
        rc = main(["eval", "--checkpoint", str(tmp_path / "nope.pt"),
                   "--out-dir", str(tmp_path / "e"), *data_args(folder_root)])
        assert rc != EXIT_OK

    def test_unbiased_needs_weights(self, folder_root, checkpoint, tmp_path):
        rc = main(["eval", "--checkpoint", str(checkpoint),
                   "--out-dir", str(tmp_path / "e"), "--unbiased",
                   *data_args(folder_root)])
        assert rc == EXIT_USAGE


class TestStylizePreview:
    @pytest.fixture()
    def content_dir(self, tmp_path):
        from PIL import Image

        d = tmp_path / "content"
        d.mkdir()
        rng = np.random.default_rng(41)
        for i in range(4):
            Image.fromarray(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)).save(
                d / f"c{i}.png")
        return d

    def test_in_batch_grid(self, content_dir, weights_path, tmp_path):
        out = tmp_path / "prev"
        rc = main(["stylize-preview", "--content-dir", str(content_dir),
                   "--in-batch", "--weights", str(weights_path),
                   "--out-dir", str(out), "--resolution", "16", "--seed", "3"])
        assert rc == EXIT_OK
        previews = list((out / "previews").glob("preview-*.png"))
        assert len(previews) == 1
        from PIL import Image

        with Image.open(previews[0]) as img:
            assert img.size == (3 * 16, 4 * 16)  # triplet columns, 4 rows

    def test_deterministic_under_seed(self, content_dir, weights_path, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["stylize-preview", "--content-dir", str(content_dir),
                         "--in-batch", "--weights", str(weights_path),
                         "--out-dir", str(out), "--resolution", "16",
                         "--seed", "5"]) == EXIT_OK
            outs.append(next((out / "previews").glob("*.png")).read_bytes())
        assert outs[0] == outs[1]

    def test_requires_style_source(self, content_dir, weights_path, tmp_path):
        rc = main(["stylize-preview", "--content-dir", str(content_dir),
                   "--weights", str(weights_path), "--out-dir", str(tmp_path / "o"),
                   "--resolution", "16"])
        assert rc == EXIT_USAGE

    def test_empty_content_dir(self, weights_path, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        rc = main(["stylize-preview", "--content-dir", str(empty), "--in-batch",
                   "--weights", str(weights_path), "--out-dir", str(tmp_path / "o"),
                   "--resolution", "16"])
        assert rc == EXIT_USAGE


class TestOtherCommands:
    def test_train_decoder_smoke(self, folder_root, tmp_path):
        out = tmp_path / "dec"
        rc = main(["train-decoder", "--out-dir", str(out), "--steps", "20",
                   *data_args(folder_root)])
        assert rc == EXIT_OK
        assert (out / "checkpoints" / "stylizer.pt").exists()
        loss_lines = (out / "reports" / "decoder-loss.jsonl").read_text().splitlines()
        assert len(loss_lines) == 20

    def test_prestylize_rerun_byte_identical(self, folder_root, weights_path, tmp_path):
        from PIL import Image

        styles = tmp_path / "styles"
        styles.mkdir()
        rng = np.random.default_rng(42)
        for i in range(3):
            Image.fromarray(rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)).save(
                styles / f"s{i}.png")
        digests = []
        for name in ("p1", "p2"):
            out = tmp_path / name
            rc = main(["prestylize", "--style-dir", str(styles),
                       "--weights", str(weights_path), "--out-dir", str(out),
                       "--seed", "7", *data_args(folder_root)])
            assert rc == EXIT_OK
            files = sorted((out / "prestylized").rglob("*.png"))
            digests.append([f.read_bytes() for f in files])
        assert digests[0] == digests[1]

    def test_corrupt_export(self, folder_root, tmp_path):
        out = tmp_path / "corr"
        rc = main(["corrupt-export", "--out-dir", str(out), "--limit", "2",
                   *data_args(folder_root)])
        assert rc == EXIT_OK
        root = out / "corrupted"
        spec_dirs = [d for d in root.iterdir() if d.is_dir()]
        assert len(spec_dirs) == 40
        for d in spec_dirs:
            assert len(list(d.glob("*.png"))) == 2
        manifest = json.loads((root / "corrupt_manifest.json").read_text())
        assert len(manifest["entries"]) == 80

    def test_usage_error_without_data_root(self, smoke_config_path, tmp_path, monkeypatch):
        monkeypatch.delenv("STYLEAUG_DATA_ROOT", raising=False)
        rc = main(["train", "--config", str(smoke_config_path),
                   "--out-dir", str(tmp_path / "o")])
        assert rc == EXIT_USAGE
