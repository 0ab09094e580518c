import numpy as np
import pytest
import torch

from styleaugment.corruptions import CorruptionSpec, corruption_suite
from styleaugment.data import handle_from_arrays
from styleaugment.evaluation import (
    EvalReport,
    ReportSchemaError,
    cluster_textures,
    eval_clean,
    eval_corruptions,
    eval_occlusion,
    evaluate,
    export_corruption_csv,
    load_report,
    occlude_center,
    texture_features,
    unbiased_accuracy,
    unbiased_from_cells,
    write_report,
)

from conftest import ConstantModel, MeanBrightnessModel, make_images


@pytest.fixture(scope="module")
def coded_handle():
    imgs, labels = make_images(100, h=32, seed=30, labels_from_color=True)
    return handle_from_arrays(imgs, labels, "test", 10, seed=9)


@pytest.fixture(scope="module")
def perfect_model(coded_handle):
    return MeanBrightnessModel(coded_handle.normalization)


class TestCleanAccuracy:
    def test_perfect_predictor(self, coded_handle, perfect_model):
        assert eval_clean(perfect_model, coded_handle) == 1.0

    def test_constant_predictor_balanced(self):
        imgs, _ = make_images(100, h=16, seed=31)
        labels = np.arange(100) % 10  # exactly balanced
        handle = handle_from_arrays(imgs, labels, "test", 10)
        assert eval_clean(ConstantModel(3), handle) == pytest.approx(0.1)

    def test_untrained_model_near_chance(self, coded_handle):
        from styleaugment.models import build_model

        torch.manual_seed(0)
        model = build_model("small_resnet_cifar", 10)
        acc = eval_clean(model, coded_handle)
        assert acc < 0.35  # chance is 0.10 on 10 classes


class TestCorruptionEval:
    def test_identity_sentinel_equals_clean(self, coded_handle, perfect_model):
        suite = [CorruptionSpec("fog", 0), CorruptionSpec("contrast", 0)]
        result = eval_corruptions(perfect_model, coded_handle, suite=suite)
        clean = eval_clean(perfect_model, coded_handle)
        for sev in result["table"].values():
            assert sev[0] == clean

    def test_overall_mean_is_cell_mean(self, coded_handle, perfect_model):
        result = eval_corruptions(perfect_model, coded_handle, seed=0)
        cells = [a for sev in result["table"].values() for a in sev.values()]
        assert len(cells) == 40
        assert result["mean"] == pytest.approx(np.mean(cells), abs=1e-9)

    def test_every_spec_appears_once(self, coded_handle, perfect_model):
        result = eval_corruptions(perfect_model, coded_handle, seed=0)
        seen = {(kind, sev) for kind, sevs in result["table"].items() for sev in sevs}
        expected = {(s.kind, s.severity) for s in corruption_suite()}
        assert seen == expected

    def test_group_means(self, coded_handle, perfect_model):
        result = eval_corruptions(perfect_model, coded_handle, seed=0)
        noise_cells = [a for kind in ("gaussian_noise", "shot_noise")
                       for a in result["table"][kind].values()]
        assert result["group_means"]["noise"] == pytest.approx(np.mean(noise_cells))

    def test_brightness_degrades_brightness_reader(self, coded_handle, perfect_model):
        # the stub predicts from global brightness, so the brightness
        # corruption must hurt it: corruption mean < clean accuracy
        result = eval_corruptions(
            perfect_model, coded_handle,
            suite=[CorruptionSpec("brightness", s) for s in range(1, 6)])
        assert result["mean"] < eval_clean(perfect_model, coded_handle)


class TestOcclusion:
    def test_geometry_224(self):
        x = torch.ones(1, 3, 224, 224)
        out = occlude_center(x, ((0.0,) * 3, (1.0,) * 3))
        assert (out[:, :, 56:168, 56:168] == 0).all()
        occluded = (out == 0).any(dim=1)
        assert int(occluded.sum()) == 112 * 112

    def test_pixel_count_exact(self):
        for h in (32, 33, 224):
            x = torch.ones(1, 3, h, h)
            out = occlude_center(x, ((0.0,) * 3, (1.0,) * 3))
            assert int((out == 0).any(dim=1).sum()) == round(h / 2) * round(h / 2)

    def test_toy_2x2(self):
        x = torch.ones(1, 3, 2, 2)
        out = occlude_center(x, ((0.0,) * 3, (1.0,) * 3))
        assert int((out == 0).any(dim=1).sum()) == 1

    def test_normalized_black_value(self):
        norm = ((0.5, 0.4, 0.3), (0.2, 0.2, 0.2))
        x = torch.ones(1, 3, 32, 32)
        out = occlude_center(x, norm)
        center = out[0, :, 16, 16]
        expected = torch.tensor([(0 - m) / s for m, s in zip(*norm)])
        assert torch.allclose(center, expected)

    def test_occlusion_hurts_brightness_reader(self, coded_handle, perfect_model):
        occ = eval_occlusion(perfect_model, coded_handle)
        assert occ <= eval_clean(perfect_model, coded_handle)


class TestTextureFeatures:
    def test_identical_rows(self, coded_handle, small_weights):
        from styleaugment.data import next_batch

        batch = next_batch(coded_handle, 4, 0)
        pixels = torch.cat([batch.pixels[:1], batch.pixels[:1]])
        feats = texture_features(pixels, small_weights)
        assert np.array_equal(feats[0], feats[1])

    def test_dimension(self, coded_handle, small_weights):
        from styleaugment.data import next_batch

        batch = next_batch(coded_handle, 2, 0)
        feats = texture_features(batch.pixels, small_weights)
        ch = small_weights.encoder.block_channels[small_weights.encoder.texture_block - 1]
        assert feats.shape == (2, 2 * ch)

    def test_contrast_stretch_changes_std_components(self, coded_handle, small_weights):
        from styleaugment.data import next_batch

        batch = next_batch(coded_handle, 1, 0)
        stretched = batch.pixels * 2.0
        f_a = texture_features(batch.pixels, small_weights)
        f_b = texture_features(stretched, small_weights)
        d = f_a.shape[1] // 2
        assert not np.allclose(f_a[0, d:], f_b[0, d:])


class TestUnbiased:
    def test_perfect_predictor_is_one(self, coded_handle, perfect_model, small_weights):
        acc, matrix = unbiased_accuracy(perfect_model, coded_handle, k=4,
                                        stylizer_weights=small_weights, seed=0)
        assert acc == 1.0
        assert np.all(matrix.cell_acc[matrix.defined_cells()] == 1.0)

    def test_hand_built_four_samples(self):
        # clusters (0,0,1,1), labels (0,1,0,1), predictions right for 3 of 4
        preds = np.array([0, 1, 0, 0])
        labels = np.array([0, 1, 0, 1])
        clusters = np.array([0, 0, 1, 1])
        acc, matrix = unbiased_from_cells(preds, labels, clusters, k=2, num_classes=2)
        # four singleton cells: accuracies 1, 1, 1, 0 -> mean 0.75
        assert acc == pytest.approx(0.75)
        assert matrix.cell_count.sum() == 4

    def test_bounds(self, coded_handle, small_weights):
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 10, 60)
        labels = rng.integers(0, 10, 60)
        clusters = rng.integers(0, 3, 60)
        acc, matrix = unbiased_from_cells(preds, labels, clusters, 3, 10)
        defined = matrix.defined_cells()
        assert matrix.cell_acc[defined].min() <= acc <= 1.0

    def test_weighted_decomposition(self):
        rng = np.random.default_rng(1)
        preds = rng.integers(0, 5, 200)
        labels = rng.integers(0, 5, 200)
        clusters = rng.integers(0, 4, 200)
        _, matrix = unbiased_from_cells(preds, labels, clusters, 4, 5)
        defined = matrix.defined_cells()
        weighted = (matrix.cell_acc[defined] * matrix.cell_count[defined]).sum()
        assert weighted == pytest.approx(int((preds == labels).sum()), abs=1e-9)

    def test_cluster_determinism(self):
        rng = np.random.default_rng(2)
        feats = rng.normal(size=(80, 6))
        a = cluster_textures(feats, 4, seed=3)
        b = cluster_textures(feats, 4, seed=3)
        assert np.array_equal(a, b)

    def test_k_validation(self, coded_handle, perfect_model, small_weights):
        with pytest.raises(ValueError):
            unbiased_accuracy(perfect_model, coded_handle, 1, small_weights)


class TestReports:
    def _sample_report(self):
        return EvalReport(
            clean_acc=0.9,
            corruption_table={"fog": {1: 0.8, 2: 0.7}},
            corruption_group_means={"weather": 0.75},
            corruption_mean=0.75,
            occlusion_acc=0.6,
            unbiased_acc=0.85,
            config_hash="abc123",
            seeds={"eval": 0},
        )

    def test_round_trip(self, tmp_path):
        report = self._sample_report()
        path = tmp_path / "r.json"
        write_report(report, path)
        loaded = load_report(path)
        assert loaded == report

    def test_schema_version_error(self, tmp_path):
        import json

        report = self._sample_report()
        path = tmp_path / "r.json"
        write_report(report, path)
        blob = json.loads(path.read_text())
        blob["schema_version"] = 0
        path.write_text(json.dumps(blob))
        with pytest.raises(ReportSchemaError):
            load_report(path)

    def test_full_precision(self, tmp_path):
        report = self._sample_report()
        report.clean_acc = 0.123456789012345
        path = tmp_path / "r.json"
        write_report(report, path)
        assert load_report(path).clean_acc == report.clean_acc

    def test_csv_export(self, coded_handle, perfect_model, tmp_path):
        result = eval_corruptions(perfect_model, coded_handle, seed=0)
        report = EvalReport(corruption_table=result["table"])
        path = tmp_path / "t.csv"
        export_corruption_csv(report, path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 9  # header + 8 kinds
        assert lines[0].startswith("group,kind,s1")


def test_evaluate_assembles_report(coded_handle, perfect_model, small_weights):
    report = evaluate(perfect_model, coded_handle, stylizer_weights=small_weights,
                      seed=0, config_hash="deadbeef")
    assert report.clean_acc == 1.0
    assert report.corruption_mean is not None
    assert report.occlusion_acc is not None
    assert report.unbiased_acc is not None
    assert report.config_hash == "deadbeef"
    assert report.dataset_manifest["num_classes"] == 10
    assert report.dataset_manifest["normalization"]["mean"]
