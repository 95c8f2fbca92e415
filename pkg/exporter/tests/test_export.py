import numpy as np
import pytest
import torch
import torchvision
from torch import nn
from torch.utils.data import DataLoader

from cald_exporter import datasets, jobs, models
from cald_exporter.caldfile import write_cald
from cald_exporter.errors import (DatasetResolutionError, FeatureHookError,
                                  ModelResolutionError)

from conftest import CLASSES, HEADER, TEST_PER_CLASS, read_cald


class TestCaldBytes:
    def test_header_fields(self, exported):
        raw = exported.path.read_bytes()
        magic, version, reserved, n, d, k = HEADER.unpack_from(raw, 0)
        assert magic == b"CALD"
        assert version == 1
        assert reserved == 0
        assert n == 10
        assert d == 16
        assert k == len(CLASSES)

    def test_file_size_is_exactly_header_plus_arrays(self, exported):
        s = exported.summary
        expected = HEADER.size + s.n * s.d * 4 + s.n * s.k * 4 + s.n * 4
        assert exported.path.stat().st_size == expected

    def test_labels_follow_sorted_class_folders(self, exported):
        # class_a sorts before class_b, files sorted within each
        data = read_cald(exported.path)
        assert data.labels.tolist() == [0] * TEST_PER_CLASS + [1] * TEST_PER_CLASS

    def test_arrays_are_finite_f32(self, exported):
        data = read_cald(exported.path)
        assert np.all(np.isfinite(data.features))
        assert np.all(np.isfinite(data.logits))

    def test_summary_matches_header(self, exported):
        data = read_cald(exported.path)
        assert (exported.summary.n, exported.summary.d, exported.summary.k) \
            == (data.n, data.d, data.k)


class TestWriter:
    def test_rejects_non_finite_values(self, tmp_path):
        feats = np.zeros((2, 3), dtype=np.float32)
        logits = np.array([[0.0, np.nan], [0.0, 1.0]], dtype=np.float32)
        with pytest.raises(ValueError, match="non-finite"):
            write_cald(tmp_path / "bad.cald", feats, logits, np.array([0, 1]))

    def test_rejects_row_count_mismatch(self, tmp_path):
        with pytest.raises(ValueError, match="row counts"):
            write_cald(tmp_path / "bad.cald", np.zeros((2, 3), np.float32),
                       np.zeros((3, 2), np.float32), np.array([0, 1]))

    def test_rejects_out_of_range_labels(self, tmp_path):
        with pytest.raises(ValueError, match="labels"):
            write_cald(tmp_path / "bad.cald", np.zeros((2, 3), np.float32),
                       np.zeros((2, 2), np.float32), np.array([0, 2]))


class TestDeterminism:
    def test_same_job_twice_gives_identical_bytes(self, exported, tmp_path):
        again = tmp_path / "again.cald"
        job = jobs.ExportJob(model=exported.job.model,
                               dataset=exported.job.dataset, split="test",
                               out=str(again))
        summary = jobs.export(job)
        assert again.read_bytes() == exported.path.read_bytes()
        assert summary == exported.summary

    def test_batch_size_does_not_change_predictions(self, exported,
                                                    checkpoint, image_root,
                                                    tmp_path):
        """Different batching may move low bits, never the argmax."""
        out = tmp_path / "b3.cald"
        jobs.export(jobs.ExportJob(model=str(checkpoint),
                                       dataset=str(image_root), split="test",
                                       out=str(out), batch_size=3))
        a = read_cald(exported.path)
        b = read_cald(out)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(np.argmax(a.logits, axis=1),
                              np.argmax(b.logits, axis=1))


class TestAccuracy:
    def test_printed_number_is_recomputable_from_the_file(self, exported):
        data = read_cald(exported.path)
        recomputed = float((np.argmax(data.logits, axis=1) == data.labels).mean())
        assert exported.summary.accuracy == recomputed

    def test_argmax_agrees_with_a_direct_forward_pass(self, exported,
                                                      checkpoint, image_root):
        resolved = models.resolve_model(str(checkpoint))
        folder = datasets.resolve_split(str(image_root), "test",
                                        resolved.transform)
        preds = []
        with torch.no_grad():
            for images, _ in DataLoader(folder, batch_size=4):
                preds.append(resolved.module(images).argmax(dim=1).numpy())
        file_preds = np.argmax(read_cald(exported.path).logits, axis=1)
        assert np.array_equal(np.concatenate(preds), file_preds)


class TestModels:
    def test_final_linear_finds_the_head(self):
        net = models.TinyConvNet(num_classes=3)
        assert models.final_linear(net) is net.classifier
        assert models.penultimate_width(net) == 16

    def test_resnet_family_penultimate_widths(self):
        # architecture only; no weights involved
        assert models.penultimate_width(
            torchvision.models.resnet50(weights=None)) == 2048
        assert models.penultimate_width(
            torchvision.models.resnet18(weights=None)) == 512

    def test_model_without_linear_layer_is_rejected(self):
        with pytest.raises(FeatureHookError, match="no linear"):
            models.final_linear(nn.Conv2d(3, 4, 1))

    def test_tap_rejects_head_firing_twice(self):
        class DoubleFire(nn.Module):
            def __init__(self):
                super().__init__()
                self.head = nn.Linear(4, 2)

            def forward(self, x):
                return self.head(x) + self.head(x)

        net = DoubleFire()
        with models.FeatureTap(net) as tap:
            net(torch.randn(3, 4))
            with pytest.raises(FeatureHookError, match="fired 2 times"):
                tap.take()

    def test_tap_rejects_unpooled_features(self):
        class SpatialHead(nn.Module):
            def __init__(self):
                super().__init__()
                self.head = nn.Linear(5, 2)

            def forward(self, x):
                return self.head(x).mean(dim=1)

        net = SpatialHead()
        with models.FeatureTap(net) as tap:
            net(torch.randn(3, 7, 5))
            with pytest.raises(FeatureHookError, match="pooled"):
                tap.take()

    def test_tap_removes_its_hook_on_exit(self):
        net = models.TinyConvNet(num_classes=2)
        with models.FeatureTap(net) as tap:
            pass
        net(torch.randn(1, 3, 8, 8))
        assert tap._calls == []

    def test_unknown_name_lists_the_registry(self):
        with pytest.raises(ModelResolutionError, match="resnet18"):
            models.resolve_model("no-such-model")


class TestCheckpoints:
    def test_round_trip_preserves_outputs(self, checkpoint):
        resolved = models.resolve_model(str(checkpoint))
        torch.manual_seed(0)
        fresh = models.TinyConvNet(num_classes=len(CLASSES))
        x = torch.randn(4, 3, 8, 8)
        with torch.no_grad():
            assert torch.equal(resolved.module(x), fresh(x))

    def test_missing_field(self, tmp_path):
        path = tmp_path / "no_arch.pt"
        torch.save({"state_dict": {}, "num_classes": 2}, path)
        with pytest.raises(ModelResolutionError, match="missing field 'arch'"):
            models.resolve_model(str(path))

    def test_unknown_architecture(self, tmp_path):
        path = tmp_path / "weird.pt"
        torch.save({"arch": "megaconv", "state_dict": {}, "num_classes": 2}, path)
        with pytest.raises(ModelResolutionError, match="megaconv"):
            models.resolve_model(str(path))

    def test_state_dict_shape_mismatch(self, tmp_path):
        path = tmp_path / "badfit.pt"
        net = models.TinyConvNet(num_classes=5)
        torch.save({"arch": "tinyconv", "state_dict": net.state_dict(),
                    "num_classes": 2}, path)
        with pytest.raises(ModelResolutionError, match="does not fit"):
            models.resolve_model(str(path))

    def test_not_a_dict(self, tmp_path):
        path = tmp_path / "tensor.pt"
        torch.save(torch.zeros(3), path)
        with pytest.raises(ModelResolutionError, match="not a field dict"):
            models.resolve_model(str(path))

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "garbage.pt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ModelResolutionError, match="unreadable"):
            models.resolve_model(str(path))


class TestDatasets:
    def test_val_split_has_its_own_size(self, checkpoint, image_root, tmp_path):
        out = tmp_path / "val.cald"
        summary = jobs.export(jobs.ExportJob(model=str(checkpoint),
                                                 dataset=str(image_root),
                                                 split="val", out=str(out)))
        assert summary.n == 4

    def test_missing_split_names_the_present_ones(self, image_root):
        with pytest.raises(DatasetResolutionError, match="present.*test.*val"):
            datasets.resolve_split(str(image_root), "train", transform=None)

    def test_nonexistent_root(self, tmp_path):
        with pytest.raises(DatasetResolutionError, match="unknown dataset"):
            datasets.resolve_split(str(tmp_path / "nope"), "test", transform=None)

    def test_split_without_images(self, tmp_path):
        (tmp_path / "empty" / "test" / "class_a").mkdir(parents=True)
        with pytest.raises(DatasetResolutionError, match="no class folders"):
            datasets.resolve_split(str(tmp_path / "empty"), "test", transform=None)

    def test_more_classes_than_model_outputs(self, checkpoint, image_root,
                                             tmp_path):
        import shutil
        root = tmp_path / "threeclass"
        shutil.copytree(image_root, root)
        extra = root / "test" / "class_c"
        extra.mkdir()
        shutil.copy(next((root / "test" / "class_a").iterdir()),
                    extra / "img.png")
        job = jobs.ExportJob(model=str(checkpoint), dataset=str(root),
                               split="test", out=str(tmp_path / "x.cald"))
        with pytest.raises(ValueError, match="3 classes.*outputs 2"):
            jobs.export(job)


class TestJobValidation:
    def test_bad_split(self):
        with pytest.raises(ValueError, match="split"):
            jobs.ExportJob(model="m", dataset="d", split="dev", out="o")

    def test_bad_batch_size(self):
        with pytest.raises(ValueError, match="batch_size"):
            jobs.ExportJob(model="m", dataset="d", split="test", out="o",
                             batch_size=0)

    def test_bad_device_hint(self):
        with pytest.raises(ValueError, match="device"):
            jobs.ExportJob(model="m", dataset="d", split="test", out="o",
                             device="warp-drive")
