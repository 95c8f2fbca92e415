import csv

import numpy as np
import pytest

from adacal import adats, analysis, dataset, metrics, nncore
from adacal.errors import DatasetValidationError

import oracles
from conftest import make_rng, random_dataset


class TestScaledNll:
    def test_matches_oracle(self, rng):
        for _ in range(30):
            k = int(rng.integers(2, 8))
            s = 3.0 * rng.standard_normal(k)
            y = int(rng.integers(k))
            t = float(rng.uniform(0.2, 4.0))
            want = -np.log(oracles.softmax_row([v / t for v in s])[y])
            assert abs(analysis.scaled_nll(s, y, t) - want) < 1e-12

    def test_rejects_bad_temperature(self):
        s = np.array([1.0, 0.0])
        for fn in (analysis.scaled_nll, analysis.nll_temperature_gradient,
                   analysis.nll_temperature_gradient_unnormalized):
            for bad in (0.0, -2.0):
                with pytest.raises(ValueError, match="temperature"):
                    fn(s, 0, bad)


class TestTemperatureGradient:
    def test_constant_logits_give_zero(self):
        for k, c in ((2, 0.0), (5, -3.0), (7, 11.5)):
            assert analysis.nll_temperature_gradient(
                np.full(k, c), 0, 1.3) == 0.0

    def test_confident_correct_two_logit_instance(self):
        got = analysis.nll_temperature_gradient(np.array([2.0, 0.0]), 0, 1.0)
        assert abs(got - 2.0 / (np.exp(2.0) + 1.0)) < 1e-15
        assert got > 0  # descent would shrink T for a confident correct hit

    def test_matches_finite_differences(self, rng):
        checked = 0
        while checked < 50:
            k = int(rng.integers(2, 9))
            s = 2.0 * rng.standard_normal(k)
            y = int(rng.integers(k))
            t = float(rng.uniform(0.5, 3.0))
            if abs(analysis.nll_temperature_gradient(s, y, t)) < 1e-2:
                continue  # near a zero crossing relative error is noise
            assert analysis.verify_temperature_gradient(s, y, t) < 1e-6
            checked += 1

    def test_positive_when_label_is_argmax(self, rng):
        for _ in range(200):
            k = int(rng.integers(2, 8))
            s = 3.0 * rng.standard_normal(k)
            if np.ptp(s) < 1e-6:
                continue
            y = int(np.argmax(s))
            t = float(rng.uniform(0.3, 4.0))
            assert analysis.nll_temperature_gradient(s, y, t) > 0.0

    def test_unnormalized_variant_is_exact_times_partition_sum(self, rng):
        for _ in range(100):
            k = int(rng.integers(2, 9))
            s = 2.0 * rng.standard_normal(k)
            y = int(rng.integers(k))
            t = float(rng.uniform(0.5, 3.0))
            loose = analysis.nll_temperature_gradient_unnormalized(s, y, t)
            tight = (analysis.nll_temperature_gradient(s, y, t)
                     * np.exp(s / t).sum())
            err = abs(loose - tight) / max(1e-8, abs(loose) + abs(tight))
            assert err < 1e-8


class TestLastLayerGradient:
    def test_zero_input_gives_zero_gradient(self):
        w = make_rng(1).standard_normal((4, 3))
        grad = analysis.last_layer_gradient(w, np.zeros(4), 1)
        np.testing.assert_array_equal(grad, np.zeros((4, 3)))

    def test_large_margin_gradient_vanishes(self):
        w = np.zeros((2, 3))
        w[0, 0] = 10.0
        grad = analysis.last_layer_gradient(w, np.array([10.0, 0.0]), 0)
        assert np.abs(grad).max() < 1e-8

    def test_matches_outer_product_oracle(self, rng):
        for _ in range(30):
            d, k = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            w = rng.standard_normal((d, k))
            x = rng.standard_normal(d)
            y = int(rng.integers(k))
            got = analysis.last_layer_gradient(w, x, y)
            p = oracles.softmax_row(list(x @ w))
            for i in range(d):
                for j in range(k):
                    want = x[i] * (p[j] - (1.0 if j == y else 0.0))
                    assert abs(got[i, j] - want) < 1e-12

    def test_finite_difference_error_small(self, rng):
        for _ in range(100):
            d, k = int(rng.integers(2, 9)), int(rng.integers(2, 11))
            w = rng.standard_normal((d, k))
            x = rng.standard_normal(d)
            y = int(rng.integers(k))
            assert analysis.verify_last_layer_grad(w, x, y) < 1e-5

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            analysis.last_layer_gradient(np.zeros((4, 3)), np.zeros(3), 0)


class TestSelfCheck:
    def test_small_run_passes_and_serializes(self):
        report = analysis.run_selfcheck(seed=0, instances=30,
                                        latent_instances=3)
        assert report.passed
        names = [r.name for r in report.results]
        assert names == ["last_layer_gradient", "temperature_gradient_vs_fd",
                         "temperature_gradient_normalizer", "elbo_gradients",
                         "joint_objective_gradients"]
        for r in report.results:
            assert r.passed and r.max_error < r.tolerance
        payload = report.to_json_dict()
        assert payload["seed"] == 0
        assert payload["passed"] is True
        assert len(payload["checks"]) == 5

    def test_deterministic(self):
        a = analysis.run_selfcheck(seed=4, instances=10, latent_instances=2)
        b = analysis.run_selfcheck(seed=4, instances=10, latent_instances=2)
        assert a.to_json_dict() == b.to_json_dict()


def small_model_and_dataset(n=40, d=3, k=3, seed=2):
    ds = random_dataset(make_rng(seed), n=n, d=d, k=k)
    cfg = adats.TrainConfig(d_z=4, encoder_hidden=(8,), decoder_hidden=(8,),
                            temp_hidden=(6,), seed=seed)
    model = adats.init_model(d, k, cfg, nncore.rng(seed))
    return model, ds


class TestClassMeanInterpolation:
    def test_endpoints_equal_direct_predictions(self):
        model, ds = small_model_and_dataset()
        trace = analysis.class_mean_interpolation(model, ds, 0, 1, steps=9)
        assert trace.class_pair == (0, 1)
        assert trace.alphas.shape == trace.temperatures.shape == (9,)
        mean_0 = ds.features[ds.labels == 0].mean(axis=0)
        mean_1 = ds.features[ds.labels == 1].mean(axis=0)
        assert trace.temperatures[-1] == adats.predict_temperature(model, mean_0)
        assert trace.temperatures[0] == adats.predict_temperature(model, mean_1)
        assert np.all(trace.temperatures > 0)

    def test_same_class_is_constant(self):
        model, ds = small_model_and_dataset()
        trace = analysis.class_mean_interpolation(model, ds, 2, 2, steps=7)
        assert np.ptp(trace.temperatures) == 0.0

    def test_serialization(self):
        model, ds = small_model_and_dataset()
        payload = analysis.class_mean_interpolation(model, ds, 0, 2).to_json_dict()
        assert payload["class_pair"] == [0, 2]
        assert len(payload["alphas"]) == len(payload["temperatures"]) == 21

    def test_validation(self):
        model, ds = small_model_and_dataset()
        with pytest.raises(ValueError, match="steps"):
            analysis.class_mean_interpolation(model, ds, 0, 1, steps=1)
        with pytest.raises(DatasetValidationError, match="out of range"):
            analysis.class_mean_interpolation(model, ds, 0, 3)

    def test_empty_class_rejected(self):
        model, _ = small_model_and_dataset()
        ds = dataset.CalibrationDataset(
            features=make_rng(0).standard_normal((6, 3)),
            logits=make_rng(1).standard_normal((6, 3)),
            labels=np.array([0, 1, 0, 1, 0, 1]))
        with pytest.raises(DatasetValidationError, match="no samples"):
            analysis.class_mean_interpolation(model, ds, 0, 2)


class TestTemperatureHistogram:
    def test_class_partition_groups_exactly(self):
        model, ds = small_model_and_dataset()
        hist = analysis.temperature_histogram(model, ds, partition="class")
        temps = adats.predict_temperature(model, ds.features)
        assert set(hist.groups) == {"class_0", "class_1", "class_2"}
        total = 0
        for c in range(3):
            group = hist.groups[f"class_{c}"]
            np.testing.assert_array_equal(group, temps[ds.labels == c])
            assert hist.stats[f"class_{c}"]["count"] == group.size
            if group.size:
                assert hist.stats[f"class_{c}"]["mean"] == float(group.mean())
                assert hist.stats[f"class_{c}"]["std"] == float(group.std())
            total += group.size
        assert total == ds.n

    def test_correctness_partition(self):
        model, ds = small_model_and_dataset()
        hist = analysis.temperature_histogram(model, ds,
                                              partition="correctness")
        correct = np.argmax(ds.logits, axis=1) == ds.labels
        assert hist.groups["correct"].size == int(correct.sum())
        assert hist.groups["incorrect"].size == int((~correct).sum())

    def test_empty_group_stats_are_none(self):
        model, _ = small_model_and_dataset()
        ds = dataset.CalibrationDataset(
            features=np.zeros((3, 3)),
            logits=np.array([[5.0, 0.0, 0.0]] * 3),
            labels=np.zeros(3, dtype=int))
        hist = analysis.temperature_histogram(model, ds,
                                              partition="correctness")
        assert hist.stats["incorrect"] == {"count": 0, "mean": None,
                                           "std": None}

    def test_single_sample(self):
        model, _ = small_model_and_dataset()
        ds = dataset.CalibrationDataset(
            features=np.ones((1, 3)), logits=np.array([[1.0, 0.0, 2.0]]),
            labels=np.array([2]))
        hist = analysis.temperature_histogram(model, ds, partition="class")
        assert hist.groups["class_2"].shape == (1,)
        assert hist.groups["class_2"][0] == adats.predict_temperature(
            model, ds.features[0])

    def test_unknown_partition(self):
        model, ds = small_model_and_dataset()
        with pytest.raises(ValueError, match="partition"):
            analysis.temperature_histogram(model, ds, partition="label")

    def test_serialization(self):
        model, ds = small_model_and_dataset()
        payload = analysis.temperature_histogram(model, ds).to_json_dict()
        assert payload["partition"] == "class"
        assert isinstance(payload["groups"]["class_0"], list)


class TestExportLatents:
    def test_csv_contents(self, tmp_path):
        model, ds = small_model_and_dataset()
        path = tmp_path / "latents.csv"
        analysis.export_latents(model, ds, path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["index", "label", "correct", "confidence",
                           "temperature", "contribution",
                           "z_0", "z_1", "z_2", "z_3"]
        assert len(rows) == ds.n + 1

        temps = adats.predict_temperature(model, ds.features)
        conf, correct = metrics.confidences_and_correctness(ds, 1.0)
        contrib = metrics.contribution_histogram(ds, 1.0).per_sample
        latent = adats.encode(model, ds.features).mean
        for i, row in enumerate(rows[1:]):
            assert int(row[0]) == i
            assert int(row[1]) == ds.labels[i]
            assert int(row[2]) == int(correct[i])
            assert float(row[3]) == conf[i]
            assert float(row[4]) == temps[i]
            assert float(row[5]) == contrib[i]
            np.testing.assert_array_equal(
                [float(v) for v in row[6:]], latent[i])
