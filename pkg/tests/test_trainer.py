"""Optimizer, evaluation and the training loop."""

import math

import numpy as np
import pytest

from checkpoint import checkpoint_load
from datasets import Dataset, make_blobs
from errors import ConfigError, EmptyDatasetError, NonFiniteGradientError, ShapeError, TrainingDiverged
from model import Classifier
from nn_core import Parameter
from rbf_head import KernelConfig, rbf_forward
from trainer import REPORT_COLUMNS, TRACE_COLUMNS, TrainConfig, evaluate, sgd_step, train


def one_param(value=1.0):
    return {"p": Parameter("p", np.array([value]))}


class TestSgdStep:
    def test_zero_gradient_no_decay(self):
        params = sgd_step(one_param(), {"p": np.array([0.0])}, lr=0.1)
        assert params["p"].data[0] == 1.0

    def test_plain_step(self):
        params = sgd_step(one_param(), {"p": np.array([1.0])}, lr=0.1)
        assert params["p"].data[0] == pytest.approx(0.9)

    def test_decoupled_decay(self):
        params = sgd_step(one_param(), {"p": np.array([0.0])}, lr=0.1, wd=0.5)
        assert params["p"].data[0] == pytest.approx(0.95)

    def test_decay_only_on_selected_names(self):
        params = {"w": Parameter("w", np.array([1.0])), "b": Parameter("b", np.array([1.0]))}
        zeros = {"w": np.zeros(1), "b": np.zeros(1)}
        sgd_step(params, zeros, lr=0.1, wd=0.5, decayed=["w"])
        assert params["w"].data[0] == pytest.approx(0.95)
        assert params["b"].data[0] == 1.0

    def test_non_finite_gradient_leaves_params_untouched(self):
        params = {"a": Parameter("a", np.array([1.0])), "b": Parameter("b", np.array([2.0]))}
        with pytest.raises(NonFiniteGradientError):
            sgd_step(params, {"a": np.array([1.0]), "b": np.array([np.inf])}, lr=0.1)
        assert params["a"].data[0] == 1.0 and params["b"].data[0] == 2.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_step(one_param(), {"p": np.zeros(2)}, lr=0.1)


class TestEvaluate:
    @pytest.fixture
    def ten_class_set(self):
        return make_blobs(5, 10, 2, 0.0, np.random.default_rng(0))

    @pytest.fixture
    def constant_model(self, blob_model_config):
        config = blob_model_config.model_copy(update={"num_classes": 10, "clusters": 4})
        model = Classifier.build(config, np.random.default_rng(0))
        model.head.weights.data = np.zeros_like(model.head.weights.data)
        model.head.bias.data = np.eye(10)[3]
        return model

    def test_constant_prediction_on_balanced_set(self, constant_model, ten_class_set):
        result = evaluate(constant_model, ten_class_set)
        assert result.accuracy == pytest.approx(0.1)
        assert result.confusion.sum() == len(ten_class_set)
        np.testing.assert_array_equal(result.confusion[:, 3], np.full(10, 5))

    def test_single_correct_sample(self, constant_model):
        one = Dataset(np.full((1, 1, 1, 2), 0.5), np.array([3]), 10)
        assert evaluate(constant_model, one).accuracy == 1.0

    def test_threads_do_not_change_the_result(self, blob_model_config, blobs):
        model = Classifier.build(blob_model_config, np.random.default_rng(2))
        single = evaluate(model, blobs, batch_size=7, threads=1)
        sharded = evaluate(model, blobs, batch_size=7, threads=4)
        assert single.mean_loss == sharded.mean_loss
        np.testing.assert_array_equal(single.confusion, sharded.confusion)

    def test_empty_dataset(self, constant_model):
        empty = Dataset(np.zeros((0, 1, 1, 2)), np.zeros(0, dtype=np.int64), 10)
        with pytest.raises(EmptyDatasetError):
            evaluate(constant_model, empty)


def quick_config(**overrides):
    settings = dict(epochs=3, batch_size=8, learning_rate=0.05, precision="float64", seed=5, report_timing=False)
    settings.update(overrides)
    return TrainConfig(**settings)


class TestTrain:
    def test_zero_epochs(self, tmp_path, blob_model_config, blobs):
        model = Classifier.build(blob_model_config, np.random.default_rng(0))
        path = tmp_path / "init.ckpt"
        result = train(model, blobs, quick_config(epochs=0), checkpoint_path=path)
        assert result.report.records == []
        assert result.best_epoch == 0
        saved = checkpoint_load(path).state_dict()
        for name, value in model.state_dict().items():
            np.testing.assert_array_equal(saved[name], value)

    def test_separable_blobs_reach_full_accuracy(self, blob_model_config, blobs):
        config = blob_model_config.model_copy(update={"kernel": KernelConfig(kind="gaussian")})
        model = Classifier.build(config, np.random.default_rng(0))
        result = train(model, blobs, quick_config(epochs=60, learning_rate=0.1, closed_form_init=True), test_set=blobs)
        assert result.best_test_acc == 1.0
        assert evaluate(model, blobs).accuracy == 1.0

    def test_report_rows(self, blob_model_config, blobs):
        model = Classifier.build(blob_model_config, np.random.default_rng(0))
        result = train(model, blobs, quick_config(), test_set=blobs)
        frame = result.report.to_frame()
        assert list(frame.columns) == REPORT_COLUMNS
        assert list(frame["epoch"]) == [1, 2, 3]
        assert frame["train_acc"].between(0, 1).all() and frame["test_acc"].between(0, 1).all()
        assert (frame["seconds"] == 0.0).all()
        assert (frame["unsup_loss"] >= 0).all()

    def test_deterministic_for_fixed_seed(self, blob_model_config, blobs):
        runs = []
        for _ in range(2):
            model = Classifier.build(blob_model_config, np.random.default_rng(0))
            train(model, blobs, quick_config())
            runs.append(model.state_dict())
        for name in runs[0]:
            np.testing.assert_array_equal(runs[0][name], runs[1][name])

    def test_zero_decay_matches_plain_sgd(self, blob_model_config, blobs):
        states = []
        for optimizer in ("sgd", "sgd_decoupled_wd"):
            model = Classifier.build(blob_model_config, np.random.default_rng(0))
            train(model, blobs, quick_config(optimizer=optimizer, weight_decay=0.0))
            states.append(model.state_dict())
        for name in states[0]:
            np.testing.assert_array_equal(states[0][name], states[1][name])

    def test_fc_head_loss_decreases(self, blob_model_config, blobs):
        config = blob_model_config.model_copy(update={"head": "fc"})
        model = Classifier.build(config, np.random.default_rng(0))
        result = train(model, blobs, quick_config(epochs=15, lam=0.0, learning_rate=0.2))
        losses = result.report.to_frame()["train_loss"]
        assert np.all(np.isfinite(losses))
        assert losses.iloc[-1] < losses.iloc[0]

    def test_divergence_aborts_with_partial_report(self, blob_model_config, blobs):
        model = Classifier.build(blob_model_config, np.random.default_rng(0))
        original = model.loss_and_grads
        calls = {"n": 0}

        def poisoned(*args, **kwargs):
            breakdown, grads, fp = original(*args, **kwargs)
            calls["n"] += 1
            if calls["n"] > 8:
                grads["head.weights"] = np.full_like(grads["head.weights"], np.nan)
            return breakdown, grads, fp

        model.loss_and_grads = poisoned
        with pytest.raises(TrainingDiverged) as info:
            train(model, blobs, quick_config(epochs=5), test_set=blobs)
        # 60 samples in batches of 8 make 8 steps per epoch
        assert len(info.value.report.records) == 1
        assert all(np.all(np.isfinite(p.data)) for p in model.named_parameters().values())

    def test_empty_training_set(self, blob_model_config):
        model = Classifier.build(blob_model_config, np.random.default_rng(0))
        empty = Dataset(np.zeros((0, 1, 1, 2)), np.zeros(0, dtype=np.int64), 3)
        with pytest.raises(EmptyDatasetError):
            train(model, empty, quick_config())

    def test_best_epoch_is_kept(self, blob_model_config, blobs):
        model = Classifier.build(blob_model_config, np.random.default_rng(0))
        result = train(model, blobs, quick_config(epochs=4), test_set=blobs)
        accs = result.report.to_frame()["test_acc"].tolist()
        assert result.best_test_acc == max(accs)
        assert accs[result.best_epoch - 1] == max(accs)
        assert evaluate(model, blobs).accuracy == pytest.approx(result.best_test_acc)
        assert not math.isnan(result.best_test_acc)

    def test_precision_must_match_the_model(self, blob_model_config, blobs):
        model = Classifier.build(blob_model_config, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            train(model, blobs, quick_config(precision="float32"))

    def test_float32_model_casts_the_data(self, blob_model_config, blobs):
        config = blob_model_config.model_copy(update={"precision": "float32"})
        model = Classifier.build(config, np.random.default_rng(0))
        result = train(model, blobs, quick_config(precision=None, epochs=2), test_set=blobs)
        assert blobs.images.dtype == np.float64
        assert all(p.data.dtype == np.float32 for p in model.named_parameters().values())
        assert np.all(np.isfinite(result.report.to_frame()["train_loss"]))


class TestCenterTrace:
    def test_rows_per_epoch(self, tmp_path, blob_model_config, blobs):
        model = Classifier.build(blob_model_config, np.random.default_rng(0))
        result = train(model, blobs, quick_config(epochs=2, trace_cluster=1, trace_samples=5))
        frame = result.report.trace_frame()
        assert list(frame.columns) == TRACE_COLUMNS
        assert list(frame["epoch"]) == [0] * 5 + [1] * 5 + [2] * 5
        assert list(frame["sample_id"]) == list(range(5)) * 3
        assert (frame["cluster"] == 1).all()
        assert (frame["distance_sq"] >= 0).all()
        np.testing.assert_array_equal(frame["label"][:5], blobs.labels[:5])
        path = tmp_path / "trace.csv"
        result.report.write_trace_csv(path)
        assert path.read_text().splitlines()[0] == ",".join(TRACE_COLUMNS)

    def test_last_epoch_matches_the_kept_model(self, blob_model_config, blobs):
        model = Classifier.build(blob_model_config, np.random.default_rng(0))
        result = train(model, blobs, quick_config(epochs=1, trace_cluster=2, trace_samples=4), test_set=blobs)
        last = result.report.trace_frame().query("epoch == 1")["distance_sq"].to_numpy()
        expected = rbf_forward(model.head, model.embed(blobs.images[:4])).r2[:, 2]
        np.testing.assert_allclose(last, expected, rtol=1e-12)

    def test_off_by_default(self, blob_model_config, blobs):
        model = Classifier.build(blob_model_config, np.random.default_rng(0))
        assert train(model, blobs, quick_config(epochs=1)).report.center_trace == []

    def test_cluster_out_of_range(self, blob_model_config, blobs):
        model = Classifier.build(blob_model_config, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            train(model, blobs, quick_config(trace_cluster=3))

    def test_needs_an_rbf_head(self, blob_model_config, blobs):
        model = Classifier.build(blob_model_config.model_copy(update={"head": "fc"}), np.random.default_rng(0))
        with pytest.raises(ConfigError):
            train(model, blobs, quick_config(lam=0.0, trace_cluster=0))
