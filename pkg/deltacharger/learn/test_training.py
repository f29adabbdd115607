"""
Tests for deep training, evaluation and model artifacts
"""

import numpy as np
import pytest
from numpy.testing import assert_array_equal
from pydantic import ValidationError

from deltacharger.dataio import generate_angle_dataset, generate_position_dataset, split
from deltacharger.errors import TaskMismatch
from deltacharger.learn.network import NetworkSpec
from deltacharger.learn.tasks import TaskKind
from deltacharger.learn.training import (
    MODEL_NAMES,
    DeepClassifier,
    EvalReport,
    PlateauScheduler,
    TrainConfig,
    _batches,
    evaluate,
    evaluate_artifact,
    load_classifier,
    train,
)

QUICK = TrainConfig(epochs=3, seed=0)
SHALLOW = ("knn", "dt", "rf", "svm", "logreg")


def test_model_names():
    assert MODEL_NAMES == ("cnn", "nn", "knn", "dt", "rf", "svm", "logreg")


def test_plateau_scheduler_reduces_after_patience():
    scheduler = PlateauScheduler(lr=0.01, factor=0.5, patience=2, threshold=1e-4)
    rates = [scheduler.step(m) for m in (1.0, 1.0, 1.0, 1.0, 0.5)]
    assert rates == [0.01, 0.01, 0.01, 0.005, 0.005]


def test_plateau_threshold_is_relative():
    scheduler = PlateauScheduler(lr=1.0, factor=0.1, patience=0, threshold=1e-2)
    scheduler.step(1.0)
    # 0.995 is within 1% of the best, so it counts as no improvement
    assert scheduler.step(0.995) == pytest.approx(0.1)


def test_plateau_factor_range():
    with pytest.raises(ValidationError):
        TrainConfig(plateau_factor=0.9)
    assert TrainConfig(plateau_factor=0.1).plateau_factor == 0.1


def test_plateau_never_fires_while_loss_falls():
    scheduler = PlateauScheduler(lr=0.01, factor=0.5, patience=0, threshold=1e-4)
    rates = [scheduler.step(loss) for loss in np.linspace(2.0, 0.2, 50)]
    assert rates == [0.01] * 50


def test_batches_absorb_single_leftover():
    batches = _batches(np.arange(65), 32)
    assert [len(b) for b in batches] == [32, 33]
    assert_array_equal(np.sort(np.concatenate(batches)), np.arange(65))
    assert [len(b) for b in _batches(np.arange(64), 32)] == [32, 32]


def test_eval_report_invariant():
    EvalReport(accuracy=0.75, confusion=[[2, 1], [0, 1]], inference_ms=0.1, n_samples=4)
    with pytest.raises(ValidationError):
        EvalReport(accuracy=0.5, confusion=[[2, 1], [0, 1]], inference_ms=0.1, n_samples=4)


@pytest.mark.parametrize("kind", ["cnn", "nn"])
def test_deep_training_history(kind, small_angle_dataset):
    train_set, val_set = split(small_angle_dataset, seed=0)
    model = DeepClassifier(kind, 6, seed=0, config=QUICK)
    model.fit(train_set.features, train_set.labels, val_set.features, val_set.labels)
    assert [r.epoch for r in model.history] == [1, 2, 3]
    assert all(np.isfinite(r.train_loss) and r.val_accuracy is not None for r in model.history)
    assert model.history[-1].train_loss < model.history[0].train_loss


def test_deep_training_is_seeded(small_angle_dataset):
    train_set, _ = split(small_angle_dataset, seed=0)
    a = DeepClassifier("nn", 6, seed=3, config=QUICK).fit(train_set.features, train_set.labels)
    b = DeepClassifier("nn", 6, seed=3, config=QUICK).fit(train_set.features, train_set.labels)
    assert_array_equal(a.predict_proba(train_set.features), b.predict_proba(train_set.features))


def test_evaluate_confusion(small_angle_dataset):
    train_set, val_set = split(small_angle_dataset, seed=1)
    artifact, report = train("knn", TaskKind.ANGLE, train_set.features, train_set.labels, val_set.features,
                             val_set.labels, QUICK)
    confusion = np.array(report.confusion)
    assert confusion.shape == (6, 6)
    assert confusion.sum() == len(val_set) == report.n_samples
    assert report.accuracy == pytest.approx(np.trace(confusion) / confusion.sum())
    assert report.inference_ms >= 0 and report.training_s >= 0
    assert artifact.report == report


class ConstantModel:
    n_classes = 6

    def predict(self, X):
        return np.zeros(len(X), dtype=int)


def test_constant_model_scores_balanced_baseline():
    y = np.repeat(np.arange(6), 10)
    report = evaluate(ConstantModel(), np.zeros((len(y), 200)), y)
    assert report.accuracy == pytest.approx(1.0 / 6.0)
    assert report.confusion[0] == [10] * 6


def test_evaluation_ignores_sample_order(small_angle_dataset):
    train_set, val_set = split(small_angle_dataset, seed=1)
    artifact, _ = train("knn", TaskKind.ANGLE, train_set.features, train_set.labels, val_set.features,
                        val_set.labels, QUICK)
    model = load_classifier(artifact)
    order = np.random.default_rng(9).permutation(len(val_set))
    straight = evaluate(model, val_set.features, val_set.labels)
    shuffled = evaluate(model, val_set.features[order], val_set.labels[order])
    assert shuffled.accuracy == straight.accuracy
    assert shuffled.confusion == straight.confusion


def test_small_network_learns_xor():
    """Test a tiny dense net separates the four XOR clusters within 50 epochs"""
    rng = np.random.default_rng(0)
    corners = np.array([[-1, -1], [-1, 1], [1, -1], [1, 1]] * 16, dtype=float)
    X = np.zeros((len(corners), 200))
    X[:, :2] = 9.0 * corners + rng.normal(scale=0.1, size=corners.shape)
    y = (corners[:, 0] != corners[:, 1]).astype(int)

    config = TrainConfig(epochs=50, batch_size=8, learning_rate=0.05, seed=0)
    spec = NetworkSpec.parse("dense(200,16)|bn(16)|relu|dense(16,2)")
    model = DeepClassifier("nn", 2, seed=0, config=config, spec=spec).fit(X, y)
    assert_array_equal(model.predict(X), y)


@pytest.mark.parametrize("kind", MODEL_NAMES)
def test_artifact_reloads(kind, small_angle_dataset):
    """Test every model survives the artifact round trip with identical predictions"""
    train_set, val_set = split(small_angle_dataset, seed=2)
    artifact, _ = train(kind, TaskKind.ANGLE, train_set.features, train_set.labels, val_set.features,
                        val_set.labels, QUICK)
    assert artifact.n_classes == 6
    model = load_classifier(artifact)
    rebuilt = evaluate(model, val_set.features, val_set.labels)
    assert rebuilt.accuracy == artifact.report.accuracy
    assert rebuilt.confusion == artifact.report.confusion


def test_evaluate_artifact_checks_task(small_angle_dataset):
    train_set, val_set = split(small_angle_dataset, seed=0)
    artifact, _ = train("dt", TaskKind.ANGLE, train_set.features, train_set.labels, val_set.features,
                        val_set.labels, QUICK)
    with pytest.raises(TaskMismatch):
        evaluate_artifact(artifact, val_set.features, val_set.labels, TaskKind.VERTICAL)


@pytest.mark.slow
def test_angle_comparison():
    """Test the full 600-frame angle protocol: all seven models, 50 deep epochs"""
    dataset = generate_angle_dataset(seed=42)
    train_set, val_set = split(dataset, (0.67, 0.33), seed=42)
    accuracy = {}
    for kind in MODEL_NAMES:
        _, report = train(kind, TaskKind.ANGLE, train_set.features, train_set.labels, val_set.features,
                          val_set.labels, TrainConfig())
        accuracy[kind] = report.accuracy
    assert accuracy["cnn"] >= 0.90
    assert accuracy["nn"] >= 0.85
    assert accuracy["rf"] >= 0.80
    best_shallow = max(accuracy[kind] for kind in SHALLOW)
    assert min(accuracy["cnn"], accuracy["nn"]) > best_shallow, accuracy


@pytest.mark.slow
@pytest.mark.parametrize("task", [TaskKind.VERTICAL, TaskKind.HORIZONTAL])
def test_position_tasks_beat_baseline(task):
    dataset = generate_position_dataset(seed=7).for_task(task)
    train_set, val_set = split(dataset, seed=7)
    accuracy = {}
    for kind in MODEL_NAMES:
        _, report = train(kind, task, train_set.features, train_set.labels, val_set.features, val_set.labels,
                          TrainConfig())
        accuracy[kind] = report.accuracy
        assert report.accuracy >= 0.2 + 0.3, kind
    if task == TaskKind.VERTICAL:
        assert accuracy["cnn"] >= max(accuracy[kind] for kind in SHALLOW), accuracy
