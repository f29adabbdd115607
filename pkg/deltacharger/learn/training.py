"""
Training, evaluation and model artifacts

Deep models train with SGD + momentum and a reduce-on-plateau learning rate
driven by validation loss. Every model, deep or shallow, is timed and
evaluated the same way and packed into a ``ModelArtifact``.
"""

import logging
import time
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from deltacharger.errors import Degenerate, TaskMismatch
from deltacharger.learn.layers import cross_entropy
from deltacharger.learn.network import Network, NetworkSpec, cnn, regular_nn
from deltacharger.learn.shallow import SHALLOW_MODELS, Classifier, check_labels
from deltacharger.learn.tasks import TaskKind, TaskSpec

logger = logging.getLogger(__name__)

DEEP_MODELS = ("cnn", "nn")
MODEL_NAMES = DEEP_MODELS + tuple(SHALLOW_MODELS)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(50, ge=1)
    batch_size: int = Field(32, ge=2)
    learning_rate: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    plateau_factor: float = 0.5
    patience: int = Field(5, ge=0)
    plateau_threshold: float = 1e-4
    split: Tuple[float, float] = (0.67, 0.33)
    seed: int = 42
    timing_repeats: int = Field(3, ge=3)

    @field_validator("plateau_factor")
    @classmethod
    def factor_in_range(cls, value):
        if not 0.1 <= value <= 0.5:
            raise ValueError("plateau factor must lie in [0.1, 0.5]")
        return value


class EvalReport(BaseModel):
    accuracy: float
    confusion: List[List[int]]
    inference_ms: float = Field(ge=0)
    training_s: float = Field(0.0, ge=0)
    n_samples: int

    @model_validator(mode="after")
    def accuracy_matches_confusion(self):
        total = sum(map(sum, self.confusion))
        if total != self.n_samples:
            raise ValueError("confusion matrix does not count every sample")
        trace = sum(self.confusion[i][i] for i in range(len(self.confusion)))
        if total and abs(self.accuracy - trace / total) > 1e-12:
            raise ValueError("accuracy must equal trace(confusion) / total")
        return self


class ModelArtifact(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    kind: str
    task: TaskKind
    n_classes: int
    spec: str
    params: Dict[str, np.ndarray]
    config: Dict[str, Any] = {}
    report: Optional[EvalReport] = None


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the metric stalls for more than ``patience`` epochs"""

    def __init__(self, lr: float, factor: float, patience: int, threshold: float):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric < self.best * (1.0 - self.threshold):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
            logger.debug("learning rate reduced to %g", self.lr)
        return self.lr


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_loss: Optional[float]
    val_accuracy: Optional[float]
    learning_rate: float


def _batches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # batch norm needs two samples per batch
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


class DeepClassifier(Classifier):
    def __init__(self, kind: str, n_classes: int, seed: int = 0, config: Optional[TrainConfig] = None,
                 spec: Optional[NetworkSpec] = None):
        super().__init__(n_classes, seed)
        self.kind = kind
        self.config = config or TrainConfig()
        if spec is None:
            spec = cnn(n_classes) if kind == "cnn" else regular_nn(n_classes)
        self.network_spec = spec
        self.history: List[EpochRecord] = []
        init_seed, self._shuffle_seed = np.random.SeedSequence(seed).spawn(2)
        self.network = Network(spec, seed=init_seed)

    def fit(self, X, y, X_val=None, y_val=None):
        y = check_labels(y, self.n_classes)
        X = self._scale(X)
        has_val = X_val is not None and len(X_val) > 0
        if has_val:
            X_val, y_val = self._scale(X_val), np.asarray(y_val, dtype=int)

        cfg = self.config
        rng = np.random.default_rng(self._shuffle_seed)
        scheduler = PlateauScheduler(cfg.learning_rate, cfg.plateau_factor, cfg.patience, cfg.plateau_threshold)
        params = self.network.parameters()
        velocity = {name: np.zeros_like(p) for name, p in params.items()}

        for epoch in range(cfg.epochs):
            lr = scheduler.lr
            losses = []
            for batch in _batches(rng.permutation(len(X)), cfg.batch_size):
                loss, grads = self.network.loss_and_grads(X[batch], y[batch])
                losses.append(loss * len(batch))
                for name, p in params.items():
                    velocity[name] = cfg.momentum * velocity[name] + grads[name]
                    p -= lr * velocity[name]

            val_loss = val_acc = None
            if has_val:
                logits = self.network.forward(X_val, train=False)
                val_loss, _ = cross_entropy(logits, y_val)
                val_acc = float((np.argmax(logits, axis=1) == y_val).mean())
                scheduler.step(val_loss)
            self.history.append(EpochRecord(epoch=epoch + 1, train_loss=float(sum(losses) / len(X)),
                                            val_loss=val_loss, val_accuracy=val_acc, learning_rate=lr))
            logger.debug("epoch %d loss %.4f val %s lr %g", epoch + 1, self.history[-1].train_loss, val_loss, lr)
        return self

    def _proba(self, X):
        return self.network.predict_proba(X)

    def spec(self):
        return str(self.network_spec)

    def to_params(self):
        return self.network.state()

    def load_params(self, params):
        self.network.load_state(params)


def build_classifier(kind: str, n_classes: int, seed: int = 0, config: Optional[TrainConfig] = None,
                     n_jobs: int = 1) -> Classifier:
    if kind in DEEP_MODELS:
        return DeepClassifier(kind, n_classes, seed=seed, config=config)
    if kind == "rf":
        return SHALLOW_MODELS[kind](n_classes, seed=seed, n_jobs=n_jobs)
    if kind in SHALLOW_MODELS:
        return SHALLOW_MODELS[kind](n_classes, seed=seed)
    raise Degenerate(f"unknown model '{kind}', choose from {', '.join(MODEL_NAMES)}")


def evaluate(model: Classifier, X, y, repeats: int = 3) -> EvalReport:
    y = np.asarray(y, dtype=int)
    timings = []
    for _ in range(max(3, repeats)):
        start = time.perf_counter()
        predicted = model.predict(X)
        timings.append(time.perf_counter() - start)

    confusion = np.zeros((model.n_classes, model.n_classes), dtype=int)
    np.add.at(confusion, (y, predicted), 1)
    total = int(confusion.sum())
    accuracy = float(np.trace(confusion) / total) if total else 0.0
    return EvalReport(
        accuracy=accuracy,
        confusion=confusion.tolist(),
        inference_ms=1000.0 * float(np.mean(timings)) / max(total, 1),
        n_samples=total,
    )


def evaluate_artifact(artifact: ModelArtifact, X, y, task: TaskKind, repeats: int = 3) -> EvalReport:
    if TaskKind(task) != artifact.task:
        raise TaskMismatch(f"model was trained for '{artifact.task.value}', data is '{TaskKind(task).value}'")
    return evaluate(load_classifier(artifact), X, y, repeats)


def train(kind: str, task: TaskKind, X_train, y_train, X_val, y_val, config: Optional[TrainConfig] = None,
          n_jobs: int = 1, echo: Optional[Dict[str, Any]] = None) -> Tuple[ModelArtifact, EvalReport]:
    config = config or TrainConfig()
    n_classes = TaskSpec.for_kind(task).n_classes
    model = build_classifier(kind, n_classes, seed=config.seed, config=config, n_jobs=n_jobs)

    start = time.perf_counter()
    model.fit(X_train, y_train, X_val, y_val)
    training_s = time.perf_counter() - start

    report = evaluate(model, X_val, y_val, config.timing_repeats).model_copy(update={"training_s": training_s})
    logger.info("%s on %s: accuracy %.4f", kind, TaskKind(task).value, report.accuracy)
    artifact = ModelArtifact(
        kind=kind,
        task=TaskKind(task),
        n_classes=n_classes,
        spec=model.spec(),
        params=model.to_params(),
        config=echo if echo is not None else {"train": config.model_dump(mode="json")},
        report=report,
    )
    return artifact, report


def load_classifier(artifact: ModelArtifact) -> Classifier:
    if artifact.kind in DEEP_MODELS:
        model = DeepClassifier(artifact.kind, artifact.n_classes, spec=NetworkSpec.parse(artifact.spec))
    else:
        model = build_classifier(artifact.kind, artifact.n_classes)
    model.load_params(artifact.params)
    return model
