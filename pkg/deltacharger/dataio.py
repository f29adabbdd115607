"""
Datasets and model files

Dataset generation replaces the physical collection runs with the contact
simulator while keeping their counts, ranges and balance. Files are plain
text: DTAC v1 for datasets, DMOD v1 for models, each with a checksum.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, field_validator

from deltacharger.contact import (
    NOMINAL_PENETRATION,
    ElectrodePlan,
    MisalignmentState,
    SensorModel,
    render_frame,
)
from deltacharger.errors import ChecksumMismatch, Degenerate, IOFailure, MalformedFile, TaskMismatch, UsageError
from deltacharger.learn.tasks import TaskKind, TaskSpec, label_of
from deltacharger.learn.training import EvalReport, ModelArtifact

logger = logging.getLogger(__name__)

ANGLE_SAMPLES_PER_CLASS = 100
ANGLE_JITTER = 0.25
OFFSET_GRID = np.arange(-20.0, 20.0 + 1e-9, 4.0)
CAPTURE_GAIN = 0.25
CAPTURE_SCATTER = 0.5
POSITION_GRID = (-10.0, -5.0, 0.0, 5.0, 10.0)
POSITION_ATTEMPTS = 20
POSITION_JITTER = 0.5
N_FEATURES = 200
TIMING_FIELDS = ("inference_ms", "training_s")


class LabeledDataset(BaseModel):
    """Frames with labels; ``truths`` holds the (phi, dx, dy) each frame was rendered from"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    task: TaskKind
    features: np.ndarray
    labels: np.ndarray
    truths: np.ndarray
    seed: int = 0

    @field_validator("features", "truths", mode="before")
    @classmethod
    def as_float(cls, value):
        return np.asarray(value, dtype=float)

    @field_validator("labels", mode="before")
    @classmethod
    def as_int(cls, value):
        return np.asarray(value, dtype=int)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self))

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=int)
        return LabeledDataset(task=self.task, features=self.features[idx], labels=self.labels[idx],
                              truths=self.truths[idx], seed=self.seed)

    def class_counts(self) -> Dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def for_task(self, task) -> "LabeledDataset":
        """Relabel for one learning task; a position file serves both axis tasks"""
        task = TaskKind(task)
        if task == self.task:
            return self
        if self.task != TaskKind.POSITION or task not in (TaskKind.VERTICAL, TaskKind.HORIZONTAL):
            raise TaskMismatch(f"dataset holds '{self.task.value}' samples, cannot serve task '{task.value}'")
        spec = TaskSpec.for_kind(task)
        labels = [label_of(spec, _state(row)) for row in self.truths]
        return LabeledDataset(task=task, features=self.features, labels=labels, truths=self.truths, seed=self.seed)


class DatasetManifest(BaseModel):
    task: TaskKind
    count: int
    protocol: str
    seed: int
    fractions: Tuple[float, float]
    checksum: str


def _state(row) -> MisalignmentState:
    return MisalignmentState(phi=float(row[0]), dx=float(row[1]), dy=float(row[2]))


def _render_sample(plan, sensor, phi, dx, dy, seed) -> np.ndarray:
    state = MisalignmentState(phi=phi, dx=dx, dy=dy, dz=NOMINAL_PENETRATION)
    return render_frame(plan, state, seed, sensor).flatten()


def _render_all(plan, sensor, truths: List[Tuple[float, float, float]], seeds, n_jobs: int) -> np.ndarray:
    frames = Parallel(n_jobs=n_jobs)(
        delayed(_render_sample)(plan, sensor, phi, dx, dy, seed) for (phi, dx, dy), seed in zip(truths, seeds)
    )
    return np.vstack(frames) if frames else np.zeros((0, N_FEATURES))


def generate_angle_dataset(seed: int, plan: Optional[ElectrodePlan] = None, sensor: Optional[SensorModel] = None,
                           per_class: int = ANGLE_SAMPLES_PER_CLASS, n_jobs: int = 1) -> LabeledDataset:
    """Tilted target, 100 frames per 1 degree class, residual offset after magnetic capture"""
    plan, sensor = plan or ElectrodePlan(), sensor or SensorModel()
    spec = TaskSpec.for_kind(TaskKind.ANGLE)
    streams = np.random.SeedSequence(seed).spawn(spec.n_classes * per_class)

    truths, seeds, labels = [], [], []
    for i, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        k = i // per_class
        phi = k + 0.5 + rng.uniform(-ANGLE_JITTER, ANGLE_JITTER)
        initial = rng.choice(OFFSET_GRID, size=2)
        residual = initial * CAPTURE_GAIN + rng.uniform(-CAPTURE_SCATTER, CAPTURE_SCATTER, size=2)
        dx, dy = residual.tolist()
        truths.append((phi, dx, dy))
        seeds.append(int(rng.integers(0, 2 ** 63 - 1)))
        labels.append(label_of(spec, MisalignmentState(phi=phi, dx=dx, dy=dy)))

    features = _render_all(plan, sensor, truths, seeds, n_jobs)
    logger.info("generated %d angle samples (seed %d)", len(labels), seed)
    return LabeledDataset(task=TaskKind.ANGLE, features=features, labels=labels, truths=truths, seed=seed)


def generate_position_dataset(seed: int, plan: Optional[ElectrodePlan] = None, sensor: Optional[SensorModel] = None,
                              attempts: int = POSITION_ATTEMPTS, n_jobs: int = 1) -> LabeledDataset:
    """5x5 grid of offsets, 20 docking attempts each; label = 5 * vertical + horizontal"""
    plan, sensor = plan or ElectrodePlan(), sensor or SensorModel()
    vertical = TaskSpec.for_kind(TaskKind.VERTICAL)
    horizontal = TaskSpec.for_kind(TaskKind.HORIZONTAL)
    limit = plan.contact_envelope
    grid = [(dy, dx) for dy in POSITION_GRID for dx in POSITION_GRID]
    streams = np.random.SeedSequence(seed).spawn(len(grid) * attempts)

    truths, seeds, labels = [], [], []
    for i, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        dy0, dx0 = grid[i // attempts]
        jitter = rng.uniform(-POSITION_JITTER, POSITION_JITTER, size=2)
        dx = float(np.clip(dx0 + jitter[0], -limit, limit))
        dy = float(np.clip(dy0 + jitter[1], -limit, limit))
        state = MisalignmentState(phi=0.0, dx=dx, dy=dy)
        truths.append((0.0, dx, dy))
        seeds.append(int(rng.integers(0, 2 ** 63 - 1)))
        labels.append(5 * label_of(vertical, state) + label_of(horizontal, state))

    features = _render_all(plan, sensor, truths, seeds, n_jobs)
    logger.info("generated %d position samples (seed %d)", len(labels), seed)
    return LabeledDataset(task=TaskKind.POSITION, features=features, labels=labels, truths=truths, seed=seed)


def generate_dataset(task, seed: int, plan=None, sensor=None, n_jobs: int = 1) -> LabeledDataset:
    task = TaskKind(task)
    if task == TaskKind.ANGLE:
        return generate_angle_dataset(seed, plan, sensor, n_jobs=n_jobs)
    if task == TaskKind.POSITION:
        return generate_position_dataset(seed, plan, sensor, n_jobs=n_jobs)
    raise UsageError(f"datasets are generated for 'angle' or 'position', not '{task.value}'")


def split(dataset: LabeledDataset, fractions=(0.67, 0.33), seed: int = 0) -> Tuple[LabeledDataset, LabeledDataset]:
    """Stratified, seeded train/validation split"""
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError(f"split fractions must be two values summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for label, count in sorted(dataset.class_counts().items()):
        if count < 2:
            raise Degenerate(f"class {label} has {count} sample, cannot split")
        members = rng.permutation(np.flatnonzero(dataset.labels == label))
        n_train = min(max(int(np.floor(count * fractions[0] + 0.5)), 1), count - 1)
        train_idx.append(members[:n_train])
        val_idx.append(members[n_train:])
    return dataset.subset(np.sort(np.concatenate(train_idx))), dataset.subset(np.sort(np.concatenate(val_idx)))


# DTAC v1

def _dataset_rows(dataset: LabeledDataset) -> List[str]:
    rows = []
    for (phi, dx, dy), label, values in zip(dataset.truths, dataset.labels, dataset.features):
        forces = ",".join(f"{v:.6f}" for v in values)
        rows.append(f"{phi:.6f},{dx:.6f},{dy:.6f},{int(label)},{forces}")
    return rows


def _checksum(lines: List[str]) -> str:
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_dataset(dataset: LabeledDataset, path, protocol: Optional[str] = None,
                  fractions=(0.67, 0.33)) -> DatasetManifest:
    path = Path(path)
    rows = _dataset_rows(dataset)
    header = f"dtac,1,{dataset.task.value},{len(rows)},{dataset.seed}"
    manifest = DatasetManifest(
        task=dataset.task,
        count=len(rows),
        protocol=protocol or f"{dataset.task.value}-v1",
        seed=dataset.seed,
        fractions=tuple(fractions),
        checksum=_checksum(rows),
    )
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join([header] + rows) + "\n", encoding="utf-8")
        with open(manifest_path(path), "w") as f:
            json.dump(manifest.model_dump(mode="json"), f, indent=2)
    except OSError as e:
        raise IOFailure(f"cannot write dataset {path}: {e}")
    return manifest


def _read_lines(path) -> List[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IOFailure(f"cannot read {path}: {e}")
    return text.split("\n")[:-1] if text.endswith("\n") else text.split("\n")


def read_manifest(path) -> Optional[DatasetManifest]:
    sidecar = manifest_path(path)
    if not sidecar.exists():
        return None
    try:
        with open(sidecar) as f:
            return DatasetManifest(**json.load(f))
    except (OSError, ValueError) as e:
        raise MalformedFile(f"unreadable manifest: {e}", path=sidecar, section="manifest")


def read_dataset(path) -> LabeledDataset:
    lines = _read_lines(path)
    if not lines or not lines[0].strip():
        raise MalformedFile("empty file", path=path, line=1, section="header")
    head = lines[0].split(",")
    if len(head) != 5 or head[0] != "dtac" or head[1] != "1":
        raise MalformedFile(f"expected 'dtac,1,<task>,<count>,<seed>', got '{lines[0]}'", path=path, line=1,
                            section="header")
    try:
        task, count, seed = TaskKind(head[2]), int(head[3]), int(head[4])
    except ValueError as e:
        raise MalformedFile(f"bad header field: {e}", path=path, line=1, section="header")

    rows = lines[1:]
    if len(rows) < count:
        raise MalformedFile(f"expected {count} sample rows, found {len(rows)}", path=path, line=len(lines) + 1,
                            section="samples")
    if len(rows) > count:
        raise MalformedFile(f"{len(rows) - count} rows beyond declared count {count}", path=path,
                            line=count + 2, section="samples")

    truths, labels, features = [], [], []
    for number, row in enumerate(rows, start=2):
        fields = row.split(",")
        if len(fields) != 4 + N_FEATURES:
            raise MalformedFile(f"expected {4 + N_FEATURES} fields, got {len(fields)}", path=path, line=number,
                                section="samples")
        try:
            truths.append([float(v) for v in fields[:3]])
            labels.append(int(fields[3]))
            features.append([float(v) for v in fields[4:]])
        except ValueError as e:
            raise MalformedFile(str(e), path=path, line=number, section="samples")

    manifest = read_manifest(path)
    if manifest is not None:
        if manifest.count != count:
            raise ChecksumMismatch(f"{path}: manifest count {manifest.count} != file count {count}")
        if manifest.checksum != _checksum(rows):
            raise ChecksumMismatch(f"{path}: sample checksum does not match manifest")

    return LabeledDataset(task=task, features=np.array(features).reshape(-1, N_FEATURES), labels=labels,
                          truths=np.array(truths).reshape(-1, 3), seed=seed)


# DMOD v1

def _format_values(values: np.ndarray) -> str:
    if values.dtype.kind in "iub":
        return ",".join(str(int(v)) for v in values.ravel())
    return ",".join(repr(float(v)) for v in values.ravel())


def _model_lines(artifact: ModelArtifact) -> List[str]:
    report = None
    if artifact.report is not None:
        report = artifact.report.model_dump(mode="json", exclude=set(TIMING_FIELDS))
    lines = [
        "dmod,1",
        f"task,{artifact.task.value}",
        f"model,{artifact.kind}",
        f"classes,{artifact.n_classes}",
        f"spec,{artifact.spec}",
        f"config,{json.dumps(artifact.config, sort_keys=True)}",
        f"report,{json.dumps(report, sort_keys=True)}",
    ]
    for name in sorted(artifact.params):
        values = np.asarray(artifact.params[name])
        dtype = "int64" if values.dtype.kind in "iub" else "float64"
        shape = "x".join(str(s) for s in values.shape) or "scalar"
        lines.append(f"param,{name},{dtype},{shape}")
        lines.append(_format_values(values))
    lines.append("end")
    return lines


def write_model(artifact: ModelArtifact, path) -> Path:
    path = Path(path)
    lines = _model_lines(artifact)
    lines.append(f"checksum,{_checksum(lines)}")
    if artifact.report is not None:
        # wall-clock fields stay outside the checksummed body
        timing = {name: getattr(artifact.report, name) for name in TIMING_FIELDS}
        lines.append(f"timing,{json.dumps(timing, sort_keys=True)}")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise IOFailure(f"cannot write model {path}: {e}")
    return path


def _expect(lines, index, key, path) -> str:
    if index >= len(lines):
        raise MalformedFile(f"file ends before '{key}'", path=path, line=index + 1, section=key)
    prefix = f"{key},"
    if not lines[index].startswith(prefix):
        raise MalformedFile(f"expected '{key},...'", path=path, line=index + 1, section=key)
    return lines[index][len(prefix):]


def read_model(path) -> ModelArtifact:
    lines = _read_lines(path)
    if not lines or lines[0] != "dmod,1":
        raise MalformedFile("expected 'dmod,1'", path=path, line=1, section="header")

    task = _expect(lines, 1, "task", path)
    kind = _expect(lines, 2, "model", path)
    classes = _expect(lines, 3, "classes", path)
    spec = _expect(lines, 4, "spec", path)
    try:
        config = json.loads(_expect(lines, 5, "config", path))
        report = json.loads(_expect(lines, 6, "report", path))
    except ValueError as e:
        raise MalformedFile(f"invalid JSON: {e}", path=path, section="config")

    params: Dict[str, np.ndarray] = {}
    index = 7
    while index < len(lines) and lines[index].startswith("param,"):
        parts = lines[index].split(",")
        if len(parts) != 4:
            raise MalformedFile("expected 'param,<name>,<dtype>,<shape>'", path=path, line=index + 1, section="param")
        _, name, dtype, shape_text = parts
        shape = () if shape_text == "scalar" else tuple(int(s) for s in shape_text.split("x"))
        if index + 1 >= len(lines):
            raise MalformedFile(f"missing values for '{name}'", path=path, line=index + 2, section=f"param {name}")
        raw = lines[index + 1]
        try:
            cast = int if dtype == "int64" else float
            values = np.array([cast(v) for v in raw.split(",")] if raw else [], dtype=dtype)
        except ValueError as e:
            raise MalformedFile(str(e), path=path, line=index + 2, section=f"param {name}")
        if values.size != int(np.prod(shape)):
            raise MalformedFile(f"'{name}' declares {int(np.prod(shape))} values, found {values.size}", path=path,
                                line=index + 2, section=f"param {name}")
        params[name] = values.reshape(shape)
        index += 2

    if index >= len(lines) or lines[index] != "end":
        raise MalformedFile("missing 'end' marker", path=path, line=index + 1, section="end")
    checksum = _expect(lines, index + 1, "checksum", path)
    if checksum != _checksum(lines[:index + 1]):
        raise ChecksumMismatch(f"{path}: model checksum mismatch")
    timing = dict.fromkeys(TIMING_FIELDS, 0.0)
    if index + 2 < len(lines) and lines[index + 2]:
        try:
            stored = json.loads(_expect(lines, index + 2, "timing", path))
            timing.update({name: stored[name] for name in TIMING_FIELDS if name in stored})
        except ValueError as e:
            raise MalformedFile(f"invalid JSON: {e}", path=path, line=index + 3, section="timing")

    try:
        return ModelArtifact(
            kind=kind,
            task=TaskKind(task),
            n_classes=int(classes),
            spec=spec,
            params=params,
            config=config,
            report=EvalReport(**report, **timing) if report is not None else None,
        )
    except ValueError as e:
        raise MalformedFile(f"invalid header: {e}", path=path, section="header")
