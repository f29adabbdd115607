"""
Tests for dataset generation and the DTAC / DMOD file formats
"""

import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from deltacharger.dataio import (
    CAPTURE_GAIN,
    CAPTURE_SCATTER,
    LabeledDataset,
    generate_angle_dataset,
    generate_dataset,
    manifest_path,
    read_dataset,
    read_model,
    split,
    write_dataset,
    write_model,
)
from deltacharger.errors import ChecksumMismatch, Degenerate, MalformedFile, TaskMismatch, UsageError
from deltacharger.learn.tasks import TaskKind
from deltacharger.learn.training import TrainConfig, train


def test_angle_dataset_balance(small_angle_dataset):
    assert len(small_angle_dataset) == 120
    assert small_angle_dataset.class_counts() == {k: 20 for k in range(6)}
    phi = small_angle_dataset.truths[:, 0]
    assert_array_equal(np.floor(phi).astype(int), small_angle_dataset.labels)
    residual = small_angle_dataset.truths[:, 1:]
    assert np.abs(residual).max() <= 20.0 * CAPTURE_GAIN + CAPTURE_SCATTER
    # the residual spans the pre-alignment range, not a single template per class
    assert residual[:, 1].max() - residual[:, 1].min() > 5.0


def test_position_dataset_layout(small_position_dataset):
    assert len(small_position_dataset) == 100
    assert small_position_dataset.class_counts() == {k: 4 for k in range(25)}
    assert (small_position_dataset.truths[:, 0] == 0).all()
    assert np.abs(small_position_dataset.truths[:, 1:]).max() <= 10.0


def test_position_relabelling(small_position_dataset):
    vertical = small_position_dataset.for_task(TaskKind.VERTICAL)
    horizontal = small_position_dataset.for_task("horizontal")
    assert_array_equal(5 * vertical.labels + horizontal.labels, small_position_dataset.labels)
    assert vertical.class_counts() == {k: 20 for k in range(5)}


def test_angle_file_cannot_serve_position_tasks(small_angle_dataset):
    with pytest.raises(TaskMismatch):
        small_angle_dataset.for_task(TaskKind.VERTICAL)


def test_generation_is_seeded():
    a = generate_angle_dataset(seed=3, per_class=2)
    b = generate_angle_dataset(seed=3, per_class=2)
    c = generate_angle_dataset(seed=4, per_class=2)
    assert_array_equal(a.features, b.features)
    assert not np.array_equal(a.features, c.features)


def test_generation_parallel_matches_serial():
    serial = generate_angle_dataset(seed=5, per_class=2, n_jobs=1)
    parallel = generate_angle_dataset(seed=5, per_class=2, n_jobs=2)
    assert_array_equal(serial.features, parallel.features)


def test_generate_axis_task_rejected():
    with pytest.raises(UsageError):
        generate_dataset("vertical", seed=0)


def test_split_is_stratified(small_angle_dataset):
    train_set, val_set = split(small_angle_dataset, (0.67, 0.33), seed=42)
    assert train_set.class_counts() == {k: 13 for k in range(6)}
    assert val_set.class_counts() == {k: 7 for k in range(6)}
    joined = np.concatenate([train_set.features, val_set.features])
    assert len(np.unique(joined, axis=0)) == len(small_angle_dataset)

    again, _ = split(small_angle_dataset, (0.67, 0.33), seed=42)
    assert_array_equal(again.features, train_set.features)


def test_split_errors(small_angle_dataset):
    with pytest.raises(UsageError):
        split(small_angle_dataset, (0.5, 0.6))
    lonely = LabeledDataset(task="angle", features=np.zeros((3, 200)), labels=[0, 0, 1], truths=np.zeros((3, 3)))
    with pytest.raises(Degenerate):
        split(lonely)


def test_dataset_round_trip(tmp_path, small_angle_dataset):
    """Test write-read-write gives the same bytes and a matching manifest"""
    first = tmp_path / "angle.dtac"
    manifest = write_dataset(small_angle_dataset, first)
    assert manifest.count == 120
    assert json.loads(manifest_path(first).read_text())["checksum"] == manifest.checksum

    loaded = read_dataset(first)
    assert loaded.task == TaskKind.ANGLE
    assert_array_equal(loaded.labels, small_angle_dataset.labels)
    np.testing.assert_allclose(loaded.features, small_angle_dataset.features, atol=5e-7)

    second = tmp_path / "again.dtac"
    write_dataset(loaded, second)
    assert second.read_bytes() == first.read_bytes()


def test_dataset_checksum_mismatch(tmp_path, small_angle_dataset):
    path = tmp_path / "angle.dtac"
    write_dataset(small_angle_dataset, path)
    lines = path.read_text().split("\n")
    lines[5] = lines[5].rsplit(",", 1)[0] + ",8.888888"
    path.write_text("\n".join(lines))
    with pytest.raises(ChecksumMismatch):
        read_dataset(path)


@pytest.mark.parametrize(
    "content,section,line",
    [
        ("", "header", 1),
        ("dtac,2,angle,0,0\n", "header", 1),
        ("dtac,1,angle,2,0\n" + "0,0,0,0" + ",0" * 200 + "\n", "samples", 3),
        ("dtac,1,angle,1,0\n0,0,0,0,1,2\n", "samples", 2),
        ("dtac,1,angle,1,0\n0,0,0,x" + ",0" * 200 + "\n", "samples", 2),
    ],
)
def test_malformed_datasets(tmp_path, content, section, line):
    path = tmp_path / "bad.dtac"
    path.write_text(content)
    with pytest.raises(MalformedFile) as err:
        read_dataset(path)
    assert err.value.section == section
    assert err.value.line == line
    assert str(path) in err.value.detail


@pytest.fixture(scope="module")
def artifact(small_angle_dataset):
    train_set, val_set = split(small_angle_dataset, seed=0)
    artifact, _ = train("nn", TaskKind.ANGLE, train_set.features, train_set.labels, val_set.features,
                        val_set.labels, TrainConfig(epochs=2))
    return artifact


def test_model_round_trip(tmp_path, artifact):
    first = write_model(artifact, tmp_path / "angle.dmod")
    loaded = read_model(first)
    assert loaded.spec == artifact.spec
    assert loaded.report == artifact.report
    for name, values in artifact.params.items():
        assert_array_equal(loaded.params[name], values)
    second = write_model(loaded, tmp_path / "again.dmod")
    assert second.read_bytes() == first.read_bytes()


def test_model_files_repeat_across_runs(tmp_path, small_angle_dataset):
    """Test retraining with the same seed writes the same file apart from the timing line"""
    train_set, val_set = split(small_angle_dataset, seed=0)
    paths = []
    for name in ("first.dmod", "second.dmod"):
        artifact, _ = train("dt", TaskKind.ANGLE, train_set.features, train_set.labels, val_set.features,
                            val_set.labels, TrainConfig(epochs=2))
        paths.append(write_model(artifact, tmp_path / name))

    first, second = (p.read_text().splitlines() for p in paths)
    assert first[-1].startswith("timing,") and second[-1].startswith("timing,")
    assert first[:-1] == second[:-1]
    assert "inference_ms" not in first[6] and "training_s" not in first[6]

    reloaded = read_model(paths[0])
    assert reloaded.report.inference_ms == json.loads(first[-1][len("timing,"):])["inference_ms"]


def test_model_checksum_mismatch(tmp_path, artifact):
    path = write_model(artifact, tmp_path / "angle.dmod")
    text = path.read_text().replace("classes,6", "classes,5", 1)
    path.write_text(text)
    with pytest.raises(ChecksumMismatch):
        read_model(path)


def test_model_missing_section(tmp_path, artifact):
    path = write_model(artifact, tmp_path / "angle.dmod")
    lines = path.read_text().split("\n")
    del lines[4]
    path.write_text("\n".join(lines))
    with pytest.raises(MalformedFile) as err:
        read_model(path)
    assert err.value.section == "spec"
    assert err.value.line == 5


def test_model_truncated(tmp_path, artifact):
    path = write_model(artifact, tmp_path / "angle.dmod")
    lines = path.read_text().split("\n")
    path.write_text("\n".join(lines[:9]))
    with pytest.raises(MalformedFile):
        read_model(path)
