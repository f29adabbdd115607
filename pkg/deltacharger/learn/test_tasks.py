"""
Tests for task labelling
"""

import pytest

from deltacharger.contact import MisalignmentState
from deltacharger.errors import OutOfRange
from deltacharger.learn.tasks import TaskKind, TaskSpec, label_of

ANGLE = TaskSpec.for_kind(TaskKind.ANGLE)
VERTICAL = TaskSpec.for_kind(TaskKind.VERTICAL)
HORIZONTAL = TaskSpec.for_kind(TaskKind.HORIZONTAL)


@pytest.mark.parametrize("phi,label", [(0.0, 0), (0.99, 0), (1.0, 1), (3.4, 3), (5.99, 5)])
def test_angle_bins(phi, label):
    assert label_of(ANGLE, MisalignmentState(phi=phi)) == label


@pytest.mark.parametrize("phi", [-0.5, 6.0, 12.0])
def test_angle_outside_trained_range(phi):
    with pytest.raises(OutOfRange):
        label_of(ANGLE, MisalignmentState(phi=phi))


@pytest.mark.parametrize(
    "offset,label",
    [(-12.5, 0), (-10.0, 0), (-7.5, 1), (-5.0, 1), (-2.5, 2), (0.0, 2), (2.5, 2), (2.6, 3), (7.5, 3), (10.0, 4), (12.5, 4)],
)
def test_position_bins(offset, label):
    """Test nearest 5 mm centre with ties toward zero"""
    assert label_of(VERTICAL, MisalignmentState(dy=offset)) == label
    assert label_of(HORIZONTAL, MisalignmentState(dx=offset)) == label


def test_position_axes_are_independent():
    state = MisalignmentState(dx=10.0, dy=-5.0)
    assert label_of(VERTICAL, state) == 1
    assert label_of(HORIZONTAL, state) == 4


def test_position_out_of_range():
    with pytest.raises(OutOfRange):
        label_of(VERTICAL, MisalignmentState(dy=13.0))


def test_class_centres():
    assert [VERTICAL.class_center(i) for i in range(5)] == [-10.0, -5.0, 0.0, 5.0, 10.0]
    assert ANGLE.class_center(3) == 3.5
    assert VERTICAL.zero_class == 2
    assert VERTICAL.class_center(VERTICAL.zero_class) == 0.0


def test_position_is_dataset_only():
    with pytest.raises(OutOfRange):
        TaskSpec.for_kind("position")
