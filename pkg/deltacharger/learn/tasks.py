"""Classification tasks and label binning"""

import math
from enum import Enum
from typing import Tuple

from pydantic import BaseModel, ConfigDict

from deltacharger.contact import MisalignmentState
from deltacharger.errors import OutOfRange

POSITION_STEP = 5.0
POSITION_LIMIT = 12.5
ANGLE_CLASSES = 6


class TaskKind(str, Enum):
    ANGLE = "angle"
    VERTICAL = "vertical"
    HORIZONTAL = "horizontal"
    # dataset level only: one file labelled for both axis tasks
    POSITION = "position"


class TaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: TaskKind
    n_classes: int
    edges: Tuple[float, ...]

    @classmethod
    def for_kind(cls, kind) -> "TaskSpec":
        kind = TaskKind(kind)
        if kind == TaskKind.ANGLE:
            return cls(kind=kind, n_classes=ANGLE_CLASSES, edges=tuple(float(k) for k in range(ANGLE_CLASSES + 1)))
        if kind == TaskKind.POSITION:
            raise OutOfRange("position is a dataset layout, label it as vertical or horizontal")
        edges = tuple(-POSITION_LIMIT + POSITION_STEP * k for k in range(6))
        return cls(kind=kind, n_classes=5, edges=edges)

    @property
    def zero_class(self) -> int:
        return 2 if self.kind != TaskKind.ANGLE else 0

    def class_center(self, index: int) -> float:
        if self.kind == TaskKind.ANGLE:
            return index + 0.5
        return (index - 2) * POSITION_STEP


def label_of(task: TaskSpec, truth: MisalignmentState) -> int:
    if task.kind == TaskKind.ANGLE:
        if not 0.0 <= truth.phi < ANGLE_CLASSES:
            raise OutOfRange(f"angle {truth.phi:.3f} deg outside trained range [0, {ANGLE_CLASSES})")
        return int(math.floor(truth.phi))

    offset = truth.dy if task.kind == TaskKind.VERTICAL else truth.dx
    if abs(offset) > POSITION_LIMIT:
        raise OutOfRange(f"{task.kind.value} offset {offset:.3f} mm outside ±{POSITION_LIMIT} mm")
    # nearest centre, ties toward zero
    k = offset / POSITION_STEP
    center = int(math.copysign(math.ceil(abs(k) - 0.5), k))
    return center + 2
