"""
Safe docking state machine

``step`` is a pure transition function over ``DockState``; ``run_episode``
drives it against the contact simulator, measuring current and tactile
frames at each pose and asking a perception stack for class predictions.
"""

import logging
import math
from enum import Enum
from pathlib import Path
from typing import List, Optional, Protocol, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from deltacharger.contact import (
    CurrentModel,
    ElectrodePlan,
    MisalignmentState,
    SafetyVerdict,
    SensorModel,
    TactileFrame,
    render_frame,
    servo_current,
    short_circuit_oracle,
)
from deltacharger.dataio import read_model
from deltacharger.errors import IllegalTransition, IOFailure, OutOfRange
from deltacharger.kinematics import DeltaGeometry, JointAngles, Pose, home_pose, joints_or_none
from deltacharger.learn.tasks import TaskKind, TaskSpec, label_of
from deltacharger.learn.training import load_classifier

logger = logging.getLogger(__name__)

TRACE_HEADER = "dock-trace v1"


class Phase(str, Enum):
    RECEIVE_COORDS = "ReceiveCoords"
    MOVE_TO_TARGET = "MoveToTarget"
    BACK_OFF = "BackOff"
    STEP_IN = "StepIn"
    MEASURE_ANGLE = "MeasureAngle"
    ALIGN_XY = "AlignXY"
    CHARGING = "Charging"
    FAILED = "Failed"
    DONE = "Done"


class Outcome(str, Enum):
    CHARGED = "Charged"
    FAILED_ANGLE = "FailedAngle"
    FAILED_NO_CONTACT = "FailedNoContact"
    FAILED_LOOP_LIMIT = "FailedLoopLimit"


class DockConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    overheat_current: float = 0.5
    hold_current: float = 0.4
    back_off_mm: float = 30.0
    step_mm: float = 5.0
    loop_limit: int = 15
    max_back_offs: int = 2
    confidence_threshold: float = 0.5
    critical_angle_deg: float = 12.0
    electrode_z: float = 115.0
    z_min: float = 60.0
    z_max: float = 170.0
    vision_error_xy: float = Field(10.0, ge=0, le=10.0)
    vision_error_z: float = Field(10.0, ge=0, le=10.0)
    max_phi: float = 15.0

    @property
    def step_budget(self) -> int:
        return int(math.ceil(self.back_off_mm / self.step_mm))


class AnglePrediction(BaseModel):
    model_config = ConfigDict(frozen=True)

    label: int
    confidence: float


class DockInputs(BaseModel):
    model_config = ConfigDict(frozen=True)

    coords: Optional[Pose] = None
    current: Optional[float] = None
    frame_empty: Optional[bool] = None
    angle: Optional[AnglePrediction] = None
    # (vertical, horizontal) class centres in mm
    offsets: Optional[Tuple[float, float]] = None


class DockState(BaseModel):
    model_config = ConfigDict(frozen=True)

    phase: Phase = Phase.RECEIVE_COORDS
    pose: Pose
    target: Optional[Pose] = None
    loop_counter: int = 0
    back_offs: int = 0
    step_ins: int = 0
    last_current: Optional[float] = None
    last_prediction: Optional[str] = None
    outcome: Optional[Outcome] = None


def max_transitions(config: DockConfig) -> int:
    """Static bound on the number of ``step`` calls in one episode"""
    return (
        1  # ReceiveCoords
        + 1  # MoveToTarget
        + config.max_back_offs
        + config.step_budget
        + 1  # MeasureAngle
        + config.loop_limit + 1
        + 1  # Charging
    )


def _fail(state: DockState, outcome: Outcome, **update) -> DockState:
    return state.model_copy(update={"phase": Phase.FAILED, "outcome": outcome, **update})


def _require(value, name: str, phase: Phase):
    if value is None:
        raise IllegalTransition(f"{phase.value} needs '{name}' input")
    return value


def _after_current(state: DockState, current: float, config: DockConfig) -> DockState:
    """Shared branch for MoveToTarget, BackOff and StepIn once a current is measured"""
    state = state.model_copy(update={"last_current": current})
    if current >= config.overheat_current:
        if state.back_offs >= config.max_back_offs:
            return _fail(state, Outcome.FAILED_LOOP_LIMIT)
        return state.model_copy(update={
            "phase": Phase.BACK_OFF,
            "pose": state.pose.moved(dz=-config.back_off_mm),
            "back_offs": state.back_offs + 1,
        })
    if current < config.hold_current:
        pose = state.pose.moved(dz=config.step_mm)
        if state.step_ins >= config.step_budget or pose.z > config.z_max:
            return _fail(state, Outcome.FAILED_LOOP_LIMIT)
        return state.model_copy(update={"phase": Phase.STEP_IN, "pose": pose, "step_ins": state.step_ins + 1})
    return state.model_copy(update={"phase": Phase.MEASURE_ANGLE})


def step(state: DockState, inputs: DockInputs, config: DockConfig, home: Optional[Pose] = None) -> DockState:
    phase = state.phase

    if phase == Phase.RECEIVE_COORDS:
        coords = _require(inputs.coords, "coords", phase)
        return state.model_copy(update={"phase": Phase.MOVE_TO_TARGET, "target": coords, "pose": coords})

    if phase in (Phase.MOVE_TO_TARGET, Phase.BACK_OFF, Phase.STEP_IN):
        return _after_current(state, _require(inputs.current, "current", phase), config)

    if phase == Phase.MEASURE_ANGLE:
        if _require(inputs.frame_empty, "frame_empty", phase):
            return _fail(state, Outcome.FAILED_NO_CONTACT)
        angle = _require(inputs.angle, "angle", phase)
        critical_class = int(math.floor(config.critical_angle_deg))
        update = {"last_prediction": f"angle={angle.label}@{angle.confidence:.2f}"}
        if angle.confidence < config.confidence_threshold or angle.label >= critical_class:
            update["pose"] = home or Pose(x=0.0, y=0.0, z=config.z_min)
            return _fail(state, Outcome.FAILED_ANGLE, **update)
        return state.model_copy(update={"phase": Phase.ALIGN_XY, "loop_counter": 0, **update})

    if phase == Phase.ALIGN_XY:
        if _require(inputs.frame_empty, "frame_empty", phase):
            return _fail(state, Outcome.FAILED_NO_CONTACT)
        vertical, horizontal = _require(inputs.offsets, "offsets", phase)
        update = {"last_prediction": f"dy={vertical:g};dx={horizontal:g}"}
        if (vertical == 0 and horizontal == 0) or state.loop_counter >= config.loop_limit:
            return state.model_copy(update={"phase": Phase.CHARGING, **update})
        return state.model_copy(update={
            "pose": state.pose.moved(dx=-horizontal, dy=-vertical),
            "loop_counter": state.loop_counter + 1,
            **update,
        })

    if phase == Phase.CHARGING:
        return state.model_copy(update={"phase": Phase.DONE, "outcome": Outcome.CHARGED})

    raise IllegalTransition(f"no transition out of terminal phase {phase.value}")


class Scenario(BaseModel):
    """True electrode pose and tilt; ``drift`` moves the electrode after coordinates are sent"""

    model_config = ConfigDict(frozen=True)

    electrode: Pose = Pose(x=0.0, y=0.0, z=115.0)
    phi: float = 0.0
    drift: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    vision_error: Optional[Tuple[float, float, float]] = None

    def actual_electrode(self) -> Pose:
        return self.electrode.moved(*self.drift)

    @classmethod
    def random(cls, rng: np.random.Generator, config: DockConfig) -> "Scenario":
        return cls(electrode=Pose(x=0.0, y=0.0, z=config.electrode_z), phi=float(rng.uniform(0.0, config.max_phi)))


class VisionStub(BaseModel):
    """Camera reading of the electrode, off by a bounded per-axis error"""

    model_config = ConfigDict(frozen=True)

    error_xy: float = Field(10.0, ge=0, le=10.0)
    error_z: float = Field(10.0, ge=0, le=10.0)

    def report(self, scenario: Scenario, rng: np.random.Generator) -> Pose:
        if scenario.vision_error is not None:
            error = np.clip(scenario.vision_error, [-self.error_xy] * 2 + [-self.error_z],
                            [self.error_xy] * 2 + [self.error_z])
        else:
            bound = np.array([self.error_xy, self.error_xy, self.error_z])
            error = rng.uniform(-bound, bound)
        return scenario.electrode.moved(*(float(e) for e in error))


def misalignment(pose: Pose, scenario: Scenario) -> MisalignmentState:
    electrode = scenario.actual_electrode()
    dx = float(np.clip(pose.x - electrode.x, -25.0, 25.0))
    dy = float(np.clip(pose.y - electrode.y, -25.0, 25.0))
    return MisalignmentState(phi=scenario.phi, dx=dx, dy=dy,
                             dz=pose.z - electrode.z)


class Perception(Protocol):
    def angle(self, frame: TactileFrame, truth: MisalignmentState) -> AnglePrediction: ...

    def offsets(self, frame: TactileFrame, truth: MisalignmentState) -> Tuple[float, float]: ...


class OraclePerception:
    """Ground-truth labels, the perfect-perception upper bound"""

    def __init__(self):
        self.angle_task = TaskSpec.for_kind(TaskKind.ANGLE)
        self.vertical_task = TaskSpec.for_kind(TaskKind.VERTICAL)
        self.horizontal_task = TaskSpec.for_kind(TaskKind.HORIZONTAL)

    def angle(self, frame, truth):
        try:
            return AnglePrediction(label=label_of(self.angle_task, truth), confidence=1.0)
        except OutOfRange:
            return AnglePrediction(label=self.angle_task.n_classes - 1, confidence=0.0)

    def _center(self, task: TaskSpec, truth: MisalignmentState) -> float:
        try:
            return task.class_center(label_of(task, truth))
        except OutOfRange:
            offset = truth.dy if task.kind == TaskKind.VERTICAL else truth.dx
            return task.class_center(0 if offset < 0 else task.n_classes - 1)

    def offsets(self, frame, truth):
        return self._center(self.vertical_task, truth), self._center(self.horizontal_task, truth)


class ModelPerception:
    """Trained classifiers for the angle, vertical and horizontal tasks"""

    def __init__(self, angle_model, vertical_model, horizontal_model):
        self.angle_model = angle_model
        self.angle_task = TaskSpec.for_kind(TaskKind.ANGLE)
        self.vertical_model = vertical_model
        self.horizontal_model = horizontal_model
        self.vertical_task = TaskSpec.for_kind(TaskKind.VERTICAL)
        self.horizontal_task = TaskSpec.for_kind(TaskKind.HORIZONTAL)

    @classmethod
    def from_directory(cls, directory) -> "ModelPerception":
        directory = Path(directory)
        models = []
        for task in ("angle", "vertical", "horizontal"):
            matches = sorted(directory.glob(f"*{task}*.dmod")) or sorted(directory.glob(f"{task}.dmod"))
            if not matches:
                raise IOFailure(f"no '{task}' model (*{task}*.dmod) in {directory}")
            artifact = read_model(matches[0])
            if artifact.task != TaskKind(task):
                raise IOFailure(f"{matches[0]} holds a '{artifact.task.value}' model, expected '{task}'")
            models.append(load_classifier(artifact))
        return cls(*models)

    def angle(self, frame, truth):
        proba = self.angle_model.predict_proba(frame.flatten()[None, :])[0]
        label = int(np.argmax(proba))
        try:
            label_of(self.angle_task, truth)
        except OutOfRange:
            # outside the trained envelope: never trust the model
            return AnglePrediction(label=label, confidence=0.0)
        return AnglePrediction(label=label, confidence=float(proba.max()))

    def offsets(self, frame, truth):
        features = frame.flatten()[None, :]
        vertical = int(self.vertical_model.predict(features)[0])
        horizontal = int(self.horizontal_model.predict(features)[0])
        return self.vertical_task.class_center(vertical), self.horizontal_task.class_center(horizontal)


class TraceEntry(BaseModel):
    phase: Phase
    pose: Pose
    joints: Optional[JointAngles]
    current: Optional[float]
    prediction: Optional[str]
    verdict: SafetyVerdict


class DockEpisode(BaseModel):
    scenario: Scenario
    seed: int
    trace: List[TraceEntry]
    inputs: List[DockInputs]
    outcome: Outcome
    final_verdict: SafetyVerdict

    @property
    def transitions(self) -> int:
        return len(self.inputs)

    def reached_charging(self) -> bool:
        return any(entry.phase == Phase.CHARGING for entry in self.trace)


class DockSimulator(BaseModel):
    """Everything an episode needs besides the scenario and perception"""

    model_config = ConfigDict(frozen=True)

    geometry: DeltaGeometry = DeltaGeometry()
    plan: ElectrodePlan = ElectrodePlan()
    sensor: SensorModel = SensorModel()
    current: CurrentModel = CurrentModel()
    dock: DockConfig = DockConfig()


def _sense(state: DockState, scenario: Scenario, reported: Pose, sim: DockSimulator, perception: Perception,
           rng: np.random.Generator) -> DockInputs:
    truth = misalignment(state.pose, scenario)
    if state.phase == Phase.RECEIVE_COORDS:
        return DockInputs(coords=reported)
    if state.phase in (Phase.MOVE_TO_TARGET, Phase.BACK_OFF, Phase.STEP_IN):
        return DockInputs(current=servo_current(sim.current, truth.dz))

    frame_seed = int(rng.integers(0, 2 ** 63 - 1))
    if state.phase == Phase.MEASURE_ANGLE:
        frame = render_frame(sim.plan, truth, frame_seed, sim.sensor)
        if frame.is_empty():
            return DockInputs(frame_empty=True)
        return DockInputs(frame_empty=False, angle=perception.angle(frame, truth))
    if state.phase == Phase.ALIGN_XY:
        frame = render_frame(sim.plan, truth, frame_seed, sim.sensor)
        if frame.is_empty():
            return DockInputs(frame_empty=True)
        return DockInputs(frame_empty=False, offsets=perception.offsets(frame, truth))
    return DockInputs()


def _entry(state: DockState, scenario: Scenario, sim: DockSimulator) -> TraceEntry:
    return TraceEntry(
        phase=state.phase,
        pose=state.pose,
        joints=joints_or_none(sim.geometry, state.pose),
        current=state.last_current,
        prediction=state.last_prediction,
        verdict=short_circuit_oracle(sim.plan, misalignment(state.pose, scenario)),
    )


def run_episode(scenario: Scenario, perception: Perception, seed: int,
                sim: Optional[DockSimulator] = None) -> DockEpisode:
    sim = sim or DockSimulator()
    rng = np.random.default_rng(seed)
    vision = VisionStub(error_xy=sim.dock.vision_error_xy, error_z=sim.dock.vision_error_z)
    reported = vision.report(scenario, rng)
    home = home_pose(sim.geometry)

    state = DockState(pose=home)
    trace = [_entry(state, scenario, sim)]
    inputs: List[DockInputs] = []
    bound = max_transitions(sim.dock)
    while state.phase not in (Phase.DONE, Phase.FAILED):
        if len(inputs) >= bound:
            raise IllegalTransition(f"episode exceeded {bound} transitions")
        sensed = _sense(state, scenario, reported, sim, perception, rng)
        inputs.append(sensed)
        state = step(state, sensed, sim.dock, home)
        trace.append(_entry(state, scenario, sim))

    final_verdict = short_circuit_oracle(sim.plan, misalignment(state.pose, scenario))
    logger.debug("episode seed %d: %s after %d transitions", seed, state.outcome.value, len(inputs))
    return DockEpisode(scenario=scenario, seed=seed, trace=trace, inputs=inputs, outcome=state.outcome,
                       final_verdict=final_verdict)


def replay(inputs: List[DockInputs], config: DockConfig, home: Pose) -> List[DockState]:
    """Feed a recorded input sequence back through ``step``"""
    states = [DockState(pose=home)]
    for sensed in inputs:
        states.append(step(states[-1], sensed, config, home))
    return states


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.3f}"


def trace_lines(episode: DockEpisode) -> List[str]:
    lines = [f"# episode seed={episode.seed} phi={episode.scenario.phi:.3f} outcome={episode.outcome.value}"]
    for i, entry in enumerate(episode.trace):
        joints = entry.joints.as_array() if entry.joints is not None else [None] * 3
        fields = [str(i), entry.phase.value, _fmt(entry.pose.x), _fmt(entry.pose.y), _fmt(entry.pose.z)]
        fields += [_fmt(j) for j in joints]
        fields += [_fmt(entry.current), entry.prediction or "", entry.verdict.value]
        lines.append(",".join(fields))
    return lines


def write_trace(episodes: List[DockEpisode], path) -> Path:
    path = Path(path)
    lines = [TRACE_HEADER, "step,phase,x,y,z,theta1,theta2,theta3,current,prediction,verdict"]
    for episode in episodes:
        lines.extend(trace_lines(episode))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise IOFailure(f"cannot write trace {path}: {e}")
    return path
