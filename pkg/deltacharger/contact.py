"""
Contact simulation

Quasi-static rigid contact between the charger end effector and the target
robot's electrodes. All coordinates are millimetres in the effector frame:
x along the electrodes, y across them, two tactile sensors on the x axis.
"""

import logging
import math
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

logger = logging.getLogger(__name__)

NOMINAL_PENETRATION = 17.5
SUPERSAMPLE = 8


class SafetyVerdict(str, Enum):
    SAFE = "Safe"
    SHORT = "Short"
    NO_CONTACT = "NoContact"


class MisalignmentState(BaseModel):
    """Effector pose minus target electrode pose"""

    model_config = ConfigDict(frozen=True)

    phi: float = Field(0.0, ge=-15.0, le=15.0)
    dx: float = Field(0.0, ge=-25.0, le=25.0)
    dy: float = Field(0.0, ge=-25.0, le=25.0)
    dz: float = NOMINAL_PENETRATION


class ElectrodePlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    pad_width: float = Field(100.0, gt=0)
    pad_height: float = Field(4.0, gt=0)
    bar_length: float = Field(110.0, gt=0)
    bar_height: float = Field(4.0, gt=0)
    gap: float = Field(10.51, gt=0)
    sensor_side: float = Field(math.sqrt(580.0), gt=0)
    sensor_offset: float = Field(40.0, gt=0)
    contact_envelope: float = Field(10.0, gt=0)

    @property
    def pitch(self) -> float:
        return self.bar_height + self.gap


class SensorModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    grid: int = 10
    nominal_force: float = 6.0
    penetration_gain: float = 0.01
    end_droop: float = 0.3
    force_floor: float = 1.0
    force_max: float = 9.0
    sigma: float = Field(0.15, ge=0)
    dropout: float = Field(0.02, ge=0, lt=1)
    rate_hz: float = 120.0


class CurrentModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    free_current: float = Field(0.10, ge=0)
    slope: float = Field(0.02, ge=0)
    hold_band: Tuple[float, float] = (0.4, 0.5)
    overheat_threshold: float = 0.5


class TactileFrame(BaseModel):
    """Two 10x10 force grids in newtons, sensors[0] left, sensors[1] right, row 0 on top"""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    sensors: np.ndarray
    timestamp_hz: float = 120.0

    @field_validator("sensors", mode="before")
    @classmethod
    def check_shape(cls, value):
        value = np.asarray(value, dtype=float)
        if value.shape != (2, 10, 10):
            raise ValueError(f"tactile frame must be 2x10x10, got {value.shape}")
        return value

    def flatten(self) -> np.ndarray:
        return self.sensors.reshape(-1).copy()

    @classmethod
    def from_features(cls, features) -> "TactileFrame":
        return cls(sensors=np.asarray(features, dtype=float).reshape(2, 10, 10))

    def is_empty(self) -> bool:
        return not np.any(self.sensors)


def _rotation(phi_deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(phi_deg)), math.sin(math.radians(phi_deg))
    return np.array([[c, -s], [s, c]])


def _target_offset(state: MisalignmentState) -> np.ndarray:
    return np.array([-state.dx, -state.dy])


def _rectangle(center, half_w, half_h, phi_deg) -> np.ndarray:
    r = _rotation(phi_deg)
    local = np.array([[-half_w, -half_h], [half_w, -half_h], [half_w, half_h], [-half_w, half_h]])
    return local @ r.T + np.asarray(center, dtype=float)


def _rectangles_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating axis test for two convex quads, touching counts as contact"""
    for quad in (a, b):
        edges = np.roll(quad, -1, axis=0) - quad
        normals = np.column_stack([-edges[:, 1], edges[:, 0]])
        for normal in normals[:2]:
            pa, pb = a @ normal, b @ normal
            if pa.max() < pb.min() - 1e-12 or pb.max() < pa.min() - 1e-12:
                return False
    return True


def short_circuit_oracle(plan: ElectrodePlan, state: MisalignmentState) -> SafetyVerdict:
    if abs(state.dx) > plan.contact_envelope or abs(state.dy) > plan.contact_envelope:
        return SafetyVerdict.NO_CONTACT

    half = plan.pitch / 2.0
    offset = _target_offset(state)
    r = _rotation(state.phi)
    bars = [
        _rectangle(r @ np.array([0.0, y]) + offset, plan.bar_length / 2, plan.bar_height / 2, state.phi)
        for y in (half, -half)
    ]
    for y in (half, -half):
        pad = _rectangle((0.0, y), plan.pad_width / 2, plan.pad_height / 2, 0.0)
        if all(_rectangles_intersect(pad, bar) for bar in bars):
            return SafetyVerdict.SHORT
    return SafetyVerdict.SAFE


def critical_angle(plan: ElectrodePlan, tol: float = 1e-6, upper: float = 15.0) -> Optional[float]:
    """Bisect the Safe -> Short onset at zero offset, None if no short occurs up to ``upper``"""
    def aligned(phi):
        return short_circuit_oracle(plan, MisalignmentState(phi=phi))

    if aligned(upper) != SafetyVerdict.SHORT:
        return None
    lo, hi = 0.0, upper
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if aligned(mid) == SafetyVerdict.SHORT:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def calibrated_gap(plan: ElectrodePlan, critical_deg: float = 12.0) -> float:
    """Gap between target bars that puts the aligned short-circuit onset at ``critical_deg``"""
    phi = math.radians(critical_deg)
    return (plan.pad_width * math.sin(phi) + (plan.pad_height - plan.bar_height) * math.cos(phi)) / (
        1.0 + math.cos(phi)
    )


def _sample_points(plan: ElectrodePlan, sensor: SensorModel) -> np.ndarray:
    """Supersample positions, shape (2, grid, grid, S*S, 2)"""
    n, k = sensor.grid, SUPERSAMPLE
    cell = plan.sensor_side / n
    fine = (np.arange(n * k) + 0.5) * (cell / k)
    cols = fine - plan.sensor_side / 2.0
    rows = plan.sensor_side / 2.0 - fine

    points = []
    for center_x in (-plan.sensor_offset, plan.sensor_offset):
        gy, gx = np.meshgrid(rows, cols + center_x, indexing="ij")
        xy = np.stack([gx, gy], axis=-1).reshape(n, k, n, k, 2).transpose(0, 2, 1, 3, 4)
        points.append(xy.reshape(n, n, k * k, 2))
    return np.stack(points)


def _pressure_map(plan: ElectrodePlan, state: MisalignmentState, sensor: SensorModel) -> np.ndarray:
    points = _sample_points(plan, sensor)
    # effector frame -> target bar frame
    r = _rotation(state.phi)
    local = (points - _target_offset(state)) @ r
    along, across = local[..., 0], local[..., 1]

    half_len = plan.bar_length / 2.0
    inside = np.abs(along) <= half_len
    on_bar = np.zeros(inside.shape, dtype=bool)
    for y in (plan.pitch / 2.0, -plan.pitch / 2.0):
        on_bar |= np.abs(across - y) <= plan.bar_height / 2.0
    inside &= on_bar

    depth_scale = max(0.0, 1.0 + sensor.penetration_gain * (state.dz - NOMINAL_PENETRATION))
    profile = 1.0 - sensor.end_droop * (along / half_len) ** 2
    force = sensor.nominal_force * depth_scale * profile
    return np.where(inside, force, 0.0).mean(axis=-1)


def render_frame(
    plan: ElectrodePlan, state: MisalignmentState, seed: int, sensor: Optional[SensorModel] = None
) -> TactileFrame:
    sensor = sensor or SensorModel()
    shape = (2, sensor.grid, sensor.grid)
    out_of_reach = abs(state.dx) > plan.contact_envelope or abs(state.dy) > plan.contact_envelope
    if state.dz < 0 or out_of_reach:
        return TactileFrame(sensors=np.zeros(shape), timestamp_hz=sensor.rate_hz)

    clean = _pressure_map(plan, state, sensor)
    rng = np.random.default_rng(seed)
    gain = rng.lognormal(mean=0.0, sigma=sensor.sigma, size=shape)
    dropped = rng.random(shape) < sensor.dropout

    values = np.clip(clean * gain, 0.0, sensor.force_max)
    values[dropped] = 0.0
    values[values < sensor.force_floor] = 0.0
    return TactileFrame(sensors=values, timestamp_hz=sensor.rate_hz)


def frame_centroid_rows(frame: TactileFrame) -> np.ndarray:
    """Force-weighted row centroid per sensor, NaN for an empty sensor"""
    rows = np.arange(frame.sensors.shape[1], dtype=float)
    weight = frame.sensors.sum(axis=2)
    total = weight.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, (weight * rows).sum(axis=1) / total, np.nan)


def servo_current(model: CurrentModel, penetration: float) -> float:
    if penetration < 0:
        return model.free_current
    # current sense resolution is 1 uA
    return round(max(0.0, model.free_current + model.slope * penetration), 6)
