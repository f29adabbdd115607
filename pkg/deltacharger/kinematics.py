"""
Inverted Delta kinematics

Three rotary limbs at 0/120/240 degrees push the end effector away from the
setup ring along +Z. Angles are degrees at the API boundary and radians
inside. Each servo angle is measured from the base plane, positive toward +Z.
"""

import logging
import math
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from deltacharger.errors import JointLimit, NoIntersection, Unreachable

logger = logging.getLogger(__name__)

WORKSPACE_XY = 60.0
WORKSPACE_Z = 110.0
GRID_STEP = 5.0


class DeltaGeometry(BaseModel):
    model_config = ConfigDict(frozen=True)

    base_radius: float = Field(100.0, gt=0)
    effector_radius: float = Field(80.0, gt=0)
    upper_arm: float = Field(100.0, gt=0)
    forearm: float = Field(150.0, gt=0)
    z_home: float = 60.0
    limb_azimuths: Tuple[float, float, float] = (0.0, 120.0, 240.0)
    servo_limit: float = Field(90.0, gt=0, le=180)

    @field_validator("limb_azimuths")
    @classmethod
    def limbs_are_120_apart(cls, value):
        for a, b in zip(value, value[1:]):
            if not math.isclose((b - a) % 360.0, 120.0, abs_tol=1e-9):
                raise ValueError(f"limb azimuths must be 120 degrees apart, got {value}")
        return value


class Pose(BaseModel):
    model_config = ConfigDict(frozen=True)

    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    def moved(self, dx: float = 0.0, dy: float = 0.0, dz: float = 0.0) -> "Pose":
        return Pose(x=self.x + dx, y=self.y + dy, z=self.z + dz)


class JointAngles(BaseModel):
    model_config = ConfigDict(frozen=True)

    theta1: float
    theta2: float
    theta3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, self.theta3], dtype=float)


class WorkspaceReport(BaseModel):
    passed: bool
    fraction: float
    sampled: int
    reachable: int
    failures: List[Tuple[float, float, float]] = []
    message: str


def home_pose(geom: DeltaGeometry) -> Pose:
    return Pose(x=0.0, y=0.0, z=geom.z_home)


def _limb_angles(geom: DeltaGeometry, points: np.ndarray) -> np.ndarray:
    """Elbow-out servo angles in radians for an (N, 3) array, NaN where a limb cannot close"""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    upper = geom.upper_arm
    angles = np.full(points.shape, np.nan)

    for i, azimuth in enumerate(np.deg2rad(geom.limb_azimuths)):
        # Target in the limb's radial plane, shoulder at the origin
        u = x * np.cos(azimuth) + y * np.sin(azimuth)
        v = -x * np.sin(azimuth) + y * np.cos(azimuth)
        r2 = geom.forearm ** 2 - v ** 2
        cx = geom.effector_radius + u - geom.base_radius
        cz = z
        d = np.hypot(cx, cz)

        with np.errstate(invalid="ignore", divide="ignore"):
            a = (upper ** 2 - r2 + d ** 2) / (2.0 * d)
            h2 = upper ** 2 - a ** 2
            ok = (r2 >= 0) & (d > 1e-12) & (h2 >= 0)
            h = np.sqrt(np.where(ok, h2, 0.0))
            px = a * cx / d
            pz = a * cz / d
            # elbow-out: the intersection farther from the central axis
            ex = np.maximum(px - h * cz / d, px + h * cz / d)
            ez = np.where(px - h * cz / d >= px + h * cz / d, pz + h * cx / d, pz - h * cx / d)

        angles[:, i] = np.where(ok, np.arctan2(ez, ex), np.nan)
    return angles


def inverse_kinematics(geom: DeltaGeometry, target: Pose) -> JointAngles:
    theta = _limb_angles(geom, target.as_array())[0]
    if np.isnan(theta).any():
        limb = int(np.flatnonzero(np.isnan(theta))[0]) + 1
        raise Unreachable(f"limb {limb} cannot reach ({target.x:.3f}, {target.y:.3f}, {target.z:.3f})")

    degrees = np.rad2deg(theta)
    if np.any(np.abs(degrees) > geom.servo_limit):
        raise JointLimit(f"servo angles {np.round(degrees, 3).tolist()} exceed ±{geom.servo_limit} deg")
    return JointAngles(theta1=degrees[0], theta2=degrees[1], theta3=degrees[2])


def _sphere_centers(geom: DeltaGeometry, joints: JointAngles) -> np.ndarray:
    theta = np.deg2rad(joints.as_array())
    azimuth = np.deg2rad(np.asarray(geom.limb_azimuths))
    radial = geom.base_radius - geom.effector_radius + geom.upper_arm * np.cos(theta)
    return np.column_stack([radial * np.cos(azimuth), radial * np.sin(azimuth), geom.upper_arm * np.sin(theta)])


def forward_kinematics(geom: DeltaGeometry, joints: JointAngles) -> Pose:
    c1, c2, c3 = _sphere_centers(geom, joints)

    # Trilateration with three equal radii
    d = np.linalg.norm(c2 - c1)
    if d < 1e-12:
        raise NoIntersection("forearm spheres are concentric")
    ex = (c2 - c1) / d
    i = float(ex @ (c3 - c1))
    ey_raw = c3 - c1 - i * ex
    j = np.linalg.norm(ey_raw)
    if j < 1e-12:
        raise NoIntersection("forearm sphere centers are collinear")
    ey = ey_raw / j
    ez = np.cross(ex, ey)

    px = d / 2.0
    py = (i ** 2 + j ** 2) / (2.0 * j) - i * px / j
    pz2 = geom.forearm ** 2 - px ** 2 - py ** 2
    if pz2 < 0:
        raise NoIntersection(f"forearm spheres do not meet for joints {joints.as_array().tolist()}")

    base = c1 + px * ex + py * ey
    first = base + math.sqrt(pz2) * ez
    second = base - math.sqrt(pz2) * ez
    point = first if first[2] >= second[2] else second
    return Pose(x=float(point[0]), y=float(point[1]), z=float(point[2]))


def workspace_box(geom: DeltaGeometry, step: float = GRID_STEP) -> np.ndarray:
    xy = np.arange(-WORKSPACE_XY, WORKSPACE_XY + step / 2, step)
    z = geom.z_home + np.arange(0.0, WORKSPACE_Z + step / 2, step)
    gx, gy, gz = np.meshgrid(xy, xy, z, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])


def validate_workspace(geom: DeltaGeometry, step: float = GRID_STEP) -> WorkspaceReport:
    points = workspace_box(geom, step)
    degrees = np.rad2deg(_limb_angles(geom, points))
    good = np.all(np.isfinite(degrees), axis=1)
    good[good] = np.all(np.abs(degrees[good]) <= geom.servo_limit, axis=1)

    reachable = int(good.sum())
    fraction = reachable / len(points)
    failures = [tuple(float(v) for v in p) for p in points[~good][:10]]
    passed = reachable == len(points)

    if passed:
        message = f"Workspace reachable: {reachable}/{len(points)} grid points"
    else:
        message = f"Workspace incomplete: {reachable}/{len(points)} grid points reachable"
    if geom.forearm <= geom.upper_arm:
        message += f"; forearm {geom.forearm} mm is not longer than upper arm {geom.upper_arm} mm"

    logger.debug(message)
    return WorkspaceReport(
        passed=passed,
        fraction=fraction,
        sampled=len(points),
        reachable=reachable,
        failures=failures,
        message=message,
    )


def calibrate_forearm(
    geom: DeltaGeometry, step: float = 10.0, max_steps: int = 20
) -> Tuple[DeltaGeometry, WorkspaceReport]:
    """Lengthen the forearm in fixed steps until the workspace sweep passes"""
    report = validate_workspace(geom)
    for _ in range(max_steps):
        if report.passed:
            break
        geom = geom.model_copy(update={"forearm": geom.forearm + step})
        report = validate_workspace(geom)
        logger.info("forearm %.1f mm: %.4f reachable", geom.forearm, report.fraction)
    return geom, report


def joints_or_none(geom: DeltaGeometry, pose: Pose) -> Optional[JointAngles]:
    try:
        return inverse_kinematics(geom, pose)
    except (Unreachable, JointLimit):
        return None
