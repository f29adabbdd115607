"""
Tests for the inverted Delta kinematics
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from pydantic import ValidationError

from deltacharger.errors import JointLimit, NoIntersection, Unreachable
from deltacharger.kinematics import (
    WORKSPACE_XY,
    WORKSPACE_Z,
    DeltaGeometry,
    JointAngles,
    Pose,
    calibrate_forearm,
    forward_kinematics,
    home_pose,
    inverse_kinematics,
    joints_or_none,
    validate_workspace,
    workspace_box,
)

GEOM = DeltaGeometry()

workspace_poses = st.builds(
    Pose,
    x=st.floats(-WORKSPACE_XY, WORKSPACE_XY),
    y=st.floats(-WORKSPACE_XY, WORKSPACE_XY),
    z=st.floats(GEOM.z_home, GEOM.z_home + WORKSPACE_Z),
)


@settings(max_examples=300, deadline=None)
@given(workspace_poses)
def test_round_trip(pose):
    """Test FK(IK(p)) returns p inside the workspace box"""
    back = forward_kinematics(GEOM, inverse_kinematics(GEOM, pose))
    assert_allclose(back.as_array(), pose.as_array(), atol=1e-6)


def test_round_trip_thousand_seeded_poses():
    """Test the round trip on 1000 seeded random poses"""
    rng = np.random.default_rng(2024)
    low = [-WORKSPACE_XY, -WORKSPACE_XY, GEOM.z_home]
    high = [WORKSPACE_XY, WORKSPACE_XY, GEOM.z_home + WORKSPACE_Z]
    for x, y, z in rng.uniform(low, high, size=(1000, 3)):
        pose = Pose(x=x, y=y, z=z)
        back = forward_kinematics(GEOM, inverse_kinematics(GEOM, pose))
        assert np.abs(back.as_array() - pose.as_array()).max() <= 1e-6


def test_workspace_fully_reachable():
    """Test the 5 mm sweep of the workspace box is 100% reachable with default geometry"""
    report = validate_workspace(GEOM)
    assert report.passed, report.message
    assert report.fraction == 1.0
    assert report.sampled == 25 * 25 * 23
    assert report.failures == []


def test_workspace_box_starts_at_home_height():
    box = workspace_box(GEOM)
    assert box[:, 2].min() == GEOM.z_home
    assert box[:, 2].max() == GEOM.z_home + WORKSPACE_Z
    assert np.abs(box[:, :2]).max() == WORKSPACE_XY


def test_axis_symmetry():
    """Test on-axis targets give three equal joint angles"""
    for z in (60.0, 100.0, 150.0):
        joints = inverse_kinematics(GEOM, Pose(x=0.0, y=0.0, z=z)).as_array()
        assert_allclose(joints, np.full(3, joints[0]), atol=1e-9)


def test_common_angle_monotone_in_z():
    heights = np.arange(GEOM.z_home, GEOM.z_home + WORKSPACE_Z + 1e-9, 5.0)
    angles = np.array([inverse_kinematics(GEOM, Pose(x=0.0, y=0.0, z=z)).theta1 for z in heights])
    steps = np.diff(angles)
    assert (steps > 0).all() or (steps < 0).all()


def test_home_pose_angle():
    joints = inverse_kinematics(GEOM, home_pose(GEOM))
    assert joints.theta1 == pytest.approx(-23.8, abs=0.1)


def test_rotation_permutes_joints():
    """Test a 120 degree turn about Z permutes the joint angles cyclically"""
    p = np.array([20.0, -15.0, 110.0])
    c, s = np.cos(np.deg2rad(120.0)), np.sin(np.deg2rad(120.0))
    q = np.array([c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
    a = inverse_kinematics(GEOM, Pose(x=p[0], y=p[1], z=p[2])).as_array()
    b = inverse_kinematics(GEOM, Pose(x=q[0], y=q[1], z=q[2])).as_array()
    assert_allclose(b, np.roll(a, 1), atol=1e-9)


def test_unreachable_far_target():
    with pytest.raises(Unreachable):
        inverse_kinematics(GEOM, Pose(x=0.0, y=0.0, z=400.0))
    assert joints_or_none(GEOM, Pose(x=0.0, y=0.0, z=400.0)) is None


def test_joint_limit():
    """Test a geometry with tight servo limits rejects the home pose"""
    tight = GEOM.model_copy(update={"servo_limit": 10.0})
    with pytest.raises(JointLimit):
        inverse_kinematics(tight, home_pose(tight))


def test_forward_no_intersection():
    with pytest.raises(NoIntersection):
        forward_kinematics(GEOM, JointAngles(theta1=180.0, theta2=0.0, theta3=0.0))


def test_forward_zero_joints_is_valid():
    pose = forward_kinematics(GEOM, JointAngles(theta1=0.0, theta2=0.0, theta3=0.0))
    assert pose.x == pytest.approx(0.0, abs=1e-9)
    assert pose.y == pytest.approx(0.0, abs=1e-9)
    assert pose.z > 0


def test_invalid_geometry():
    with pytest.raises(ValidationError):
        DeltaGeometry(upper_arm=0)
    with pytest.raises(ValidationError):
        DeltaGeometry(limb_azimuths=(0.0, 90.0, 240.0))


def test_short_forearm_report():
    """Test a forearm no longer than the upper arm fails the sweep and says why"""
    report = validate_workspace(GEOM.model_copy(update={"forearm": 100.0}))
    assert not report.passed
    assert report.fraction < 1.0
    assert report.failures
    assert "not longer than upper arm" in report.message


def test_calibrate_forearm_lengthens_until_sweep_passes():
    geom, report = calibrate_forearm(GEOM.model_copy(update={"forearm": 110.0}))
    assert report.passed
    assert 120.0 < geom.forearm <= 150.0
    assert (geom.forearm - 110.0) % 10.0 == 0
