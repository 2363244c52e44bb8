"""Servo law, gripper, and leader-resistance constants."""

import numpy as np
import pytest

from desktwin.actuation import (
    ActuatorParams,
    ArmActuation,
    GripperModel,
    gripper_force,
    leader_gripper_resistance,
    servo_torque,
    smoothsign,
)
from desktwin.errors import ContractError, ModelFormatError


def params(**kw):
    base = dict(kp=10.0, kv=0.5, armature=0.01, friction=0.2, tau_max=5.0)
    base.update(kw)
    return ActuatorParams(**base)


def test_equilibrium_zero_torque():
    assert servo_torque(params(), q=0.7, qd=0.0, q_target=0.7) == 0.0


def test_saturation():
    assert servo_torque(params(kp=10.0, tau_max=5.0), q=0.0, qd=0.0, q_target=100.0) == 5.0
    assert servo_torque(params(kp=10.0, tau_max=5.0), q=100.0, qd=0.0, q_target=0.0) == -5.0


def test_saturation_bound_holds_everywhere():
    rng = np.random.default_rng(7)
    p = params()
    for _ in range(500):
        q, qd, tgt = rng.uniform(-50, 50, 3)
        assert abs(servo_torque(p, q, qd, tgt)) <= p.tau_max


def test_friction_odd_symmetry():
    p = params(kp=1.0, kv=0.0)
    for v in (0.001, 0.05, 0.3, 2.0, 50.0):
        plus = servo_torque(p, 0.0, v, 0.0)
        minus = servo_torque(p, 0.0, -v, 0.0)
        assert plus == pytest.approx(-minus, abs=1e-15)


def test_friction_dissipative():
    rng = np.random.default_rng(8)
    p = params()
    for _ in range(200):
        qd = rng.uniform(-10, 10)
        assert -p.friction * smoothsign(qd) * qd <= 0.0


def test_servo_torque_continuous_near_zero_velocity():
    p = params()
    vs = np.linspace(-0.2, 0.2, 4001)
    taus = np.array([servo_torque(p, 0.0, v, 0.1) for v in vs])
    # no jump: increments vanish with the grid spacing
    assert np.max(np.abs(np.diff(taus))) < 5e-3


def test_actuator_param_validation():
    with pytest.raises(ModelFormatError):
        params(kp=0.0)
    with pytest.raises(ModelFormatError):
        params(tau_max=-1.0)
    with pytest.raises(ModelFormatError):
        params(friction=-0.1)
    with pytest.raises(ModelFormatError):
        params(tau_max=100.0)  # above the default motor ceiling


# ---- gripper ----

def test_gripper_presets_expose_measured_forces():
    assert GripperModel.preset("aloha2_rail").force_max == 27.9
    assert GripperModel.preset("aloha1_scissor").force_max == 12.8


def test_gripper_equilibrium_and_saturation():
    g = GripperModel.preset("aloha2_rail")
    assert gripper_force(g, x=0.03, xd=0.0, x_target=0.03) == 0.0
    assert gripper_force(g, x=0.0, xd=0.0, x_target=10.0) == 27.9
    legacy = GripperModel.preset("aloha1_scissor")
    assert gripper_force(legacy, x=0.0, xd=0.0, x_target=10.0) == 12.8


def test_gripper_stroke_contract():
    g = GripperModel.preset("aloha2_rail")
    with pytest.raises(ContractError):
        gripper_force(g, x=-0.01, xd=0.0, x_target=0.0)
    with pytest.raises(ContractError):
        gripper_force(g, x=g.stroke + 1e-6, xd=0.0, x_target=0.0)


def test_gripper_fingers_share_one_coordinate():
    g = GripperModel.preset("aloha2_rail")
    left, right = g.finger_positions(0.0317)
    assert left == right  # bitwise: one shared degree of freedom


def test_unknown_gripper_design():
    with pytest.raises(ContractError):
        GripperModel.preset("aloha3")


# ---- leader resistance ----

def test_leader_resistance_constants():
    assert leader_gripper_resistance("aloha1_scissor", xd=0.01) == -14.68
    assert leader_gripper_resistance("aloha2_rail", xd=0.01) == -0.84
    assert leader_gripper_resistance("aloha1_scissor", xd=-0.01) == 14.68


def test_leader_resistance_at_rest_and_errors():
    assert leader_gripper_resistance("aloha2_rail", xd=0.0) == 0.0
    with pytest.raises(ContractError):
        leader_gripper_resistance("aloha0", xd=0.1)


# ---- parameter files ----

def test_params_round_trip(actuation, tmp_path):
    path = tmp_path / "p.json"
    actuation.save(path)
    again = ArmActuation.load(path)
    assert again.to_dict() == actuation.to_dict()


def test_params_arrays_shape(actuation):
    theta = actuation.arrays()
    assert theta.shape == (5, 6)
    assert np.all(theta[0] > 0)  # kp row
    back = ArmActuation.from_arrays(theta, actuation.gripper)
    assert np.array_equal(back.arrays(), theta)


def test_params_file_rejects_bad_fields(actuation):
    d = actuation.to_dict()
    d["joints"][0]["extra"] = 1.0
    with pytest.raises(ModelFormatError):
        ArmActuation.from_dict(d)
    d = actuation.to_dict()
    del d["gripper"]["stroke"]
    with pytest.raises(ModelFormatError):
        ArmActuation.from_dict(d)
    d = actuation.to_dict()
    d["version"] = 9
    with pytest.raises(ModelFormatError):
        ArmActuation.from_dict(d)
