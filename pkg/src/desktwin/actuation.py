"""Position-servo actuator models: per-joint PD servos and the coupled gripper.

The five per-joint parameters (gain, damping, armature, Coulomb friction,
torque limit) are the unknowns the sysid pipeline fits. Coulomb friction is
smoothed with a tanh profile of width SMOOTHSIGN_WIDTH so residuals stay
differentiable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ModelFormatError

PARAMS_FILE_VERSION = 1

# Velocity half-width of the smoothed Coulomb term (rad/s). Configurable per
# call; this default keeps least-squares residuals differentiable.
SMOOTHSIGN_WIDTH = 0.05

# Upper bound any joint torque limit must respect unless overridden.
DEFAULT_MOTOR_CEILING = 50.0

# Follower gripper closing-force ceilings (N) for the two hardware designs.
GRIPPER_FORCE_MAX = {"aloha2_rail": 27.9, "aloha1_scissor": 12.8}

# Static opening resistance (N) the operator overcomes on each leader design.
LEADER_OPEN_FORCE = {"aloha1_scissor": 14.68, "aloha2_rail": 0.84}

# Effective translating mass of the gripper finger assembly (kg); the
# gripper file format carries no inertia, so simulation uses this constant.
GRIPPER_MOVING_MASS = 0.2

_JOINT_FIELDS = {"kp", "kv", "armature", "friction", "tau_max"}
_GRIPPER_FIELDS = {"stroke", "kp_lin", "kv_lin", "force_max"}


def smoothsign(v: float, width: float = SMOOTHSIGN_WIDTH) -> float:
    """Odd, continuous sign surrogate: tanh(v / width)."""
    return math.tanh(v / width)


@dataclass
class ActuatorParams:
    """One joint's servo: tau = clamp(kp e - kv qd - friction smoothsign(qd))."""

    kp: float        # N*m/rad
    kv: float        # N*m*s/rad
    armature: float  # kg*m^2, added to the mass-matrix diagonal
    friction: float  # N*m Coulomb magnitude
    tau_max: float   # N*m
    motor_ceiling: float = DEFAULT_MOTOR_CEILING

    def __post_init__(self):
        vals = (self.kp, self.kv, self.armature, self.friction, self.tau_max)
        if not all(math.isfinite(v) for v in vals):
            raise ModelFormatError("actuator parameters must be finite")
        if self.kp <= 0 or self.tau_max <= 0:
            raise ModelFormatError("kp and tau_max must be > 0")
        if self.kv < 0 or self.armature < 0 or self.friction < 0:
            raise ModelFormatError("kv, armature, friction must be >= 0")
        if self.tau_max > self.motor_ceiling:
            raise ModelFormatError(
                f"tau_max {self.tau_max} exceeds motor ceiling {self.motor_ceiling}")

    def to_dict(self) -> dict:
        return {"kp": self.kp, "kv": self.kv, "armature": self.armature,
                "friction": self.friction, "tau_max": self.tau_max}


@dataclass
class GripperModel:
    """Linear position-controlled gripper; both fingers share one coordinate."""

    stroke: float     # m of finger travel
    kp_lin: float     # N/m
    kv_lin: float     # N*s/m
    force_max: float  # N

    def __post_init__(self):
        if not all(math.isfinite(v) for v in
                   (self.stroke, self.kp_lin, self.kv_lin, self.force_max)):
            raise ModelFormatError("gripper parameters must be finite")
        if self.stroke <= 0 or self.force_max <= 0:
            raise ModelFormatError("stroke and force_max must be > 0")
        if self.kp_lin < 0 or self.kv_lin < 0:
            raise ModelFormatError("kp_lin, kv_lin must be >= 0")

    @classmethod
    def preset(cls, design: str = "aloha2_rail") -> "GripperModel":
        """Gripper with the measured force ceiling of the given design."""
        if design not in GRIPPER_FORCE_MAX:
            raise ContractError(f"unknown gripper design {design!r}; "
                                f"options: {sorted(GRIPPER_FORCE_MAX)}")
        return cls(stroke=0.08, kp_lin=600.0, kv_lin=20.0,
                   force_max=GRIPPER_FORCE_MAX[design])

    def finger_positions(self, x: float) -> tuple[float, float]:
        """Both finger coordinates; equal by construction (shared DoF)."""
        return (x, x)

    def to_dict(self) -> dict:
        return {"stroke": self.stroke, "kp_lin": self.kp_lin,
                "kv_lin": self.kv_lin, "force_max": self.force_max}


@dataclass
class ArmActuation:
    """Per-joint servo parameters plus the gripper; the sysid file format."""

    joints: list[ActuatorParams]
    gripper: GripperModel

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def arrays(self) -> np.ndarray:
        """(5, n) array with rows kp, kv, armature, friction, tau_max."""
        return np.array([[j.kp for j in self.joints],
                         [j.kv for j in self.joints],
                         [j.armature for j in self.joints],
                         [j.friction for j in self.joints],
                         [j.tau_max for j in self.joints]])

    @classmethod
    def from_arrays(cls, theta: np.ndarray, gripper: GripperModel,
                    motor_ceiling: float = DEFAULT_MOTOR_CEILING) -> "ArmActuation":
        joints = [ActuatorParams(kp=theta[0, j], kv=theta[1, j], armature=theta[2, j],
                                 friction=theta[3, j], tau_max=theta[4, j],
                                 motor_ceiling=motor_ceiling)
                  for j in range(theta.shape[1])]
        return cls(joints=joints, gripper=gripper)

    @classmethod
    def from_dict(cls, d: dict) -> "ArmActuation":
        if not isinstance(d, dict):
            raise ModelFormatError("parameter document must be a JSON object")
        unknown = set(d) - {"version", "joints", "gripper"}
        if unknown:
            raise ModelFormatError(f"unknown parameter fields: {sorted(unknown)}")
        if d.get("version") != PARAMS_FILE_VERSION:
            raise ModelFormatError(f"unsupported parameter version {d.get('version')!r}")
        joints = []
        for i, jd in enumerate(d.get("joints", [])):
            if set(jd) != _JOINT_FIELDS:
                raise ModelFormatError(
                    f"joint {i}: fields must be exactly {sorted(_JOINT_FIELDS)}")
            joints.append(ActuatorParams(**jd))
        gd = d.get("gripper")
        if gd is None or set(gd) != _GRIPPER_FIELDS:
            raise ModelFormatError(f"gripper must have fields {sorted(_GRIPPER_FIELDS)}")
        return cls(joints=joints, gripper=GripperModel(**gd))

    def to_dict(self) -> dict:
        return {"version": PARAMS_FILE_VERSION,
                "joints": [j.to_dict() for j in self.joints],
                "gripper": self.gripper.to_dict()}

    @classmethod
    def load(cls, path) -> "ArmActuation":
        try:
            with open(path, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ModelFormatError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n",
                              encoding="utf-8")


def default_actuation() -> ArmActuation:
    """Servo parameters shipped with the default model."""
    from importlib import resources

    with resources.files("desktwin.data").joinpath("default_params.json").open("r") as f:
        return ArmActuation.from_dict(json.load(f))


def servo_torque(params: ActuatorParams, q: float, qd: float, q_target: float,
                 width: float = SMOOTHSIGN_WIDTH) -> float:
    """PD + smoothed Coulomb friction, clamped to the torque limit."""
    t = (params.kp * (q_target - q) - params.kv * qd
         - params.friction * smoothsign(qd, width))
    return max(-params.tau_max, min(params.tau_max, t))


def gripper_force(model: GripperModel, x: float, xd: float, x_target: float) -> float:
    """Linear servo force on the shared finger coordinate."""
    if not 0.0 <= x <= model.stroke:
        raise ContractError(f"gripper position {x} outside stroke [0, {model.stroke}]")
    f = model.kp_lin * (x_target - x) - model.kv_lin * xd
    return max(-model.force_max, min(model.force_max, f))


def leader_gripper_resistance(preset: str, xd: float) -> float:
    """Static resistance the operator feels opening/closing the leader gripper.

    Constant magnitude per design, sign opposing motion; zero at rest.
    """
    if preset not in LEADER_OPEN_FORCE:
        raise ContractError(f"unknown leader design {preset!r}; "
                            f"options: {sorted(LEADER_OPEN_FORCE)}")
    if xd == 0.0:
        return 0.0
    return -math.copysign(LEADER_OPEN_FORCE[preset], xd)
