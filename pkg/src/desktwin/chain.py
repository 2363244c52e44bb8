"""Serial-chain rigid-body model: kinematics, dynamics, energies, Jacobians.

The chain is a base-to-tip sequence of revolute links. Link i's joint frame
is reached from its parent by the fixed origin transform and then the joint
rotation about the link's axis:

    T_i = T_{i-1} * (origin_R_i, origin_t_i) * Rot(axis_i, q_i)

Link com and inertia are expressed in the (post-rotation) link frame. All
public operations are pure; model values are frozen after construction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ContractError, ModelFormatError
from .transforms import quat_to_matrix

MODEL_FILE_VERSION = 1

_LINK_FIELDS = {"name", "joint_axis", "joint_origin", "mass", "com",
                "inertia_6", "limits", "velocity_limit"}
_ORIGIN_FIELDS = {"xyz", "quat_wxyz"}
_TOP_FIELDS = {"version", "gravity", "links"}

AXIS_NORMALIZE_TOL = 1e-6
AXIS_REJECT_TOL = 1e-3


def _vec(x, n, what) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.shape != (n,):
        raise ModelFormatError(f"{what} must have {n} components, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ModelFormatError(f"{what} contains non-finite values")
    return a


@dataclass
class LinkSpec:
    """One revolute link: joint placement, axis, and inertial properties."""

    name: str
    joint_axis: np.ndarray        # unit vector, joint frame
    origin_xyz: np.ndarray        # m, from parent joint frame
    origin_quat: np.ndarray       # (w, x, y, z), from parent joint frame
    mass: float                   # kg
    com: np.ndarray               # m, link frame
    inertia: np.ndarray           # 3x3 about com, link frame
    limits: tuple[float, float]   # rad
    velocity_limit: float         # rad/s

    def __post_init__(self):
        self.joint_axis = _vec(self.joint_axis, 3, f"link '{self.name}' joint_axis")
        norm = float(np.linalg.norm(self.joint_axis))
        if abs(norm - 1.0) > AXIS_REJECT_TOL:
            raise ModelFormatError(f"link '{self.name}' joint_axis norm {norm:.6f} not unit")
        if abs(norm - 1.0) > AXIS_NORMALIZE_TOL:
            self.joint_axis = self.joint_axis / norm
        self.origin_xyz = _vec(self.origin_xyz, 3, f"link '{self.name}' origin xyz")
        self.origin_quat = _vec(self.origin_quat, 4, f"link '{self.name}' origin quat")
        self.origin_R = quat_to_matrix(self.origin_quat)
        self.mass = float(self.mass)
        if not (np.isfinite(self.mass) and self.mass > 0):
            raise ModelFormatError(f"link '{self.name}' mass must be > 0")
        self.com = _vec(self.com, 3, f"link '{self.name}' com")
        self.inertia = np.asarray(self.inertia, dtype=float)
        if self.inertia.shape != (3, 3):
            raise ModelFormatError(f"link '{self.name}' inertia must be 3x3")
        if not np.allclose(self.inertia, self.inertia.T, atol=1e-12):
            raise ModelFormatError(f"link '{self.name}' inertia not symmetric")
        if np.any(np.linalg.eigvalsh(self.inertia) <= 0):
            raise ModelFormatError(f"link '{self.name}' inertia not positive definite")
        lo, hi = float(self.limits[0]), float(self.limits[1])
        if not lo < hi:
            raise ModelFormatError(f"link '{self.name}' joint limits need lo < hi")
        self.limits = (lo, hi)
        self.velocity_limit = float(self.velocity_limit)
        if not (np.isfinite(self.velocity_limit) and self.velocity_limit > 0):
            raise ModelFormatError(f"link '{self.name}' velocity_limit must be > 0")
        for a in (self.joint_axis, self.origin_xyz, self.origin_quat, self.com, self.inertia):
            a.setflags(write=False)


class PackedChain:
    """Array form of a chain consumed by the compiled kernels."""

    def __init__(self, model: "ChainModel"):
        n = len(model.links)
        self.axis = np.array([l.joint_axis for l in model.links])
        self.ot = np.array([l.origin_xyz for l in model.links])
        self.oR = np.array([l.origin_R for l in model.links])
        self.mass = np.array([l.mass for l in model.links])
        self.com = np.array([l.com for l in model.links])
        self.inertia = np.array([l.inertia for l in model.links])
        self.lo = np.array([l.limits[0] for l in model.links])
        self.hi = np.array([l.limits[1] for l in model.links])
        self.vel_limit = np.array([l.velocity_limit for l in model.links])
        self.gravity = model.gravity.copy()
        for a in (self.axis, self.ot, self.oR, self.mass, self.com, self.inertia,
                  self.lo, self.hi, self.vel_limit, self.gravity):
            a.setflags(write=False)
        self.n = n

    def dyn_args(self):
        return (self.axis, self.ot, self.oR, self.mass, self.com, self.inertia,
                self.gravity)


@dataclass
class ChainModel:
    """Ordered base-to-tip links plus the world gravity vector."""

    links: list[LinkSpec]
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        if len(self.links) < 1:
            raise ModelFormatError("chain needs at least one link")
        self.gravity = _vec(self.gravity, 3, "gravity")
        self.gravity.setflags(write=False)
        self._packed: PackedChain | None = None

    @property
    def n_joints(self) -> int:
        return len(self.links)

    def packed(self) -> PackedChain:
        if self._packed is None:
            self._packed = PackedChain(self)
        return self._packed

    # ---- file format ----

    @classmethod
    def from_dict(cls, d: dict) -> "ChainModel":
        if not isinstance(d, dict):
            raise ModelFormatError("model document must be a JSON object")
        unknown = set(d) - _TOP_FIELDS
        if unknown:
            raise ModelFormatError(f"unknown model fields: {sorted(unknown)}")
        if d.get("version") != MODEL_FILE_VERSION:
            raise ModelFormatError(f"unsupported model version {d.get('version')!r}")
        if "gravity" not in d or "links" not in d:
            raise ModelFormatError("model requires 'gravity' and 'links'")
        links = []
        for i, ld in enumerate(d["links"]):
            unknown = set(ld) - _LINK_FIELDS
            if unknown:
                raise ModelFormatError(f"link {i}: unknown fields {sorted(unknown)}")
            missing = _LINK_FIELDS - set(ld)
            if missing:
                raise ModelFormatError(f"link {i}: missing fields {sorted(missing)}")
            origin = ld["joint_origin"]
            if set(origin) != _ORIGIN_FIELDS:
                raise ModelFormatError(
                    f"link {i}: joint_origin must have exactly fields xyz, quat_wxyz")
            i6 = _vec(ld["inertia_6"], 6, f"link {i} inertia_6")
            ixx, iyy, izz, ixy, ixz, iyz = i6
            inertia = np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])
            limits = ld["limits"]
            if len(limits) != 2:
                raise ModelFormatError(f"link {i}: limits must be [lo, hi]")
            links.append(LinkSpec(
                name=str(ld["name"]),
                joint_axis=ld["joint_axis"],
                origin_xyz=origin["xyz"],
                origin_quat=origin["quat_wxyz"],
                mass=ld["mass"],
                com=ld["com"],
                inertia=inertia,
                limits=(limits[0], limits[1]),
                velocity_limit=ld["velocity_limit"],
            ))
        return cls(links=links, gravity=d["gravity"])

    def to_dict(self) -> dict:
        return {
            "version": MODEL_FILE_VERSION,
            "gravity": list(self.gravity),
            "links": [
                {
                    "name": l.name,
                    "joint_axis": list(l.joint_axis),
                    "joint_origin": {"xyz": list(l.origin_xyz),
                                     "quat_wxyz": list(l.origin_quat)},
                    "mass": l.mass,
                    "com": list(l.com),
                    "inertia_6": [l.inertia[0, 0], l.inertia[1, 1], l.inertia[2, 2],
                                  l.inertia[0, 1], l.inertia[0, 2], l.inertia[1, 2]],
                    "limits": [l.limits[0], l.limits[1]],
                    "velocity_limit": l.velocity_limit,
                }
                for l in self.links
            ],
        }

    @classmethod
    def load(cls, path) -> "ChainModel":
        try:
            with open(path, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ModelFormatError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def content_hash(self) -> str:
        """Hex digest of the canonicalized model, used for trajectory provenance."""
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def default_model() -> ChainModel:
    """The shipped desk-scale 6-DoF arm (representative, not calibrated)."""
    with resources.files("desktwin.data").joinpath("default_model.json").open("r") as f:
        return ChainModel.from_dict(json.load(f))


@dataclass
class JointState:
    """Joint positions/velocities and, for dynamics calls, accelerations."""

    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qd = np.asarray(self.qd, dtype=float)
        if self.qdd is not None:
            self.qdd = np.asarray(self.qdd, dtype=float)

    @classmethod
    def zeros(cls, n: int) -> "JointState":
        return cls(q=np.zeros(n), qd=np.zeros(n), qdd=np.zeros(n))


def _check_vec(model: ChainModel, v, what: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (model.n_joints,):
        raise ContractError(
            f"{what} must have length {model.n_joints}, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{what} contains non-finite values")
    return a


# ---- operations ----

def forward_kinematics(model: ChainModel, q) -> np.ndarray:
    """World pose of every link's joint frame as (n, 4, 4) homogeneous matrices."""
    q = _check_vec(model, q, "q")
    pk = model.packed()
    n = pk.n
    R = np.empty((n, 3, 3)); p = np.empty((n, 3))
    z = np.empty((n, 3)); cw = np.empty((n, 3))
    _kernels.kinematics(pk.axis, pk.ot, pk.oR, q, R, p, z, cw, pk.com)
    out = np.tile(np.eye(4), (n, 1, 1))
    out[:, :3, :3] = R
    out[:, :3, 3] = p
    return out


def _kin(model: ChainModel, q):
    pk = model.packed()
    n = pk.n
    R = np.empty((n, 3, 3)); p = np.empty((n, 3))
    z = np.empty((n, 3)); cw = np.empty((n, 3))
    _kernels.kinematics(pk.axis, pk.ot, pk.oR, q, R, p, z, cw, pk.com)
    return R, p, z, cw


def inverse_dynamics(model: ChainModel, state: JointState) -> np.ndarray:
    """Torques realizing state.qdd at (state.q, state.qd) under model gravity.

    Excludes actuator armature and friction; those belong to actuation.
    """
    if state.qdd is None:
        raise ContractError("inverse_dynamics requires qdd")
    q = _check_vec(model, state.q, "q")
    qd = _check_vec(model, state.qd, "qd")
    qdd = _check_vec(model, state.qdd, "qdd")
    pk = model.packed()
    return _kernels.rnea(*pk.dyn_args(), q, qd, qdd)


def gravity_torques(model: ChainModel, q) -> np.ndarray:
    """Holding torques against gravity; the gradient of potential_energy."""
    q = _check_vec(model, q, "q")
    pk = model.packed()
    zero = np.zeros(pk.n)
    return _kernels.rnea(*pk.dyn_args(), q, zero, zero)


def mass_matrix(model: ChainModel, q) -> np.ndarray:
    """Symmetric positive definite joint-space mass matrix."""
    q = _check_vec(model, q, "q")
    pk = model.packed()
    return _kernels.mass_matrix(*pk.dyn_args(), q)


def forward_dynamics(model: ChainModel, state: JointState, tau, armature=None) -> np.ndarray:
    """Accelerations from applied torques: (M + diag(armature)) qdd = tau - bias."""
    q = _check_vec(model, state.q, "q")
    qd = _check_vec(model, state.qd, "qd")
    tau = _check_vec(model, tau, "tau")
    if armature is None:
        armature = np.zeros(model.n_joints)
    armature = _check_vec(model, armature, "armature")
    if np.any(armature < 0):
        raise ContractError("armature must be >= 0 elementwise")
    pk = model.packed()
    qdd = _kernels.forward_dynamics(*pk.dyn_args(), q, qd, tau, armature)
    if not np.all(np.isfinite(qdd)):
        raise ContractError("effective mass matrix not positive definite")
    return qdd


def potential_energy(model: ChainModel, q) -> float:
    """Gravitational potential V = -sum_i m_i g . com_i(world)."""
    q = _check_vec(model, q, "q")
    pk = model.packed()
    _, _, _, cw = _kin(model, q)
    return float(-np.sum(pk.mass[:, None] * pk.gravity[None, :] * cw))


def kinetic_energy(model: ChainModel, state: JointState) -> float:
    """T = 1/2 qd^T M(q) qd."""
    q = _check_vec(model, state.q, "q")
    qd = _check_vec(model, state.qd, "qd")
    M = mass_matrix(model, q)
    return float(0.5 * qd @ M @ qd)


def point_jacobian(model: ChainModel, q, link_index: int, point) -> np.ndarray:
    """3xn Jacobian of a link-frame point's world position w.r.t. q."""
    q = _check_vec(model, q, "q")
    if not 0 <= link_index < model.n_joints:
        raise ContractError(f"link_index {link_index} out of range")
    point = np.asarray(point, dtype=float)
    if point.shape != (3,):
        raise ContractError("point must be a 3-vector")
    R, p, z, _ = _kin(model, q)
    pt = p[link_index] + R[link_index] @ point
    J = np.zeros((3, model.n_joints))
    for j in range(link_index + 1):
        J[:, j] = np.cross(z[j], pt - p[j])
    return J
