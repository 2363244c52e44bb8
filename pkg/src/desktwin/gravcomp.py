"""Gravity compensation: active feedforward vs. passive constant-force retractors.

The active system commands the exact inverse-dynamics gravity load at the
current configuration; the passive system hangs the arm from overhead
constant-force retractors whose tensions map to joint torques through the
attachment-point Jacobian. The harness quantifies both with a hold-drift
test and a residual-effort metric.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

from . import _kernels
from .chain import ChainModel, JointState, _check_vec, gravity_torques, point_jacobian
from .errors import ContractError, ModelFormatError
from .simcore import SimConfig, Trajectory, rollout, unactuated

COMP_MODES = ("none", "active", "passive")


@dataclass
class RetractorSpec:
    """Constant-force cable from an overhead anchor to a point on a link."""

    anchor: np.ndarray        # world, m
    attach_link: int
    attach_point: np.ndarray  # link frame, m
    force: float              # N, >= 0

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=float)
        self.attach_point = np.asarray(self.attach_point, dtype=float)
        if self.anchor.shape != (3,) or self.attach_point.shape != (3,):
            raise ModelFormatError("retractor anchor/attach_point must be 3-vectors")
        self.force = float(self.force)
        if not (np.isfinite(self.force) and self.force >= 0):
            raise ModelFormatError("retractor force must be >= 0")
        if self.attach_link < 0:
            raise ModelFormatError("attach_link must be a valid link index")

    def to_dict(self) -> dict:
        return {"anchor": list(self.anchor), "attach_link": self.attach_link,
                "attach_point": list(self.attach_point), "force": self.force}


@dataclass
class CompensatorConfig:
    """Which compensation acts on the simulated arm."""

    mode: str = "none"
    retractors: list[RetractorSpec] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in COMP_MODES:
            raise ModelFormatError(f"mode must be one of {COMP_MODES}")
        if self.mode == "passive" and not self.retractors:
            raise ModelFormatError("passive mode requires at least one retractor")

    def kernel_args(self, n_links: int):
        mode = {"none": _kernels.COMP_NONE, "active": _kernels.COMP_ACTIVE,
                "passive": _kernels.COMP_PASSIVE}[self.mode]
        rets = self.retractors if self.mode == "passive" else []
        for r in rets:
            if r.attach_link >= n_links:
                raise ContractError(f"retractor attach_link {r.attach_link} out of range")
        anchors = np.array([r.anchor for r in rets]).reshape(-1, 3)
        links = np.array([r.attach_link for r in rets], dtype=np.int64)
        points = np.array([r.attach_point for r in rets]).reshape(-1, 3)
        forces = np.array([r.force for r in rets], dtype=float)
        return (mode, anchors, links, points, forces)

    @classmethod
    def from_dict(cls, d: dict) -> "CompensatorConfig":
        unknown = set(d) - {"mode", "retractors"}
        if unknown:
            raise ModelFormatError(f"unknown compensator fields: {sorted(unknown)}")
        rets = [RetractorSpec(anchor=r["anchor"], attach_link=r["attach_link"],
                              attach_point=r["attach_point"], force=r["force"])
                for r in d.get("retractors", [])]
        return cls(mode=d.get("mode", "none"), retractors=rets)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "retractors": [r.to_dict() for r in self.retractors]}

    @classmethod
    def load(cls, path) -> "CompensatorConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                return cls.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise ModelFormatError(f"{path}: invalid JSON ({e})") from e

    def with_forces(self, forces) -> "CompensatorConfig":
        rets = [RetractorSpec(anchor=r.anchor, attach_link=r.attach_link,
                              attach_point=r.attach_point, force=f)
                for r, f in zip(self.retractors, forces)]
        return CompensatorConfig(mode=self.mode, retractors=rets)


def active_torques(model: ChainModel, q) -> np.ndarray:
    """Feedforward torques equal to the gravity load at q."""
    return gravity_torques(model, q)


def retractor_torques(model: ChainModel, q, retractors: list[RetractorSpec]) -> np.ndarray:
    """Joint torques from constant-tension cables: sum of J_p^T f."""
    q = _check_vec(model, q, "q")
    tau = np.zeros(model.n_joints)
    from .chain import forward_kinematics

    poses = forward_kinematics(model, q)
    for i, r in enumerate(retractors):
        if r.attach_link >= model.n_joints:
            raise ContractError(f"retractor {i}: attach_link out of range")
        p_attach = poses[r.attach_link, :3, :3] @ r.attach_point + poses[r.attach_link, :3, 3]
        d = r.anchor - p_attach
        dist = np.linalg.norm(d)
        if dist < 1e-9:
            raise ContractError(f"retractor {i}: anchor coincides with attach point")
        f = r.force * d / dist
        J = point_jacobian(model, q, r.attach_link, r.attach_point)
        tau += J.T @ f
    return tau


def compensation_torques(model: ChainModel, q, comp: CompensatorConfig) -> np.ndarray:
    if comp.mode == "active":
        return active_torques(model, q)
    if comp.mode == "passive":
        return retractor_torques(model, q, comp.retractors)
    return np.zeros(model.n_joints)


def hold_test(model: ChainModel, actuation, comp: CompensatorConfig, q0,
              duration: float = 5.0, cfg: SimConfig = SimConfig()) -> dict:
    """Free-arm hold: servo and friction off (armature, being rotor inertia,
    stays), compensation torques applied each substep. Reports per-joint
    max |q(t) - q0|."""
    q0 = _check_vec(model, q0, "q0")
    pk = model.packed()
    if np.any(q0 < pk.lo) or np.any(q0 > pk.hi):
        raise ContractError("q0 outside joint limits")
    theta = unactuated(model.n_joints)
    if actuation is not None:
        from .simcore import _theta_of

        theta[2] = _theta_of(actuation, model.n_joints)[2]
    traj = rollout(model, theta,
                   JointState(q=q0.copy(), qd=np.zeros(model.n_joints)),
                   q0, duration, cfg, comp=comp)
    drift = np.max(np.abs(traj.q - q0[None, :]), axis=0)
    return {"mode": comp.mode, "duration": duration,
            "max_drift": drift.tolist(), "q0": q0.tolist()}


def tune_retractors(model: ChainModel, retractors: list[RetractorSpec],
                    q_nominal) -> tuple[np.ndarray, float]:
    """Nonnegative least-squares forces minimizing the residual holding torque
    at q_nominal. Returns (forces, residual norm)."""
    if not retractors:
        raise ContractError("need at least one retractor")
    q_nominal = _check_vec(model, q_nominal, "q_nominal")
    g = gravity_torques(model, q_nominal)
    cols = []
    for r in retractors:
        unit = RetractorSpec(anchor=r.anchor, attach_link=r.attach_link,
                             attach_point=r.attach_point, force=1.0)
        cols.append(retractor_torques(model, q_nominal, [unit]))
    A = np.stack(cols, axis=1)
    # operator supplies g - A f at equilibrium; tension cannot push
    forces, resid = nnls(A, g)
    return forces, float(resid)


def effort_metric(model: ChainModel, comp: CompensatorConfig,
                  trajectory: Trajectory) -> float:
    """Mean residual holding torque (sum of per-joint magnitudes) the operator
    would supply along the trajectory."""
    if trajectory.joints != model.n_joints:
        raise ContractError("trajectory joint count does not match model")
    total = 0.0
    for i in range(trajectory.n_samples):
        q = trajectory.q[i]
        resid = gravity_torques(model, q) - compensation_torques(model, q, comp)
        total += float(np.sum(np.abs(resid)))
    return total / trajectory.n_samples


def compare_compensators(model: ChainModel, actuation, passive: CompensatorConfig,
                         q0, trajectory: Trajectory,
                         duration: float = 5.0,
                         cfg: SimConfig = SimConfig()) -> dict:
    """Hold-drift and effort for none/active/tuned-passive, plus tuned forces."""
    forces, resid = tune_retractors(model, passive.retractors, q0)
    tuned = passive.with_forces(forces)
    report = {"q0": list(np.asarray(q0, dtype=float)),
              "tuned_forces": forces.tolist(),
              "tuning_residual": resid,
              "modes": {}}
    for comp in (CompensatorConfig(mode="none"), CompensatorConfig(mode="active"), tuned):
        hold = hold_test(model, actuation, comp, q0, duration, cfg)
        effort = effort_metric(model, comp, trajectory)
        report["modes"][comp.mode] = {"max_drift": hold["max_drift"],
                                      "effort": effort}
    return report
