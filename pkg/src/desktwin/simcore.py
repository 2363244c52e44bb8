"""Deterministic fixed-step simulation of the servo-driven chain.

A control tick (default 50Hz) holds the commanded target while an inner
semi-implicit Euler loop (default 2 ms) integrates the dynamics. Rollouts
record one sample per tick, taken before that tick's step, so a duration-D
run yields D/control_dt + 1 samples on an exact time grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .actuation import SMOOTHSIGN_WIDTH, ArmActuation
from .chain import ChainModel, JointState, _check_vec
from .errors import ContractError, ModelFormatError, SimulationDiverged

TRAJECTORY_FILE_VERSION = 1

_LIMIT_TOL = 1e-6


@dataclass(frozen=True)
class SimConfig:
    control_dt: float = 0.02
    inner_dt: float = 0.002
    integrator: str = "semi-implicit-euler"
    seed: int = 0

    def __post_init__(self):
        if self.control_dt <= 0 or self.inner_dt <= 0:
            raise ContractError("control_dt and inner_dt must be > 0")
        n = round(self.control_dt / self.inner_dt)
        if n < 1 or abs(n * self.inner_dt - self.control_dt) > 1e-12:
            raise ContractError("control_dt must be an integer multiple of inner_dt")
        if self.integrator != "semi-implicit-euler":
            raise ContractError(f"unknown integrator {self.integrator!r}")

    @property
    def n_substeps(self) -> int:
        return round(self.control_dt / self.inner_dt)

    @property
    def rate_hz(self) -> float:
        return 1.0 / self.control_dt


@dataclass
class Trajectory:
    """Fixed-rate joint-space record; the unit of sysid data and replay input."""

    rate_hz: float
    joints: int
    t: np.ndarray         # (S,)
    q_target: np.ndarray  # (S, joints)
    q: np.ndarray
    qd: np.ndarray
    tau: np.ndarray
    model_hash: str = ""

    def __post_init__(self):
        S = len(self.t)
        for name in ("q_target", "q", "qd", "tau"):
            a = getattr(self, name)
            if a.shape != (S, self.joints):
                raise ContractError(f"trajectory field {name} has shape {a.shape}, "
                                    f"expected {(S, self.joints)}")

    @property
    def n_samples(self) -> int:
        return len(self.t)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.rate_hz == other.rate_hz and self.joints == other.joints
                and self.model_hash == other.model_hash
                and np.array_equal(self.t, other.t)
                and np.array_equal(self.q_target, other.q_target)
                and np.array_equal(self.q, other.q)
                and np.array_equal(self.qd, other.qd)
                and np.array_equal(self.tau, other.tau))


def _comp_kernel_args(comp, n: int):
    """(mode, anchors, links, points, forces) for the step kernel."""
    if comp is None:
        return (_kernels.COMP_NONE, np.zeros((0, 3)), np.zeros(0, dtype=np.int64),
                np.zeros((0, 3)), np.zeros(0))
    return comp.kernel_args(n)


def unactuated(n: int) -> np.ndarray:
    """Servo-off parameter array (all gains, friction, limits zero)."""
    return np.zeros((5, n))


def _theta_of(actuation, n: int) -> np.ndarray:
    """Accept an ArmActuation or a raw (5, n) kp/kv/armature/friction/tau_max array."""
    if isinstance(actuation, ArmActuation):
        theta = actuation.arrays()
    else:
        theta = np.asarray(actuation, dtype=float)
    if theta.shape != (5, n):
        raise ContractError(f"actuation must provide a (5, {n}) parameter array")
    return theta


def _raise_diverged(status: int):
    tick = status // 1000000
    sub = (status % 1000000) // 64
    joint = status % 64
    raise SimulationDiverged(
        f"state became non-finite at tick {tick}, substep {sub}, joint {joint}",
        joint=joint, substep=sub)


def step(model: ChainModel, actuation: ArmActuation, state: JointState,
         q_target, cfg: SimConfig, comp=None) -> JointState:
    """Advance one control tick. Pure: returns a new JointState."""
    pk = model.packed()
    q = _check_vec(model, state.q, "q").copy()
    qd = _check_vec(model, state.qd, "qd").copy()
    if np.any(q < pk.lo - _LIMIT_TOL) or np.any(q > pk.hi + _LIMIT_TOL):
        raise ContractError("state.q outside joint limits")
    target = _check_vec(model, q_target, "q_target")
    theta = _theta_of(actuation, pk.n)
    targets = np.vstack([target, target])
    out = np.empty((2, pk.n))
    status = _kernels.step_ticks(
        *pk.dyn_args(), pk.lo, pk.hi,
        theta[0], theta[1], theta[2], theta[3], theta[4], SMOOTHSIGN_WIDTH,
        *_comp_kernel_args(comp, pk.n),
        q, qd, targets, cfg.n_substeps, cfg.inner_dt,
        out, np.empty((2, pk.n)), np.empty((2, pk.n)))
    if status >= 0:
        _raise_diverged(status)
    return JointState(q=q, qd=qd)


def _sample_targets(target_source, n_samples: int, cfg: SimConfig, n: int) -> np.ndarray:
    if callable(target_source):
        targets = np.empty((n_samples, n))
        for i in range(n_samples):
            targets[i] = np.asarray(target_source(i * cfg.control_dt), dtype=float)
        return targets
    a = np.asarray(target_source, dtype=float)
    if a.ndim == 1:
        return np.tile(a, (n_samples, 1))
    if a.shape != (n_samples, n):
        raise ContractError(f"target array has shape {a.shape}, "
                            f"expected {(n_samples, n)}")
    return a


def rollout(model: ChainModel, actuation: ArmActuation, initial: JointState,
            target_source, duration: float, cfg: SimConfig, comp=None) -> Trajectory:
    """Simulate for `duration` seconds; returns duration/control_dt + 1 samples.

    target_source may be a callable t -> q_target, a constant vector, or a
    pre-sampled (n_samples, joints) array on the control grid (zero-order hold).
    """
    if duration <= 0:
        raise ContractError("duration must be > 0")
    n_steps = round(duration / cfg.control_dt)
    if n_steps < 1 or abs(n_steps * cfg.control_dt - duration) > 1e-9:
        raise ContractError("duration must be a multiple of control_dt")
    pk = model.packed()
    n = pk.n
    n_samples = n_steps + 1
    q = _check_vec(model, initial.q, "initial.q").copy()
    qd = _check_vec(model, initial.qd, "initial.qd").copy()
    if np.any(q < pk.lo - _LIMIT_TOL) or np.any(q > pk.hi + _LIMIT_TOL):
        raise ContractError("initial.q outside joint limits")
    targets = _sample_targets(target_source, n_samples, cfg, n)
    if not np.all(np.isfinite(targets)):
        raise ContractError("targets contain non-finite values")
    theta = _theta_of(actuation, n)
    out_q = np.empty((n_samples, n))
    out_qd = np.empty((n_samples, n))
    out_tau = np.empty((n_samples, n))
    status = _kernels.step_ticks(
        *pk.dyn_args(), pk.lo, pk.hi,
        theta[0], theta[1], theta[2], theta[3], theta[4], SMOOTHSIGN_WIDTH,
        *_comp_kernel_args(comp, n),
        q, qd, targets, cfg.n_substeps, cfg.inner_dt,
        out_q, out_qd, out_tau)
    if status >= 0:
        _raise_diverged(status)
    t = np.arange(n_samples) * cfg.control_dt
    return Trajectory(rate_hz=cfg.rate_hz, joints=n, t=t, q_target=targets,
                      q=out_q, qd=out_qd, tau=out_tau,
                      model_hash=model.content_hash())


# ---- trajectory files (JSON lines) ----

def save_trajectory(traj: Trajectory, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        header = {"version": TRAJECTORY_FILE_VERSION, "rate_hz": traj.rate_hz,
                  "joints": traj.joints, "model_hash": traj.model_hash}
        f.write(json.dumps(header) + "\n")
        for i in range(traj.n_samples):
            line = {"t": traj.t[i], "q_target": list(traj.q_target[i]),
                    "q": list(traj.q[i]), "qd": list(traj.qd[i]),
                    "tau": list(traj.tau[i])}
            f.write(json.dumps(line) + "\n")


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ModelFormatError(f"{path}: empty trajectory file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: line 1: invalid JSON ({e})") from e
    if header.get("version") != TRAJECTORY_FILE_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {header.get('version')!r}")
    joints = int(header["joints"])
    rows = []
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            rows.append(json.loads(raw))
        except json.JSONDecodeError as e:
            raise ModelFormatError(f"{path}: line {ln}: invalid JSON ({e})") from e
    S = len(rows)
    t = np.array([r["t"] for r in rows])
    def grab(key):
        a = np.array([r[key] for r in rows], dtype=float)
        if a.shape != (S, joints):
            raise ModelFormatError(f"{path}: field {key} has wrong width")
        return a
    return Trajectory(rate_hz=float(header["rate_hz"]), joints=joints, t=t,
                      q_target=grab("q_target"), q=grab("q"), qd=grab("qd"),
                      tau=grab("tau"), model_hash=str(header.get("model_hash", "")))
