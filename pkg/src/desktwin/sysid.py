"""Actuator identification: excitation design, residuals, and LM fitting.

The five parameter classes per joint (gain, damping, armature, friction,
torque limit) are fit in log space against reference trajectories by
minimizing position residuals between simulated and reference motion.
Torque limits are additionally squashed below the motor ceiling with a
smooth p-norm min, so every iterate maps to a valid parameter set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .actuation import (
    DEFAULT_MOTOR_CEILING,
    SMOOTHSIGN_WIDTH,
    ArmActuation,
    GripperModel,
)
from .chain import ChainModel
from .errors import ContractError
from .simcore import SimConfig, Trajectory

PARAM_NAMES = ("kp", "kv", "armature", "friction", "tau_max")
N_PARAM_CLASSES = 5

# Sharpness of the smooth torque-limit clamp; distortion at half the
# ceiling is below 1e-6 relative.
SOFTCLAMP_SHARPNESS = 20.0

EXCITATION_FREQ_RANGE = (0.1, 2.0)  # Hz
EXCITATION_SPAN_FRACTION = 0.9      # of joint range
EXCITATION_DURATION = 10.0          # s
EXCITATION_SINUSOIDS = 3

# Trajectories cycle through spectral bands (upper-sinusoid frequency windows
# within EXCITATION_FREQ_RANGE). Slow sweeps separate Coulomb friction from
# damping, fast ones exercise armature and torque saturation.
EXCITATION_BANDS = (
    ((0.15, 0.45), (0.25, 0.55)),   # slow
    ((0.40, 0.90), (0.90, 1.40)),   # mid
    ((0.60, 1.20), (1.40, 2.00)),   # fast
)

DIVERGENCE_PENALTY = 1e3


def _softmin_from_log(x: np.ndarray, ceiling: float,
                      k: float = SOFTCLAMP_SHARPNESS) -> np.ndarray:
    """exp(x) smoothly clamped below ceiling; exact for values << ceiling."""
    return np.exp(-np.logaddexp(-k * x, -k * np.log(ceiling)) / k)


def _softmin_inverse(v: np.ndarray, ceiling: float,
                     k: float = SOFTCLAMP_SHARPNESS) -> np.ndarray:
    """log of the raw value whose softmin equals v (requires v < ceiling)."""
    v = np.asarray(v, dtype=float)
    if np.any(v >= ceiling):
        raise ContractError(f"tau_max must stay below the motor ceiling {ceiling}")
    return np.log(v) - np.log1p(-((v / ceiling) ** k)) / k


@dataclass
class ParamVector:
    """Flat per-joint (kp, kv, armature, friction, tau_max), kept in log space."""

    x: np.ndarray                 # (5 n,) log-parameters
    n_joints: int
    motor_ceiling: float = DEFAULT_MOTOR_CEILING

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.shape != (N_PARAM_CLASSES * self.n_joints,):
            raise ContractError(
                f"parameter vector needs {N_PARAM_CLASSES * self.n_joints} entries")
        if not np.all(np.isfinite(self.x)):
            raise ContractError("parameter vector must be finite")

    @classmethod
    def from_arrays(cls, theta: np.ndarray,
                    motor_ceiling: float = DEFAULT_MOTOR_CEILING) -> "ParamVector":
        """theta: (5, n) rows kp, kv, armature, friction, tau_max; all > 0."""
        theta = np.asarray(theta, dtype=float)
        if theta.ndim != 2 or theta.shape[0] != N_PARAM_CLASSES:
            raise ContractError("theta must have shape (5, n)")
        if np.any(theta <= 0) or not np.all(np.isfinite(theta)):
            raise ContractError("raw parameters must be strictly positive and finite")
        n = theta.shape[1]
        x = np.empty(N_PARAM_CLASSES * n)
        for j in range(n):
            x[5 * j:5 * j + 4] = np.log(theta[:4, j])
            x[5 * j + 4] = _softmin_inverse(theta[4, j], motor_ceiling)
        return cls(x=x, n_joints=n, motor_ceiling=motor_ceiling)

    @classmethod
    def from_actuation(cls, act: ArmActuation,
                       motor_ceiling: float = DEFAULT_MOTOR_CEILING) -> "ParamVector":
        return cls.from_arrays(act.arrays(), motor_ceiling)

    def to_arrays(self) -> np.ndarray:
        """(5, n) strictly positive raw parameters with tau_max below ceiling."""
        n = self.n_joints
        theta = np.empty((N_PARAM_CLASSES, n))
        for j in range(n):
            theta[:4, j] = np.exp(np.clip(self.x[5 * j:5 * j + 4], -700.0, 700.0))
            theta[4, j] = _softmin_from_log(self.x[5 * j + 4], self.motor_ceiling)
        return theta

    def to_actuation(self, gripper: GripperModel) -> ArmActuation:
        return ArmActuation.from_arrays(self.to_arrays(), gripper,
                                        motor_ceiling=self.motor_ceiling)

    def perturbed(self, fraction: float, rng: np.random.Generator) -> "ParamVector":
        """Each raw entry scaled by an independent U(1-f, 1+f) factor."""
        theta = self.to_arrays()
        factors = rng.uniform(1 - fraction, 1 + fraction, size=theta.shape)
        return ParamVector.from_arrays(theta * factors, self.motor_ceiling)

    def max_relative_error(self, other: "ParamVector") -> float:
        a = self.to_arrays()
        b = other.to_arrays()
        return float(np.max(np.abs(a - b) / np.abs(b)))


@dataclass
class Excitation:
    """One excitation signal: commanded positions on the control grid."""

    targets: np.ndarray   # (S, n)
    rate_hz: float
    meta: dict

    @property
    def n_samples(self) -> int:
        return self.targets.shape[0]

    def as_source(self):
        dt = 1.0 / self.rate_hz
        tgt = self.targets

        def source(t: float):
            return tgt[min(int(round(t / dt)), len(tgt) - 1)]

        return source


def generate_excitation(model: ChainModel, cfg: SimConfig, n: int = 11,
                        seed: int = 0,
                        duration: float = EXCITATION_DURATION) -> list[Excitation]:
    """Seeded per-joint sums of 3 sinusoids spanning 90% of each joint range
    with peak commanded velocity at the joint velocity limit."""
    if n < 1:
        raise ContractError("need at least one excitation trajectory")
    pk = model.packed()
    if np.any(pk.hi - pk.lo <= 0):
        raise ContractError("degenerate joint range")
    rng = np.random.default_rng(seed)
    n_samples = round(duration / cfg.control_dt) + 1
    t = np.arange(n_samples) * cfg.control_dt
    out = []
    for traj_i in range(n):
        band = EXCITATION_BANDS[traj_i % len(EXCITATION_BANDS)]
        targets = np.empty((n_samples, pk.n))
        meta_joints = []
        for j in range(pk.n):
            lo, hi = pk.lo[j], pk.hi[j]
            center = 0.5 * (lo + hi)
            span_goal = EXCITATION_SPAN_FRACTION * (hi - lo)
            f_lo, f_hi = EXCITATION_FREQ_RANGE
            # a lone sinusoid at the full span moves at 2 pi f (span/2); the
            # base frequency is drawn low enough that the velocity bisection
            # below can bracket the joint's velocity limit
            f_feasible = pk.vel_limit[j] / (np.pi * span_goal)
            base_hi = min(max(f_lo * 1.2, f_feasible), f_hi)
            freqs = np.array([rng.uniform(f_lo, base_hi),
                              rng.uniform(*band[0]),
                              rng.uniform(*band[1])])
            phases = rng.uniform(0, 2 * np.pi, EXCITATION_SINUSOIDS)
            amps = rng.uniform(0.3, 1.0, EXCITATION_SINUSOIDS)

            def signal(beta):
                # beta shifts amplitude weight between slow (+) and fast (-)
                # sinusoids at a fixed position span
                a = amps * freqs ** (-beta)
                w = 2 * np.pi * freqs
                s = np.sum(a[:, None] * np.sin(w[:, None] * t + phases[:, None]), axis=0)
                v = np.sum(a[:, None] * w[:, None] * np.cos(w[:, None] * t + phases[:, None]), axis=0)
                scale = span_goal / (s.max() - s.min())
                q = center + (s - 0.5 * (s.max() + s.min())) * scale
                return q, float(np.max(np.abs(v)) * scale)

            # aim the commanded peak velocity at the joint's velocity limit;
            # when the drawn frequencies cannot slow down that far at the
            # required span, the peak stays above the limit (still reached)
            vlim = pk.vel_limit[j]
            blo, bhi = -6.0, 8.0
            _, v_slowest = signal(bhi)
            _, v_fastest = signal(blo)
            if v_slowest >= vlim:
                beta = bhi
            elif v_fastest <= vlim:
                beta = blo
            else:
                for _ in range(60):
                    bmid = 0.5 * (blo + bhi)
                    _, v = signal(bmid)
                    if v > vlim:
                        blo = bmid
                    else:
                        bhi = bmid
                beta = 0.5 * (blo + bhi)
            q, vpeak = signal(beta)
            targets[:, j] = q
            meta_joints.append({"freqs_hz": freqs.tolist(), "phases": phases.tolist(),
                                "amps": amps.tolist(), "beta": beta,
                                "peak_velocity": vpeak})
        out.append(Excitation(targets=targets, rate_hz=cfg.rate_hz,
                              meta={"index": traj_i, "seed": seed,
                                    "duration": duration, "joints": meta_joints}))
    return out


@dataclass
class _RefPack:
    """Reference trajectories flattened for the batch kernel."""

    q0s: np.ndarray       # (K, n)
    qd0s: np.ndarray      # (K, n)
    targets: np.ndarray   # (K, S_max, n)
    q_ref: np.ndarray     # (K, S_max, n)
    lengths: np.ndarray   # (K,)
    ranges: np.ndarray    # (n,)
    n_residuals: int


def _pack_refs(refs: list[Trajectory], model: ChainModel) -> _RefPack:
    if not refs:
        raise ContractError("refs must be nonempty")
    n = model.n_joints
    expect_hash = model.content_hash()
    rate = refs[0].rate_hz
    for i, r in enumerate(refs):
        if r.joints != n:
            raise ContractError(f"ref {i}: joint count {r.joints} != model {n}")
        if r.rate_hz != rate:
            raise ContractError(f"ref {i}: rate {r.rate_hz} != {rate}")
        if r.model_hash and r.model_hash != expect_hash:
            raise ContractError(f"ref {i}: model hash mismatch")
    K = len(refs)
    S = max(r.n_samples for r in refs)
    q0s = np.zeros((K, n)); qd0s = np.zeros((K, n))
    targets = np.zeros((K, S, n)); q_ref = np.zeros((K, S, n))
    lengths = np.zeros(K, dtype=np.int64)
    for k, r in enumerate(refs):
        s = r.n_samples
        q0s[k] = r.q[0]; qd0s[k] = r.qd[0]
        targets[k, :s] = r.q_target
        targets[k, s:] = r.q_target[-1]
        q_ref[k, :s] = r.q
        lengths[k] = s
    pk = model.packed()
    ranges = pk.hi - pk.lo
    return _RefPack(q0s=q0s, qd0s=qd0s, targets=targets, q_ref=q_ref,
                    lengths=lengths, ranges=ranges,
                    n_residuals=int(lengths.sum()) * n)


def _batch_residuals(thetas: np.ndarray, pack: _RefPack, model: ChainModel,
                     cfg: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    """Residual matrix (B, m) for B parameter variants, plus divergence flags."""
    pk = model.packed()
    B = thetas.shape[0]
    K, S, n = pack.targets.shape
    out_q = np.empty((B, K, S, n))
    stat = np.empty((B, K), dtype=np.int64)
    _kernels.batch_rollout_q(*pk.dyn_args(), pk.lo, pk.hi,
                             thetas, SMOOTHSIGN_WIDTH,
                             pack.q0s, pack.qd0s, pack.targets,
                             cfg.n_substeps, cfg.inner_dt, out_q, stat)
    diff = (out_q - pack.q_ref[None]) / pack.ranges[None, None, None, :]
    res = np.empty((B, pack.n_residuals))
    diverged = np.zeros(B, dtype=bool)
    pos = 0
    for k in range(K):
        s = int(pack.lengths[k])
        block = diff[:, k, :s, :].reshape(B, s * n)
        res[:, pos:pos + s * n] = block
        pos += s * n
    bad = ~np.isfinite(res)
    if np.any(bad):
        res[bad] = DIVERGENCE_PENALTY
        diverged |= bad.any(axis=1)
    return res, diverged


def residuals(theta: ParamVector, refs: list[Trajectory], model: ChainModel,
              cfg: SimConfig) -> np.ndarray:
    """Range-normalized position residuals over (trajectory, tick, joint).

    Simulation divergence under pathological parameters yields finite
    penalty entries instead of raising, keeping the solver total.
    """
    pack = _pack_refs(refs, model)
    res, _ = _batch_residuals(theta.to_arrays()[None], pack, model, cfg)
    return res[0]


def evaluate(theta: ParamVector, refs: list[Trajectory], model: ChainModel,
             cfg: SimConfig) -> np.ndarray:
    """Per-joint RMSE (rad) of un-normalized position error across refs."""
    pack = _pack_refs(refs, model)
    pk = model.packed()
    thetas = theta.to_arrays()[None]
    K, S, n = pack.targets.shape
    out_q = np.empty((1, K, S, n))
    stat = np.empty((1, K), dtype=np.int64)
    _kernels.batch_rollout_q(*pk.dyn_args(), pk.lo, pk.hi,
                             thetas, SMOOTHSIGN_WIDTH,
                             pack.q0s, pack.qd0s, pack.targets,
                             cfg.n_substeps, cfg.inner_dt, out_q, stat)
    sq = np.zeros(n)
    count = 0
    for k in range(K):
        s = int(pack.lengths[k])
        err = out_q[0, k, :s, :] - pack.q_ref[k, :s, :]
        err[~np.isfinite(err)] = DIVERGENCE_PENALTY
        sq += np.sum(err ** 2, axis=0)
        count += s
    return np.sqrt(sq / count)


@dataclass
class FitOptions:
    max_iters: int = 200
    gradient_tol: float = 1e-8
    step_tol: float = 1e-10
    fd_step: float = 1e-4       # forward-difference step in log space
    lambda0: float = 1e-3
    lambda_factor: float = 10.0
    max_step: float = 1.5       # inf-norm cap on a log-space step


@dataclass
class FitReport:
    theta_init: ParamVector
    theta_final: ParamVector
    iterations: int
    cost_history: list[float]
    per_joint_rmse: np.ndarray
    converged: bool
    termination_reason: str   # gradient_tol | step_tol | max_iters

    def to_dict(self) -> dict:
        return {
            "theta_init": self.theta_init.to_arrays().tolist(),
            "theta_final": self.theta_final.to_arrays().tolist(),
            "param_rows": list(PARAM_NAMES),
            "iterations": self.iterations,
            "cost_history": list(self.cost_history),
            "per_joint_rmse": self.per_joint_rmse.tolist(),
            "converged": self.converged,
            "termination_reason": self.termination_reason,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n",
                              encoding="utf-8")


def fit(theta0: ParamVector, refs: list[Trajectory], model: ChainModel,
        cfg: SimConfig, opts: FitOptions = FitOptions()) -> FitReport:
    """Levenberg-Marquardt in log-parameter space with a forward-difference
    Jacobian; accepted-step costs are non-increasing by construction."""
    pack = _pack_refs(refs, model)
    n_par = len(theta0.x)
    ceiling = theta0.motor_ceiling

    def theta_of(x):
        return ParamVector(x=x, n_joints=theta0.n_joints, motor_ceiling=ceiling)

    def eval_one(x):
        res, _ = _batch_residuals(theta_of(x).to_arrays()[None], pack, model, cfg)
        return res[0]

    x = theta0.x.copy()
    r = eval_one(x)
    cost = 0.5 * float(r @ r)
    if not np.isfinite(cost):
        raise ContractError("initial cost is not finite")
    cost_history = [cost]
    lam = opts.lambda0
    reason = "max_iters"
    iterations = 0
    for it in range(1, opts.max_iters + 1):
        iterations = it
        # Jacobian: all forward-difference variants in one batched evaluation
        thetas = np.empty((n_par, N_PARAM_CLASSES, theta0.n_joints))
        for j in range(n_par):
            xp = x.copy()
            xp[j] += opts.fd_step
            thetas[j] = theta_of(xp).to_arrays()
        res_pert, _ = _batch_residuals(thetas, pack, model, cfg)
        J = (res_pert - r[None, :]).T / opts.fd_step
        g = J.T @ r
        if np.max(np.abs(g)) <= opts.gradient_tol:
            reason = "gradient_tol"
            break
        A = J.T @ J
        diagA = np.clip(np.diag(A), 1e-12, None)
        accepted = False
        while True:
            D = A + lam * np.diag(diagA)
            try:
                delta = np.linalg.solve(D, -g)
            except np.linalg.LinAlgError:
                delta, *_ = np.linalg.lstsq(D, -g, rcond=None)
            big = np.max(np.abs(delta))
            if big > opts.max_step:
                delta = delta * (opts.max_step / big)
            if np.linalg.norm(delta) <= opts.step_tol * (opts.step_tol + np.linalg.norm(x)):
                reason = "step_tol"
                break
            r_try = eval_one(x + delta)
            cost_try = 0.5 * float(r_try @ r_try)
            if np.isfinite(cost_try) and cost_try < cost:
                x = x + delta
                r = r_try
                cost = cost_try
                cost_history.append(cost)
                lam = max(lam / opts.lambda_factor, 1e-12)
                accepted = True
                break
            lam *= opts.lambda_factor
            if lam > 1e14:
                reason = "step_tol"
                break
        if not accepted:
            break
    theta_final = theta_of(x)
    rmse = evaluate(theta_final, refs, model, cfg)
    return FitReport(theta_init=theta0, theta_final=theta_final,
                     iterations=iterations, cost_history=cost_history,
                     per_joint_rmse=rmse,
                     converged=reason in ("gradient_tol", "step_tol"),
                     termination_reason=reason)
