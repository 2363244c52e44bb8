"""Chain kinematics/dynamics against independent brute-force oracles."""

import json

import numpy as np
import pytest

from desktwin import chain
from desktwin.chain import ChainModel, JointState, LinkSpec
from desktwin.errors import ContractError, ModelFormatError
from desktwin.transforms import axis_angle_matrix, quat_to_matrix

from conftest import IDENTITY_QUAT, make_single_link, random_q


# ---- oracles ----

def fk_oracle(model: ChainModel, q):
    """Plain homogeneous-matrix chain product, independent of the kernels."""
    poses = []
    T = np.eye(4)
    for i, link in enumerate(model.links):
        O = np.eye(4)
        O[:3, :3] = quat_to_matrix(link.origin_quat)
        O[:3, 3] = link.origin_xyz
        J = np.eye(4)
        J[:3, :3] = axis_angle_matrix(link.joint_axis, q[i])
        T = T @ O @ J
        poses.append(T.copy())
    return np.array(poses)


def grad_potential_fd(model: ChainModel, q, h=1e-6):
    """Central finite difference of potential_energy w.r.t. q."""
    g = np.zeros(len(q))
    for j in range(len(q)):
        qp = q.copy(); qp[j] += h
        qm = q.copy(); qm[j] -= h
        g[j] = (chain.potential_energy(model, qp) - chain.potential_energy(model, qm)) / (2 * h)
    return g


def point_pos(model: ChainModel, q, link_index, point):
    T = fk_oracle(model, q)[link_index]
    return T[:3, :3] @ point + T[:3, 3]


# ---- forward kinematics ----

def test_fk_zero_q_is_origin_product(model):
    q = np.zeros(model.n_joints)
    poses = chain.forward_kinematics(model, q)
    T = np.eye(4)
    for i, link in enumerate(model.links):
        O = np.eye(4)
        O[:3, :3] = link.origin_R
        O[:3, 3] = link.origin_xyz
        T = T @ O
        assert np.allclose(poses[i], T, atol=1e-14)


def test_fk_single_link_rotation_about_z():
    m = make_single_link(axis=(0, 0, 1))
    poses = chain.forward_kinematics(m, np.array([np.pi / 2]))
    expected = np.eye(4)
    expected[:3, :3] = axis_angle_matrix([0, 0, 1], np.pi / 2)
    assert np.allclose(poses[0], expected, atol=1e-15)


def test_fk_matches_bruteforce_product(model, rng):
    for _ in range(50):
        q = random_q(model, rng)
        got = chain.forward_kinematics(model, q)
        want = fk_oracle(model, q)
        assert np.max(np.abs(got - want)) <= 1e-12


def test_fk_dimension_mismatch(model):
    with pytest.raises(ContractError):
        chain.forward_kinematics(model, np.zeros(4))
    with pytest.raises(ContractError):
        chain.forward_kinematics(model, np.array([np.nan] * 6))


# ---- inverse dynamics / gravity ----

def test_id_zero_gravity_at_rest_is_zero():
    m = make_single_link(gravity=(0, 0, 0))
    tau = chain.inverse_dynamics(m, JointState(np.zeros(1), np.zeros(1), np.zeros(1)))
    assert np.allclose(tau, 0.0)


def test_single_link_gravity_torque_matches_fd_oracle():
    # horizontal axis, com 0.5 m out: |tau| = m g r = 4.905 N*m at q = 0
    m = make_single_link(axis=(0, 1, 0), com=(0.5, 0, 0), mass=1.0)
    tau = chain.gravity_torques(m, np.zeros(1))
    fd = grad_potential_fd(m, np.zeros(1))
    assert abs(tau[0] - fd[0]) < 1e-5
    assert abs(abs(tau[0]) - 4.905) < 1e-6
    assert tau[0] == pytest.approx(-4.905, abs=1e-9)


def test_vertical_link_zero_gravity_torque():
    # com aligned with gravity: zero moment arm
    m = make_single_link(axis=(0, 0, 1), com=(0, 0, -0.3))
    tau = chain.gravity_torques(m, np.array([0.7]))
    assert abs(tau[0]) < 1e-12


def test_gravity_torques_equal_gradient_of_potential(model, rng):
    for _ in range(100):
        q = random_q(model, rng)
        tau = chain.gravity_torques(model, q)
        fd = grad_potential_fd(model, q)
        assert np.max(np.abs(tau - fd)) < 1e-5


def test_gravity_zero_everywhere_when_no_gravity(rng):
    m = make_single_link(gravity=(0, 0, 0))
    for _ in range(10):
        q = rng.uniform(-3, 3, 1)
        assert np.allclose(chain.gravity_torques(m, q), 0.0)
        assert chain.potential_energy(m, q) == 0.0


def test_id_equals_mass_matrix_composition(model, rng):
    for _ in range(20):
        q = random_q(model, rng)
        qd = rng.uniform(-2, 2, 6)
        qdd = rng.uniform(-5, 5, 6)
        tau = chain.inverse_dynamics(model, JointState(q, qd, qdd))
        M = chain.mass_matrix(model, q)
        bias = chain.inverse_dynamics(model, JointState(q, qd, np.zeros(6)))
        assert np.allclose(tau, M @ qdd + bias, rtol=1e-9, atol=1e-10)


def test_id_requires_qdd(model):
    with pytest.raises(ContractError):
        chain.inverse_dynamics(model, JointState(np.zeros(6), np.zeros(6)))


# ---- mass matrix ----

def test_single_link_planar_mass_matrix():
    izz, m_kg, r = 2e-3, 1.3, 0.4
    m = make_single_link(axis=(0, 0, 1), com=(r, 0, 0), mass=m_kg,
                         inertia_diag=(1e-3, 1e-3, izz))
    M = chain.mass_matrix(m, np.zeros(1))
    assert M[0, 0] == pytest.approx(izz + m_kg * r * r, rel=1e-12)


def test_mass_matrix_symmetric_and_spd(model, rng):
    for _ in range(50):
        q = random_q(model, rng)
        M = chain.mass_matrix(model, q)
        scale = np.max(np.abs(M))
        assert np.max(np.abs(M - M.T)) <= 1e-10 * scale
        np.linalg.cholesky(M)  # raises if not positive definite


def test_mass_matrix_unit_acceleration_columns(model, rng):
    # column j of M equals ID(q, 0, e_j) minus the gravity load
    for _ in range(10):
        q = random_q(model, rng)
        M = chain.mass_matrix(model, q)
        g = chain.gravity_torques(model, q)
        for j in range(6):
            e = np.zeros(6); e[j] = 1.0
            col = chain.inverse_dynamics(model, JointState(q, np.zeros(6), e)) - g
            assert np.allclose(M[:, j], col, rtol=1e-9, atol=1e-12)


# ---- forward dynamics ----

def test_fd_gravity_cancellation(model):
    q = np.array([0.3, -0.5, 0.4, 0.2, -0.3, 0.1])
    tau = chain.gravity_torques(model, q)
    qdd = chain.forward_dynamics(model, JointState(q, np.zeros(6)), tau)
    assert np.max(np.abs(qdd)) < 1e-10


def test_id_fd_round_trip(model, rng):
    for _ in range(200):
        q = random_q(model, rng)
        qd = rng.uniform(-2, 2, 6)
        tau = rng.uniform(-10, 10, 6)
        armature = rng.uniform(0, 0.3, 6)
        qdd = chain.forward_dynamics(model, JointState(q, qd), tau, armature)
        tau_back = chain.inverse_dynamics(model, JointState(q, qd, qdd)) + armature * qdd
        assert np.max(np.abs(tau_back - tau)) <= 1e-8 * (1 + np.linalg.norm(tau))


def test_fd_large_armature_freezes_motion(model):
    q = np.zeros(6)
    qdd = chain.forward_dynamics(model, JointState(q, np.zeros(6)),
                                 np.ones(6), np.full(6, 1e6))
    assert np.max(np.abs(qdd)) < 1e-4


def test_fd_rejects_negative_armature(model):
    with pytest.raises(ContractError):
        chain.forward_dynamics(model, JointState.zeros(6), np.zeros(6), -np.ones(6))


# ---- energies ----

def test_kinetic_energy_zero_at_rest(model, rng):
    q = random_q(model, rng)
    assert chain.kinetic_energy(model, JointState(q, np.zeros(6))) == 0.0


def test_kinetic_energy_quadratic_form(model, rng):
    q = random_q(model, rng)
    qd = rng.uniform(-1, 1, 6)
    T = chain.kinetic_energy(model, JointState(q, qd))
    M = chain.mass_matrix(model, q)
    assert T == pytest.approx(0.5 * qd @ M @ qd, rel=1e-12)
    assert chain.kinetic_energy(model, JointState(q, 2 * qd)) == pytest.approx(4 * T, rel=1e-9)


# ---- point jacobian ----

def test_point_jacobian_distal_columns_zero(model, rng):
    q = random_q(model, rng)
    J = chain.point_jacobian(model, q, 0, np.array([0.0, 0.0, 0.05]))
    assert np.allclose(J[:, 1:], 0.0)


def test_point_jacobian_matches_fd(model, rng):
    h = 1e-6
    for _ in range(20):
        q = random_q(model, rng)
        link = int(rng.integers(0, 6))
        point = rng.uniform(-0.1, 0.1, 3)
        J = chain.point_jacobian(model, q, link, point)
        for j in range(6):
            qp = q.copy(); qp[j] += h
            qm = q.copy(); qm[j] -= h
            col = (point_pos(model, qp, link, point) - point_pos(model, qm, link, point)) / (2 * h)
            assert np.max(np.abs(J[:, j] - col)) < 1e-5


def test_point_jacobian_planar_column_norm():
    r = 0.37
    m = make_single_link(axis=(0, 0, 1))
    J = chain.point_jacobian(m, np.array([0.4]), 0, np.array([r, 0.0, 0.0]))
    assert np.linalg.norm(J[:, 0]) == pytest.approx(r, rel=1e-12)


def test_point_jacobian_bad_link(model):
    with pytest.raises(ContractError):
        chain.point_jacobian(model, np.zeros(6), 6, np.zeros(3))


# ---- model file format ----

def valid_model_dict(model):
    return model.to_dict()


def test_model_round_trip(model, tmp_path):
    path = tmp_path / "m.json"
    model.save(path)
    again = ChainModel.load(path)
    assert again.to_dict() == model.to_dict()
    assert again.content_hash() == model.content_hash()


def test_model_rejects_unknown_fields(model, tmp_path):
    d = valid_model_dict(model)
    d["extra"] = 1
    with pytest.raises(ModelFormatError, match="unknown"):
        ChainModel.from_dict(d)
    d = valid_model_dict(model)
    d["links"][0]["surprise"] = True
    with pytest.raises(ModelFormatError, match="unknown"):
        ChainModel.from_dict(d)


def test_model_rejects_bad_version(model):
    d = valid_model_dict(model)
    d["version"] = 2
    with pytest.raises(ModelFormatError, match="version"):
        ChainModel.from_dict(d)


def test_model_quaternion_policy(model):
    d = valid_model_dict(model)
    # small drift: accepted and renormalized
    d["links"][0]["joint_origin"]["quat_wxyz"] = [1.0 + 5e-7, 0.0, 0.0, 0.0]
    m = ChainModel.from_dict(d)
    assert np.allclose(m.links[0].origin_R, np.eye(3), atol=1e-6)
    # far from unit: rejected
    d["links"][0]["joint_origin"]["quat_wxyz"] = [1.1, 0.0, 0.0, 0.0]
    with pytest.raises(ModelFormatError, match="quaternion"):
        ChainModel.from_dict(d)


def test_model_rejects_bad_inertia(model):
    d = valid_model_dict(model)
    d["links"][2]["inertia_6"] = [1e-3, 1e-3, -1e-3, 0, 0, 0]
    with pytest.raises(ModelFormatError, match="positive definite"):
        ChainModel.from_dict(d)


def test_model_rejects_bad_limits(model):
    d = valid_model_dict(model)
    d["links"][1]["limits"] = [1.0, 1.0]
    with pytest.raises(ModelFormatError, match="limits"):
        ChainModel.from_dict(d)


def test_model_rejects_nonpositive_mass():
    with pytest.raises(ModelFormatError, match="mass"):
        make_single_link(mass=0.0)


def test_model_file_with_invalid_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ModelFormatError, match="JSON"):
        ChainModel.load(p)


def test_link_values_are_frozen(model):
    with pytest.raises(ValueError):
        model.links[0].com[0] = 1.0
