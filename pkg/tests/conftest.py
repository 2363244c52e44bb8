import numpy as np
import pytest

from desktwin.actuation import ActuatorParams, ArmActuation, GripperModel, default_actuation
from desktwin.chain import ChainModel, LinkSpec, default_model

IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)


def make_single_link(axis=(0.0, 1.0, 0.0), com=(0.5, 0.0, 0.0), mass=1.0,
                     inertia_diag=(1e-3, 1e-3, 2e-3), gravity=(0.0, 0.0, -9.81),
                     limits=(-6.0, 6.0)) -> ChainModel:
    link = LinkSpec(name="only", joint_axis=np.array(axis),
                    origin_xyz=np.zeros(3), origin_quat=np.array(IDENTITY_QUAT),
                    mass=mass, com=np.array(com), inertia=np.diag(inertia_diag),
                    limits=limits, velocity_limit=10.0)
    return ChainModel(links=[link], gravity=np.array(gravity))


def random_q(model: ChainModel, rng: np.random.Generator, margin=0.05) -> np.ndarray:
    pk = model.packed()
    span = pk.hi - pk.lo
    return rng.uniform(pk.lo + margin * span, pk.hi - margin * span)


@pytest.fixture(scope="session")
def model() -> ChainModel:
    return default_model()


@pytest.fixture(scope="session")
def actuation() -> ArmActuation:
    return default_actuation()


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def frictionless(act: ArmActuation) -> ArmActuation:
    joints = [ActuatorParams(kp=j.kp, kv=j.kv, armature=j.armature,
                             friction=0.0, tau_max=j.tau_max)
              for j in act.joints]
    return ArmActuation(joints=joints, gripper=act.gripper)
