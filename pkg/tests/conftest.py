import numpy as np
import pytest

from armmpc import load_bundled_model
from armmpc.robot_model import (
    JointSpec,
    LinkInertia,
    RigidTransform,
    RobotModel,
)

POINT_INERTIA = np.eye(3) * 1e-12


def make_pendulum(mass=1.0, length=1.0, gravity=(0.0, 0.0, -9.81)):
    """1-DOF revolute joint about z at the origin, point mass at x=length.

    With gravity along -z the link swings in the horizontal plane; tests that
    need gravity torque rotate the axis instead.
    """
    joint = JointSpec(
        kind="revolute",
        axis=np.array([0.0, 0.0, 1.0]),
        parent_transform=RigidTransform.identity(),
        q_limits=(-3.14, 3.14),
        v_limit=10.0,
        u_limit=50.0,
    )
    link = LinkInertia(mass=mass, com=np.array([length, 0.0, 0.0]), inertia_tensor=POINT_INERTIA)
    return RobotModel(
        joints=(joint,),
        links=(link,),
        gravity=np.asarray(gravity, dtype=float),
        ee_transform=RigidTransform.from_xyz_rpy(xyz=(length, 0.0, 0.0)),
        name="pendulum",
    )


def make_gravity_pendulum(mass=1.0, length=1.0):
    """1-DOF revolute about -y: link along +x at q=0, positive q lifts the mass."""
    joint = JointSpec(
        kind="revolute",
        axis=np.array([0.0, -1.0, 0.0]),
        parent_transform=RigidTransform.identity(),
        q_limits=(-6.3, 6.3),
        v_limit=20.0,
        u_limit=50.0,
    )
    link = LinkInertia(mass=mass, com=np.array([length, 0.0, 0.0]), inertia_tensor=POINT_INERTIA)
    return RobotModel(
        joints=(joint,),
        links=(link,),
        ee_transform=RigidTransform.from_xyz_rpy(xyz=(length, 0.0, 0.0)),
        name="gravity_pendulum",
    )


def make_planar_2dof(l1=0.5, l2=0.4, m1=2.0, m2=1.0):
    """Two revolute z joints in the x-y plane (no gravity torque about z)."""
    j1 = JointSpec(
        kind="revolute",
        axis=np.array([0.0, 0.0, 1.0]),
        parent_transform=RigidTransform.identity(),
        q_limits=(-3.1, 3.1),
        v_limit=8.0,
        u_limit=80.0,
    )
    j2 = JointSpec(
        kind="revolute",
        axis=np.array([0.0, 0.0, 1.0]),
        parent_transform=RigidTransform.from_xyz_rpy(xyz=(l1, 0.0, 0.0)),
        q_limits=(-3.1, 3.1),
        v_limit=8.0,
        u_limit=40.0,
    )
    links = (
        LinkInertia(mass=m1, com=np.array([l1 / 2, 0.0, 0.0]), inertia_tensor=np.eye(3) * m1 * l1**2 / 12),
        LinkInertia(mass=m2, com=np.array([l2 / 2, 0.0, 0.0]), inertia_tensor=np.eye(3) * m2 * l2**2 / 12),
    )
    return RobotModel(
        joints=(j1, j2),
        links=links,
        gravity=np.zeros(3),
        ee_transform=RigidTransform.from_xyz_rpy(xyz=(l2, 0.0, 0.0)),
        name="planar_2dof",
    )


def make_prismatic_x():
    joint = JointSpec(
        kind="prismatic",
        axis=np.array([1.0, 0.0, 0.0]),
        parent_transform=RigidTransform.identity(),
        q_limits=(-1.0, 1.0),
        v_limit=2.0,
        u_limit=100.0,
    )
    link = LinkInertia(mass=1.5, com=np.zeros(3), inertia_tensor=np.eye(3) * 1e-3)
    return RobotModel(joints=(joint,), links=(link,), name="slider")


@pytest.fixture(scope="session")
def pendulum():
    return make_pendulum()


@pytest.fixture(scope="session")
def gravity_pendulum():
    return make_gravity_pendulum()


@pytest.fixture(scope="session")
def planar_2dof():
    return make_planar_2dof()


@pytest.fixture(scope="session")
def prismatic_x():
    return make_prismatic_x()


@pytest.fixture(scope="session")
def desk_model():
    return load_bundled_model("rs007n")


@pytest.fixture(scope="session")
def desk_model_large():
    return load_bundled_model("rs020n")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_config(model, rng, margin=0.2):
    lo = model.limits.q_min
    hi = model.limits.q_max
    span = hi - lo
    return lo + span * (margin + (1 - 2 * margin) * rng.random(model.n))
