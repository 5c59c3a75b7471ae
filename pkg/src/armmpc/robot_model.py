"""Serial-chain robot description: loading, validation, payload composition.

Models are plain JSON documents (``*.robot.json``) with one robot per file.
All angles are radians, lengths meters, ``rpy`` is an intrinsic XYZ Euler
rotation. Link inertia tensors are given as the 6 upper-triangular entries
``[ixx, ixy, ixz, iyy, iyz, izz]`` about the link center of mass.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

REVOLUTE = "revolute"
PRISMATIC = "prismatic"

DEFAULT_GRAVITY = (0.0, 0.0, -9.81)


class ModelError(ValueError):
    """A robot description violates a model invariant."""


class ModelParseError(ModelError):
    """A robot description file is malformed."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


def _vec3(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.shape != (3,):
        raise ModelError(f"{name} must be a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ModelError(f"{name} has non-finite entries")
    return _frozen(a)


def rpy_to_matrix(rpy) -> np.ndarray:
    """Rotation matrix for intrinsic XYZ Euler angles (roll, pitch, yaw)."""
    r, p, y = float(rpy[0]), float(rpy[1]), float(rpy[2])
    cr, sr = math.cos(r), math.sin(r)
    cp, sp = math.cos(p), math.sin(p)
    cy, sy = math.cos(y), math.sin(y)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rx @ ry @ rz


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation; maps child-frame points into the parent frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=float)
        if rot.shape != (3, 3):
            raise ModelError(f"rotation must be 3x3, got {rot.shape}")
        if np.linalg.norm(rot @ rot.T - np.eye(3)) > 1e-9:
            raise ModelError("rotation matrix is not orthonormal")
        object.__setattr__(self, "rotation", _frozen(rot))
        object.__setattr__(self, "translation", _vec3(self.translation, "translation"))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_xyz_rpy(xyz=(0.0, 0.0, 0.0), rpy=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return RigidTransform(rpy_to_matrix(rpy), np.asarray(xyz, dtype=float))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, point: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.translation


@dataclass(frozen=True, eq=False)
class JointSpec:
    kind: str
    axis: np.ndarray
    parent_transform: RigidTransform
    q_limits: tuple[float, float]
    v_limit: float
    u_limit: float

    def __post_init__(self):
        if self.kind not in (REVOLUTE, PRISMATIC):
            raise ModelError(f"unknown joint kind {self.kind!r}")
        axis = _vec3(self.axis, "axis")
        if abs(np.linalg.norm(axis) - 1.0) > 1e-12:
            raise ModelError("joint axis must have unit norm")
        object.__setattr__(self, "axis", axis)
        lo, hi = float(self.q_limits[0]), float(self.q_limits[1])
        if not lo < hi:
            raise ModelError(f"q_limits must satisfy q_min < q_max, got [{lo}, {hi}]")
        object.__setattr__(self, "q_limits", (lo, hi))
        if not self.v_limit > 0:
            raise ModelError("v_limit must be positive")
        if not self.u_limit > 0:
            raise ModelError("u_limit must be positive")


@dataclass(frozen=True, eq=False)
class LinkInertia:
    mass: float
    com: np.ndarray
    inertia_tensor: np.ndarray

    def __post_init__(self):
        if not self.mass > 0:
            raise ModelError("link mass must be positive")
        object.__setattr__(self, "com", _vec3(self.com, "com"))
        tensor = np.asarray(self.inertia_tensor, dtype=float)
        if tensor.shape != (3, 3):
            raise ModelError(f"inertia_tensor must be 3x3, got {tensor.shape}")
        if np.linalg.norm(tensor - tensor.T) > 1e-12 * (1 + np.abs(tensor).max()):
            raise ModelError("inertia_tensor must be symmetric")
        eig = np.linalg.eigvalsh(0.5 * (tensor + tensor.T))
        if eig[0] <= 0:
            raise ModelError("inertia_tensor must be positive definite")
        # principal moments of a physical rigid body satisfy the triangle inequalities
        if eig[0] + eig[1] < eig[2] * (1 - 1e-9):
            raise ModelError("inertia_tensor violates the triangle inequality")
        object.__setattr__(self, "inertia_tensor", _frozen(tensor))


@dataclass(frozen=True, eq=False)
class PayloadSpec:
    mass: float
    com_offset: np.ndarray
    inertia_tensor: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        if self.mass < 0:
            raise ModelError("payload mass must be nonnegative")
        object.__setattr__(self, "com_offset", _vec3(self.com_offset, "com_offset"))
        tensor = np.asarray(self.inertia_tensor, dtype=float)
        if tensor.shape != (3, 3):
            raise ModelError(f"payload inertia must be 3x3, got {tensor.shape}")
        if np.linalg.norm(tensor - tensor.T) > 1e-12 * (1 + np.abs(tensor).max()):
            raise ModelError("payload inertia must be symmetric")
        if np.linalg.eigvalsh(0.5 * (tensor + tensor.T))[0] < -1e-12:
            raise ModelError("payload inertia must be positive semidefinite")
        object.__setattr__(self, "inertia_tensor", _frozen(tensor))


@dataclass(frozen=True, eq=False)
class JointLimits:
    """Per-joint bounds collected into arrays for controller consumption."""

    q_min: np.ndarray
    q_max: np.ndarray
    v_max: np.ndarray
    u_max: np.ndarray

    @property
    def v_min(self) -> np.ndarray:
        return -self.v_max

    @property
    def u_min(self) -> np.ndarray:
        return -self.u_max


@dataclass(frozen=True, eq=False)
class RobotModel:
    """Immutable serial-chain description. Safe to share across threads."""

    joints: tuple[JointSpec, ...]
    links: tuple[LinkInertia, ...]
    gravity: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_GRAVITY))
    ee_transform: RigidTransform = field(default_factory=RigidTransform.identity)
    name: str = "robot"

    def __post_init__(self):
        object.__setattr__(self, "joints", tuple(self.joints))
        object.__setattr__(self, "links", tuple(self.links))
        if len(self.joints) < 1:
            raise ModelError("model needs at least one joint")
        if len(self.links) != len(self.joints):
            raise ModelError(
                f"serial chain needs one link per joint, got {len(self.links)} links "
                f"for {len(self.joints)} joints"
            )
        object.__setattr__(self, "gravity", _vec3(self.gravity, "gravity"))

    @property
    def n(self) -> int:
        return len(self.joints)

    @cached_property
    def limits(self) -> JointLimits:
        return JointLimits(
            q_min=_frozen(np.array([j.q_limits[0] for j in self.joints])),
            q_max=_frozen(np.array([j.q_limits[1] for j in self.joints])),
            v_max=_frozen(np.array([j.v_limit for j in self.joints])),
            u_max=_frozen(np.array([j.u_limit for j in self.joints])),
        )

    def check_q(self, q, name: str = "q") -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape != (self.n,):
            raise ValueError(f"{name} must have shape ({self.n},), got {q.shape}")
        return q


def _parse_inertia_upper(entries) -> np.ndarray:
    if len(entries) != 6:
        raise ModelParseError("inertia must list 6 upper-triangular entries")
    ixx, ixy, ixz, iyy, iyz, izz = (float(e) for e in entries)
    return np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])


def _parse_transform(doc, name: str) -> RigidTransform:
    if doc is None:
        return RigidTransform.identity()
    try:
        return RigidTransform.from_xyz_rpy(doc.get("xyz", (0, 0, 0)), doc.get("rpy", (0, 0, 0)))
    except (TypeError, KeyError) as exc:
        raise ModelParseError(f"bad transform in {name}: {exc}") from exc


def load_model(path) -> RobotModel:
    """Load and validate a ``*.robot.json`` robot description.

    Raises ModelParseError for malformed files and ModelError (with the
    violated invariant named) for invalid models.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ModelParseError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"{path} is not valid JSON: {exc}") from exc
    return model_from_dict(doc, name_hint=path.stem)


def model_from_dict(doc: dict, name_hint: str = "robot") -> RobotModel:
    if not isinstance(doc, dict):
        raise ModelParseError("robot document must be a JSON object")
    try:
        joint_docs = doc["joints"]
        link_docs = doc["links"]
    except KeyError as exc:
        raise ModelParseError(f"missing required key {exc}") from exc

    joints = []
    for i, jd in enumerate(joint_docs):
        try:
            limits = jd["limits"]
            joints.append(
                JointSpec(
                    kind=jd.get("kind", REVOLUTE),
                    axis=np.asarray(jd["axis"], dtype=float),
                    parent_transform=_parse_transform(jd.get("origin"), f"joint {i}"),
                    q_limits=(float(limits["q"][0]), float(limits["q"][1])),
                    v_limit=float(limits["v"]),
                    u_limit=float(limits["u"]),
                )
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ModelParseError(f"joint {i} is malformed: {exc}") from exc

    links = []
    for i, ld in enumerate(link_docs):
        try:
            links.append(
                LinkInertia(
                    mass=float(ld["mass"]),
                    com=np.asarray(ld["com"], dtype=float),
                    inertia_tensor=_parse_inertia_upper(ld["inertia"]),
                )
            )
        except (KeyError, TypeError) as exc:
            raise ModelParseError(f"link {i} is malformed: {exc}") from exc

    return RobotModel(
        joints=tuple(joints),
        links=tuple(links),
        gravity=np.asarray(doc.get("gravity", DEFAULT_GRAVITY), dtype=float),
        ee_transform=_parse_transform(doc.get("ee_transform"), "ee_transform"),
        name=str(doc.get("name", name_hint)),
    )


def _composite_inertia(bodies: list[tuple[float, np.ndarray, np.ndarray]]) -> LinkInertia:
    """Combine (mass, com, inertia-about-com) bodies into one rigid body."""
    total = sum(m for m, _, _ in bodies)
    if total <= 0:
        raise ModelError("composite body must have positive mass")
    com = sum(m * c for m, c, _ in bodies) / total
    tensor = np.zeros((3, 3))
    for m, c, ic in bodies:
        d = c - com
        tensor = tensor + ic + m * (np.dot(d, d) * np.eye(3) - np.outer(d, d))
    return LinkInertia(mass=total, com=com, inertia_tensor=0.5 * (tensor + tensor.T))


def attach_payload(model: RobotModel, payload: PayloadSpec) -> RobotModel:
    """Rigidly compose the payload with the last link (parallel-axis theorem).

    The payload com offset and inertia are expressed in the end-effector
    frame and mapped into the last link frame before composition. A zero
    payload returns the model unchanged.
    """
    if payload.mass == 0.0 and not payload.inertia_tensor.any():
        return model
    last = model.links[-1]
    ee = model.ee_transform
    payload_com = ee.apply(payload.com_offset)
    payload_inertia = ee.rotation @ payload.inertia_tensor @ ee.rotation.T
    combined = _composite_inertia(
        [
            (last.mass, last.com.copy(), last.inertia_tensor.copy()),
            (payload.mass, payload_com, payload_inertia),
        ]
    )
    return RobotModel(
        joints=model.joints,
        links=model.links[:-1] + (combined,),
        gravity=model.gravity,
        ee_transform=model.ee_transform,
        name=model.name,
    )


def detach_payload(model: RobotModel, payload: PayloadSpec) -> RobotModel:
    """Inverse of attach_payload: subtract the same payload from the last link."""
    if payload.mass == 0.0 and not payload.inertia_tensor.any():
        return model
    last = model.links[-1]
    ee = model.ee_transform
    payload_com = ee.apply(payload.com_offset)
    payload_inertia = ee.rotation @ payload.inertia_tensor @ ee.rotation.T
    mass = last.mass - payload.mass
    if mass <= 0:
        raise ModelError("detaching payload would leave nonpositive link mass")
    com = (last.mass * last.com - payload.mass * payload_com) / mass
    tensor = last.inertia_tensor.copy()
    d_pay = payload_com - last.com
    d_link = com - last.com
    # move the composite tensor back: remove payload (about the old composite com),
    # then shift the remainder from the old com to the recovered link com
    tensor = tensor - (
        payload_inertia + payload.mass * (np.dot(d_pay, d_pay) * np.eye(3) - np.outer(d_pay, d_pay))
    )
    tensor = tensor - mass * (np.dot(d_link, d_link) * np.eye(3) - np.outer(d_link, d_link))
    recovered = LinkInertia(mass=mass, com=com, inertia_tensor=0.5 * (tensor + tensor.T))
    return RobotModel(
        joints=model.joints,
        links=model.links[:-1] + (recovered,),
        gravity=model.gravity,
        ee_transform=model.ee_transform,
        name=model.name,
    )
