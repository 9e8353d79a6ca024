"""Serial-chain arm geometry, quaternion forward kinematics and capsule collision."""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from modules.errors import ConfigError

logger = logging.getLogger(__name__)

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class Pose:
    position: np.ndarray
    orientation: np.ndarray  # unit quaternion (w, x, y, z)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.orientation = quat_normalize(np.asarray(self.orientation, dtype=np.float64).reshape(4))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])


@dataclass
class ArmModel:
    """Joint i rotates about ``axes[i]`` and is followed by translation ``links[i]``
    expressed in the rotated frame. Link i is the capsule from joint i to joint i+1.
    """

    axes: np.ndarray
    links: np.ndarray
    limits: np.ndarray
    link_radii: np.ndarray
    base_position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    base_orientation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    table_height: Optional[float] = None
    name: str = "arm"

    def __post_init__(self):
        self.axes = np.asarray(self.axes, dtype=np.float64).reshape(-1, 3)
        self.links = np.asarray(self.links, dtype=np.float64).reshape(-1, 3)
        self.limits = np.asarray(self.limits, dtype=np.float64).reshape(-1, 2)
        self.link_radii = np.asarray(self.link_radii, dtype=np.float64).reshape(-1)
        self.base_position = np.asarray(self.base_position, dtype=np.float64).reshape(3)
        self.base_orientation = quat_normalize(np.asarray(self.base_orientation, dtype=np.float64))

        m = self.axes.shape[0]
        if m < 1:
            raise ConfigError(f"arm '{self.name}' needs at least one joint")
        if not (self.links.shape[0] == self.limits.shape[0] == self.link_radii.shape[0] == m):
            raise ConfigError(f"arm '{self.name}': axes, links, limits and radii must have {m} rows")
        norms = np.linalg.norm(self.axes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ConfigError(f"arm '{self.name}': joint axes must be unit vectors, norms {norms.tolist()}")
        if np.any(self.limits[:, 0] >= self.limits[:, 1]):
            raise ConfigError(f"arm '{self.name}': every joint needs low < high limits")

    @property
    def num_joints(self) -> int:
        return self.axes.shape[0]

    @property
    def reach(self) -> float:
        return float(np.linalg.norm(self.links, axis=1).sum())


def load_arm_from_json(file_path: str) -> ArmModel:
    if not os.path.exists(file_path):
        raise ConfigError(f"arm config not found at {file_path}")

    logger.info(f"Loading arm geometry from {file_path}...")
    try:
        with open(file_path, "r", encoding="utf-8") as f:
            data: Dict[str, Any] = json.load(f)
        joints = data["joints"]
        axes = [np.asarray(j["axis"], dtype=np.float64) for j in joints]
        model = ArmModel(
            axes=[a / np.linalg.norm(a) for a in axes],
            links=[j["link"] for j in joints],
            limits=[j["limits"] for j in joints],
            link_radii=[j.get("radius", 0.0) for j in joints],
            base_position=data.get("base", {}).get("position", [0.0, 0.0, 0.0]),
            base_orientation=data.get("base", {}).get("orientation", IDENTITY_QUAT.tolist()),
            table_height=data.get("table_height"),
            name=data.get("name", os.path.splitext(os.path.basename(file_path))[0]),
        )
    except json.JSONDecodeError as e:
        raise ConfigError(f"failed to decode arm config {file_path}: {e}") from e
    except KeyError as e:
        raise ConfigError(f"arm config {file_path} is missing field {e}") from e

    logger.info(f"Loaded arm '{model.name}' with {model.num_joints} joints, reach {model.reach:.3f} m")
    return model


# quaternions (w, x, y, z)

def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    half = 0.5 * angle
    s = np.sin(half)
    return np.array([np.cos(half), axis[0] * s, axis[1] * s, axis[2] * s])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    w, u = q[0], q[1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q)


def clamp_joints(model: ArmModel, joints: np.ndarray) -> np.ndarray:
    joints = np.asarray(joints, dtype=np.float64).reshape(model.num_joints)
    clamped = np.clip(joints, model.limits[:, 0], model.limits[:, 1])
    if not np.array_equal(clamped, joints):
        logger.warning(f"Joint angles {joints.tolist()} outside limits of '{model.name}'; clamped")
    return clamped


def joint_positions(model: ArmModel, joints: np.ndarray) -> List[np.ndarray]:
    """Origins of every joint followed by the end-effector position (M+1 points)."""
    points, _ = _chain(model, clamp_joints(model, joints))
    return points


def _chain(model: ArmModel, joints: np.ndarray):
    p = model.base_position.copy()
    q = model.base_orientation.copy()
    points = [p.copy()]
    for axis, link, angle in zip(model.axes, model.links, joints):
        q = quat_mul(q, quat_from_axis_angle(axis, angle))
        p = p + quat_rotate(q, link)
        points.append(p.copy())
    return points, quat_normalize(q)


def forward_kinematics(model: ArmModel, joints: np.ndarray) -> Pose:
    points, q = _chain(model, clamp_joints(model, joints))
    return Pose(points[-1], q)


def segment_distance(p1: np.ndarray, q1: np.ndarray, p2: np.ndarray, q2: np.ndarray) -> float:
    """Shortest distance between segments p1-q1 and p2-q2."""
    d1, d2, r = q1 - p1, q2 - p2, p1 - p2
    a, e, f = d1 @ d1, d2 @ d2, d2 @ r
    eps = 1e-12
    if a <= eps and e <= eps:
        return float(np.linalg.norm(r))
    if a <= eps:
        s, t = 0.0, float(np.clip(f / e, 0.0, 1.0))
    else:
        c = d1 @ r
        if e <= eps:
            s, t = float(np.clip(-c / a, 0.0, 1.0)), 0.0
        else:
            b = d1 @ d2
            denom = a * e - b * b
            s = float(np.clip((b * f - c * e) / denom, 0.0, 1.0)) if denom > eps else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                s, t = float(np.clip(-c / a, 0.0, 1.0)), 0.0
            elif t > 1.0:
                s, t = float(np.clip((b - c) / a, 0.0, 1.0)), 1.0
    closest1 = p1 + d1 * s
    closest2 = p2 + d2 * t
    return float(np.linalg.norm(closest1 - closest2))


def collision_check(model: ArmModel, joints: np.ndarray) -> bool:
    """Link capsules against the table plane and against non-adjacent links.

    Link 0 is mounted on the table and is exempt from the plane test.
    """
    points, _ = _chain(model, clamp_joints(model, joints))
    radii = model.link_radii
    m = model.num_joints

    if model.table_height is not None:
        for i in range(1, m):
            lowest = min(points[i][2], points[i + 1][2]) - radii[i]
            if lowest < model.table_height:
                return True

    for i in range(m):
        for j in range(i + 2, m):
            gap = segment_distance(points[i], points[i + 1], points[j], points[j + 1])
            if gap < radii[i] + radii[j]:
                return True
    return False
