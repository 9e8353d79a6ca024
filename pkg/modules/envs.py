"""Kinematic reacher environments mirroring the four MARA reward variants.

Reward forms (substitutes for the simulator's own):
    Reach                 -|p - p*|
    ReachOrient           -|p - p*| - c_o (1 - |<q, q*>|)
    ReachCollision        Reach - c_c on collision, episode ends on collision
    ReachCollisionOrient  both of the above
"""

import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from modules.errors import ConfigError, ContractError, EnvironmentFault
from modules.kinematics import (
    ArmModel, Pose, collision_check, forward_kinematics, load_arm_from_json,
)

logger = logging.getLogger(__name__)

VARIANTS = ("Reach", "ReachOrient", "ReachCollision", "ReachCollisionOrient")

DEFAULT_MAX_EPISODE_STEPS = 512
DEFAULT_ACTION_BOUND = 0.1
DEFAULT_ORIENT_COEF = 0.1
DEFAULT_COLLISION_COEF = 1.0

MARA_TARGET = Pose([-0.40028, 0.095615, 0.72466], [0.0, 0.7071068, 0.7071068, 0.0])
PLANAR_TARGET = Pose([0.8, 1.2, 0.0], [1.0, 0.0, 0.0, 0.0])

_ARMS_DIR = os.path.join(os.path.dirname(__file__), "..", "data", "arms")

ENV_REGISTRY: Dict[str, Dict[str, Any]] = {
    "Reach2D-v0": {"arm": "planar2.json", "variant": "Reach", "target": PLANAR_TARGET},
    "Reach6D-v0": {"arm": "mara6.json", "variant": "Reach", "target": MARA_TARGET},
    "ReachOrient6D-v0": {"arm": "mara6.json", "variant": "ReachOrient", "target": MARA_TARGET},
    "ReachCollision6D-v0": {"arm": "mara6.json", "variant": "ReachCollision", "target": MARA_TARGET},
    "ReachCollisionOrient6D-v0": {"arm": "mara6.json", "variant": "ReachCollisionOrient", "target": MARA_TARGET},
}


@dataclass
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    max_episode_steps: int
    variant: str
    target: Pose

    @property
    def variant_id(self) -> int:
        return VARIANTS.index(self.variant)


def has_orientation(variant: str) -> bool:
    return variant in ("ReachOrient", "ReachCollisionOrient")


def has_collision(variant: str) -> bool:
    return variant in ("ReachCollision", "ReachCollisionOrient")


def position_distance(pose: Pose, target: Pose) -> float:
    return float(np.linalg.norm(pose.position - target.position))


def orientation_error(pose: Pose, target: Pose) -> float:
    return float(1.0 - min(1.0, abs(float(pose.orientation @ target.orientation))))


def reward(variant: str, pose: Pose, target: Pose, collision: bool = False,
           orient_coef: float = DEFAULT_ORIENT_COEF, collision_coef: float = DEFAULT_COLLISION_COEF) -> float:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown reward variant '{variant}'")
    r = -position_distance(pose, target)
    if has_orientation(variant):
        r -= orient_coef * orientation_error(pose, target)
    if has_collision(variant) and collision:
        r -= collision_coef
    return r


class ReacherEnv:
    """Joint-delta reacher over an ``ArmModel``; deterministic given its actions."""

    def __init__(self, model: ArmModel, variant: str = "Reach", target: Optional[Pose] = None,
                 max_episode_steps: int = DEFAULT_MAX_EPISODE_STEPS, action_bound: float = DEFAULT_ACTION_BOUND,
                 orient_coef: float = DEFAULT_ORIENT_COEF, collision_coef: float = DEFAULT_COLLISION_COEF,
                 randomize_target: bool = False, name: str = "custom", seed: Optional[int] = None):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown reward variant '{variant}', expected one of {VARIANTS}")
        if max_episode_steps < 1:
            raise ConfigError("max_episode_steps must be at least 1")
        self.model = model
        self.variant = variant
        self.default_target = target if target is not None else forward_kinematics(model, np.zeros(model.num_joints))
        self.target = self.default_target
        self.max_episode_steps = int(max_episode_steps)
        self.action_bound = float(action_bound)
        self.orient_coef = float(orient_coef)
        self.collision_coef = float(collision_coef)
        self.randomize_target = randomize_target
        self.name = name
        self._rng = np.random.default_rng(seed)
        self.joints = np.zeros(model.num_joints)
        self.steps = 0
        self._needs_reset = True

    @property
    def spec(self) -> EnvSpec:
        m = self.model.num_joints
        return EnvSpec(self.name, m + 7, m, self.max_episode_steps, self.variant, self.target)

    def seed(self, seed: Optional[int]):
        self._rng = np.random.default_rng(seed)

    def _sample_target(self, rng: np.random.Generator) -> Pose:
        low, high = self.model.limits[:, 0], self.model.limits[:, 1]
        for _ in range(100):
            joints = rng.uniform(low, high)
            if not (has_collision(self.variant) and collision_check(self.model, joints)):
                return forward_kinematics(self.model, joints)
        return self.default_target

    def observation(self) -> np.ndarray:
        pose = forward_kinematics(self.model, self.joints)
        return np.concatenate([self.joints, pose.position, pose.orientation])

    def reset(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        self.joints = np.zeros(self.model.num_joints)
        self.steps = 0
        self._needs_reset = False
        if self.randomize_target:
            self.target = self._sample_target(rng if rng is not None else self._rng)
        return self.observation()

    def step(self, action) -> Tuple[np.ndarray, float, bool]:
        if self._needs_reset:
            raise EnvironmentFault(f"{self.name}: step called before reset", step_index=self.steps)
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.size != self.model.num_joints:
            raise ContractError(f"{self.name}: action has {action.size} entries, arm has {self.model.num_joints} joints")
        if not np.all(np.isfinite(action)):
            raise EnvironmentFault(f"{self.name}: non-finite action {action.tolist()}", step_index=self.steps)

        delta = np.clip(action, -self.action_bound, self.action_bound)
        self.joints = np.clip(self.joints + delta, self.model.limits[:, 0], self.model.limits[:, 1])
        self.steps += 1

        pose = forward_kinematics(self.model, self.joints)
        collided = has_collision(self.variant) and collision_check(self.model, self.joints)
        r = reward(self.variant, pose, self.target, collided, self.orient_coef, self.collision_coef)
        done = self.steps >= self.max_episode_steps or collided
        if done:
            self._needs_reset = True
        obs = np.concatenate([self.joints, pose.position, pose.orientation])
        return obs, r, done

    def distance_to_target(self) -> float:
        return position_distance(forward_kinematics(self.model, self.joints), self.target)

    def get_state(self) -> Dict[str, Any]:
        return {
            "joints": self.joints.tolist(),
            "steps": self.steps,
            "needs_reset": self._needs_reset,
            "target": self.target.as_array().tolist(),
            "rng": self._rng.bit_generator.state,
        }

    def set_state(self, state: Dict[str, Any]):
        self.joints = np.asarray(state["joints"], dtype=np.float64)
        self.steps = int(state["steps"])
        self._needs_reset = bool(state["needs_reset"])
        target = np.asarray(state["target"], dtype=np.float64)
        self.target = Pose(target[:3], target[3:])
        self._rng.bit_generator.state = state["rng"]

    def close(self):
        pass


def make_env(name: str, max_episode_steps: int = DEFAULT_MAX_EPISODE_STEPS, randomize_target: bool = False,
             arm_path: Optional[str] = None, target: Optional[Pose] = None, **kwargs) -> ReacherEnv:
    if name not in ENV_REGISTRY:
        raise ConfigError(f"unknown environment '{name}', expected one of {sorted(ENV_REGISTRY)}")
    entry = ENV_REGISTRY[name]
    model = load_arm_from_json(arm_path or os.path.join(_ARMS_DIR, entry["arm"]))
    return ReacherEnv(model, variant=entry["variant"], target=target or entry["target"],
                      max_episode_steps=max_episode_steps, randomize_target=randomize_target,
                      name=name, **kwargs)
