"""Diagonal-Gaussian policy and value heads over diffcore networks."""

import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules.diffcore import (
    Layer, Tensor, as_tensor, clip, exp, flatten_params, init_mlp, layer_params,
    mlp_forward, param_shapes, parameter, reshape, square, sum_, tanh, unflatten_params,
)
from modules.errors import CheckpointError, ContractError

logger = logging.getLogger(__name__)

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
SHARING_MODES = ("disjoint", "shared")
CHECKPOINT_FORMAT = "polgrad-checkpoint"
CHECKPOINT_VERSION = 1

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class DiagonalGaussian:
    mean: Tensor
    log_std: Tensor

    @classmethod
    def from_arrays(cls, mean, log_std) -> "DiagonalGaussian":
        return cls(as_tensor(mean), clip(as_tensor(log_std), LOG_STD_MIN, LOG_STD_MAX))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def params_array(self) -> np.ndarray:
        """Mean and log_std side by side, (..., 2M); the layout stored in rollouts."""
        log_std = np.broadcast_to(self.log_std.data, self.mean.shape)
        return np.concatenate([self.mean.data, log_std], axis=-1)

    @classmethod
    def from_params_array(cls, params: np.ndarray) -> "DiagonalGaussian":
        params = np.asarray(params, dtype=np.float64)
        m = params.shape[-1] // 2
        return cls(Tensor(params[..., :m]), Tensor(params[..., m:]))


class PolicyValueNet:
    """Actor mean network, state-independent log_std, and critic network.

    In ``shared`` mode a tanh trunk feeds both heads and its parameters appear
    once in ``parameters()``.
    """

    def __init__(self, obs_dim: int, act_dim: int, hidden: Sequence[int] = (64, 64),
                 sharing: str = "disjoint", rng: Optional[np.random.Generator] = None,
                 init_log_std: float = 0.0):
        if sharing not in SHARING_MODES:
            raise ContractError(f"sharing must be one of {SHARING_MODES}, got '{sharing}'")
        if sharing == "shared" and not hidden:
            raise ContractError("shared-trunk mode needs at least one hidden layer")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.sharing = sharing

        if sharing == "disjoint":
            self.trunk: List[Layer] = []
            self.pi_layers = init_mlp([obs_dim, *self.hidden, act_dim], rng, final_std=0.01)
            self.vf_layers = init_mlp([obs_dim, *self.hidden, 1], rng, final_std=1.0)
        else:
            self.trunk = init_mlp([obs_dim, *self.hidden], rng, final_std=1.0)
            self.pi_layers = init_mlp([self.hidden[-1], act_dim], rng, final_std=0.01)
            self.vf_layers = init_mlp([self.hidden[-1], 1], rng, final_std=1.0)
        self.log_std = parameter(np.full(act_dim, float(init_log_std)))

    # parameter groups

    def policy_params(self) -> List[Tensor]:
        return layer_params(self.trunk) + layer_params(self.pi_layers) + [self.log_std]

    def value_params(self) -> List[Tensor]:
        return layer_params(self.trunk) + layer_params(self.vf_layers)

    def value_head_params(self) -> List[Tensor]:
        return layer_params(self.vf_layers)

    def parameters(self) -> List[Tensor]:
        return (layer_params(self.trunk) + layer_params(self.pi_layers) + [self.log_std]
                + layer_params(self.vf_layers))

    def named_layers(self) -> List[Tuple[str, Layer]]:
        named = [(f"trunk{i}", layer) for i, layer in enumerate(self.trunk)]
        named += [(f"pi{i}", layer) for i, layer in enumerate(self.pi_layers)]
        named += [(f"vf{i}", layer) for i, layer in enumerate(self.vf_layers)]
        return named

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    # forward passes

    def _check_obs(self, obs) -> Tensor:
        obs = as_tensor(obs)
        if obs.ndim not in (1, 2) or obs.shape[-1] != self.obs_dim:
            raise ContractError(f"observation width {obs.shape[-1] if obs.ndim else 0} "
                                f"does not match network input {self.obs_dim}")
        return obs

    def _features(self, obs: Tensor, trace) -> Tensor:
        if not self.trunk:
            return obs
        return tanh(mlp_forward(self.trunk, obs, trace=trace))

    def _dist(self, features: Tensor, trace) -> DiagonalGaussian:
        mean = mlp_forward(self.pi_layers, features, trace=trace)
        return DiagonalGaussian(mean, clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))

    def _value(self, features: Tensor, trace) -> Tensor:
        out = mlp_forward(self.vf_layers, features, trace=trace)
        return reshape(out, out.shape[:-1])

    def policy(self, obs, trace=None) -> DiagonalGaussian:
        obs = self._check_obs(obs)
        return self._dist(self._features(obs, trace), trace)

    def value(self, obs, trace=None) -> Tensor:
        obs = self._check_obs(obs)
        return self._value(self._features(obs, trace), trace)

    def forward(self, obs, trace=None) -> Tuple[DiagonalGaussian, Tensor]:
        """Distribution and value from one pass; the trunk is evaluated once."""
        obs = self._check_obs(obs)
        if self.trunk:
            features = self._features(obs, trace)
            return self._dist(features, trace), self._value(features, trace)
        return self._dist(obs, trace), self._value(obs, trace)

    # flat views

    def get_flat(self, params: Optional[Sequence[Tensor]] = None) -> np.ndarray:
        return flatten_params(self.parameters() if params is None else params)

    def set_flat(self, flat, params: Optional[Sequence[Tensor]] = None):
        params = self.parameters() if params is None else list(params)
        for p, value in zip(params, unflatten_params(flat, param_shapes(params))):
            p.data[...] = value


def policy_forward(net: PolicyValueNet, obs) -> DiagonalGaussian:
    return net.policy(obs)


def value_forward(net: PolicyValueNet, obs) -> Tensor:
    return net.value(obs)


def sample(dist: DiagonalGaussian, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal(dist.mean.shape)
    return dist.mean.data + np.exp(dist.log_std.data) * z


def log_prob(dist: DiagonalGaussian, action) -> Tensor:
    action = as_tensor(action)
    if action.shape[-1] != dist.dim:
        raise ContractError(f"action has {action.shape[-1]} dimensions, distribution has {dist.dim}")
    z = (action - dist.mean) * exp(-dist.log_std)
    return (-0.5 * sum_(square(z), axis=-1) - sum_(dist.log_std, axis=-1)) - 0.5 * dist.dim * _LOG_2PI


def kl(old: DiagonalGaussian, new: DiagonalGaussian) -> Tensor:
    """KL(old || new) per state, closed form for diagonal Gaussians."""
    if old.dim != new.dim:
        raise ContractError(f"distributions differ in dimension: {old.dim} vs {new.dim}")
    variance_ratio = exp(2.0 * (old.log_std - new.log_std))
    mean_term = square(old.mean - new.mean) * exp(-2.0 * new.log_std)
    per_dim = (new.log_std - old.log_std) + 0.5 * ((variance_ratio + mean_term) - 1.0)
    return sum_(per_dim, axis=-1)


def entropy(dist: DiagonalGaussian) -> Tensor:
    return sum_(dist.log_std, axis=-1) + 0.5 * dist.dim * (1.0 + _LOG_2PI)


# checkpoint container

def net_to_dict(net: PolicyValueNet) -> Dict[str, Any]:
    params = net.parameters()
    return {
        "obs_dim": net.obs_dim,
        "act_dim": net.act_dim,
        "hidden": list(net.hidden),
        "activation": "tanh",
        "sharing": net.sharing,
        "shapes": [list(s) for s in param_shapes(params)],
        "values": flatten_params(params).tolist(),
    }


def net_from_dict(data: Dict[str, Any]) -> PolicyValueNet:
    try:
        net = PolicyValueNet(data["obs_dim"], data["act_dim"], hidden=data["hidden"], sharing=data["sharing"])
        expected = [list(s) for s in param_shapes(net.parameters())]
        if expected != [list(s) for s in data["shapes"]]:
            raise CheckpointError(f"checkpoint shapes {data['shapes']} do not match architecture {expected}")
        net.set_flat(np.asarray(data["values"], dtype=np.float64))
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing field {e}") from e
    except ContractError as e:
        raise CheckpointError(f"checkpoint does not describe a valid network: {e}") from e
    return net


def save_checkpoint(path: str, net: PolicyValueNet, metadata: Optional[Dict[str, Any]] = None,
                    state: Optional[Dict[str, Any]] = None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "net": net_to_dict(net),
        "metadata": metadata or {},
        "state": state or {},
    }
    tmp_path = f"{path}.tmp"
    try:
        with open(tmp_path, "w", encoding="utf-8") as f:
            json.dump(payload, f)
        os.replace(tmp_path, path)
    except OSError as e:
        raise CheckpointError(f"could not write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint to {path}")


def load_checkpoint(path: str) -> Tuple[PolicyValueNet, Dict[str, Any], Dict[str, Any]]:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found at {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {e}") from e

    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a polgrad checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has unsupported checkpoint version {payload.get('version')}")

    net = net_from_dict(payload.get("net", {}))
    logger.info(f"Loaded checkpoint from {path} ({net.num_params()} parameters)")
    return net, payload.get("metadata", {}), payload.get("state", {})
