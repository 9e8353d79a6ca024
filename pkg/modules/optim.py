from typing import Any, Dict, List, Sequence

import numpy as np

from modules.diffcore import Tensor
from modules.errors import ConfigError


class SGD:
    """Fixed-step update theta <- theta + lr * grad (ascent) or minus (descent)."""

    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = float(lr)

    def step(self, grads: Sequence[np.ndarray], ascend: bool = False):
        sign = 1.0 if ascend else -1.0
        for p, g in zip(self.params, grads):
            p.data += sign * self.lr * np.asarray(g)

    def state_dict(self) -> Dict[str, Any]:
        return {"kind": "sgd", "lr": self.lr}

    def load_state_dict(self, state: Dict[str, Any]):
        self.lr = float(state.get("lr", self.lr))


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: List[np.ndarray] = [np.zeros_like(p.data) for p in self.params]
        self.v: List[np.ndarray] = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray], ascend: bool = False):
        self.t += 1
        sign = 1.0 if ascend else -1.0
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.asarray(g)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            m_hat = m / correction1
            v_hat = v / correction2
            p.data += sign * self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> Dict[str, Any]:
        return {
            "kind": "adam",
            "lr": self.lr,
            "t": self.t,
            "m": [a.ravel().tolist() for a in self.m],
            "v": [a.ravel().tolist() for a in self.v],
        }

    def load_state_dict(self, state: Dict[str, Any]):
        self.lr = float(state.get("lr", self.lr))
        self.t = int(state["t"])
        self.m = [np.asarray(a, dtype=np.float64).reshape(p.shape) for a, p in zip(state["m"], self.params)]
        self.v = [np.asarray(a, dtype=np.float64).reshape(p.shape) for a, p in zip(state["v"], self.params)]


def make_optimizer(kind: str, params: Sequence[Tensor], lr: float):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ConfigError(f"unknown optimizer '{kind}' (expected 'adam' or 'sgd')")
