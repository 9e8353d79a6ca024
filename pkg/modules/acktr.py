"""Actor-critic with Kronecker-factored natural gradients.

Each affine layer ``z = h @ W + b`` is handled as one block over the stacked
weight ``[W; b]`` of shape (in+1, out). Its Fisher block is approximated by
A (x) G with A = E[a a'] over bias-augmented inputs and G = E[g g'] over
gradients of the sampled log-likelihood with respect to z. In this layout
the preconditioned gradient is (A + l_A I)^-1 dW (G + l_G I)^-1.

The critic is a Gaussian with unit variance around V(s), so its sampled
Fisher is the Gauss-Newton matrix. log_std has a diagonal Fisher of 2 per
dimension and is preconditioned on its own.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from modules.diffcore import Tape, Tensor, backward, mean, no_record, square, sum_
from modules.errors import ConfigError, NumericalError
from modules.policy import PolicyValueNet, entropy, log_prob, sample
from modules.report import UpdateReport
from modules.rollout import TrajectoryBatch, normalize_advantages
from modules.trpo import mean_kl, surrogate_loss, value_loss

logger = logging.getLogger(__name__)

FISHER_MODES = ("true", "empirical")
LOG_STD_FISHER = 2.0


@dataclass
class KfacLayerState:
    name: str
    dim_a: int
    dim_g: int
    decay: float = 0.99
    A: np.ndarray = None
    G: np.ndarray = None
    count: int = 0
    A_inv: Optional[np.ndarray] = None
    G_inv: Optional[np.ndarray] = None
    staleness: int = 0
    condition: float = float("nan")

    def __post_init__(self):
        if self.A is None:
            self.A = np.zeros((self.dim_a, self.dim_a))
        if self.G is None:
            self.G = np.zeros((self.dim_g, self.dim_g))

    def state_dict(self) -> Dict[str, Any]:
        return {
            "A": self.A.tolist(),
            "G": self.G.tolist(),
            "count": self.count,
            "staleness": self.staleness,
            "A_inv": None if self.A_inv is None else self.A_inv.tolist(),
            "G_inv": None if self.G_inv is None else self.G_inv.tolist(),
            "condition": self.condition,
        }

    def load_state_dict(self, state: Dict[str, Any]):
        self.A = np.asarray(state["A"], dtype=np.float64).reshape(self.dim_a, self.dim_a)
        self.G = np.asarray(state["G"], dtype=np.float64).reshape(self.dim_g, self.dim_g)
        self.count = int(state["count"])
        self.staleness = int(state["staleness"])
        self.A_inv = None if state["A_inv"] is None else np.asarray(state["A_inv"], dtype=np.float64)
        self.G_inv = None if state["G_inv"] is None else np.asarray(state["G_inv"], dtype=np.float64)
        self.condition = float(state.get("condition", float("nan")))


def layer_state(name: str, weight: Tensor, decay: float = 0.99) -> KfacLayerState:
    n_in, n_out = weight.shape
    return KfacLayerState(name, n_in + 1, n_out, decay)


def augment(inputs: np.ndarray) -> np.ndarray:
    """Append the homogeneous coordinate that carries the bias."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    return np.concatenate([inputs, np.ones((inputs.shape[0], 1))], axis=1)


def accumulate_factors(state: KfacLayerState, a: np.ndarray, g: np.ndarray,
                       decay: Optional[float] = None) -> KfacLayerState:
    """Running averages of E[a a'] and E[g g']; the first call takes the batch statistics directly."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    g = np.atleast_2d(np.asarray(g, dtype=np.float64))
    if a.shape[0] != g.shape[0]:
        raise ConfigError(f"layer {state.name}: {a.shape[0]} inputs but {g.shape[0]} output gradients")
    decay = state.decay if decay is None else decay
    batch_a = a.T @ a / a.shape[0]
    batch_g = g.T @ g / g.shape[0]
    if state.count == 0:
        state.A, state.G = batch_a, batch_g
    else:
        state.A = decay * state.A + (1.0 - decay) * batch_a
        state.G = decay * state.G + (1.0 - decay) * batch_g
    # symmetrize against rounding drift
    state.A = 0.5 * (state.A + state.A.T)
    state.G = 0.5 * (state.G + state.G.T)
    state.count += 1
    return state


def factored_damping(state: KfacLayerState, damping: float) -> Tuple[float, float]:
    """Split damping as l_A = sqrt(d) pi and l_G = sqrt(d) / pi, pi = sqrt(mean eig A / mean eig G)."""
    trace_a = np.trace(state.A) / state.dim_a
    trace_g = np.trace(state.G) / state.dim_g
    pi = np.sqrt(trace_a / trace_g) if trace_a > 0 and trace_g > 0 else 1.0
    root = np.sqrt(damping)
    return float(root * pi), float(root / pi)


def _damped_inverse(matrix: np.ndarray, shift: float, label: str) -> Tuple[np.ndarray, np.ndarray]:
    damped = matrix + shift * np.eye(matrix.shape[0])
    try:
        chol = np.linalg.cholesky(damped)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"K-FAC factor {label} is not positive definite after damping {shift:.3g}") from e
    chol_inv = np.linalg.solve(chol, np.eye(matrix.shape[0]))
    return chol_inv.T @ chol_inv, damped


def refresh_inverses(state: KfacLayerState, damping: float) -> KfacLayerState:
    lam_a, lam_g = factored_damping(state, damping)
    state.A_inv, damped_a = _damped_inverse(state.A, lam_a, f"A of layer {state.name}")
    state.G_inv, damped_g = _damped_inverse(state.G, lam_g, f"G of layer {state.name}")
    state.condition = float(max(np.linalg.cond(damped_a), np.linalg.cond(damped_g)))
    state.staleness = 0
    return state


def kfac_step(grad: np.ndarray, state: KfacLayerState, damping: float) -> np.ndarray:
    """(A + l_A I)^-1 grad (G + l_G I)^-1 for a stacked (in+1, out) gradient, using cached inverses."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (state.dim_a, state.dim_g):
        raise ConfigError(f"layer {state.name}: gradient shape {grad.shape}, factors need "
                          f"({state.dim_a}, {state.dim_g})")
    if state.A_inv is None or state.G_inv is None:
        refresh_inverses(state, damping)
    return state.A_inv @ grad @ state.G_inv


def fisher_quadratic(step: np.ndarray, curvature: Union[KfacLayerState, float]) -> float:
    """step' F step with F = A (x) G for a layer block, or a constant diagonal."""
    if isinstance(curvature, KfacLayerState):
        return float(np.sum((curvature.A @ step @ curvature.G) * step))
    return float(curvature * np.sum(np.square(step)))


def trust_region_rescale(steps: Sequence[np.ndarray], curvature: Sequence[Union[KfacLayerState, float]],
                         radius: float, eta_max: float) -> Tuple[List[np.ndarray], float]:
    """eta = min(eta_max, sqrt(2 radius / step' F step)); returns the scaled steps and eta."""
    quad = sum(fisher_quadratic(s, c) for s, c in zip(steps, curvature))
    eta = eta_max if quad <= 0.0 else min(eta_max, float(np.sqrt(2.0 * radius / quad)))
    return [eta * s for s in steps], eta


def gauss_newton_loss(values: Tensor, targets) -> Tensor:
    return 0.5 * mean(square(values - targets))


def critic_gauss_newton_loss(net: PolicyValueNet, batch: TrajectoryBatch, trace=None) -> Tensor:
    """1/2 MSE between V(s) and the returns: the critic as N(V(s), 1)."""
    return gauss_newton_loss(net.value(batch.states, trace=trace), batch.returns)


def actor_objective(dist, batch: TrajectoryBatch, ent_coef: float = 0.0) -> Tensor:
    """mean(log pi(a|s) * A), plus the entropy bonus when ``ent_coef`` is set."""
    objective = mean(log_prob(dist, batch.actions) * batch.advantages)
    if ent_coef:
        objective = objective + ent_coef * mean(entropy(dist))
    return objective


def nstep_returns(rewards, terminals, bootstrap: float, gamma: float, t_max: int,
                  values: Optional[np.ndarray] = None) -> np.ndarray:
    """Backward recursion R <- r + gamma R over segments of ``t_max`` steps.

    A segment starts from 0 after a terminal and from V of the next state
    otherwise; ``values`` supplies V for interior segment ends.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    T = rewards.shape[0]
    if t_max < 1:
        raise ConfigError(f"t_max must be at least 1, got {t_max}")
    if t_max < T and values is None:
        raise ConfigError("values are needed to bootstrap interior segments")
    out = np.zeros(T)
    for start in range(0, T, t_max):
        end = min(start + t_max, T)
        running = float(bootstrap) if end == T else float(values[end])
        for i in reversed(range(start, end)):
            if terminals[i]:
                running = 0.0
            running = rewards[i] + gamma * running
            out[i] = running
    return out


def estimate_nstep(batch: TrajectoryBatch, gamma: float, t_max: int, normalize: bool = False) -> TrajectoryBatch:
    batch.returns = nstep_returns(batch.rewards, batch.terminals, batch.bootstrap_value, gamma, t_max, batch.values)
    advantages = batch.returns - batch.values
    batch.advantages = normalize_advantages(advantages) if normalize else advantages
    return batch


def _stacked(grad_w: np.ndarray, grad_b: np.ndarray) -> np.ndarray:
    return np.vstack([grad_w, grad_b[None, :]])


def acktr_update(net: PolicyValueNet, batch: TrajectoryBatch, config,
                 states: Optional[Dict[str, KfacLayerState]] = None,
                 rng: Optional[np.random.Generator] = None) -> UpdateReport:
    """One K-FAC natural-gradient step for actor and critic.

    Both heads contribute to a single sampled log-likelihood, so shared trunk
    layers get factors of the joint output distribution. In disjoint mode the
    actor and critic steps are rescaled separately.
    """
    if not batch.has_estimates:
        raise ConfigError("acktr_update needs a batch with returns and advantages")
    if config.kfac_fisher not in FISHER_MODES:
        raise ConfigError(f"kfac_fisher must be one of {FISHER_MODES}, got '{config.kfac_fisher}'")
    rng = rng if rng is not None else np.random.default_rng(0)
    named = net.named_layers()
    if states is None:
        states = {}
    for name, (w, _) in named:
        if name not in states:
            states[name] = layer_state(name, w, config.kfac_decay)

    with no_record():
        surrogate_before = surrogate_loss(net, batch).item()
        value_before = value_loss(net, batch.states, batch.returns).item()

    trace: Dict[int, Tuple[Tensor, Tensor]] = {}
    with Tape() as tape:
        dist, value = net.forward(batch.states, trace=trace)
        objective = actor_objective(dist, batch, config.ent_coef)
        critic = gauss_newton_loss(value, batch.returns)
        loss = -objective + config.vf_coef * critic

        with no_record():
            if config.kfac_fisher == "true":
                sampled_actions = sample(dist, rng)
                sampled_values = value.data + rng.standard_normal(value.shape)
            else:
                sampled_actions = batch.actions
                sampled_values = batch.returns
        sampled = -sum_(log_prob(dist, sampled_actions)) + 0.5 * sum_(square(value - sampled_values))

    layer_tensors = [p for _, layer in named for p in layer]
    grads = backward(tape, loss, layer_tensors + [net.log_std])
    preacts = [trace[id(w)][1] for _, (w, _) in named]
    output_grads = backward(tape, sampled, preacts)

    refreshed = False
    for (name, (w, _)), g in zip(named, output_grads):
        state = states[name]
        accumulate_factors(state, augment(trace[id(w)][0].data), g)
        state.staleness += 1
        if state.A_inv is None or state.staleness >= config.kfac_refresh:
            refresh_inverses(state, config.kfac_damping)
            refreshed = True

    steps: Dict[str, np.ndarray] = {}
    for i, (name, _) in enumerate(named):
        steps[name] = kfac_step(_stacked(grads[2 * i], grads[2 * i + 1]), states[name], config.kfac_damping)
    log_std_step = grads[-1] / (LOG_STD_FISHER + config.kfac_damping)

    if net.sharing == "shared":
        groups = {"joint": [name for name, _ in named] + ["log_std"]}
    else:
        groups = {
            "actor": [name for name, _ in named if name.startswith("pi")] + ["log_std"],
            "critic": [name for name, _ in named if name.startswith("vf")],
        }

    etas = {}
    for group, members in groups.items():
        pieces = [log_std_step if m == "log_std" else steps[m] for m in members]
        curvature = [LOG_STD_FISHER if m == "log_std" else states[m] for m in members]
        scaled, etas[group] = trust_region_rescale(pieces, curvature, config.kfac_max_kl, config.kfac_eta_max)
        for m, s in zip(members, scaled):
            if m == "log_std":
                net.log_std.data -= s
            else:
                w, b = dict(named)[m]
                w.data -= s[:-1]
                b.data -= s[-1]

    with no_record():
        surrogate_after = surrogate_loss(net, batch).item()
        divergence = mean_kl(net, batch).item()
        value_after = value_loss(net, batch.states, batch.returns).item()
        ent = entropy(net.policy(batch.states[0])).item()

    eta = etas.get("joint", etas.get("actor"))
    report = UpdateReport(
        algo="acktr",
        surrogate_before=surrogate_before,
        surrogate_after=surrogate_after,
        kl=divergence,
        entropy=ent,
        value_loss_before=value_before,
        value_loss_after=value_after,
        eta=eta,
        eta_critic=etas.get("critic"),
        factor_cond_max=max(s.condition for s in states.values()),
        inverses_refreshed=refreshed,
    )
    logger.info(f"ACKTR: eta {eta:.4g}, kl {divergence:.3e}, value loss {value_before:.4g} -> {value_after:.4g}")
    return report


class ACKTRLearner:
    name = "acktr"

    def __init__(self, net: PolicyValueNet, config):
        self.net = net
        self.config = config
        self.states: Dict[str, KfacLayerState] = {
            name: layer_state(name, w, config.kfac_decay) for name, (w, _) in net.named_layers()
        }

    def estimate(self, batch: TrajectoryBatch) -> TrajectoryBatch:
        return estimate_nstep(batch, self.config.gamma, self.config.kfac_t_max, self.config.normalize_advantages)

    def update(self, batch: TrajectoryBatch, rng: np.random.Generator) -> UpdateReport:
        return acktr_update(self.net, batch, self.config, self.states, rng)

    def state_dict(self) -> Dict[str, Any]:
        return {"kfac": {name: s.state_dict() for name, s in self.states.items()}}

    def load_state_dict(self, state: Dict[str, Any]):
        for name, layer in state["kfac"].items():
            self.states[name].load_state_dict(layer)
