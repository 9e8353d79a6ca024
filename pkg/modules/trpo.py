"""Trust Region Policy Optimization: surrogate objective, CG against the KL
Hessian, backtracking line search and value regression."""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from modules.diffcore import Tape, Tensor, backward, exp, flatten_params, make_hvp, mean, square
from modules.errors import NumericalError
from modules.optim import make_optimizer
from modules.policy import DiagonalGaussian, PolicyValueNet, entropy, kl, log_prob
from modules.report import UpdateReport
from modules.rollout import TrajectoryBatch, estimate_gae

logger = logging.getLogger(__name__)

KL_TOLERANCE = 1e-10


@dataclass
class LineSearchResult:
    theta: np.ndarray
    accepted: bool
    backtracks: int
    surrogate: float
    kl: float
    step_fraction: float


def old_distribution(batch: TrajectoryBatch) -> DiagonalGaussian:
    return DiagonalGaussian.from_params_array(batch.dist_params)


def log_ratio(net: PolicyValueNet, batch: TrajectoryBatch) -> Tensor:
    dist = net.policy(batch.states)
    return log_prob(dist, batch.actions) - batch.log_probs


def surrogate_loss(net: PolicyValueNet, batch: TrajectoryBatch) -> Tensor:
    """mean(ratio * A); maximized."""
    return mean(exp(log_ratio(net, batch)) * batch.advantages)


def mean_kl(net: PolicyValueNet, batch: TrajectoryBatch) -> Tensor:
    return mean(kl(old_distribution(batch), net.policy(batch.states)))


def policy_gradient_estimate(net: PolicyValueNet, batch: TrajectoryBatch) -> np.ndarray:
    params = net.policy_params()
    with Tape() as tape:
        loss = surrogate_loss(net, batch)
    return flatten_params(backward(tape, loss, params))


def kl_hvp(net: PolicyValueNet, batch: TrajectoryBatch, damping: float = 0.0) -> Callable[[np.ndarray], np.ndarray]:
    """v -> (H + damping I) v for the Hessian of the mean KL at the current policy."""
    hvp = make_hvp(lambda: mean_kl(net, batch), net.policy_params())

    def avp(v: np.ndarray) -> np.ndarray:
        return hvp(v) + damping * np.asarray(v, dtype=np.float64)

    return avp


def conjugate_gradient(avp: Callable[[np.ndarray], np.ndarray], g: np.ndarray,
                       iters: int = 10, tol: float = 1e-10) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    x = np.zeros_like(g)
    r = g.copy()
    p = r.copy()
    rr = float(r @ r)
    g_norm = np.sqrt(rr)
    if g_norm == 0.0:
        return x

    for i in range(iters):
        ap = avp(p)
        p_ap = float(p @ ap)
        if not np.isfinite(p_ap) or p_ap <= 0.0:
            raise NumericalError(f"conjugate gradient: curvature p'Ap={p_ap} at iteration {i}")
        step = rr / p_ap
        x += step * p
        r -= step * ap
        new_rr = float(r @ r)
        if not (np.isfinite(new_rr) and np.all(np.isfinite(x))):
            raise NumericalError(f"conjugate gradient: non-finite residual at iteration {i}")
        logger.debug(f"CG iteration {i}: residual {np.sqrt(new_rr) / g_norm:.3e}")
        if np.sqrt(new_rr) <= tol * g_norm:
            break
        p = r + (new_rr / rr) * p
        rr = new_rr
    return x


def step_multiplier(x_hat: np.ndarray, hx: np.ndarray, delta: float) -> float:
    """beta = sqrt(2 delta / x'Hx); zero when the step has no curvature."""
    quad = float(x_hat @ hx)
    if quad <= 0.0:
        return 0.0
    return float(np.sqrt(2.0 * delta / quad))


def line_search(evaluate: Callable[[np.ndarray], Tuple[float, float]], theta_old: np.ndarray,
                full_step: np.ndarray, surrogate_old: float, delta: float, alpha: float,
                max_backtracks: int) -> LineSearchResult:
    """Try theta_old + alpha^j * full_step for j = 0..max_backtracks.

    ``evaluate`` maps parameters to (surrogate, kl). The first candidate that
    improves the surrogate and keeps KL within delta is accepted; otherwise
    theta_old is returned.
    """
    if not np.any(full_step):
        return LineSearchResult(theta_old, False, 0, surrogate_old, 0.0, 0.0)

    for j in range(max_backtracks + 1):
        fraction = alpha ** j
        theta = theta_old + fraction * full_step
        surr, divergence = evaluate(theta)
        logger.debug(f"backtrack {j}: surrogate {surr:.6g}, kl {divergence:.3e}")
        if np.isfinite(surr) and np.isfinite(divergence) and surr > surrogate_old and divergence <= delta + KL_TOLERANCE:
            return LineSearchResult(theta, True, j, surr, divergence, fraction)

    logger.warning(f"Line search rejected every step after {max_backtracks} backtracks; policy unchanged")
    return LineSearchResult(theta_old, False, max_backtracks, surrogate_old, 0.0, 0.0)


def backtracking_line_search(net: PolicyValueNet, batch: TrajectoryBatch, x_hat: np.ndarray, g_hat: np.ndarray,
                             delta: float = 0.01, alpha: float = 0.8, max_backtracks: int = 10,
                             hx: Optional[np.ndarray] = None, damping: float = 0.1) -> LineSearchResult:
    """Scale the CG direction to the trust-region boundary and backtrack.

    ``hx`` is (H + damping I) x_hat if the caller already has it. The network
    ends up holding the returned parameters.
    """
    params = net.policy_params()
    theta_old = flatten_params(params)
    if hx is None:
        hx = kl_hvp(net, batch, damping)(x_hat)
    beta = step_multiplier(x_hat, hx, delta)
    full_step = beta * np.asarray(x_hat, dtype=np.float64)
    logger.debug(f"full step multiplier {beta:.6g}, expected improvement {float(g_hat @ full_step):.6g}")

    def evaluate(theta: np.ndarray) -> Tuple[float, float]:
        net.set_flat(theta, params)
        return surrogate_loss(net, batch).item(), mean_kl(net, batch).item()

    surrogate_old = surrogate_loss(net, batch).item()
    result = line_search(evaluate, theta_old, full_step, surrogate_old, delta, alpha, max_backtracks)
    net.set_flat(result.theta, params)
    return result


def value_loss(net: PolicyValueNet, states: np.ndarray, targets: np.ndarray) -> Tensor:
    return mean(square(net.value(states) - targets))


def value_fit_params(net: PolicyValueNet) -> Sequence[Tensor]:
    """In shared mode only the value head moves, so the trunk stays inside the policy's trust region."""
    return net.value_head_params() if net.sharing == "shared" else net.value_params()


def fit_value_function(net: PolicyValueNet, batch: TrajectoryBatch, epochs: int = 5, lr: float = 1e-3,
                       optimizer=None) -> Tuple[float, float]:
    """Full-batch gradient descent on MSE(V(s), R). Returns the loss before and after."""
    params = value_fit_params(net)
    if optimizer is None:
        optimizer = make_optimizer("sgd", params, lr)
    before = value_loss(net, batch.states, batch.returns).item()
    for _ in range(epochs):
        with Tape() as tape:
            loss = value_loss(net, batch.states, batch.returns)
        optimizer.step(backward(tape, loss, params))
    after = value_loss(net, batch.states, batch.returns).item()
    return before, after


def trpo_update(net: PolicyValueNet, batch: TrajectoryBatch, config, value_optimizer=None) -> UpdateReport:
    g_hat = policy_gradient_estimate(net, batch)
    avp = kl_hvp(net, batch, config.cg_damping)
    x_hat = conjugate_gradient(avp, g_hat, config.cg_iters, config.cg_tol)
    hx = avp(x_hat)
    g_norm = np.linalg.norm(g_hat)
    residual = float(np.linalg.norm(hx - g_hat) / g_norm) if g_norm > 0 else 0.0

    surrogate_before = surrogate_loss(net, batch).item()
    result = backtracking_line_search(net, batch, x_hat, g_hat, config.max_kl, config.backtrack_coef,
                                      config.max_backtracks, hx=hx)
    value_before, value_after = fit_value_function(net, batch, config.vf_iters, config.vf_lr, value_optimizer)

    report = UpdateReport(
        algo="trpo",
        surrogate_before=surrogate_before,
        surrogate_after=result.surrogate,
        kl=result.kl,
        entropy=entropy(net.policy(batch.states[0])).item(),
        value_loss_before=value_before,
        value_loss_after=value_after,
        cg_residual=residual,
        backtracks=result.backtracks,
        accepted=result.accepted,
    )
    logger.info(f"TRPO: surrogate {surrogate_before:.4g} -> {result.surrogate:.4g}, kl {result.kl:.3e}, "
                f"backtracks {result.backtracks}, accepted {result.accepted}")
    return report


class TRPOLearner:
    name = "trpo"

    def __init__(self, net: PolicyValueNet, config):
        self.net = net
        self.config = config
        self.value_optimizer = make_optimizer(config.optimizer, value_fit_params(net), config.vf_lr)

    def estimate(self, batch: TrajectoryBatch) -> TrajectoryBatch:
        return estimate_gae(batch, self.config.gamma, self.config.lam, self.config.normalize_advantages)

    def update(self, batch: TrajectoryBatch, rng: np.random.Generator) -> UpdateReport:
        return trpo_update(self.net, batch, self.config, self.value_optimizer)

    def state_dict(self) -> Dict[str, Any]:
        return {"value_optimizer": self.value_optimizer.state_dict()}

    def load_state_dict(self, state: Dict[str, Any]):
        self.value_optimizer.load_state_dict(state["value_optimizer"])
