"""PPO with the clipped surrogate objective and minibatch epochs over each batch."""

import logging
from typing import Any, Dict, Optional

import numpy as np

from modules.diffcore import Tape, Tensor, as_tensor, backward, clip, exp, mean, minimum, no_record
from modules.errors import ConfigError
from modules.optim import make_optimizer
from modules.policy import PolicyValueNet, entropy, log_prob
from modules.report import UpdateReport
from modules.rollout import TrajectoryBatch, estimate_gae
from modules.trpo import mean_kl, value_loss

logger = logging.getLogger(__name__)

KL_STOP_FACTOR = 1.5


def probability_ratio(net: PolicyValueNet, batch: TrajectoryBatch) -> Tensor:
    dist = net.policy(batch.states)
    return exp(log_prob(dist, batch.actions) - batch.log_probs)


def clipped_loss(ratio, advantages, eps: float) -> Tensor:
    """mean(min(r A, clip(r, 1-eps, 1+eps) A)). This is an objective: ascend it."""
    if eps <= 0:
        raise ConfigError(f"clip_eps must be positive, got {eps}")
    ratio = as_tensor(ratio)
    advantages = np.asarray(advantages, dtype=np.float64)
    unclipped = ratio * advantages
    clipped = clip(ratio, 1.0 - eps, 1.0 + eps) * advantages
    return mean(minimum(unclipped, clipped))


def clip_fraction(ratio: np.ndarray, eps: float) -> float:
    return float(np.mean(np.abs(np.asarray(ratio) - 1.0) > eps))


def _minibatch_loss(net: PolicyValueNet, sub: TrajectoryBatch, config, joint: bool):
    dist = net.policy(sub.states)
    ratio = exp(log_prob(dist, sub.actions) - sub.log_probs)
    objective = clipped_loss(ratio, sub.advantages, config.clip_eps)
    if config.ent_coef:
        objective = objective + config.ent_coef * mean(entropy(dist))
    policy_loss = -objective
    if joint:
        return policy_loss + config.vf_coef * value_loss(net, sub.states, sub.returns), None
    return policy_loss, value_loss(net, sub.states, sub.returns)


def ppo_update(net: PolicyValueNet, batch: TrajectoryBatch, config, optimizer=None,
               value_optimizer=None, rng: Optional[np.random.Generator] = None) -> UpdateReport:
    """Epochs of shuffled minibatch steps. In shared mode policy and value losses
    are descended jointly by ``optimizer``; otherwise ``value_optimizer`` fits the critic."""
    if not batch.has_estimates:
        raise ConfigError("ppo_update needs a batch with returns and advantages")
    rng = rng if rng is not None else np.random.default_rng(0)
    joint = net.sharing == "shared"
    policy_params = net.parameters() if joint else net.policy_params()
    value_params = [] if joint else net.value_params()
    if optimizer is None:
        optimizer = make_optimizer(config.optimizer, policy_params, config.lr)
    if value_optimizer is None and not joint:
        value_optimizer = make_optimizer(config.optimizer, value_params, config.vf_lr)

    size = len(batch)
    minibatch = min(config.minibatch_size, size)
    with no_record():
        surrogate_before = clipped_loss(probability_ratio(net, batch), batch.advantages, config.clip_eps).item()
        value_before = value_loss(net, batch.states, batch.returns).item()

    epochs_run = 0
    for epoch in range(config.epochs):
        order = rng.permutation(size)
        for start in range(0, size, minibatch):
            sub = batch.take(order[start:start + minibatch])
            with Tape() as tape:
                loss, critic_loss = _minibatch_loss(net, sub, config, joint)
            optimizer.step(backward(tape, loss, policy_params))
            if critic_loss is not None:
                value_optimizer.step(backward(tape, critic_loss, value_params))
        epochs_run = epoch + 1

        if config.target_kl:
            with no_record():
                divergence = mean_kl(net, batch).item()
            if divergence > KL_STOP_FACTOR * config.target_kl:
                logger.info(f"PPO: stopping after epoch {epochs_run}, kl {divergence:.3e} "
                            f"exceeds {KL_STOP_FACTOR} x target {config.target_kl}")
                break

    with no_record():
        ratio = probability_ratio(net, batch)
        surrogate_after = clipped_loss(ratio, batch.advantages, config.clip_eps).item()
        divergence = mean_kl(net, batch).item()
        value_after = value_loss(net, batch.states, batch.returns).item()
        ent = entropy(net.policy(batch.states[0])).item()
    ratio = ratio.numpy()

    report = UpdateReport(
        algo="ppo",
        surrogate_before=surrogate_before,
        surrogate_after=surrogate_after,
        kl=divergence,
        entropy=ent,
        value_loss_before=value_before,
        value_loss_after=value_after,
        clip_fraction=clip_fraction(ratio, config.clip_eps),
        ratio_mean=float(ratio.mean()),
        ratio_max=float(ratio.max()),
        epochs_run=epochs_run,
    )
    logger.info(f"PPO: clipped objective {surrogate_before:.4g} -> {surrogate_after:.4g}, kl {divergence:.3e}, "
                f"clip fraction {report.clip_fraction:.3f}")
    return report


class PPOLearner:
    """Holds the optimizers that persist across PPO updates."""

    name = "ppo"

    def __init__(self, net: PolicyValueNet, config):
        self.net = net
        self.config = config
        joint = net.sharing == "shared"
        self.optimizer = make_optimizer(config.optimizer, net.parameters() if joint else net.policy_params(), config.lr)
        self.value_optimizer = None if joint else make_optimizer(config.optimizer, net.value_params(), config.vf_lr)

    def estimate(self, batch: TrajectoryBatch) -> TrajectoryBatch:
        return estimate_gae(batch, self.config.gamma, self.config.lam, self.config.normalize_advantages)

    def update(self, batch: TrajectoryBatch, rng: np.random.Generator) -> UpdateReport:
        return ppo_update(self.net, batch, self.config, self.optimizer, self.value_optimizer, rng)

    def state_dict(self) -> Dict[str, Any]:
        return {
            "optimizer": self.optimizer.state_dict(),
            "value_optimizer": None if self.value_optimizer is None else self.value_optimizer.state_dict(),
        }

    def load_state_dict(self, state: Dict[str, Any]):
        self.optimizer.load_state_dict(state["optimizer"])
        if self.value_optimizer is not None and state.get("value_optimizer"):
            self.value_optimizer.load_state_dict(state["value_optimizer"])
