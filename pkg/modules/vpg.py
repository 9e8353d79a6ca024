"""Vanilla policy gradient: one gradient-ascent step on mean(log pi(a|s) A) per batch."""

import logging
from typing import Any, Dict, Optional

import numpy as np

from modules.diffcore import Tape, Tensor, backward, mean, no_record
from modules.optim import make_optimizer
from modules.policy import PolicyValueNet, entropy, log_prob
from modules.report import UpdateReport
from modules.rollout import TrajectoryBatch, estimate_gae
from modules.trpo import fit_value_function, mean_kl, surrogate_loss, value_fit_params

logger = logging.getLogger(__name__)


def pg_objective(net: PolicyValueNet, batch: TrajectoryBatch, ent_coef: float = 0.0) -> Tensor:
    dist = net.policy(batch.states)
    objective = mean(log_prob(dist, batch.actions) * batch.advantages)
    if ent_coef:
        objective = objective + ent_coef * mean(entropy(dist))
    return objective


def vpg_update(net: PolicyValueNet, batch: TrajectoryBatch, config, optimizer=None,
               value_optimizer=None) -> UpdateReport:
    params = net.policy_params()
    if optimizer is None:
        optimizer = make_optimizer(config.optimizer, params, config.lr)

    with no_record():
        surrogate_before = surrogate_loss(net, batch).item()
    with Tape() as tape:
        objective = pg_objective(net, batch, config.ent_coef)
    optimizer.step(backward(tape, objective, params), ascend=True)
    value_before, value_after = fit_value_function(net, batch, config.vf_iters, config.vf_lr, value_optimizer)

    with no_record():
        surrogate_after = surrogate_loss(net, batch).item()
        divergence = mean_kl(net, batch).item()
        ent = entropy(net.policy(batch.states[0])).item()
    logger.info(f"VPG: surrogate {surrogate_before:.4g} -> {surrogate_after:.4g}, kl {divergence:.3e}")
    return UpdateReport(
        algo="vpg",
        surrogate_before=surrogate_before,
        surrogate_after=surrogate_after,
        kl=divergence,
        entropy=ent,
        value_loss_before=value_before,
        value_loss_after=value_after,
    )


class VPGLearner:
    name = "vpg"

    def __init__(self, net: PolicyValueNet, config):
        self.net = net
        self.config = config
        self.optimizer = make_optimizer(config.optimizer, net.policy_params(), config.lr)
        self.value_optimizer = make_optimizer(config.optimizer, value_fit_params(net), config.vf_lr)

    def estimate(self, batch: TrajectoryBatch) -> TrajectoryBatch:
        return estimate_gae(batch, self.config.gamma, self.config.lam, self.config.normalize_advantages)

    def update(self, batch: TrajectoryBatch, rng: Optional[np.random.Generator] = None) -> UpdateReport:
        return vpg_update(self.net, batch, self.config, self.optimizer, self.value_optimizer)

    def state_dict(self) -> Dict[str, Any]:
        return {"optimizer": self.optimizer.state_dict(), "value_optimizer": self.value_optimizer.state_dict()}

    def load_state_dict(self, state: Dict[str, Any]):
        self.optimizer.load_state_dict(state["optimizer"])
        self.value_optimizer.load_state_dict(state["value_optimizer"])
