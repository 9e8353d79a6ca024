"""Trajectory collection and the return/advantage estimators shared by every algorithm."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from modules.diffcore import no_record
from modules.errors import ContractError, EnvironmentFault, PolgradError
from modules.policy import PolicyValueNet, log_prob, sample

logger = logging.getLogger(__name__)

STD_GUARD = 1e-8


@dataclass
class TrajectoryBatch:
    """Time-aligned rollout rows; ``terminals[t]`` means row t+1 starts a new episode."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    log_probs: np.ndarray
    dist_params: np.ndarray
    values: np.ndarray
    bootstrap_value: float
    returns: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None
    episode_returns: List[float] = field(default_factory=list)
    episode_lengths: List[int] = field(default_factory=list)
    final_distances: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return self.rewards.shape[0]

    @property
    def has_estimates(self) -> bool:
        return self.returns is not None and self.advantages is not None

    def take(self, index: np.ndarray) -> "TrajectoryBatch":
        """Row subset for minibatching; episode bookkeeping is not carried over."""
        return replace(
            self,
            states=self.states[index],
            actions=self.actions[index],
            rewards=self.rewards[index],
            terminals=self.terminals[index],
            log_probs=self.log_probs[index],
            dist_params=self.dist_params[index],
            values=self.values[index],
            returns=None if self.returns is None else self.returns[index],
            advantages=None if self.advantages is None else self.advantages[index],
            episode_returns=[],
            episode_lengths=[],
            final_distances=[],
        )


def concat_batches(batches: Sequence[TrajectoryBatch]) -> TrajectoryBatch:
    """Join per-worker batches in worker order. Estimates must already be populated,
    since each worker segment bootstraps from its own final state."""
    if len(batches) == 1:
        return batches[0]
    if not all(b.has_estimates for b in batches):
        raise ContractError("estimate returns and advantages per segment before concatenating")
    return TrajectoryBatch(
        states=np.concatenate([b.states for b in batches]),
        actions=np.concatenate([b.actions for b in batches]),
        rewards=np.concatenate([b.rewards for b in batches]),
        terminals=np.concatenate([b.terminals for b in batches]),
        log_probs=np.concatenate([b.log_probs for b in batches]),
        dist_params=np.concatenate([b.dist_params for b in batches]),
        values=np.concatenate([b.values for b in batches]),
        bootstrap_value=batches[-1].bootstrap_value,
        returns=np.concatenate([b.returns for b in batches]),
        advantages=np.concatenate([b.advantages for b in batches]),
        episode_returns=[x for b in batches for x in b.episode_returns],
        episode_lengths=[x for b in batches for x in b.episode_lengths],
        final_distances=[x for b in batches for x in b.final_distances],
    )


def final_distance(env, obs: np.ndarray) -> float:
    spec = env.spec
    position = obs[spec.act_dim:spec.act_dim + 3]
    return float(np.linalg.norm(position - spec.target.position))


class EnvRunner:
    """Keeps one environment mid-episode across successive ``collect`` calls."""

    def __init__(self, env, rng: np.random.Generator):
        self.env = env
        self.rng = rng
        self.obs: Optional[np.ndarray] = None
        self.episode_return = 0.0
        self.episode_length = 0
        self.total_steps = 0

    def collect(self, net: PolicyValueNet, horizon: int) -> TrajectoryBatch:
        spec = self.env.spec
        n, m = spec.obs_dim, spec.act_dim
        states = np.zeros((horizon, n))
        actions = np.zeros((horizon, m))
        rewards = np.zeros(horizon)
        terminals = np.zeros(horizon, dtype=bool)
        episode_returns, episode_lengths, distances = [], [], []

        if self.obs is None:
            self.obs = self._guard(self.env.reset, self.rng)

        with no_record():
            for t in range(horizon):
                dist = net.policy(self.obs)
                action = sample(dist, self.rng)
                states[t] = self.obs
                actions[t] = action

                next_obs, r, done = self._guard(self.env.step, action)
                rewards[t] = r
                terminals[t] = done
                self.total_steps += 1
                self.episode_return += r
                self.episode_length += 1

                if done:
                    episode_returns.append(self.episode_return)
                    episode_lengths.append(self.episode_length)
                    distances.append(final_distance(self.env, next_obs))
                    self.episode_return = 0.0
                    self.episode_length = 0
                    next_obs = self._guard(self.env.reset, self.rng)
                self.obs = next_obs

            bootstrap = 0.0 if terminals[-1] else net.value(self.obs).item()

            # old-policy quantities from one batched pass
            dist, value = net.forward(states)
            log_probs = log_prob(dist, actions).numpy()
            dist_params = dist.params_array()
            values = value.numpy()

        return TrajectoryBatch(states, actions, rewards, terminals, log_probs, dist_params, values,
                               bootstrap, episode_returns=episode_returns,
                               episode_lengths=episode_lengths, final_distances=distances)

    def _guard(self, fn, *args):
        try:
            return fn(*args)
        except EnvironmentFault as e:
            if e.step_index is None:
                e.step_index = self.total_steps
            raise
        except (PolgradError, OSError) as e:
            raise EnvironmentFault(f"environment failed: {e}", step_index=self.total_steps) from e

    def get_state(self) -> Dict[str, Any]:
        state = {
            "obs": None if self.obs is None else self.obs.tolist(),
            "episode_return": self.episode_return,
            "episode_length": self.episode_length,
            "total_steps": self.total_steps,
            "rng": self.rng.bit_generator.state,
        }
        if hasattr(self.env, "get_state"):
            state["env"] = self.env.get_state()
        return state

    def set_state(self, state: Dict[str, Any]):
        self.obs = None if state["obs"] is None else np.asarray(state["obs"], dtype=np.float64)
        self.episode_return = float(state["episode_return"])
        self.episode_length = int(state["episode_length"])
        self.total_steps = int(state["total_steps"])
        self.rng.bit_generator.state = state["rng"]
        if "env" in state and hasattr(self.env, "set_state"):
            self.env.set_state(state["env"])
        elif self.obs is not None:
            logger.warning("Environment state cannot be restored; the next collection starts a fresh episode")
            self.obs = None
            self.episode_return = 0.0
            self.episode_length = 0


def collect(env, net: PolicyValueNet, horizon: int, rng: np.random.Generator) -> TrajectoryBatch:
    return EnvRunner(env, rng).collect(net, horizon)


def collect_parallel(runners: Sequence[EnvRunner], net: PolicyValueNet, horizon: int) -> List[TrajectoryBatch]:
    """``horizon`` steps from each runner, returned in runner order."""
    if len(runners) == 1:
        return [runners[0].collect(net, horizon)]
    with ThreadPoolExecutor(max_workers=len(runners)) as pool:
        futures = [pool.submit(r.collect, net, horizon) for r in runners]
        return [f.result() for f in futures]


def rewards_to_go(rewards, terminals, bootstrap: float, gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    out = np.zeros_like(rewards)
    running = float(bootstrap)
    for t in reversed(range(rewards.shape[0])):
        if terminals[t]:
            running = 0.0
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def gae(rewards, values, terminals, bootstrap: float, gamma: float, lam: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    T = rewards.shape[0]
    advantages = np.zeros(T)
    last = 0.0
    for t in reversed(range(T)):
        nonterminal = 0.0 if terminals[t] else 1.0
        next_value = values[t + 1] if t + 1 < T else float(bootstrap)
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        advantages[t] = last
    return advantages


def normalize_advantages(advantages) -> np.ndarray:
    advantages = np.asarray(advantages, dtype=np.float64)
    std = advantages.std()
    if std < STD_GUARD:
        return np.zeros_like(advantages)
    return (advantages - advantages.mean()) / std


def estimate_gae(batch: TrajectoryBatch, gamma: float, lam: float, normalize: bool = True) -> TrajectoryBatch:
    """Fill rewards-to-go and GAE advantages in place."""
    batch.returns = rewards_to_go(batch.rewards, batch.terminals, batch.bootstrap_value, gamma)
    advantages = gae(batch.rewards, batch.values, batch.terminals, batch.bootstrap_value, gamma, lam)
    batch.advantages = normalize_advantages(advantages) if normalize else advantages
    return batch
