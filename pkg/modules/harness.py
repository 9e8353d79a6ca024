"""Training and evaluation loops: seeding, progress CSV, checkpoints and resume."""

import csv
import logging
import os
import time
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from modules.acktr import ACKTRLearner
from modules.config import TrainConfig, load_config, save_config, to_text
from modules.envlink import connect
from modules.envs import make_env
from modules.errors import CheckpointError, CurveError, EnvironmentFault
from modules.policy import PolicyValueNet, load_checkpoint, sample, save_checkpoint
from modules.ppo import PPOLearner
from modules.report import CSV_SCHEMA_VERSION, SCHEMA_COLUMN, UpdateReport
from modules.rollout import EnvRunner, collect_parallel, concat_batches, final_distance
from modules.trpo import TRPOLearner
from modules.vpg import VPGLearner

logger = logging.getLogger(__name__)

BASE_COLUMNS = [SCHEMA_COLUMN, "update", "total_steps", "episodes", "mean_episode_reward",
                "rolling_mean", "rolling_std", "mean_final_distance"]
CSV_COLUMNS = BASE_COLUMNS + UpdateReport.columns()
TIMING_COLUMNS = ["update", "collect_seconds", "update_seconds"]

PROGRESS_FILE = "progress.csv"
TIMING_FILE = "timing.csv"
CONFIG_FILE = "config.conf"
LATEST_CHECKPOINT = "checkpoint.json"
CHECKPOINT_DIR = "checkpoints"

BENCH_ALGORITHMS = ("trpo", "ppo", "acktr")

LEARNERS = {
    "trpo": TRPOLearner,
    "ppo": PPOLearner,
    "acktr": ACKTRLearner,
    "vpg": VPGLearner,
}


class RunLog:
    """Completed-episode rewards and the trailing-window statistics reported per update."""

    def __init__(self, window: int = 100):
        self.window = window
        self.episode_rewards: List[float] = []
        self.final_distances: List[float] = []

    def add_episodes(self, rewards: Sequence[float], distances: Sequence[float]):
        self.episode_rewards.extend(float(r) for r in rewards)
        self.final_distances.extend(float(d) for d in distances)

    def rolling(self):
        """Mean and population std of the last ``window`` episode rewards, or None before any episode."""
        if not self.episode_rewards:
            return None, None
        tail = np.asarray(self.episode_rewards[-self.window:])
        return float(tail.mean()), float(tail.std())

    def row(self, update: int, total_steps: int, rewards: Sequence[float], distances: Sequence[float],
            report: UpdateReport) -> Dict[str, str]:
        rolling_mean, rolling_std = self.rolling()
        row = {
            SCHEMA_COLUMN: str(CSV_SCHEMA_VERSION),
            "update": str(update),
            "total_steps": str(total_steps),
            "episodes": str(len(rewards)),
            "mean_episode_reward": _cell(np.mean(rewards) if len(rewards) else None),
            "rolling_mean": _cell(rolling_mean),
            "rolling_std": _cell(rolling_std),
            "mean_final_distance": _cell(np.mean(distances) if len(distances) else None),
        }
        row.update(report.as_row())
        return row

    def state_dict(self) -> Dict[str, Any]:
        return {"episode_rewards": self.episode_rewards, "final_distances": self.final_distances}

    def load_state_dict(self, state: Dict[str, Any]):
        self.episode_rewards = [float(r) for r in state["episode_rewards"]]
        self.final_distances = [float(d) for d in state["final_distances"]]


def _cell(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


@dataclass
class TrainResult:
    run_dir: str
    updates: int
    total_steps: int
    checkpoint: str
    run_log: RunLog


@dataclass
class EvalSummary:
    episodes: int
    mean_reward: float
    std_reward: float
    mean_final_distance: float
    success_rate: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "episodes": self.episodes,
            "mean_reward": self.mean_reward,
            "std_reward": self.std_reward,
            "mean_final_distance": self.mean_final_distance,
            "success_rate": self.success_rate,
        }


def build_env(config: TrainConfig, seed: Optional[int] = None):
    """A local environment, or a remote one when ``config.remote`` names an endpoint."""
    if config.remote:
        env = connect(config.remote)
    else:
        env = make_env(config.env, max_episode_steps=config.max_episode_steps,
                       randomize_target=config.randomize_target, arm_path=config.arm or None,
                       action_bound=config.action_bound, orient_coef=config.orient_coef,
                       collision_coef=config.collision_coef)
    if seed is not None:
        try:
            env.seed(seed)
        except BaseException:
            env.close()
            raise
    return env


def _child_seed(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, dtype=np.uint64)[0])


class Trainer:
    """Owns every piece of mutable training state so it can be checkpointed as a unit."""

    def __init__(self, config: TrainConfig, run_dir: str):
        self.config = config.validate()
        self.run_dir = run_dir
        # child 0 initializes the network, child 1 drives updates, child 2+i belongs to worker i
        seeds = np.random.SeedSequence(config.seed).spawn(2 + config.workers)
        self.envs = []
        try:
            for i in range(config.workers):
                self.envs.append(build_env(config, _child_seed(seeds[2 + i])))
        except BaseException:
            self.close()
            raise
        spec = self.envs[0].spec
        self.net = PolicyValueNet(spec.obs_dim, spec.act_dim, config.hidden_sizes, config.sharing,
                                  rng=np.random.default_rng(seeds[0]), init_log_std=config.init_log_std)
        self.learner = LEARNERS[config.algo](self.net, config)
        self.update_rng = np.random.default_rng(seeds[1])
        self.runners = [EnvRunner(env, np.random.default_rng(seeds[2 + i])) for i, env in enumerate(self.envs)]
        self.run_log = RunLog(config.log_window)
        self.update = 0
        self.total_steps = 0

    @property
    def spec(self):
        return self.envs[0].spec

    def state_dict(self, runner_states: Optional[List[Dict[str, Any]]] = None) -> Dict[str, Any]:
        return {
            "update": self.update,
            "total_steps": self.total_steps,
            "learner": self.learner.state_dict(),
            "update_rng": self.update_rng.bit_generator.state,
            "runners": runner_states if runner_states is not None else [r.get_state() for r in self.runners],
            "run_log": self.run_log.state_dict(),
        }

    def load_state_dict(self, state: Dict[str, Any]):
        if len(state["runners"]) != len(self.runners):
            raise CheckpointError(f"checkpoint has {len(state['runners'])} workers, run has {len(self.runners)}")
        self.update = int(state["update"])
        self.total_steps = int(state["total_steps"])
        self.learner.load_state_dict(state["learner"])
        self.update_rng.bit_generator.state = state["update_rng"]
        for runner, runner_state in zip(self.runners, state["runners"]):
            runner.set_state(runner_state)
        self.run_log.load_state_dict(state["run_log"])

    def metadata(self) -> Dict[str, Any]:
        spec = self.spec
        return {
            "algo": self.config.algo,
            "env": spec.name,
            "variant": spec.variant,
            "obs_dim": spec.obs_dim,
            "act_dim": spec.act_dim,
            "seed": self.config.seed,
            "update": self.update,
            "total_steps": self.total_steps,
            "config": to_text(self.config),
        }

    def save(self, runner_states: Optional[List[Dict[str, Any]]] = None) -> str:
        """Write the latest checkpoint and a numbered copy."""
        os.makedirs(os.path.join(self.run_dir, CHECKPOINT_DIR), exist_ok=True)
        state = self.state_dict(runner_states)
        numbered = os.path.join(self.run_dir, CHECKPOINT_DIR, f"ckpt-{self.update:06d}.json")
        latest = os.path.join(self.run_dir, LATEST_CHECKPOINT)
        save_checkpoint(numbered, self.net, self.metadata(), state)
        save_checkpoint(latest, self.net, self.metadata(), state)
        return latest

    def restore(self, checkpoint_path: str):
        net, _, state = load_checkpoint(checkpoint_path)
        if net.num_params() != self.net.num_params():
            raise CheckpointError(f"{checkpoint_path} does not match the configured network")
        self.net.set_flat(net.get_flat())
        self.load_state_dict(state)
        logger.info(f"Resumed at update {self.update} ({self.total_steps} steps)")

    def step(self) -> Dict[str, Any]:
        """Collect one batch, update, and return the CSV row plus timings."""
        horizon = self.config.horizon // self.config.workers
        snapshot = [r.get_state() for r in self.runners]
        start = time.perf_counter()
        try:
            batches = collect_parallel(self.runners, self.net, horizon)
        except EnvironmentFault as e:
            logger.error(f"Environment fault during update {self.update + 1}: {e}")
            path = self.save(snapshot)
            logger.error(f"Saved resumable state to {path}")
            raise
        for b in batches:
            self.learner.estimate(b)
        batch = concat_batches(batches)
        collected = time.perf_counter()

        report = self.learner.update(batch, self.update_rng)
        finished = time.perf_counter()

        self.update += 1
        self.total_steps += len(batch)
        self.run_log.add_episodes(batch.episode_returns, batch.final_distances)
        row = self.run_log.row(self.update, self.total_steps, batch.episode_returns, batch.final_distances, report)
        timing = {
            "update": str(self.update),
            "collect_seconds": f"{collected - start:.6f}",
            "update_seconds": f"{finished - collected:.6f}",
        }
        return {"row": row, "timing": timing}

    def close(self):
        for env in self.envs:
            env.close()


def _write_header(path: str, columns: Sequence[str]):
    with open(path, "w", encoding="utf-8", newline="") as f:
        csv.DictWriter(f, fieldnames=columns).writeheader()


def _truncate_rows(path: str, columns: Sequence[str], last_update: int):
    """Drop rows written after the checkpoint being resumed from."""
    if not os.path.exists(path):
        _write_header(path, columns)
        return
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != list(columns):
            raise CheckpointError(f"{path} was written with another CSV schema; start a new run")
        rows = [r for r in reader if int(r["update"]) <= last_update]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def train(config: TrainConfig, run_dir: str, resume: bool = False, export_plot: bool = True) -> TrainResult:
    """Run collect -> update until ``config.total_steps`` is reached.

    With ``resume`` the configuration and state come from ``run_dir`` and the
    progress CSV continues from the checkpointed update.
    """
    os.makedirs(run_dir, exist_ok=True)
    progress_path = os.path.join(run_dir, PROGRESS_FILE)
    timing_path = os.path.join(run_dir, TIMING_FILE)
    latest = os.path.join(run_dir, LATEST_CHECKPOINT)

    if resume:
        saved = load_config(os.path.join(run_dir, CONFIG_FILE))
        if config.total_steps != saved.total_steps:
            logger.info(f"Extending run from {saved.total_steps} to {config.total_steps} steps")
        saved.total_steps = config.total_steps
        config = saved

    trainer = Trainer(config, run_dir)
    try:
        if resume:
            trainer.restore(latest)
            _truncate_rows(progress_path, CSV_COLUMNS, trainer.update)
            _truncate_rows(timing_path, TIMING_COLUMNS, trainer.update)
        else:
            _write_header(progress_path, CSV_COLUMNS)
            _write_header(timing_path, TIMING_COLUMNS)
            trainer.save()
        save_config(config, os.path.join(run_dir, CONFIG_FILE))

        logger.info(f"Training {config.algo} on {trainer.spec.name} for {config.total_steps} steps "
                    f"({trainer.net.num_params()} parameters, {config.workers} worker(s))")
        with open(progress_path, "a", encoding="utf-8", newline="") as progress, \
                open(timing_path, "a", encoding="utf-8", newline="") as timing:
            progress_writer = csv.DictWriter(progress, fieldnames=CSV_COLUMNS)
            timing_writer = csv.DictWriter(timing, fieldnames=TIMING_COLUMNS)
            while trainer.total_steps < config.total_steps:
                out = trainer.step()
                progress_writer.writerow(out["row"])
                timing_writer.writerow(out["timing"])
                progress.flush()
                timing.flush()
                row = out["row"]
                logger.info(f"update {trainer.update}: steps {trainer.total_steps}, "
                            f"rolling reward {row['rolling_mean'] or '-'}")
                if trainer.update % config.checkpoint_every == 0:
                    trainer.save()

        checkpoint = trainer.save()
    finally:
        trainer.close()

    if export_plot and trainer.update > 0:
        from modules.curves import export_curves
        try:
            export_curves([progress_path], out_dir=run_dir, window=config.log_window)
        except CurveError as e:
            logger.warning(f"No reward curve written: {e}")

    return TrainResult(run_dir, trainer.update, trainer.total_steps, checkpoint, trainer.run_log)


def train_benchmark(config: TrainConfig, root_dir: str, algos: Sequence[str] = BENCH_ALGORITHMS,
                    export_plot: bool = True) -> Dict[str, TrainResult]:
    """Train each algorithm under one shared configuration, then overlay their reward curves."""
    results = {}
    for algo in algos:
        run_dir = os.path.join(root_dir, f"{algo}-{config.env}-seed{config.seed}")
        results[algo] = train(replace(config, algo=algo), run_dir, export_plot=export_plot)

    ranked = sorted(results.items(), key=lambda kv: _final_rolling_mean(kv[1].run_log), reverse=True)
    logger.info("Final rolling reward: " + ", ".join(
        f"{algo} {_final_rolling_mean(result.run_log):.4f}" for algo, result in ranked))

    finished = [(algo, r) for algo, r in results.items() if r.updates > 0]
    if export_plot and finished:
        from modules.curves import export_comparison
        svg_path = os.path.join(root_dir, f"{config.env}-seed{config.seed}.svg")
        try:
            export_comparison([os.path.join(r.run_dir, PROGRESS_FILE) for _, r in finished],
                              [algo for algo, _ in finished], svg_path, title=config.env,
                              window=config.log_window)
        except CurveError as e:
            logger.warning(f"No comparison chart written: {e}")
    return results


def _final_rolling_mean(run_log: RunLog) -> float:
    mean, _ = run_log.rolling()
    return float("-inf") if mean is None else mean


def evaluate(checkpoint, env, episodes: int = 10, deterministic: bool = True,
             rng: Optional[np.random.Generator] = None, success_threshold: float = 0.05) -> EvalSummary:
    """Roll out whole episodes without touching the parameters.

    ``checkpoint`` is a checkpoint path or a PolicyValueNet.
    """
    net = checkpoint if isinstance(checkpoint, PolicyValueNet) else load_checkpoint(checkpoint)[0]
    if net.obs_dim != env.spec.obs_dim or net.act_dim != env.spec.act_dim:
        raise CheckpointError(f"policy is for ({net.obs_dim}, {net.act_dim}) observations/actions, "
                              f"environment {env.spec.name} has ({env.spec.obs_dim}, {env.spec.act_dim})")
    if episodes < 1:
        raise CheckpointError("evaluation needs at least one episode")
    rng = rng if rng is not None else np.random.default_rng(0)

    returns, distances = [], []
    for episode in range(episodes):
        obs = env.reset(rng)
        total, done = 0.0, False
        while not done:
            dist = net.policy(obs)
            action = dist.mean.numpy() if deterministic else sample(dist, rng)
            obs, reward, done = env.step(action)
            total += reward
        returns.append(total)
        distances.append(final_distance(env, obs))
        logger.debug(f"episode {episode}: return {total:.4f}, final distance {distances[-1]:.4f}")

    distances = np.asarray(distances)
    summary = EvalSummary(
        episodes=episodes,
        mean_reward=float(np.mean(returns)),
        std_reward=float(np.std(returns)),
        mean_final_distance=float(distances.mean()),
        success_rate=float(np.mean(distances < success_threshold)),
    )
    logger.info(f"Evaluated {episodes} episode(s): mean reward {summary.mean_reward:.4f}, "
                f"final distance {summary.mean_final_distance:.4f}")
    return summary
