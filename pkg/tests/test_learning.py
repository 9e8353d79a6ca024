import csv
import logging
import os

import numpy as np
import pytest

from modules.config import resolve_config
from modules.harness import build_env, evaluate, train
from modules.policy import load_checkpoint

logger = logging.getLogger(__name__)


def final_distance(run_dir, config):
    net, _, _ = load_checkpoint(os.path.join(run_dir, "checkpoint.json"))
    env = build_env(config, seed=0)
    return evaluate(net, env, episodes=5).mean_final_distance


def last_rolling_mean(run_dir):
    with open(os.path.join(run_dir, "progress.csv"), encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    return float(rows[-1]["rolling_mean"])


@pytest.mark.slow
@pytest.mark.parametrize("algo", ["ppo", "trpo"])
def test_planar_arm_reaches_target(tmp_path, algo):
    reached = 0
    for seed in range(3):
        config = resolve_config(overrides={"algo": algo, "env": "Reach2D-v0", "seed": seed, "optimizer": "adam"})
        run_dir = str(tmp_path / f"{algo}-{seed}")
        train(config, run_dir, export_plot=False)
        reached += final_distance(run_dir, config) < 0.05
    assert reached >= 2


@pytest.mark.slow
@pytest.mark.parametrize("algo", ["ppo", "trpo"])
def test_six_joint_arm_gets_close(tmp_path, algo):
    distances = []
    for seed in range(3):
        config = resolve_config(overrides={"algo": algo, "env": "Reach6D-v0", "seed": seed,
                                           "total_steps": 500_000, "optimizer": "adam"})
        run_dir = str(tmp_path / f"{algo}-{seed}")
        train(config, run_dir, export_plot=False)
        distances.append(final_distance(run_dir, config))
    assert min(distances) < 0.15


@pytest.mark.slow
def test_shared_hyperparameters_ranking_is_reported(tmp_path):
    finals = {}
    for algo in ("ppo", "trpo", "acktr"):
        config = resolve_config(["bench-shared"], overrides={"algo": algo, "seed": 0})
        run_dir = str(tmp_path / algo)
        train(config, run_dir, export_plot=False)
        finals[algo] = last_rolling_mean(run_dir)
    ranking = sorted(finals, key=finals.get, reverse=True)
    logger.warning(f"shared-hyperparameter ranking: {', '.join(f'{a} {finals[a]:.3f}' for a in ranking)}")
    assert all(np.isfinite(v) for v in finals.values())
