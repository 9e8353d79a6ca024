import math

import numpy as np
import pytest

from modules.config import TrainConfig
from modules.diffcore import Tape, backward, flatten_params, parameter
from modules.envs import make_env
from modules.errors import ConfigError
from modules.policy import PolicyValueNet
from modules.ppo import PPOLearner, clip_fraction, clipped_loss, ppo_update, probability_ratio
from modules.rollout import collect, estimate_gae
from modules.trpo import policy_gradient_estimate, value_loss


def make_batch(seed=0, horizon=64, sharing="disjoint"):
    env = make_env("Reach2D-v0", max_episode_steps=32)
    net = PolicyValueNet(9, 2, hidden=(16,), sharing=sharing, rng=np.random.default_rng(seed))
    batch = collect(env, net, horizon, np.random.default_rng(seed + 1))
    return net, estimate_gae(batch, 0.99, 0.95, True)


def test_ratio_is_one_at_old_policy():
    net, batch = make_batch()
    assert np.array_equal(probability_ratio(net, batch).numpy(), np.ones(len(batch)))


def test_ratio_two_when_old_density_is_halved():
    net, batch = make_batch()
    batch.log_probs = batch.log_probs - math.log(2.0)
    assert np.allclose(probability_ratio(net, batch).numpy(), 2.0, rtol=1e-12)


def test_ratio_matches_density_quotient():
    net, batch = make_batch(seed=2)
    rng = np.random.default_rng(3)
    theta = net.get_flat(net.policy_params())
    net.set_flat(theta + 0.05 * rng.standard_normal(theta.size), net.policy_params())

    dist = net.policy(batch.states)
    sigma = np.exp(dist.log_std.numpy())
    z = (batch.actions - dist.mean.numpy()) / sigma
    density = np.prod(np.exp(-0.5 * z ** 2) / (sigma * math.sqrt(2 * math.pi)), axis=1)
    expected = density / np.exp(batch.log_probs)
    assert np.allclose(probability_ratio(net, batch).numpy(), expected, rtol=1e-12)


def test_clipped_loss_examples():
    assert clipped_loss(np.array([1.5]), np.array([1.0]), 0.2).item() == pytest.approx(1.2)
    assert clipped_loss(np.array([0.5]), np.array([-1.0]), 0.2).item() == pytest.approx(-0.8)
    advantages = np.array([0.3, -1.2, 2.0])
    assert clipped_loss(np.ones(3), advantages, 0.2).item() == pytest.approx(advantages.mean())
    with pytest.raises(ConfigError):
        clipped_loss(np.ones(3), advantages, 0.0)


def test_clipped_loss_never_exceeds_unclipped():
    rng = np.random.default_rng(4)
    for _ in range(100):
        ratio = rng.uniform(0.2, 2.0, 32)
        advantages = rng.standard_normal(32)
        clipped = clipped_loss(ratio, advantages, 0.2).item()
        assert clipped <= float(np.mean(ratio * advantages)) + 1e-15
        per_sample = np.minimum(ratio * advantages, np.clip(ratio, 0.8, 1.2) * advantages)
        assert np.all(per_sample <= ratio * advantages)


def test_clipped_region_has_zero_gradient():
    ratio = parameter(np.array([1.5, 0.5, 0.5]))
    advantages = np.array([1.0, -1.0, 1.0])
    with Tape() as tape:
        loss = clipped_loss(ratio, advantages, 0.2)
    grad = backward(tape, loss, [ratio])[0]
    assert grad[0] == 0.0
    assert grad[1] == 0.0
    assert grad[2] == pytest.approx(1.0 / 3.0)


def test_clipped_gradient_equals_surrogate_gradient_at_old_policy():
    net, batch = make_batch(seed=5)
    params = net.policy_params()
    with Tape() as tape:
        loss = clipped_loss(probability_ratio(net, batch), batch.advantages, 0.2)
    clipped_grad = flatten_params(backward(tape, loss, params))
    assert np.allclose(clipped_grad, policy_gradient_estimate(net, batch), rtol=0, atol=1e-10)


def test_zero_learning_rate_leaves_parameters():
    net, batch = make_batch(seed=6)
    theta = net.get_flat()
    config = TrainConfig(lr=0.0, vf_lr=0.0, epochs=1, minibatch_size=len(batch))
    report = ppo_update(net, batch, config, rng=np.random.default_rng(0))
    assert np.array_equal(net.get_flat(), theta)
    assert report.epochs_run == 1
    assert report.kl == 0.0
    assert report.clip_fraction == 0.0


def test_report_clip_fraction_matches_recount():
    net, batch = make_batch(seed=7)
    config = TrainConfig(lr=0.05, epochs=3, minibatch_size=16)
    report = ppo_update(net, batch, config, rng=np.random.default_rng(1))
    ratio = probability_ratio(net, batch).numpy()
    assert report.clip_fraction == np.count_nonzero(np.abs(ratio - 1.0) > 0.2) / len(batch)
    assert report.clip_fraction == clip_fraction(ratio, 0.2)
    assert report.ratio_max == pytest.approx(ratio.max())
    assert report.epochs_run == 3


def test_target_kl_stops_early():
    net, batch = make_batch(seed=8)
    config = TrainConfig(lr=0.05, epochs=10, minibatch_size=16, target_kl=1e-8)
    report = ppo_update(net, batch, config, rng=np.random.default_rng(2))
    assert report.epochs_run == 1


def test_shared_trunk_update_moves_trunk_and_value():
    net, batch = make_batch(seed=9, sharing="shared")
    trunk = flatten_params([p for layer in net.trunk for p in layer]).copy()
    config = TrainConfig(sharing="shared", epochs=2, minibatch_size=32)
    learner = PPOLearner(net, config)
    report = learner.update(batch, np.random.default_rng(3))
    assert not np.array_equal(flatten_params([p for layer in net.trunk for p in layer]), trunk)
    assert learner.value_optimizer is None
    assert report.value_loss_before is not None and report.value_loss_after is not None


def test_update_is_deterministic_for_rng():
    results = []
    for _ in range(2):
        net, batch = make_batch(seed=10)
        ppo_update(net, batch, TrainConfig(epochs=2, minibatch_size=16), rng=np.random.default_rng(4))
        results.append(net.get_flat())
    assert np.array_equal(results[0], results[1])


def test_learner_state_round_trip():
    net, batch = make_batch(seed=11)
    config = TrainConfig(epochs=1, minibatch_size=32)
    learner = PPOLearner(net, config)
    learner.update(batch, np.random.default_rng(0))
    state = learner.state_dict()
    other = PPOLearner(net, config)
    other.load_state_dict(state)
    assert other.state_dict() == state


def directional_check(net, params, build, seed, h=1e-5):
    """Compare the tape gradient of ``build()`` with central differences along random directions."""
    theta = net.get_flat(params)
    with Tape() as tape:
        loss = build()
    grad = flatten_params(backward(tape, loss, params))
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(3):
        v = rng.standard_normal(theta.size)
        v /= np.linalg.norm(v)
        net.set_flat(theta + h * v, params)
        up = build().item()
        net.set_flat(theta - h * v, params)
        down = build().item()
        net.set_flat(theta, params)
        pairs.append(((up - down) / (2 * h), float(grad @ v)))
    return pairs


@pytest.mark.parametrize("seed", range(20))
def test_clipped_loss_gradient_matches_finite_differences(seed):
    net, batch = make_batch(seed=100 + seed)
    params = net.policy_params()
    theta = net.get_flat(params)
    rng = np.random.default_rng(seed)
    # move off the old policy so some ratios leave the clip range, but none sits on a clip boundary
    for _ in range(20):
        net.set_flat(theta + 0.1 * rng.standard_normal(theta.size), params)
        ratio = probability_ratio(net, batch).numpy()
        if np.min(np.abs(np.abs(ratio - 1.0) - 0.2)) > 1e-3:
            break
    pairs = directional_check(net, params, lambda: clipped_loss(probability_ratio(net, batch), batch.advantages, 0.2),
                              seed)
    for numeric, analytic in pairs:
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-8)


@pytest.mark.parametrize("seed", range(20))
def test_value_loss_gradient_matches_finite_differences(seed):
    net, batch = make_batch(seed=200 + seed)
    params = net.value_params()
    for numeric, analytic in directional_check(net, params, lambda: value_loss(net, batch.states, batch.returns), seed):
        assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-8)
