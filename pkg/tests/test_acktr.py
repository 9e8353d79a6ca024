import numpy as np
import pytest

from modules.acktr import (ACKTRLearner, KfacLayerState, accumulate_factors, acktr_update, actor_objective, augment,
                           critic_gauss_newton_loss, estimate_nstep, factored_damping, fisher_quadratic,
                           kfac_step, nstep_returns, trust_region_rescale)
from modules.config import TrainConfig
from modules.diffcore import Tape, backward, flatten_params, make_hvp
from modules.envs import make_env
from modules.errors import ConfigError, NumericalError
from modules.policy import PolicyValueNet
from modules.rollout import TrajectoryBatch, collect, rewards_to_go


def make_batch(seed=0, horizon=64, sharing="disjoint"):
    env = make_env("Reach2D-v0", max_episode_steps=32)
    net = PolicyValueNet(9, 2, hidden=(16,), sharing=sharing, rng=np.random.default_rng(seed))
    batch = collect(env, net, horizon, np.random.default_rng(seed + 1))
    return net, estimate_nstep(batch, 0.99, 20)


def random_state(seed, dim_a=4, dim_g=3):
    rng = np.random.default_rng(seed)
    state = KfacLayerState("dense", dim_a, dim_g)
    accumulate_factors(state, rng.standard_normal((32, dim_a)), rng.standard_normal((32, dim_g)))
    return state


def test_single_sample_factor_is_outer_product():
    state = KfacLayerState("dense", 3, 2)
    accumulate_factors(state, [[1.0, 0.0, 0.0]], [[0.0, 2.0]])
    expected_a = np.zeros((3, 3))
    expected_a[0, 0] = 1.0
    assert np.array_equal(state.A, expected_a)
    assert np.array_equal(state.G, np.diag([0.0, 4.0]))
    assert state.count == 1


def test_factor_running_average():
    state = KfacLayerState("dense", 2, 1, decay=0.5)
    accumulate_factors(state, [[1.0, 0.0]], [[1.0]])
    accumulate_factors(state, [[0.0, 1.0]], [[3.0]])
    assert np.allclose(state.A, np.diag([0.5, 0.5]))
    assert state.G[0, 0] == pytest.approx(5.0)
    accumulate_factors(state, [[2.0, 0.0]], [[1.0]], decay=0.0)
    assert np.array_equal(state.A, np.diag([4.0, 0.0]))


def test_factor_estimate_of_unit_gaussian_inputs():
    rng = np.random.default_rng(0)
    state = KfacLayerState("dense", 4, 2)
    accumulate_factors(state, rng.standard_normal((20000, 4)), rng.standard_normal((20000, 2)))
    assert np.max(np.abs(state.A - np.eye(4))) < 0.05
    assert np.max(np.abs(state.G - np.eye(2))) < 0.05


def test_factors_stay_symmetric_positive_semidefinite():
    state = random_state(1)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        accumulate_factors(state, rng.standard_normal((8, 4)), rng.standard_normal((8, 3)))
    assert np.array_equal(state.A, state.A.T)
    assert np.array_equal(state.G, state.G.T)
    assert np.linalg.eigvalsh(state.A).min() > -1e-12
    assert np.linalg.eigvalsh(state.G).min() > -1e-12


def test_accumulate_rejects_mismatched_rows():
    with pytest.raises(ConfigError):
        accumulate_factors(KfacLayerState("dense", 2, 2), np.ones((3, 2)), np.ones((2, 2)))


def test_augment_appends_ones():
    assert np.array_equal(augment([[2.0, 3.0]]), [[2.0, 3.0, 1.0]])


def test_identity_factors_scale_the_gradient():
    state = KfacLayerState("dense", 3, 2, A=np.eye(3), G=np.eye(2))
    grad = np.arange(6, dtype=float).reshape(3, 2)
    lam = 0.1
    assert factored_damping(state, lam ** 2) == pytest.approx((lam, lam))
    assert np.allclose(kfac_step(grad, state, lam ** 2), grad / (1.0 + lam) ** 2, atol=1e-15)


def test_kfac_step_matches_dense_kronecker_solve():
    state = random_state(2)
    damping = 0.01
    grad = np.random.default_rng(3).standard_normal((4, 3))
    step = kfac_step(grad, state, damping)

    lam_a, lam_g = factored_damping(state, damping)
    dense = np.kron(state.A + lam_a * np.eye(4), state.G + lam_g * np.eye(3))
    expected = np.linalg.solve(dense, grad.ravel())
    assert np.allclose(step.ravel(), expected, atol=1e-6)


def test_kfac_step_of_zero_gradient_is_zero():
    state = random_state(4)
    assert not np.any(kfac_step(np.zeros((4, 3)), state, 0.01))


def test_kfac_step_checks_shape():
    with pytest.raises(ConfigError):
        kfac_step(np.zeros((3, 3)), random_state(5), 0.01)


def test_indefinite_factor_raises():
    state = KfacLayerState("dense", 2, 2, A=-np.eye(2), G=np.eye(2))
    with pytest.raises(NumericalError):
        kfac_step(np.ones((2, 2)), state, 0.01)


def test_fisher_quadratic():
    state = KfacLayerState("dense", 2, 2, A=np.eye(2), G=np.eye(2))
    step = np.array([[1.0, 2.0], [0.0, -1.0]])
    assert fisher_quadratic(step, state) == pytest.approx(6.0)
    assert fisher_quadratic(step, 2.0) == pytest.approx(12.0)


def test_trust_region_rescale():
    steps = [np.ones((2, 1))]
    scaled, eta = trust_region_rescale(steps, [2.0], radius=0.002, eta_max=0.25)
    assert eta == pytest.approx(np.sqrt(0.004 / 4.0))
    assert eta ** 2 * fisher_quadratic(steps[0], 2.0) == pytest.approx(2 * 0.002)
    assert np.allclose(scaled[0], eta * steps[0])

    _, capped = trust_region_rescale(steps, [2.0], radius=100.0, eta_max=0.25)
    assert capped == 0.25
    _, zero = trust_region_rescale([np.zeros((2, 1))], [2.0], radius=0.002, eta_max=0.25)
    assert zero == 0.25


def test_nstep_returns_match_rewards_to_go_in_one_segment():
    rng = np.random.default_rng(6)
    rewards = rng.standard_normal(40)
    terminals = rng.random(40) < 0.1
    out = nstep_returns(rewards, terminals, 0.7, 0.99, t_max=40)
    assert np.allclose(out, rewards_to_go(rewards, terminals, 0.7, 0.99), atol=1e-12)


def test_nstep_returns_bootstrap_interior_segments():
    out = nstep_returns(np.ones(4), np.zeros(4, bool), 5.0, 0.5, t_max=2, values=np.array([0.0, 0.0, 10.0, 0.0]))
    assert np.allclose(out, [4.0, 6.0, 2.75, 3.5])
    with pytest.raises(ConfigError):
        nstep_returns(np.ones(4), np.zeros(4, bool), 0.0, 0.5, t_max=0)
    with pytest.raises(ConfigError):
        nstep_returns(np.ones(4), np.zeros(4, bool), 0.0, 0.5, t_max=2)


def test_critic_gauss_newton_loss_is_half_mse():
    net, batch = make_batch(seed=7)
    values = net.value(batch.states).numpy()
    expected = 0.5 * np.mean((values - batch.returns) ** 2)
    assert critic_gauss_newton_loss(net, batch).item() == pytest.approx(expected, rel=1e-12)


def test_acktr_update_report_and_step_size():
    net, batch = make_batch(seed=8)
    theta = net.get_flat()
    config = TrainConfig(algo="acktr")
    report = acktr_update(net, batch, config, rng=np.random.default_rng(0))
    assert report.algo == "acktr"
    assert 0.0 < report.eta <= config.kfac_eta_max
    assert report.eta_critic is not None and 0.0 < report.eta_critic <= config.kfac_eta_max
    assert report.inverses_refreshed
    assert np.isfinite(report.factor_cond_max) and report.factor_cond_max >= 1.0
    assert np.isfinite(report.kl) and report.kl >= 0.0
    assert not np.array_equal(net.get_flat(), theta)


def test_shared_network_uses_one_trust_region():
    net, batch = make_batch(seed=9, sharing="shared")
    report = acktr_update(net, batch, TrainConfig(algo="acktr", sharing="shared"), rng=np.random.default_rng(1))
    assert report.eta_critic is None
    assert 0.0 < report.eta <= 0.25


def test_empirical_fisher_and_bad_mode():
    net, batch = make_batch(seed=10)
    report = acktr_update(net, batch, TrainConfig(algo="acktr", kfac_fisher="empirical"))
    assert np.isfinite(report.surrogate_after)
    config = TrainConfig(algo="acktr")
    config.kfac_fisher = "natural"
    with pytest.raises(ConfigError):
        acktr_update(net, batch, config)


def test_update_needs_estimates():
    env = make_env("Reach2D-v0")
    net = PolicyValueNet(9, 2, hidden=(8,), rng=np.random.default_rng(0))
    batch = collect(env, net, 8, np.random.default_rng(1))
    with pytest.raises(ConfigError):
        acktr_update(net, batch, TrainConfig(algo="acktr"))


def test_inverses_refresh_on_schedule():
    net, batch = make_batch(seed=11)
    learner = ACKTRLearner(net, TrainConfig(algo="acktr", kfac_refresh=3))
    rng = np.random.default_rng(2)
    refreshed = [learner.update(batch, rng).inverses_refreshed for _ in range(4)]
    assert refreshed == [True, False, False, True]
    assert all(s.count == 4 for s in learner.states.values())


def test_update_is_deterministic_for_rng():
    results = []
    for _ in range(2):
        net, batch = make_batch(seed=12)
        acktr_update(net, batch, TrainConfig(algo="acktr"), rng=np.random.default_rng(3))
        results.append(net.get_flat())
    assert np.array_equal(results[0], results[1])


def test_learner_state_round_trip():
    net, batch = make_batch(seed=13)
    config = TrainConfig(algo="acktr")
    learner = ACKTRLearner(net, config)
    learner.update(batch, np.random.default_rng(4))
    state = learner.state_dict()
    other = ACKTRLearner(net, config)
    other.load_state_dict(state)
    assert other.state_dict() == state


def test_gauss_newton_critic_matches_dense_oracle_on_linear_model():
    rng = np.random.default_rng(14)
    net = PolicyValueNet(9, 2, hidden=(), rng=rng)
    states = rng.standard_normal((40, 9))
    T = states.shape[0]
    batch = TrajectoryBatch(states, np.zeros((T, 2)), np.zeros(T), np.zeros(T, bool), np.zeros(T),
                            np.zeros((T, 4)), np.zeros(T), 0.0, returns=rng.standard_normal(T),
                            advantages=np.zeros(T))
    params = net.value_params()
    hvp = make_hvp(lambda: critic_gauss_newton_loss(net, batch), params)
    dense = np.column_stack([hvp(e) for e in np.eye(10)])

    state = KfacLayerState("vf0", 10, 1)
    accumulate_factors(state, augment(states), np.ones((T, 1)))
    assert np.allclose(dense, np.kron(state.A, state.G), rtol=0, atol=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_actor_objective_gradient_matches_finite_differences(seed):
    net, batch = make_batch(seed=300 + seed)
    params = net.policy_params()
    theta = net.get_flat(params)
    net.set_flat(theta + 0.1 * np.random.default_rng(seed).standard_normal(theta.size), params)
    theta = net.get_flat(params)

    def objective():
        return actor_objective(net.policy(batch.states), batch, ent_coef=0.01)

    with Tape() as tape:
        loss = objective()
    grad = flatten_params(backward(tape, loss, params))
    rng = np.random.default_rng(seed)
    h = 1e-5
    for _ in range(3):
        v = rng.standard_normal(theta.size)
        v /= np.linalg.norm(v)
        net.set_flat(theta + h * v, params)
        up = objective().item()
        net.set_flat(theta - h * v, params)
        down = objective().item()
        net.set_flat(theta, params)
        assert grad @ v == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-8)


def test_single_sample_factors_are_the_exact_fisher_block():
    rng = np.random.default_rng(15)
    a = augment(rng.standard_normal((1, 4)))
    g = rng.standard_normal((1, 3))
    state = KfacLayerState("dense", 5, 3)
    accumulate_factors(state, a, g)
    # per-sample weight gradient of a dense layer is a g^T
    grad = np.outer(a[0], g[0]).ravel()
    assert np.allclose(np.kron(state.A, state.G), np.outer(grad, grad), rtol=0, atol=1e-12)

    damping = 0.05
    lam_a, lam_g = factored_damping(state, damping)
    step = kfac_step(np.outer(a[0], g[0]), state, damping)
    dense = np.kron(state.A + lam_a * np.eye(5), state.G + lam_g * np.eye(3))
    assert np.allclose(step.ravel(), np.linalg.solve(dense, grad), rtol=0, atol=1e-10)
