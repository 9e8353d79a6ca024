import numpy as np
import pytest

from modules.diffcore import (Tape, Tensor, backward, clip, exp, flatten_params, hessian_vector_product,
                              init_mlp, layer_params, log, make_hvp, matmul, maximum, mean, minimum,
                              mlp_forward, no_record, parameter, square, sum_, tanh, unflatten_params)
from modules.errors import ContractError, ShapeError


def numeric_grad(f, x, h=1e-5):
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        grad.flat[i] = (f(x + step) - f(x - step)) / (2 * h)
    return grad


def tape_grad(f, x):
    p = parameter(x.copy())
    with Tape() as tape:
        out = f(p)
    return backward(tape, out, [p])[0]


B = np.random.default_rng(7).standard_normal((5, 3))

PRIMITIVES = {
    "square": lambda t: sum_(square(t)),
    "tanh": lambda t: sum_(tanh(t)),
    "exp": lambda t: sum_(exp(t * 0.3)),
    "log": lambda t: sum_(log(square(t) + 0.5)),
    "mean": lambda t: mean(square(t) * 2.0),
    "matmul": lambda t: sum_(tanh(matmul(t, B))),
    "minimum": lambda t: sum_(minimum(t, t * 0.5 + 0.1)),
    "maximum": lambda t: sum_(maximum(square(t), 0.4)),
    "clip": lambda t: sum_(clip(t, -0.5, 0.5) * t),
    "div": lambda t: sum_(t / (square(t) + 1.0)),
    "sub_neg": lambda t: sum_(-(t - 2.0) * t),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    f = PRIMITIVES[name]
    for seed in range(100):
        x = np.random.default_rng(seed).standard_normal(5)

        def value(arr):
            with no_record():
                return f(Tensor(arr)).item()

        analytic = tape_grad(f, x)
        numeric = numeric_grad(value, x)
        scale = np.maximum(np.abs(numeric), 1e-3)
        assert np.all(np.abs(analytic - numeric) / scale < 1e-4), f"{name} seed {seed}"


def test_square_gradient_at_three():
    assert tape_grad(lambda t: sum_(t * t), np.array([3.0]))[0] == pytest.approx(6.0)


def test_tanh_gradient_at_zero_is_one():
    assert np.array_equal(tape_grad(lambda t: sum_(tanh(t)), np.zeros(4)), np.ones(4))


def test_backward_is_repeatable_and_leaves_tape_unchanged():
    p = parameter(np.array([0.3, -1.2, 2.0]))
    with Tape() as tape:
        out = sum_(tanh(p) * exp(p))
    length = len(tape)
    first = backward(tape, out, [p])[0]
    second = backward(tape, out, [p])[0]
    assert np.array_equal(first, second)
    assert len(tape) == length


def test_backward_rejects_non_scalar_output():
    p = parameter(np.ones(3))
    with Tape() as tape:
        out = square(p)
    with pytest.raises(ContractError):
        backward(tape, out, [p])


def test_backward_rejects_parameter_without_grad():
    p = parameter(np.ones(3))
    frozen = Tensor(np.ones(3))
    with Tape() as tape:
        out = sum_(p * frozen)
    with pytest.raises(ContractError):
        backward(tape, out, [p, frozen])


def test_tape_replay_reproduces_outputs():
    layers = init_mlp([3, 4, 2], np.random.default_rng(0))
    with Tape() as tape:
        out = sum_(mlp_forward(layers, np.ones((5, 3))))
    assert tape.replay()
    assert out.requires_grad


def test_mlp_zero_weights_give_zero_output():
    layers = [(parameter(np.zeros((3, 4))), parameter(np.zeros(4))),
              (parameter(np.zeros((4, 2))), parameter(np.zeros(2)))]
    out = mlp_forward(layers, np.random.default_rng(1).standard_normal(3))
    assert np.array_equal(out.numpy(), np.zeros(2))


def test_mlp_identity_layer_passes_input_through():
    x = np.array([0.5, -2.0, 7.0])
    out = mlp_forward([(parameter(np.eye(3)), parameter(np.zeros(3)))], x)
    assert np.array_equal(out.numpy(), x)


def test_mlp_matches_plain_numpy_forward():
    layers = init_mlp([2, 64, 64, 6], np.random.default_rng(42))
    x = np.array([0.25, -0.75])
    h = x
    for i, (w, b) in enumerate(layers):
        h = h @ w.data + b.data
        if i < len(layers) - 1:
            h = np.tanh(h)
    assert np.allclose(mlp_forward(layers, x).numpy(), h, rtol=0, atol=1e-12)


def test_mlp_shape_error_names_layer():
    layers = [(parameter(np.zeros((3, 4))), parameter(np.zeros(4))),
              (parameter(np.zeros((5, 2))), parameter(np.zeros(2)))]
    with pytest.raises(ShapeError, match="layer 1"):
        mlp_forward(layers, np.ones(3))


def test_mlp_trace_records_input_and_preactivation():
    layers = init_mlp([3, 4, 2], np.random.default_rng(3))
    trace = {}
    with Tape():
        mlp_forward(layers, np.ones((2, 3)), trace=trace)
    h, z = trace[id(layers[1][0])]
    assert h.shape == (2, 4)
    assert z.shape == (2, 2)
    assert np.allclose(h.numpy(), np.tanh(trace[id(layers[0][0])][1].numpy()))


def test_hvp_of_half_squared_norm_is_identity():
    x = parameter(np.array([1.0, -2.0, 0.5]))
    v = np.array([0.3, 0.1, -4.0])
    hv = hessian_vector_product(lambda: 0.5 * sum_(square(x)), [x], v)
    assert np.allclose(hv, v, atol=1e-12)


def test_hvp_of_diagonal_quadratic():
    x = parameter(np.array([0.2, 0.4, -0.6]))
    d = np.array([1.0, 2.0, 3.0])
    hv = hessian_vector_product(lambda: 0.5 * sum_(square(x) * d), [x], np.ones(3))
    assert np.allclose(hv, d, atol=1e-12)


def test_hvp_rejects_wrong_length():
    x = parameter(np.ones(3))
    hvp = make_hvp(lambda: sum_(square(x)), [x])
    with pytest.raises(ContractError):
        hvp(np.ones(4))


def test_hvp_is_linear_and_symmetric():
    layers = init_mlp([3, 5, 2], np.random.default_rng(11))
    params = layer_params(layers)
    obs = np.random.default_rng(12).standard_normal((6, 3))
    hvp = make_hvp(lambda: sum_(square(tanh(mlp_forward(layers, obs)))), params)

    rng = np.random.default_rng(13)
    n = flatten_params(params).size
    u, w = rng.standard_normal(n), rng.standard_normal(n)
    assert np.allclose(hvp(2.0 * u - 3.0 * w), 2.0 * hvp(u) - 3.0 * hvp(w), atol=1e-8)
    assert abs(w @ hvp(u) - u @ hvp(w)) < 1e-8


def test_flatten_length_of_small_net():
    layers = init_mlp([2, 3, 1], np.random.default_rng(0))
    assert flatten_params(layer_params(layers)).size == 2 * 3 + 3 + 3 * 1 + 1


def test_flatten_unflatten_round_trip():
    params = layer_params(init_mlp([4, 3, 2], np.random.default_rng(5)))
    shapes = [p.shape for p in params]
    restored = unflatten_params(flatten_params(params), shapes)
    for p, r in zip(params, restored):
        assert np.array_equal(p.data, r)
    assert all(not r.any() for r in unflatten_params(np.zeros(flatten_params(params).size), shapes))


def test_flatten_order_is_weight_then_bias():
    w = parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = parameter(np.array([5.0, 6.0]))
    assert flatten_params([w, b]).tolist() == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]


def test_unflatten_rejects_wrong_length():
    with pytest.raises(ContractError):
        unflatten_params(np.zeros(5), [(2, 2)])
