import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsplit import nn


def make_arch(input_dim=3, hidden=(3, 2), heads=(("a", 2, "mse"),), activation="tanh"):
    return nn.Architecture(input_dim, hidden, heads, activation)


def random_net(gen, input_dim=3, hidden=(3, 2), heads=(("a", 2, "mse"),), rows=4,
               activation="tanh", scale=0.7):
    arch = make_arch(input_dim, hidden, heads, activation)
    params = nn.ParamVector(scale * gen.standard_normal(arch.param_count()), arch.param_layout())
    targets = {t: gen.standard_normal((rows, out)) for t, out, _ in heads}
    batch = nn.Batch(gen.standard_normal((rows, input_dim)), targets)
    return arch, params, batch


def total_loss(params, arch, batch, weights=None):
    fwd = nn.forward(params, arch, batch)
    losses = nn.losses_from_predictions(arch, fwd, batch)
    if weights is None:
        weights = {t: 1.0 for t in arch.task_ids}
    return sum(weights[t] * losses[t] for t in sorted(weights))


def numerical_grad(params, arch, batch, weights=None, step=1e-5):
    grad = np.zeros(params.size)
    for i in range(params.size):
        up = params.copy()
        up.values[i] += step
        down = params.copy()
        down.values[i] -= step
        grad[i] = (total_loss(up, arch, batch, weights) - total_loss(down, arch, batch, weights)) / (
            2 * step
        )
    return grad


# ---------------------------------------------------------------------------
# ParamVector / Batch


def test_param_vector_layout_size_mismatch():
    with pytest.raises(ValueError, match="layout describes"):
        nn.ParamVector(np.zeros(5), (("w", (2, 3)),))


def test_param_vector_views_alias_flat_buffer():
    pv = nn.ParamVector.zeros((("w", (2, 2)), ("b", (2,))))
    pv.view("w")[:] = 1.0
    assert pv.values[:4].tolist() == [1.0] * 4
    assert pv.values[4:].tolist() == [0.0, 0.0]


def test_batch_row_mismatch_names_task():
    with pytest.raises(ValueError, match="'a'"):
        nn.Batch(np.zeros((3, 2)), {"a": np.zeros((2, 1))})


# ---------------------------------------------------------------------------
# forward


def test_forward_zero_weights_gives_zero_predictions():
    arch = make_arch()
    params = nn.ParamVector.zeros(arch.param_layout())
    batch = nn.Batch(np.random.default_rng(0).standard_normal((5, 3)), {"a": np.zeros((5, 2))})
    fwd = nn.forward(params, arch, batch)
    assert np.all(fwd.predictions["a"] == 0.0)


def test_forward_identity_layers_pass_input_through():
    # identity activation + identity weight matrices: output == input exactly
    arch = make_arch(input_dim=3, hidden=(3, 3), heads=(("a", 3, "mse"),), activation="identity")
    params = nn.ParamVector.zeros(arch.param_layout())
    for name in ("trunk.0.w", "trunk.1.w", "head.a.w"):
        np.copyto(params.view(name), np.eye(3))
    x = np.random.default_rng(1).standard_normal((6, 3))
    fwd = nn.forward(params, arch, nn.Batch(x, {"a": np.zeros((6, 3))}))
    np.testing.assert_array_equal(fwd.predictions["a"], x)


def test_forward_matches_hand_executed_matrix_products():
    gen = np.random.default_rng(42)
    arch, params, batch = random_net(gen, input_dim=4, hidden=(5, 3), heads=(("a", 2, "mse"),))
    fwd = nn.forward(params, arch, batch)

    # independent oracle: per-sample, per-unit loops instead of matrix ops
    w1, b1 = params.view("trunk.0.w"), params.view("trunk.0.b")
    w2, b2 = params.view("trunk.1.w"), params.view("trunk.1.b")
    wh, bh = params.view("head.a.w"), params.view("head.a.b")
    for r in range(batch.rows):
        h1 = np.array([np.tanh(sum(batch.inputs[r, i] * w1[i, j] for i in range(4)) + b1[j])
                       for j in range(5)])
        h2 = np.array([np.tanh(sum(h1[i] * w2[i, j] for i in range(5)) + b2[j])
                       for j in range(3)])
        out = np.array([sum(h2[i] * wh[i, j] for i in range(3)) + bh[j] for j in range(2)])
        np.testing.assert_allclose(fwd.predictions["a"][r], out, rtol=0, atol=1e-12)


def test_forward_input_dim_mismatch_names_layer():
    arch = make_arch(input_dim=3)
    params = nn.ParamVector.zeros(arch.param_layout())
    with pytest.raises(ValueError, match="trunk.0.w"):
        nn.forward(params, arch, nn.Batch(np.zeros((2, 4)), {"a": np.zeros((2, 2))}))


def test_forward_deterministic_bit_identical():
    gen = np.random.default_rng(7)
    arch, params, batch = random_net(gen)
    one = nn.forward(params, arch, batch).predictions["a"]
    two = nn.forward(params.copy(), arch, batch).predictions["a"]
    assert one.tobytes() == two.tobytes()


# ---------------------------------------------------------------------------
# backward


def test_backward_zero_gradient_at_quadratic_minimum():
    gen = np.random.default_rng(3)
    arch, params, batch = random_net(gen)
    fwd = nn.forward(params, arch, batch)
    batch_at_min = nn.Batch(batch.inputs, {"a": fwd.predictions["a"].copy()})
    grads, losses = nn.backward(params, arch, batch_at_min)
    assert losses["a"] == 0.0
    assert np.all(grads.values == 0.0)


@pytest.mark.parametrize("activation", ["tanh", "identity"])
@pytest.mark.parametrize("loss", ["mse", "huber"])
def test_backward_matches_central_finite_differences(activation, loss):
    gen = np.random.default_rng(11)
    for _ in range(10):
        arch, params, batch = random_net(
            gen, input_dim=3, hidden=(3, 2),
            heads=(("a", 2, loss), ("b", 1, loss)), activation=activation,
        )
        grads, _ = nn.backward(params, arch, batch)
        numeric = numerical_grad(params, arch, batch)
        denom = np.maximum(np.abs(numeric), 1e-6)
        assert np.max(np.abs(grads.values - numeric) / denom) < 1e-4


def test_backward_task_weight_scales_exactly_that_heads_gradient():
    gen = np.random.default_rng(5)
    arch, params, batch = random_net(gen, heads=(("a", 2, "mse"), ("b", 2, "mse")))
    base, _ = nn.backward(params, arch, batch, weights={"a": 1.0, "b": 1.0})
    # power-of-two factor scales bit-exactly through the matmuls
    scaled, _ = nn.backward(params, arch, batch, weights={"a": 1.0, "b": 4.0})
    for name in ("head.b.w", "head.b.b"):
        np.testing.assert_array_equal(scaled.view(name), 4.0 * base.view(name))
    for name in ("head.a.w", "head.a.b"):
        np.testing.assert_array_equal(scaled.view(name), base.view(name))


def test_backward_missing_target_names_task():
    gen = np.random.default_rng(9)
    arch, params, batch = random_net(gen, heads=(("a", 2, "mse"), ("b", 2, "mse")))
    del batch.targets["b"]
    with pytest.raises(ValueError, match="'b'"):
        nn.backward(params, arch, batch)


def test_backward_non_finite_loss_carries_task_id():
    gen = np.random.default_rng(13)
    arch, params, batch = random_net(gen, heads=(("a", 2, "mse"), ("b", 2, "mse")))
    batch.targets["b"][0, 0] = np.inf
    with pytest.raises(nn.NonFiniteError, match="'b'"):
        nn.backward(params, arch, batch)


# ---------------------------------------------------------------------------
# sgd_step


def test_sgd_step_vanilla_is_param_minus_lr_grad():
    gen = np.random.default_rng(17)
    arch, params, _ = random_net(gen)
    grads = nn.ParamVector(gen.standard_normal(params.size), params.layout)
    state = nn.OptimizerState.fresh(params, 0.1, momentum_coef=0.0, weight_decay=0.0)
    updated, _ = nn.sgd_step(params, grads, state, lr=0.1)
    np.testing.assert_array_equal(updated.values, params.values - 0.1 * grads.values)


def test_sgd_step_zero_grad_is_fixed_point():
    gen = np.random.default_rng(19)
    arch, params, _ = random_net(gen)
    grads = nn.ParamVector(np.zeros(params.size), params.layout)
    state = nn.OptimizerState.fresh(params, 0.1, momentum_coef=0.9, weight_decay=0.0)
    updated, _ = nn.sgd_step(params, grads, state, lr=0.1)
    np.testing.assert_array_equal(updated.values, params.values)


def test_sgd_step_two_momentum_steps_match_scalar_recurrence():
    # v1 = g, v2 = 0.9 g + g = 1.9 g  =>  total change  -lr * g * (1 + 1.9)
    layout = (("w", (1,)),)
    params = nn.ParamVector(np.array([2.0]), layout)
    grads = nn.ParamVector(np.array([0.5]), layout)
    state = nn.OptimizerState.fresh(params, 0.1, momentum_coef=0.9, weight_decay=0.0)
    lr = 0.1
    p1, state = nn.sgd_step(params, grads, state, lr)
    p2, state = nn.sgd_step(p1, grads, state, lr)
    expected = 2.0 - lr * 0.5 * (1.0 + 1.9)
    assert p2.values[0] == pytest.approx(expected, abs=1e-15)


def test_sgd_step_weight_decay_enters_before_momentum_buffer():
    layout = (("w", (1,)),)
    params = nn.ParamVector(np.array([4.0]), layout)
    grads = nn.ParamVector(np.array([0.0]), layout)
    state = nn.OptimizerState.fresh(params, 0.1, momentum_coef=0.5, weight_decay=0.1)
    p1, state = nn.sgd_step(params, grads, state, lr=1.0)
    # v1 = 0.1 * 4 = 0.4; p1 = 3.6
    assert p1.values[0] == pytest.approx(3.6, abs=1e-15)
    assert state.momentum[0] == pytest.approx(0.4, abs=1e-15)


def test_sgd_step_non_finite_update_is_hard_error():
    layout = (("w", (1,)),)
    params = nn.ParamVector(np.array([1.0]), layout)
    grads = nn.ParamVector(np.array([1e308]), layout)
    state = nn.OptimizerState.fresh(params, 0.1, momentum_coef=0.0, weight_decay=0.0)
    with pytest.raises(nn.NonFiniteError):
        nn.sgd_step(params, grads, state, lr=1e100)


def test_sgd_step_shape_mismatch():
    params = nn.ParamVector(np.zeros(2), (("w", (2,)),))
    grads = nn.ParamVector(np.zeros(3), (("w", (3,)),))
    state = nn.OptimizerState.fresh(params, 0.1)
    with pytest.raises(ValueError):
        nn.sgd_step(params, grads, state, 0.1)


# ---------------------------------------------------------------------------
# poly_lr


def test_poly_lr_starts_at_eta0():
    assert nn.poly_lr(0, 100, 0.1) == 0.1


def test_poly_lr_ends_at_zero():
    assert nn.poly_lr(100, 100, 0.1) == 0.0


def test_poly_lr_halfway_closed_form():
    assert nn.poly_lr(50, 100, 0.1) == pytest.approx(0.1 * 0.5**0.9, abs=1e-15)
    assert nn.poly_lr(50, 100, 0.1) == pytest.approx(0.05359, abs=5e-6)


def test_poly_lr_rejects_out_of_range_round():
    with pytest.raises(ValueError):
        nn.poly_lr(101, 100, 0.1)
    with pytest.raises(ValueError):
        nn.poly_lr(-1, 100, 0.1)
    with pytest.raises(ValueError):
        nn.poly_lr(0, 0, 0.1)


@settings(max_examples=200, deadline=None)
@given(
    r=st.integers(min_value=1, max_value=999),
    total=st.integers(min_value=2, max_value=1000),
    eta0=st.floats(min_value=1e-6, max_value=10.0),
)
def test_poly_lr_strictly_decreasing(r, total, eta0):
    if r >= total:
        r = total - 1
    assert nn.poly_lr(r, total, eta0) < nn.poly_lr(r - 1, total, eta0)
