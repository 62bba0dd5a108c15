import math

import numpy as np
import pytest

from tdpor.autodiff import (
    AdamW,
    InitSpec,
    Linear,
    Tensor,
    concat,
    finite_difference_check,
    gaussian_log_density,
    gradient,
    maximum,
    minimum,
    no_grad,
)


def test_gradient_of_sum_is_ones():
    p = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    (g,) = gradient(p.sum(), [p])
    assert np.array_equal(g, np.ones((3, 4)))


def test_gradient_of_square_at_three():
    p = Tensor(3.0, requires_grad=True)
    (g,) = gradient(p * p, [p])
    assert g == pytest.approx(6.0)


def test_gradient_rejects_non_scalar_root_and_foreign_parameter():
    p = Tensor(np.ones(3), requires_grad=True)
    q = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        gradient(p * 2.0, [p])
    with pytest.raises(ValueError):
        gradient((p * 2.0).sum(), [q])


def test_gradient_zeroes_accumulators_first():
    p = Tensor(np.ones(2), requires_grad=True)
    (p * 3.0).sum().backward()
    (g,) = gradient((p * 2.0).sum(), [p])
    assert np.array_equal(g, [2.0, 2.0])


def _deep_net(seed):
    rng = np.random.default_rng(seed)
    layers = [Linear(4, 6, rng, "a"), Linear(6, 5, rng, "b"), Linear(5, 1, rng, "c")]
    x = Tensor(rng.normal(size=(7, 4)))

    def expr():
        h = layers[0](x).tanh()
        h = layers[1](h).silu()
        return layers[2](h).sigmoid().log().mean() + (layers[2](h) ** 2).mean()

    return expr, [p for layer in layers for p in layer.parameters()]


@pytest.mark.parametrize("seed", range(10))
def test_deep_network_matches_central_differences(seed):
    expr, params = _deep_net(seed)
    assert finite_difference_check(expr, params) <= 1e-6


def test_linear_map_is_exact():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(5, 3)))
    # central differences are exact for linear maps at any step; a wide step keeps round-off out
    assert finite_difference_check(lambda: (x @ w).sum(), [w], step=1e-2) <= 1e-10


def test_constant_expression_has_zero_error():
    p = Tensor(np.ones(3), requires_grad=True)
    assert finite_difference_check(lambda: (p * 0.0).sum(), [p]) == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_difference_reports_nan_as_failure():
    p = Tensor(np.array([-1.0]), requires_grad=True)
    assert finite_difference_check(lambda: p.log().sum(), [p]) == math.inf


@pytest.mark.parametrize("seed", range(3))
def test_elementwise_ops_and_broadcasting(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, size=(3,)), requires_grad=True)
    c = Tensor(rng.normal(size=(4, 1)), requires_grad=True)

    def expr():
        y = (a / b - c) * a.exp() + (1.0 - a) ** 3 + a.relu() * c.sigmoid()
        y = concat([y, maximum(a, b), minimum(a, c)], axis=1)
        return (y[1:, ::2].sum(axis=0) * 0.5).mean() + y[[0, 2, 0], 1].sum() + y.clamp(-1.0, 3.0).mean()

    assert finite_difference_check(expr, [a, b, c]) <= 1e-6


def test_gradient_is_linear():
    rng = np.random.default_rng(2)
    p = Tensor(rng.normal(size=(5,)), requires_grad=True)
    f = lambda: (p.tanh() * p).sum()  # noqa: E731
    g = lambda: (p.exp()).mean()  # noqa: E731
    (gf,) = gradient(f(), [p])
    (gg,) = gradient(g(), [p])
    (gc,) = gradient(f() * 2.5 + g() * -0.75, [p])
    assert np.max(np.abs(gc - (2.5 * gf - 0.75 * gg))) <= 1e-12


def test_rebuilt_graph_gives_bit_identical_gradients():
    grads = []
    for _ in range(2):
        expr, params = _deep_net(3)
        grads.append(gradient(expr(), params))
    for a, b in zip(*grads):
        assert np.array_equal(a, b)


def test_no_grad_records_nothing():
    p = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = (p * 2.0).sum()
    assert not y.requires_grad


def test_gaussian_log_density_examples():
    d = 3
    x = np.arange(d, dtype=float)
    assert gaussian_log_density(x, x, 1.0).item() == pytest.approx(-0.5 * d * math.log(2 * math.pi), abs=1e-12)
    assert gaussian_log_density([1.0], [0.0], 1.0).item() == pytest.approx(-1.418939, abs=1e-6)
    rng = np.random.default_rng(0)
    x, m = rng.normal(size=d), rng.normal(size=d)
    k = 2.7
    base = gaussian_log_density(x, m, 0.8).item()
    scaled = gaussian_log_density(m + k * (x - m), m, 0.8 * k).item()
    assert scaled - base == pytest.approx(-d * math.log(k), abs=1e-12)


def test_gaussian_log_density_rejects_nonpositive_std():
    with pytest.raises(ValueError):
        gaussian_log_density([0.0], [0.0], 0.0)


def test_gaussian_log_density_gradients():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    m = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    s = Tensor(np.array(0.7), requires_grad=True)
    assert finite_difference_check(lambda: gaussian_log_density(x, m, s), [x, m, s]) <= 1e-6


def test_init_spec_is_reproducible():
    spec = InitSpec("uniform_fan_in", fan_in=16)
    a = spec.sample((4, 4), np.random.default_rng(9))
    b = spec.sample((4, 4), np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) <= 0.25)


def test_adamw_lr_zero_leaves_parameters_untouched():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = AdamW([p], lr=0.0)
    (p * 5.0).sum().backward()
    opt.step()
    assert np.array_equal(p.data, np.ones(3))


def test_adamw_first_step_and_clipping():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.0, max_grad_norm=1.0)
    p.grad = np.array([30.0, 40.0])
    norm = opt.step()
    assert norm == pytest.approx(50.0)
    # bias-corrected first Adam step moves every coordinate by lr * sign(g)
    assert np.allclose(p.data, [0.9, -2.1], atol=1e-6)
