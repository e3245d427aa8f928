import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from burg.numerics import (Adam, DomainError, NumericError, Rng, ShapeError, Tensor, concat, grad_check,
                           matmul, no_grad, scatter_rows, stack)


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(matmul(np.eye(3), a).data, a)


def test_softmax_symmetric():
    assert np.allclose(Tensor([0.0, 0.0]).softmax().data, [0.5, 0.5])


def test_sq_norm_gradient():
    z = leaf([1.0, 2.0])
    z.sq_norm().backward()
    assert np.allclose(z.grad, [2.0, 4.0])


def test_backward_sum_gives_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_half_square():
    x = leaf([3.0])
    (x.sq_norm() * 0.5).backward()
    assert np.allclose(x.grad, [3.0])


def test_backward_tanh_at_zero():
    x = leaf([0.0])
    x.tanh().sum().backward()
    assert np.allclose(x.grad, [1.0])


def test_backward_accumulates_and_off_path_zero():
    x, y = leaf([1.0, 2.0]), leaf([5.0])
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    assert np.allclose(x.grad, [6.0, 6.0])
    assert np.array_equal(y.grad, [0.0])


def test_backward_requires_scalar():
    with pytest.raises(ValueError, match="scalar"):
        leaf([1.0, 2.0]).backward()


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_log_domain_error():
    with pytest.raises(DomainError):
        Tensor([1.0, 0.0]).log()


def test_float64_everywhere():
    t = Tensor(np.ones(3, dtype=np.float32))
    assert t.data.dtype == np.float64
    assert (t.exp() * 2).data.dtype == np.float64


def test_no_grad_skips_graph():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def _rand(rng, *shape):
    return rng.uniform(-1, 1, size=shape)


OPS = {
    "add": lambda a, b: (a + b).sum(),
    "sub_broadcast": lambda a, b: (a - b[0]).sq_norm(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "matmul": lambda a, b: (a @ b.T).tanh().sum(),
    "exp": lambda a, b: (a.exp() * b).sum(),
    "log": lambda a, b: ((a * a + 0.5).log() * b).sum(),
    "tanh": lambda a, b: (a.tanh() * b).sum(),
    "relu": lambda a, b: ((a + 0.05).relu() * b).sum(),
    "softmax": lambda a, b: (a.softmax() * b).sum(),
    "sum_axis": lambda a, b: (a.sum(axis=1) * b.sum(axis=1)).sum(),
    "mean": lambda a, b: (a.mean(axis=0) * b.mean(axis=0)).sum(),
    "sq_norm_axis": lambda a, b: (a.sq_norm(axis=1) * b.sum(axis=1)).sum(),
    "concat": lambda a, b: concat([a, b * 2.0], axis=1).tanh().sum(),
    "split": lambda a, b: (a.split([1, 2], axis=1)[1] * b.split([2, 1], axis=1)[0]).sum(),
    "getitem": lambda a, b: (a[np.array([0, 2, 0])] * b[1]).sum(),
    "scatter": lambda a, b: (scatter_rows(a[1:], np.array([3, 0]), 4) * 1.5).tanh().sum() + b.sum(),
    "stack": lambda a, b: stack([a, b]).tanh().sum(),
    "sqrt_pow": lambda a, b: ((a * a + 1.0).sqrt() + (b ** 3)).sum(),
    "transpose": lambda a, b: (a.T @ b).sq_norm(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    a, b = leaf(_rand(rng, 3, 3)), leaf(_rand(rng, 3, 3))
    err = grad_check(lambda: OPS[name](a, b), [a, b], h=1e-5)
    assert err < 1e-4


def test_grad_check_quadratic_is_exact():
    x = leaf(np.random.default_rng(1).normal(size=5) * 3)
    assert grad_check(lambda: x.sq_norm(), [x]) < 1e-8


def test_grad_check_rejects_nonfinite():
    x = leaf([1.0])
    with pytest.raises(NumericError):
        grad_check(lambda: (x * np.inf).sum(), [x])


def test_adam_first_step_moves_by_lr():
    p = leaf([1.0, -2.0, 3.0])
    opt = Adam([p], lr=0.01)
    p.grad = np.array([0.5, -7.0, 100.0])
    opt.step()
    assert np.allclose(p.data, [0.99, -1.99, 2.99], rtol=0, atol=1e-9)
    assert opt.step_count == 1


def test_adam_zero_gradient_no_move():
    p = leaf([1.0, 2.0])
    opt = Adam([p], lr=0.1)
    opt.step()
    assert np.array_equal(p.data, [1.0, 2.0])


def _reference_adam(theta, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2.0 * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_minimizes_parabola():
    p = leaf([1.0])
    opt = Adam([p], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        p.sq_norm().backward()
        opt.step()
    assert abs(p.data[0]) < 1e-3
    assert p.data[0] == pytest.approx(_reference_adam(1.0, 0.1, 500), abs=1e-12)


def test_adam_nan_gradient_names_parameter():
    p = leaf([1.0])
    opt = Adam([p], names=["encoder.w"])
    p.grad = np.array([np.nan])
    with pytest.raises(NumericError, match="encoder.w"):
        opt.step()


def test_rng_same_seed_same_stream():
    a, b = Rng(42), Rng(42)
    assert np.array_equal(a.normal(100), b.normal(100))


def test_rng_distinct_seeds_differ():
    for s in range(100):
        assert not np.array_equal(Rng(s).normal(16), Rng(s + 1000).normal(16))


def test_rng_state_roundtrip():
    r = Rng(3)
    r.normal(5)
    state = r.get_state()
    expected = r.normal(5)
    r2 = Rng(0)
    r2.set_state(state)
    assert np.array_equal(r2.normal(5), expected)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=6))
def test_softmax_is_distribution(xs):
    p = Tensor(xs).softmax().data
    assert np.all(p > 0)
    assert abs(p.sum() - 1.0) < 1e-12
